#pragma once

// Transformer building blocks: sinusoidal positional encoding, multi-head
// attention with an additive bias, and the pre-norm residual block used for
// the encoder, query, and decoder branches.

#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "tamformer/numerics.hpp"

namespace tamformer {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Glorot-uniform initializer: U(-a, a), a = sqrt(6 / (fan_in + fan_out)).
Tensor glorot_uniform(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng);

struct AttentionBlockParams {
  std::size_t width = 0;    // residual stream width
  std::size_t d_model = 0;  // attention width, split across heads
  std::size_t heads = 0;
  std::size_t ff_dim = 0;

  Tensor wq, wk, wv;  // [width x d_model]
  Tensor wo;          // [d_model x width]
  // Layer norm is undefined on one channel and collapses two channels to
  // +-gain, so blocks narrower than 3 skip it and leave these four undefined.
  Tensor ln1_gain, ln1_bias;
  Tensor ln2_gain, ln2_bias;
  Tensor ff_w1, ff_b1;  // [width x ff_dim], [ff_dim]
  Tensor ff_w2, ff_b2;  // [ff_dim x width], [width]

  static AttentionBlockParams init(std::size_t width, std::size_t d_model, std::size_t heads,
                                   std::size_t ff_dim, std::mt19937_64& rng);

  std::size_t head_width() const { return d_model / heads; }
  bool normalized() const { return width >= 3; }
  void append_named(const std::string& prefix, std::vector<NamedTensor>& out) const;
};

Tensor positional_encoding(std::size_t steps, std::size_t width);

struct AttentionOutput {
  Tensor out;      // [T_q x width]
  Tensor weights;  // [heads x T_q x T_k], detached copy for inspection
};

AttentionOutput multi_head_attention(const AttentionBlockParams& params, const Tensor& q_in,
                                     const Tensor& kv_in, const Tensor& bias);

// x' = q + MHA(LN1(q), LN1(kv), bias); out = x' + FFN(LN2(x')).
// When weights is non-null the attention weights are appended to it.
Tensor transformer_block(const AttentionBlockParams& params, const Tensor& q_in,
                         const Tensor& kv_in, const Tensor& bias,
                         std::vector<Tensor>* weights = nullptr, double ln_eps = 1e-5);

}  // namespace tamformer
