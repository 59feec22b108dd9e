#include "tamformer/blocks.hpp"

#include <cmath>

#include "tamformer/errors.hpp"

namespace tamformer {

Tensor glorot_uniform(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-a, a);
  std::vector<double> v(fan_in * fan_out);
  for (auto& x : v) x = dist(rng);
  return Tensor::from({fan_in, fan_out}, std::move(v), true);
}

AttentionBlockParams AttentionBlockParams::init(std::size_t width, std::size_t d_model,
                                                std::size_t heads, std::size_t ff_dim,
                                                std::mt19937_64& rng) {
  if (width == 0 || d_model == 0 || heads == 0) {
    throw ContractError("attention block: width, d_model and heads must be positive");
  }
  if (d_model % heads != 0) {
    throw ContractError("attention block: d_model " + std::to_string(d_model) +
                        " is not divisible by " + std::to_string(heads) + " heads");
  }
  if (ff_dim == 0) throw ContractError("attention block: ff_dim must be positive");
  AttentionBlockParams p;
  p.width = width;
  p.d_model = d_model;
  p.heads = heads;
  p.ff_dim = ff_dim;
  p.wq = glorot_uniform(width, d_model, rng);
  p.wk = glorot_uniform(width, d_model, rng);
  p.wv = glorot_uniform(width, d_model, rng);
  p.wo = glorot_uniform(d_model, width, rng);
  if (p.normalized()) {
    p.ln1_gain = Tensor::full({width}, 1.0, true);
    p.ln1_bias = Tensor::zeros({width}, true);
    p.ln2_gain = Tensor::full({width}, 1.0, true);
    p.ln2_bias = Tensor::zeros({width}, true);
  }
  p.ff_w1 = glorot_uniform(width, ff_dim, rng);
  p.ff_b1 = Tensor::zeros({ff_dim}, true);
  p.ff_w2 = glorot_uniform(ff_dim, width, rng);
  p.ff_b2 = Tensor::zeros({width}, true);
  return p;
}

void AttentionBlockParams::append_named(const std::string& prefix,
                                        std::vector<NamedTensor>& out) const {
  out.push_back({prefix + ".wq", wq});
  out.push_back({prefix + ".wk", wk});
  out.push_back({prefix + ".wv", wv});
  out.push_back({prefix + ".wo", wo});
  if (normalized()) {
    out.push_back({prefix + ".ln1_gain", ln1_gain});
    out.push_back({prefix + ".ln1_bias", ln1_bias});
    out.push_back({prefix + ".ln2_gain", ln2_gain});
    out.push_back({prefix + ".ln2_bias", ln2_bias});
  }
  out.push_back({prefix + ".ff_w1", ff_w1});
  out.push_back({prefix + ".ff_b1", ff_b1});
  out.push_back({prefix + ".ff_w2", ff_w2});
  out.push_back({prefix + ".ff_b2", ff_b2});
}

Tensor positional_encoding(std::size_t steps, std::size_t width) {
  if (steps == 0) throw ContractError("positional_encoding: steps must be >= 1");
  if (width == 0 || width % 2 != 0) {
    throw ContractError("positional_encoding: width must be even, got " + std::to_string(width));
  }
  std::vector<double> v(steps * width);
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t i = 0; i < width / 2; ++i) {
      const double freq =
          std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(width));
      const double angle = static_cast<double>(t) / freq;
      v[t * width + 2 * i] = std::sin(angle);
      v[t * width + 2 * i + 1] = std::cos(angle);
    }
  }
  return Tensor::from({steps, width}, std::move(v));
}

AttentionOutput multi_head_attention(const AttentionBlockParams& params, const Tensor& q_in,
                                     const Tensor& kv_in, const Tensor& bias) {
  if (q_in.rank() != 2 || kv_in.rank() != 2 || q_in.cols() != params.width ||
      kv_in.cols() != params.width) {
    throw DimensionError("multi_head_attention: inputs " + shape_str(q_in.shape()) + " / " +
                         shape_str(kv_in.shape()) + " do not match width " +
                         std::to_string(params.width));
  }
  const std::size_t tq = q_in.rows(), tk = kv_in.rows();
  if (bias.rank() != 2 || bias.rows() != tq || bias.cols() != tk) {
    throw DimensionError("multi_head_attention: bias " + shape_str(bias.shape()) +
                         " does not match " + std::to_string(tq) + "x" + std::to_string(tk));
  }
  for (std::size_t r = 0; r < tq; ++r) {
    bool any = false;
    // NaN counts as attendable so divergence surfaces as a NaN loss.
    for (std::size_t c = 0; c < tk && !any; ++c) any = !(bias.at(r, c) <= -kLarge / 2);
    if (!any) {
      throw ContractError("multi_head_attention: bias row " + std::to_string(r) +
                          " has no attendable position");
    }
  }

  const Tensor q = matmul(q_in, params.wq);
  const Tensor k = matmul(kv_in, params.wk);
  const Tensor v = matmul(kv_in, params.wv);
  const std::size_t dh = params.head_width();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  std::vector<Tensor> heads;
  std::vector<double> weights;
  weights.reserve(params.heads * tq * tk);
  for (std::size_t h = 0; h < params.heads; ++h) {
    const Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
    const Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
    const Tensor vh = slice_cols(v, h * dh, (h + 1) * dh);
    const Tensor logits = add(scale(matmul(qh, transpose(kh)), inv_sqrt), bias);
    const Tensor w = softmax_rows(logits);
    weights.insert(weights.end(), w.values().begin(), w.values().end());
    heads.push_back(matmul(w, vh));
  }
  Tensor merged = heads.size() == 1 ? heads.front() : concat_last_axis(heads);
  return {matmul(merged, params.wo), Tensor::from({params.heads, tq, tk}, std::move(weights))};
}

Tensor transformer_block(const AttentionBlockParams& params, const Tensor& q_in,
                         const Tensor& kv_in, const Tensor& bias, std::vector<Tensor>* weights,
                         double ln_eps) {
  const bool self_attention = q_in.node() == kv_in.node();
  auto norm = [&](const Tensor& x, const Tensor& gain, const Tensor& bias) {
    return params.normalized() ? layer_norm(x, gain, bias, ln_eps) : x;
  };
  const Tensor qn = norm(q_in, params.ln1_gain, params.ln1_bias);
  const Tensor kvn = self_attention ? qn : norm(kv_in, params.ln1_gain, params.ln1_bias);
  AttentionOutput att = multi_head_attention(params, qn, kvn, bias);
  if (weights) weights->push_back(att.weights);
  const Tensor mid = add(q_in, att.out);
  const Tensor hidden =
      relu(add(matmul(norm(mid, params.ln2_gain, params.ln2_bias), params.ff_w1),
               params.ff_b1));
  return add(mid, add(matmul(hidden, params.ff_w2), params.ff_b2));
}

}  // namespace tamformer
