#include <doctest.h>

#include <cmath>
#include <random>

#include "tamformer/errors.hpp"
#include "tamformer/maskgen.hpp"
#include "test_util.hpp"

using namespace tamformer;
using tamformer::testing::bit_equal;
using tamformer::testing::random_tensor;

TEST_CASE("zero scorer gives 0.5 on the causal side and 0 beyond") {
  const auto scorer = MaskScorerParams::zeros(5, {8, 4, 2});
  std::mt19937_64 rng(1);
  const Tensor f = random_tensor({4, 5}, rng);
  const LearnedMask m = predict_mask(scorer, f, f, identity_grid(4));
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) CHECK(m.values.at(i, j) == (j <= i ? 0.5 : 0.0));
}

TEST_CASE("identity grid on 4 steps yields 10 nonzero entries") {
  std::mt19937_64 rng(2);
  const auto scorer = MaskScorerParams::init(6, {8, 4, 2}, rng);
  const Tensor f = random_tensor({4, 6}, rng);
  const LearnedMask m = predict_mask(scorer, f, f, identity_grid(4));
  std::size_t nonzero = 0;
  for (double v : m.values.values()) {
    if (v != 0.0) {
      ++nonzero;
      CHECK(v > 0.0);
      CHECK(v < 1.0);
    }
  }
  CHECK(nonzero == 10);
  CHECK(causal_pairs(identity_grid(4), 4).size() == 10);
}

TEST_CASE("perturbing a late source frame leaves earlier rows unchanged") {
  std::mt19937_64 rng(3);
  const auto scorer = MaskScorerParams::init(6, {8, 4, 2}, rng);
  const Tensor f = random_tensor({4, 6}, rng);
  const LearnedMask base = predict_mask(scorer, f, f, identity_grid(4));
  Tensor g = f.clone(false);
  for (std::size_t c = 0; c < 6; ++c) g.mutable_values()[3 * 6 + c] += 1.7;
  const LearnedMask pert = predict_mask(scorer, g, g, identity_grid(4));
  CHECK(bit_equal(pert.values.values().subspan(0, 12), base.values.values().subspan(0, 12)));
}

TEST_CASE("row gradients ignore features past the frontier") {
  std::mt19937_64 rng(4);
  const auto scorer = MaskScorerParams::init(3, {8, 4, 2}, rng);
  Tensor src = random_tensor({6, 3}, rng, -1, 1, true);
  const Tensor tgt = random_tensor({2, 3}, rng);
  const GridMap grid{1, 3};
  const LearnedMask m = predict_mask(scorer, tgt, src, grid);
  src.zero_grad();
  backward(sum(m.values));
  for (std::size_t r = 4; r < 6; ++r)
    for (std::size_t c = 0; c < 3; ++c) CHECK(src.grad()[r * 3 + c] == 0.0);
}

TEST_CASE("grid map contracts") {
  const auto scorer = MaskScorerParams::zeros(2, {4});
  const Tensor f = Tensor::zeros({3, 2});
  CHECK_THROWS_AS(predict_mask(scorer, f, f, GridMap{0, 3, 2}), ContractError);
  CHECK_THROWS_AS(predict_mask(scorer, f, f, GridMap{1, 0, 2}), ContractError);
  CHECK_THROWS_AS(predict_mask(scorer, f, f, GridMap{0, 1}), ContractError);
}

TEST_CASE("mask to bias") {
  const double eps = 1e-6;
  LearnedMask m{Tensor::matrix({{1.0 - eps, 0.0}, {0.5, 0.25}}), identity_grid(2)};
  const Tensor b = mask_to_bias(m, eps);
  CHECK(std::abs(b.at(0, 0)) < 1e-5);
  CHECK(b.at(0, 1) == -1e9);
  CHECK(std::abs(b.at(1, 0) - std::log(0.5 + 1e-6)) < 1e-12);
  CHECK(std::abs(b.at(1, 0) + 0.693145) < 1e-5);
  CHECK(b.at(1, 1) == doctest::Approx(std::log(0.25 + eps)));
}

TEST_CASE("mask bias softmax puts no weight on the future") {
  std::mt19937_64 rng(5);
  const auto scorer = MaskScorerParams::init(4, {8, 4, 2}, rng);
  const Tensor src = random_tensor({7, 4}, rng), tgt = random_tensor({3, 4}, rng);
  const GridMap grid{2, 4, 6};
  const Tensor s = softmax_rows(mask_to_bias(predict_mask(scorer, tgt, src, grid)));
  for (std::size_t i = 0; i < 3; ++i) {
    double total = 0.0;
    for (std::size_t j = 0; j < 7; ++j) {
      total += s.at(i, j);
      if (j > grid[i]) CHECK(s.at(i, j) < 1e-12);
    }
    CHECK(std::abs(total - 1.0) < 1e-9);
  }
}

TEST_CASE("causal bias") {
  const Tensor b = causal_bias(GridMap{0, 2}, 3);
  CHECK(bit_equal(b.values(), std::vector<double>{0, -kLarge, -kLarge, 0, 0, 0}));
}

TEST_CASE("sparsity examples") {
  LearnedMask row{Tensor::matrix({{0.9, 0.1, 0.6, 0.2}}), GridMap{3}};
  auto s = sparsity_stats(row, 0.5);
  CHECK(s[0].frames_used == 2);
  CHECK(s[0].frames_available == 4);
  s = sparsity_stats(row, 0.999);
  CHECK(s[0].frames_used == 0);
  CHECK(s[0].frames_available == 4);

  const auto scorer = MaskScorerParams::zeros(2, {4});
  const Tensor f = Tensor::zeros({5, 2});
  const LearnedMask half = predict_mask(scorer, f, f, identity_grid(5));
  const auto hs = sparsity_stats(half, 0.5);
  for (std::size_t t = 0; t < 5; ++t) {
    CHECK(hs[t].frames_used == hs[t].frames_available);
    CHECK(hs[t].frames_available == t + 1);
  }
  CHECK_THROWS_AS(sparsity_stats(row, 0.0), ContractError);
  CHECK_THROWS_AS(sparsity_stats(row, 1.0), ContractError);
}

TEST_CASE("mask csv format") {
  LearnedMask m{Tensor::matrix({{0.5, 0.0}, {0.1234567, 1.0 / 3.0}}), identity_grid(2)};
  CHECK(mask_to_csv(m) ==
        "row,col,value\n0,0,0.500000\n0,1,0.000000\n1,0,0.123457\n1,1,0.333333\n");
}

TEST_CASE("mask pipeline gradient check") {
  std::mt19937_64 rng(6);
  auto scorer = MaskScorerParams::init(3, {6, 4}, rng);
  auto block = AttentionBlockParams::init(3, 4, 2, 6, rng);
  const Tensor x = random_tensor({5, 3}, rng);
  const Tensor w = random_tensor({5, 3}, rng);
  std::vector<Tensor> params;
  for (auto& t : scorer.weights) params.push_back(t);
  for (auto& t : scorer.biases) params.push_back(t);
  params.push_back(block.wq);
  params.push_back(block.wk);
  auto build = [&]() {
    const LearnedMask m = predict_mask(scorer, x, x, identity_grid(5));
    return sum(mul(multi_head_attention(block, x, x, mask_to_bias(m)).out, w));
  };
  CHECK(grad_check(build, params) < 1e-4);
}
