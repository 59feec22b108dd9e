#include <doctest.h>

#include <cmath>
#include <cstring>
#include <random>

#include "tamformer/errors.hpp"
#include "tamformer/numerics.hpp"
#include "test_util.hpp"

using namespace tamformer;
using tamformer::testing::bit_equal;
using tamformer::testing::random_tensor;

TEST_CASE("matmul identity and hand-checkable products") {
  const Tensor eye = Tensor::matrix({{1, 0}, {0, 1}});
  const Tensor m = Tensor::matrix({{1, 2}, {3, 4}});
  const Tensor r = matmul(eye, m);
  CHECK(r.shape() == Shape{2, 2});
  CHECK(bit_equal(r.values(), m.values()));

  const Tensor dot = matmul(Tensor::matrix({{1, 2}}), Tensor::matrix({{3}, {4}}));
  CHECK(dot.item() == 11.0);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  const Tensor a = Tensor::zeros({2, 3});
  const Tensor b = Tensor::zeros({2, 3});
  try {
    matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
  }
}

TEST_CASE("matmul gradient matches central differences") {
  std::mt19937_64 rng(11);
  std::vector<Tensor> params{random_tensor({3, 4}, rng, -1, 1, true),
                             random_tensor({4, 2}, rng, -1, 1, true)};
  const Tensor w = random_tensor({3, 2}, rng);
  auto build = [&]() { return sum(mul(matmul(params[0], params[1]), w)); };
  CHECK(grad_check(build, params) < 1e-6);
}

TEST_CASE("softmax_rows examples") {
  const Tensor u = softmax_rows(Tensor::matrix({{0, 0, 0}}));
  for (double v : u.values()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  const Tensor sat = softmax_rows(Tensor::matrix({{1e9, 0}}));
  CHECK(std::abs(sat[0] - 1.0) < 1e-12);
  CHECK(std::abs(sat[1]) < 1e-12);

  // exp(k) / (e + e^2 + e^3) evaluated directly.
  const Tensor s = softmax_rows(Tensor::matrix({{1, 2, 3}}));
  CHECK(std::abs(s[0] - 0.09003) < 1e-4);
  CHECK(std::abs(s[1] - 0.24473) < 1e-4);
  CHECK(std::abs(s[2] - 0.66524) < 1e-4);
}

TEST_CASE("softmax rows sum to one for arbitrary finite inputs") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng() % 6, m = 1 + rng() % 9;
    Tensor x = random_tensor({n, m}, rng, -50, 50);
    // Sprinkle forbidden positions but keep one allowed entry per row.
    auto v = x.mutable_values();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 1; j < m; ++j)
        if (rng() % 3 == 0) v[i * m + j] = -kLarge;
    const Tensor s = softmax_rows(x);
    for (std::size_t i = 0; i < n; ++i) {
      double total = 0.0;
      for (std::size_t j = 0; j < m; ++j) {
        CHECK(s.at(i, j) >= 0.0);
        total += s.at(i, j);
      }
      CHECK(std::abs(total - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("sigmoid examples") {
  const Tensor s = sigmoid(Tensor::from({3}, {0.0, 50.0, 1.0}));
  CHECK(s[0] == 0.5);
  CHECK(std::abs(s[1] - 1.0) < 1e-20);
  CHECK(std::abs(s[2] - 0.7310586) < 1e-6);
  const Tensor neg = sigmoid(Tensor::from({2}, {-30.0, 30.0}));
  CHECK(neg[0] > 0.0);
  CHECK(neg[1] < 1.0);
}

TEST_CASE("layer_norm examples and errors") {
  const Tensor g = Tensor::full({4}, 1.0), b = Tensor::zeros({4});
  const Tensor c = layer_norm(Tensor::matrix({{2, 2, 2, 2}}), g, b);
  for (double v : c.values()) CHECK(v == 0.0);

  const Tensor g2 = Tensor::full({2}, 1.0), b2 = Tensor::zeros({2});
  const Tensor r = layer_norm(Tensor::matrix({{1, -1}}), g2, b2);
  CHECK(std::abs(r[0] - 1.0) < 1e-4);
  CHECK(std::abs(r[1] + 1.0) < 1e-4);

  CHECK_THROWS_AS(layer_norm(Tensor::matrix({{1}}), Tensor::full({1}, 1.0), Tensor::zeros({1})),
                  DimensionError);
}

TEST_CASE("layer_norm gradient matches central differences") {
  std::mt19937_64 rng(5);
  std::vector<Tensor> params{random_tensor({2, 8}, rng, -2, 2, true),
                             random_tensor({8}, rng, 0.5, 1.5, true),
                             random_tensor({8}, rng, -0.5, 0.5, true)};
  const Tensor w = random_tensor({2, 8}, rng);
  auto build = [&]() { return sum(mul(layer_norm(params[0], params[1], params[2]), w)); };
  CHECK(grad_check(build, params) < 1e-5);
}

TEST_CASE("elementwise operations") {
  const Tensor a = Tensor::matrix({{1, 2}, {3, 4}});
  const Tensor b = Tensor::matrix({{5, 6, 7}, {8, 9, 10}});
  const Tensor c = concat_last_axis({a, b});
  CHECK(c.shape() == Shape{2, 5});
  CHECK(bit_equal(c.values(), std::vector<double>{1, 2, 5, 6, 7, 3, 4, 8, 9, 10}));

  const Tensor r = relu(Tensor::from({2}, {-1.0, 2.0}));
  CHECK(r[0] == 0.0);
  CHECK(r[1] == 2.0);
  CHECK(sum_sq(Tensor::from({2}, {3.0, 4.0})).item() == 25.0);
  CHECK(mean(Tensor::from({4}, {1.0, 2.0, 3.0, 6.0})).item() == 3.0);
  CHECK(scale(Tensor::from({1}, {2.0}), 1.5).item() == 3.0);

  CHECK_THROWS_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2})), DimensionError);
  CHECK_THROWS_AS(concat_last_axis({Tensor::zeros({2, 3}), Tensor::zeros({3, 3})}),
                  DimensionError);
  const Tensor bcast = add(Tensor::zeros({2, 3}), Tensor::from({3}, {1.0, 2.0, 3.0}));
  CHECK(bcast.at(1, 2) == 3.0);
}

TEST_CASE("composite graph gradient matches central differences") {
  std::mt19937_64 rng(17);
  std::vector<Tensor> params{random_tensor({3, 4}, rng, -1, 1, true),
                             random_tensor({4, 5}, rng, -1, 1, true),
                             random_tensor({5}, rng, -1, 1, true),
                             random_tensor({3, 2}, rng, -1, 1, true)};
  const std::vector<std::size_t> rows{2, 0, 2};
  const Tensor w = random_tensor({3, 3}, rng);
  const std::vector<RowPair> pairs{{0, 0}, {1, 0}, {1, 1}, {2, 2}};
  std::vector<bool> allowed(9, false);
  for (auto p : pairs) allowed[p.target * 3 + p.source] = true;
  auto build = [&]() {
    const Tensor h = add(matmul(params[0], params[1]), params[2]);
    const Tensor s = softmax_rows(slice_cols(h, 1, 4));
    const Tensor g = gather_rows(concat_last_axis({s, params[3]}), rows);
    const Tensor ps = pair_sum(slice_cols(g, 0, 2), params[3], pairs);
    const Tensor m = scatter_pairs(sigmoid(slice_cols(ps, 0, 1)), pairs, 3, 3);
    const Tensor lb = masked_log(m, allowed, 1e-6);
    return add(sum(mul(softmax_rows(lb), w)), add(sum_sq(transpose(ps)), mean(sub(g, scale(g, 0.5)))));
  };
  CHECK(grad_check(build, params) < 1e-4);
}

TEST_CASE("grad_check on a quadratic") {
  std::vector<Tensor> params{Tensor::from({2}, {1.0, 2.0}, true)};
  auto build = [&]() { return sum_sq(params[0]); };
  params[0].zero_grad();
  backward(build());
  CHECK(params[0].grad()[0] == 2.0);
  CHECK(params[0].grad()[1] == 4.0);
  CHECK(grad_check(build, params) < 1e-8);
}

TEST_CASE("grad_check contract errors") {
  std::vector<Tensor> params{Tensor::from({2}, {1.0, 2.0}, true)};
  CHECK_THROWS_AS(grad_check([&]() { return mul(params[0], params[0]); }, params),
                  ContractError);
  CHECK_THROWS_AS(grad_check([&]() { return sum_sq(params[0]); }, params, 1e-2), ContractError);
  CHECK_THROWS_AS(backward(Tensor::zeros({2})), ContractError);
}

TEST_CASE("binary cross entropy clamps and averages") {
  CHECK(std::abs(binary_cross_entropy(Tensor::from({3}, {0.5, 0.5, 0.5}), 1).item() -
                 std::log(2.0)) < 1e-12);
  CHECK(binary_cross_entropy(Tensor::from({1}, {0.0}), 1).item() ==
        doctest::Approx(-std::log(1e-12)));
}

TEST_CASE("operations are deterministic") {
  std::mt19937_64 rng(9);
  const Tensor a = random_tensor({4, 6}, rng), b = random_tensor({6, 3}, rng);
  const Tensor g = random_tensor({3}, rng), bi = random_tensor({3}, rng);
  const Tensor r1 = softmax_rows(layer_norm(matmul(a, b), g, bi));
  const Tensor r2 = softmax_rows(layer_norm(matmul(a, b), g, bi));
  CHECK(bit_equal(r1.values(), r2.values()));
}

TEST_CASE("node ids increase so inputs precede consumers") {
  const Tensor a = Tensor::zeros({2, 2}, true);
  const Tensor b = relu(a);
  const Tensor c = add(a, b);
  CHECK(a.id() < b.id());
  CHECK(b.id() < c.id());
}
