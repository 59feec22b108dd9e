#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "tamformer/errors.hpp"
#include "tamformer/training.hpp"
#include "test_util.hpp"

using namespace tamformer;
using tamformer::testing::bit_equal;
using tamformer::testing::random_tensor;
namespace fs = std::filesystem;

namespace {

PredictionTimeline timeline_of(std::vector<double> scores) {
  PredictionTimeline tl;
  const std::size_t n = scores.size();
  for (std::size_t i = 0; i < n; ++i) tl.query_frames.push_back(3 * i + 2);
  tl.scores = Tensor::from({n, 1}, std::move(scores));
  tl.embeddings = Tensor::zeros({n, 2});
  return tl;
}

Dataset small_dataset(std::size_t n, std::uint64_t seed) {
  GeneratorConfig g;
  g.train_fraction = 0.5;
  g.test_fraction = 0.5;
  return generate_synthetic(n, seed, g);
}

TrainConfig quick_config() {
  TrainConfig t = TrainConfig::desk();
  t.epochs_stage1 = 2;
  t.epochs_stage2 = 2;
  t.batch_size = 4;
  return t;
}

}  // namespace

TEST_CASE("bce loss examples") {
  for (int label : {0, 1})
    CHECK(std::abs(bce_loss(timeline_of({0.5, 0.5, 0.5}), label).item() - 0.693147) < 1e-6);
  CHECK(bce_loss(timeline_of({1 - 1e-12, 1 - 1e-12}), 1).item() < 1e-9);
  // -(ln 0.8 + ln 0.6) / 2 evaluated directly is 0.3669846.
  const double expected = -(std::log(0.8) + std::log(0.6)) / 2.0;
  CHECK(std::abs(bce_loss(timeline_of({0.8, 0.6}), 1).item() - expected) < 1e-12);
  CHECK(std::abs(expected - 0.3669846) < 1e-7);
  CHECK(std::isfinite(bce_loss(timeline_of({0.0, 1.0}), 1).item()));

  CHECK_THROWS_AS(bce_loss(PredictionTimeline{}, 1), ContractError);
}

TEST_CASE("positive class weight scales only positive samples") {
  const double base = bce_loss(timeline_of({0.7, 0.2}), 1).item();
  CHECK(bce_loss(timeline_of({0.7, 0.2}), 1, 3.0).item() == doctest::Approx(3.0 * base));
  CHECK(bce_loss(timeline_of({0.7, 0.2}), 0, 3.0).item() ==
        bce_loss(timeline_of({0.7, 0.2}), 0).item());
}

TEST_CASE("reg loss examples") {
  CHECK(reg_loss(Tensor::matrix({{1, 2}, {1, 2}, {1, 2}})).item() == 0.0);
  CHECK(reg_loss(Tensor::matrix({{0, 0}, {3, 4}})).item() == 25.0);
  std::mt19937_64 rng(1);
  const Tensor z = random_tensor({5, 3}, rng);
  const double a = reg_loss(z).item(), b = reg_loss(scale(z, 2.0)).item();
  CHECK(b == doctest::Approx(4.0 * a).epsilon(1e-14));
  CHECK(a >= 0.0);
  CHECK_THROWS_AS(reg_loss(Tensor::zeros({1, 3})), ContractError);
}

TEST_CASE("reg loss gradients with and without the stop-gradient") {
  std::mt19937_64 rng(2);
  std::vector<Tensor> params{random_tensor({4, 3}, rng, -1, 1, true)};
  CHECK(grad_check([&] { return reg_loss(params[0], false); }, params) < 1e-6);

  params[0].zero_grad();
  backward(reg_loss(params[0], true));
  const auto g = params[0].grad();
  for (std::size_t c = 0; c < 3; ++c) CHECK(g[9 + c] == 0.0);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 3; ++c)
      CHECK(g[r * 3 + c] ==
            doctest::Approx(2.0 * (params[0].at(r, c) - params[0].at(3, c))).epsilon(1e-14));
}

TEST_CASE("sgd examples") {
  std::vector<Tensor> p{Tensor::from({1}, {1.0}, true)};
  sgd_step(p, {{2.0}}, 0.0);
  CHECK(p[0].item() == 1.0);
  sgd_step(p, {{2.0}}, 0.1);
  CHECK(p[0].item() == doctest::Approx(0.8).epsilon(1e-15));

  std::vector<Tensor> q{Tensor::from({1}, {1.0}, true)};
  for (int i = 0; i < 2; ++i) {
    q[0].zero_grad();
    backward(sum_sq(q[0]));
    sgd_step(q, {{q[0].grad()[0]}}, 0.1);
  }
  CHECK(std::abs(q[0].item() - 0.64) < 1e-15);
  CHECK_THROWS_AS(sgd_step(q, {{1.0, 2.0}}, 0.1), ContractError);
  CHECK_THROWS_AS(sgd_step(q, {}, 0.1), ContractError);
}

TEST_CASE("sample losses sum to the total") {
  const ModelConfig c = ModelConfig::desk();
  const Dataset ds = small_dataset(8, 3);
  auto params = TamformerParams::init(c, 3);
  params.fit_input_standardization(c, ds.samples);
  const TrainConfig t = TrainConfig::desk();
  for (const auto& s : ds.samples) {
    const SampleLosses l = sample_losses(params, c, s, true, t);
    CHECK(std::abs(l.total.item() - (l.l_ce.item() + l.l_r.item())) <= 1e-12);
    const SampleLosses ce = sample_losses(params, c, s, false, t);
    CHECK(ce.total.item() == ce.l_ce.item());
  }
}

TEST_CASE("training is deterministic and logs consistent totals") {
  const ModelConfig c = ModelConfig::desk();
  const Dataset ds = small_dataset(12, 5);
  const TrainConfig t = quick_config();
  const TrainResult a = train_two_stage(ds, c, t), b = train_two_stage(ds, c, t);
  CHECK(a.log.to_csv() == b.log.to_csv());
  const auto pa = a.params.parameters(), pb = b.params.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(bit_equal(pa[i].values(), pb[i].values()));
  REQUIRE(a.log.records.size() == 4);
  for (const auto& r : a.log.records) {
    if (r.stage == 2) CHECK(std::abs(r.l_total - (r.l_ce + r.l_r)) <= 1e-12);
    else CHECK(r.l_total == r.l_ce);
  }
  CHECK(a.log.records[1].stage == 1);
  CHECK(a.log.records[2].stage == 2);
  CHECK(a.log.to_csv().rfind("epoch,stage,l_ce,l_r,l_total,acc,auc,f1\n", 0) == 0);
}

TEST_CASE("no second stage reproduces cross-entropy training") {
  const ModelConfig c = ModelConfig::desk();
  const Dataset ds = small_dataset(12, 6);
  TrainConfig t = quick_config();
  t.epochs_stage2 = 0;
  const TrainResult r = train_two_stage(ds, c, t);
  CHECK(r.log.records.size() == 2);
  const auto a = r.params.parameters(), b = r.stage1_params.parameters();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(bit_equal(a[i].values(), b[i].values()));
}

TEST_CASE("stage checkpoints are written") {
  const fs::path dir = fs::temp_directory_path() / "tamformer_test_training_ckpt";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const ModelConfig c = ModelConfig::desk();
  TrainConfig t = quick_config();
  t.checkpoint_dir = dir;
  const TrainResult r = train_two_stage(small_dataset(8, 7), c, t);
  const Checkpoint s1 = load_checkpoint(dir / "stage1.json");
  const Checkpoint s2 = load_checkpoint(dir / "stage2.json");
  const auto a = s1.params.parameters(), b = r.stage1_params.parameters();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(bit_equal(a[i].values(), b[i].values()));
  const auto d = s2.params.parameters(), e = r.params.parameters();
  for (std::size_t i = 0; i < d.size(); ++i) CHECK(bit_equal(d[i].values(), e[i].values()));
  fs::remove_all(dir);
}

TEST_CASE("train config contracts") {
  const ModelConfig c = ModelConfig::desk();
  TrainConfig t = quick_config();
  t.lr = 0.0;
  CHECK_THROWS_AS(train_two_stage(small_dataset(8, 1), c, t), ContractError);
  t = quick_config();
  GeneratorConfig g;
  g.train_fraction = 0.0;
  g.test_fraction = 1.0;
  CHECK_THROWS_AS(train_two_stage(generate_synthetic(8, 1, g), c, t), ContractError);
}

TEST_CASE("divergence is reported with its epoch") {
  const ModelConfig c = ModelConfig::desk();
  TrainConfig t = quick_config();
  t.lr = 1e300;
  try {
    train_two_stage(small_dataset(8, 2), c, t);
    FAIL("expected DivergenceError");
  } catch (const DivergenceError& e) {
    CHECK(e.epoch() >= 1);
  }
}
