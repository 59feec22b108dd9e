#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <cstdlib>
#include <cstring>
#include <set>

#include "tamformer/data.hpp"
#include "tamformer/errors.hpp"
#include "test_util.hpp"

using namespace tamformer;
using tamformer::testing::bit_equal;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("tamformer_test_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

const Tensor& track(const FeatureSequence& s, const std::string& name) {
  for (const auto& m : s.modalities)
    if (m.name == name) return m.track;
  FAIL("missing modality " << name);
  return s.modalities.front().track;
}

}  // namespace

TEST_CASE("generation is deterministic") {
  const GeneratorConfig cfg;
  const Dataset a = generate_synthetic(10, 7, cfg), b = generate_synthetic(10, 7, cfg);
  REQUIRE(a.samples.size() == 10);
  for (std::size_t i = 0; i < 10; ++i) CHECK(a.samples[i] == b.samples[i]);
  CHECK(a.manifest == b.manifest);
  const Dataset c = generate_synthetic(10, 8, cfg);
  CHECK_FALSE(a.samples[0] == c.samples[0]);
}

TEST_CASE("class counts follow the balance exactly") {
  const Dataset ds = generate_synthetic(100, 3, GeneratorConfig{});
  std::size_t pos = 0;
  for (const auto& s : ds.samples) pos += s.label;
  CHECK(pos == 50);
  CHECK(ds.manifest.n_pos == 50);
  CHECK(ds.manifest.n_neg == 50);
}

TEST_CASE("generator contracts") {
  CHECK_THROWS_AS(generate_synthetic(1, 1, GeneratorConfig{}), ContractError);
  GeneratorConfig g;
  g.balance = 0.0;
  CHECK_THROWS_AS(generate_synthetic(10, 1, g), ContractError);
  g.balance = 0.01;
  CHECK_THROWS_AS(generate_synthetic(10, 1, g), ContractError);
}

TEST_CASE("sample structure") {
  const GeneratorConfig cfg;
  const Dataset ds = generate_synthetic(30, 5, cfg);
  for (const auto& s : ds.samples) {
    CHECK(s.modalities.size() == 4);
    CHECK(s.frames() == cfg.window_frames + s.history_margin);
    CHECK(s.history_margin <= cfg.max_margin);
    CHECK(s.event_frame > s.frames() - 1);
    CHECK(s.fps == 30);
    CHECK(track(s, "bbox").cols() == 4);
    CHECK(track(s, "local_context").cols() == cfg.context_width);
    CHECK(track(s, "pose").cols() == cfg.pose_width);
    CHECK(track(s, "speed").cols() == 1);
    s.validate();
  }
}

TEST_CASE("mean lateral motion separates the classes") {
  const Dataset ds = generate_synthetic(200, 11, GeneratorConfig{});
  std::vector<std::pair<double, int>> feat;
  for (const auto& s : ds.samples) {
    const Tensor& b = track(s, "bbox");
    double total = 0.0;
    for (std::size_t r = 1; r < b.rows(); ++r) total += std::abs(b.at(r, 0) - b.at(r - 1, 0));
    feat.emplace_back(total / static_cast<double>(b.rows() - 1), s.label);
  }
  // Best single threshold on the one-dimensional feature.
  std::sort(feat.begin(), feat.end());
  std::size_t best = 0;
  for (std::size_t cut = 0; cut <= feat.size(); ++cut) {
    std::size_t correct = 0;
    for (std::size_t i = 0; i < feat.size(); ++i) correct += (i >= cut) == (feat[i].second == 1);
    best = std::max(best, correct);
  }
  CHECK(static_cast<double>(best) / 200.0 >= 0.9);
}

TEST_CASE("augmentation examples") {
  Dataset ds = generate_synthetic(20, 9, GeneratorConfig{});
  FeatureSequence s = ds.samples.front();
  const auto zero = [&] {
    FeatureSequence c = s;
    c.history_margin = 0;
    for (auto& m : c.modalities) m.track = slice_rows(m.track, s.history_margin, s.frames()).detach();
    return c;
  }();
  CHECK(augment(zero, 5, 3).size() == 1);

  FeatureSequence six = s;
  const std::size_t drop = s.history_margin >= 6 ? s.history_margin - 6 : 0;
  REQUIRE(s.history_margin >= 6);
  six.history_margin = 6;
  for (auto& m : six.modalities) m.track = slice_rows(m.track, drop, s.frames()).detach();
  const auto copies = augment(six, 5, 3);
  REQUIRE(copies.size() == 3);
  const std::size_t last = six.frames() - 1;
  for (std::size_t k = 0; k < copies.size(); ++k) {
    const auto& c = copies[k];
    CHECK(c.label == six.label);
    CHECK(c.event_frame == six.event_frame);
    CHECK(c.base_id() == six.sample_id);
    CHECK(c.frames() - 1 == last - 3 * k);
    CHECK(c.frames() - 1 < c.event_frame);
    for (std::size_t m = 0; m < c.modalities.size(); ++m) {
      const Tensor& orig = six.modalities[m].track;
      CHECK(bit_equal(c.modalities[m].track.values(),
                      orig.values().subspan(0, c.frames() * orig.cols())));
    }
  }
  CHECK(copies[1].sample_id == six.sample_id + "#shift3");
  CHECK(augment(six, 1, 3).size() == 2);
  CHECK_THROWS_AS(augment(six, 5, 0), ContractError);
}

TEST_CASE("splits are disjoint, stratified and leak-free") {
  GeneratorConfig g;
  g.train_fraction = 0.6;
  g.val_fraction = 0.1;
  g.test_fraction = 0.3;
  const Dataset ds = generate_synthetic(100, 13, g);
  std::set<std::string> seen;
  for (const auto* ids : {&ds.manifest.train_ids, &ds.manifest.val_ids, &ds.manifest.test_ids})
    for (const auto& id : *ids) CHECK(seen.insert(id).second);
  CHECK(seen.size() == 100);
  CHECK(ds.manifest.train_ids.size() == 60);
  CHECK(ds.manifest.test_ids.size() == 30);
  std::size_t pos_train = 0;
  for (const auto& s : ds.split(Split::train)) pos_train += s.label;
  CHECK(pos_train == 30);

  const auto train = augment_training_split(ds.split(Split::train), ds.manifest, 5, 3);
  for (const auto& s : train) CHECK(ds.manifest.split_of(s.base_id()) == Split::train);
  CHECK_THROWS_AS(augment_training_split(ds.split(Split::test), ds.manifest, 5, 3), ContractError);

  g.test_fraction = 0.5;
  CHECK_THROWS_AS(generate_synthetic(10, 1, g), ContractError);
}

TEST_CASE("exact split sizes for the 64/200 protocol") {
  GeneratorConfig g;
  g.train_fraction = 64.0 / 264.0;
  g.val_fraction = 0.0;
  g.test_fraction = 200.0 / 264.0;
  const Dataset ds = generate_synthetic(264, 7, g);
  CHECK(ds.manifest.train_ids.size() == 64);
  CHECK(ds.manifest.test_ids.size() == 200);
}

TEST_CASE("dataset round trip is lossless") {
  const fs::path dir = temp_dir("roundtrip");
  const Dataset ds = generate_synthetic(10, 7, GeneratorConfig{});
  save_dataset(dir / "d.jsonl", ds);
  CHECK(fs::exists(manifest_path(dir / "d.jsonl")));
  const Dataset back = load_dataset(dir / "d.jsonl");
  CHECK(back.manifest == ds.manifest);
  CHECK(back.manifest.seed == 7);
  REQUIRE(back.samples.size() == ds.samples.size());
  for (std::size_t i = 0; i < ds.samples.size(); ++i) CHECK(back.samples[i] == ds.samples[i]);
  fs::remove_all(dir);
}

TEST_CASE("format_exact round trips awkward doubles") {
  for (double v : {0.1, 1.0 / 3.0, -2.5e-300, 123456789.123456789, 5e-324, -0.0}) {
    const double back = std::strtod(format_exact(v).c_str(), nullptr);
    CHECK(std::memcmp(&back, &v, sizeof v) == 0);
  }
}

TEST_CASE("malformed files raise parse errors with line numbers") {
  const fs::path dir = temp_dir("malformed");
  const Dataset ds = generate_synthetic(4, 1, GeneratorConfig{});
  save_dataset(dir / "d.jsonl", ds);

  std::ifstream in(dir / "d.jsonl");
  std::string text((std::istreambuf_iterator<char>(in)), {});
  in.close();
  {
    std::ofstream out(dir / "d.jsonl", std::ios::trunc);
    out << text.substr(0, text.size() * 2 / 3);
  }
  try {
    load_dataset(dir / "d.jsonl");
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("line") != std::string::npos);
  }

  {
    std::ofstream out(dir / "d.jsonl", std::ios::trunc);
    out << text;
  }
  std::ifstream min(manifest_path(dir / "d.jsonl"));
  std::string manifest((std::istreambuf_iterator<char>(min)), {});
  min.close();
  const auto pos = manifest.find("\"format_version\": 1");
  REQUIRE(pos != std::string::npos);
  manifest.replace(pos, 19, "\"format_version\": 2");
  {
    std::ofstream out(manifest_path(dir / "d.jsonl"), std::ios::trunc);
    out << manifest;
  }
  CHECK_THROWS_AS(load_dataset(dir / "d.jsonl"), VersionError);
  CHECK_THROWS_AS(load_dataset(dir / "missing.jsonl"), IoError);
  CHECK_THROWS_AS(sample_from_json_line("{\"sample_id\": 3}", 7), ParseError);
  fs::remove_all(dir);
}

TEST_CASE("seed derivation") {
  CHECK(splitmix64(0) == 0xe220a8397b1dcdafULL);
  CHECK(derive_seed(7, 0) != derive_seed(7, 1));
  CHECK(derive_seed(7, 0) != derive_seed(8, 0));
}
