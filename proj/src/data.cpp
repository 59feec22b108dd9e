#include "tamformer/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include <json.hpp>

#include "tamformer/errors.hpp"

namespace tamformer {

using ojson = nlohmann::ordered_json;

namespace {

constexpr char kShiftTag[] = "#shift";

// Fisher-Yates with plain modulo reduction so ordering does not depend on
// the standard library's distribution implementations.
template <class T>
void shuffle_in_place(std::vector<T>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(v[i - 1], v[j]);
  }
}

std::string make_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "s%05zu", i);
  return buf;
}

}  // namespace

std::string format_exact(double v) {
  if (!std::isfinite(v)) throw ContractError("cannot serialize non-finite value");
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// --- FeatureSequence ----------------------------------------------------

std::size_t FeatureSequence::frames() const {
  return modalities.empty() ? 0 : modalities.front().track.rows();
}

std::string FeatureSequence::base_id() const {
  const auto pos = sample_id.find(kShiftTag);
  return pos == std::string::npos ? sample_id : sample_id.substr(0, pos);
}

void FeatureSequence::validate() const {
  if (modalities.empty()) throw ContractError(sample_id + ": no modalities");
  const std::size_t t = frames();
  for (const auto& m : modalities) {
    if (m.track.rank() != 2 || m.track.rows() != t) {
      throw ContractError(sample_id + ": modality " + m.name + " has " +
                          shape_str(m.track.shape()) + ", expected " + std::to_string(t) +
                          " frames");
    }
  }
  if (label != 0 && label != 1) throw ContractError(sample_id + ": label must be 0 or 1");
  if (event_frame < t) {
    throw ContractError(sample_id + ": event frame " + std::to_string(event_frame) +
                        " is not after the last observable frame");
  }
  if (history_margin >= t) throw ContractError(sample_id + ": history margin exceeds track");
}

bool operator==(const FeatureSequence& a, const FeatureSequence& b) {
  if (a.sample_id != b.sample_id || a.fps != b.fps || a.event_frame != b.event_frame ||
      a.label != b.label || a.history_margin != b.history_margin ||
      a.modalities.size() != b.modalities.size()) {
    return false;
  }
  for (std::size_t i = 0; i < a.modalities.size(); ++i) {
    const auto& ma = a.modalities[i];
    const auto& mb = b.modalities[i];
    if (ma.name != mb.name || ma.track.shape() != mb.track.shape()) return false;
    if (!std::equal(ma.track.values().begin(), ma.track.values().end(),
                    mb.track.values().begin())) {
      return false;
    }
  }
  return true;
}

std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

void GeneratorConfig::validate() const {
  if (window_frames == 0) throw ContractError("generator: window_frames must be positive");
  if (event_offset_frames == 0) throw ContractError("generator: event offset must be positive");
  if (fps <= 0) throw ContractError("generator: fps must be positive");
  if (!(balance > 0.0 && balance < 1.0)) throw ContractError("generator: balance must lie in (0,1)");
  if (context_width == 0 || pose_width == 0) {
    throw ContractError("generator: modality widths must be positive");
  }
  if (!(evidence_ramp_frames > 0.0)) throw ContractError("generator: ramp must be positive");
  const double fr[] = {train_fraction, val_fraction, test_fraction};
  for (double f : fr) {
    if (f < 0.0 || f > 1.0) throw ContractError("generator: split fractions must lie in [0,1]");
  }
  if (std::abs(train_fraction + val_fraction + test_fraction - 1.0) > 1e-9) {
    throw ContractError("generator: split fractions must sum to 1");
  }
}

Split DatasetManifest::split_of(const std::string& base_id) const {
  auto has = [&](const std::vector<std::string>& ids) {
    return std::find(ids.begin(), ids.end(), base_id) != ids.end();
  };
  if (has(train_ids)) return Split::train;
  if (has(val_ids)) return Split::val;
  if (has(test_ids)) return Split::test;
  throw ContractError("sample " + base_id + " has no split assignment");
}

namespace {

bool same_generator(const GeneratorConfig& a, const GeneratorConfig& b) {
  return a.window_frames == b.window_frames && a.max_margin == b.max_margin &&
         a.event_offset_frames == b.event_offset_frames && a.fps == b.fps &&
         a.balance == b.balance && a.context_width == b.context_width &&
         a.pose_width == b.pose_width && a.evidence_ramp_frames == b.evidence_ramp_frames &&
         a.train_fraction == b.train_fraction && a.val_fraction == b.val_fraction &&
         a.test_fraction == b.test_fraction;
}

}  // namespace

bool operator==(const DatasetManifest& a, const DatasetManifest& b) {
  return a.format_version == b.format_version && a.seed == b.seed &&
         same_generator(a.generator, b.generator) && a.n_pos == b.n_pos && a.n_neg == b.n_neg &&
         a.train_ids == b.train_ids && a.val_ids == b.val_ids && a.test_ids == b.test_ids;
}

std::vector<FeatureSequence> Dataset::split(Split s) const {
  std::vector<FeatureSequence> out;
  for (const auto& x : samples)
    if (manifest.split_of(x.base_id()) == s) out.push_back(x);
  return out;
}

// --- generation ---------------------------------------------------------

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t master_seed, std::uint64_t index) {
  return splitmix64(master_seed ^ splitmix64(index + 1));
}

namespace {

struct SharedProjection {
  std::vector<double> weights;  // [context_width x (4 + pose_width)]
};

FeatureSequence generate_one(std::size_t index, int label, std::uint64_t master_seed,
                             const GeneratorConfig& cfg, const SharedProjection& proj) {
  std::mt19937_64 rng(derive_seed(master_seed, index));
  auto uniform = [&](double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
  };
  std::normal_distribution<double> unit(0.0, 1.0);
  auto normal = [&](double sd) { return sd * unit(rng); };

  const std::size_t margin =
      static_cast<std::size_t>(rng() % static_cast<std::uint64_t>(cfg.max_margin + 1));
  const std::size_t frames = cfg.window_frames + margin;
  const std::size_t event_frame = frames - 1 + cfg.event_offset_frames;
  const bool crossing = label == 1;

  // 0 far from onset, 1 at onset.
  auto ramp = [&](std::size_t f) {
    const double r = 1.0 - static_cast<double>(event_frame - f) / cfg.evidence_ramp_frames;
    return std::clamp(r, 0.0, 1.0);
  };

  // Bounding box [cx, cy, w, h].
  const double cx0 = uniform(-1.0, 1.0);
  const double cy = uniform(-1.0, 1.0);
  const double bw = uniform(0.5, 1.0);
  const double bh = uniform(1.0, 2.0);
  const double vx = crossing ? uniform(0.5, 1.5) : normal(0.1);
  std::vector<double> bbox(frames * 4);
  double cx = cx0;
  for (std::size_t f = 0; f < frames; ++f) {
    if (f > 0) cx += crossing ? vx * (0.5 + 0.5 * ramp(f)) : vx;
    const double base[4] = {cx, cy, bw, bh};
    for (std::size_t c = 0; c < 4; ++c) bbox[f * 4 + c] = base[c] + normal(0.2);
  }

  // Pose: per-channel sinusoids, faster gait when crossing.
  const double freq = uniform(0.8, 1.2) * (crossing ? 1.4 : 1.0);
  std::vector<double> phase(cfg.pose_width);
  for (auto& p : phase) p = uniform(0.0, 2.0 * std::numbers::pi);
  std::vector<double> pose(frames * cfg.pose_width);
  for (std::size_t f = 0; f < frames; ++f) {
    const double t = static_cast<double>(f) / cfg.fps;
    for (std::size_t j = 0; j < cfg.pose_width; ++j)
      pose[f * cfg.pose_width + j] =
          std::sin(2.0 * std::numbers::pi * freq * t + phase[j]) + normal(0.3);
  }

  // Ego speed: slows toward onset when the pedestrian crosses.
  const double s0 = uniform(0.9, 1.1);
  std::vector<double> speed(frames);
  for (std::size_t f = 0; f < frames; ++f)
    speed[f] = (crossing ? s0 - 0.8 * ramp(f) : s0) + normal(0.05);

  // Local context: fixed random projection of [bbox ; pose] plus noise.
  const std::size_t in_w = 4 + cfg.pose_width;
  std::vector<double> context(frames * cfg.context_width);
  for (std::size_t f = 0; f < frames; ++f)
    for (std::size_t r = 0; r < cfg.context_width; ++r) {
      double acc = 0.0;
      for (std::size_t c = 0; c < 4; ++c) acc += proj.weights[r * in_w + c] * bbox[f * 4 + c];
      for (std::size_t c = 0; c < cfg.pose_width; ++c)
        acc += proj.weights[r * in_w + 4 + c] * pose[f * cfg.pose_width + c];
      context[f * cfg.context_width + r] = acc + normal(0.5);
    }

  FeatureSequence s;
  s.sample_id = make_id(index);
  s.fps = cfg.fps;
  s.event_frame = event_frame;
  s.label = label;
  s.history_margin = margin;
  s.modalities.push_back(
      {"local_context", Tensor::from({frames, cfg.context_width}, std::move(context))});
  s.modalities.push_back({"bbox", Tensor::from({frames, 4}, std::move(bbox))});
  s.modalities.push_back({"pose", Tensor::from({frames, cfg.pose_width}, std::move(pose))});
  s.modalities.push_back({"speed", Tensor::from({frames, 1}, std::move(speed))});
  return s;
}

}  // namespace

Dataset generate_synthetic(std::size_t n, std::uint64_t seed, const GeneratorConfig& config) {
  config.validate();
  if (n < 2) throw ContractError("generate_synthetic: need at least 2 samples");
  const auto n_pos = static_cast<std::size_t>(std::llround(static_cast<double>(n) * config.balance));
  if (n_pos == 0 || n_pos == n) {
    throw ContractError("generate_synthetic: balance " + std::to_string(config.balance) +
                        " leaves one class empty for n=" + std::to_string(n));
  }

  std::mt19937_64 master(splitmix64(seed));
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  shuffle_in_place(order, master);
  std::vector<int> labels(n, 0);
  for (std::size_t i = 0; i < n_pos; ++i) labels[order[i]] = 1;

  SharedProjection proj;
  {
    std::normal_distribution<double> unit(0.0, 1.0);
    const double sd = 1.0 / std::sqrt(static_cast<double>(4 + config.pose_width));
    proj.weights.resize(config.context_width * (4 + config.pose_width));
    for (auto& w : proj.weights) w = sd * unit(master);
  }

  Dataset ds;
  ds.manifest.seed = seed;
  ds.manifest.generator = config;
  ds.manifest.n_pos = n_pos;
  ds.manifest.n_neg = n - n_pos;
  for (std::size_t i = 0; i < n; ++i)
    ds.samples.push_back(generate_one(i, labels[i], seed, config, proj));

  // Stratified split on base ids, before any augmentation.
  for (int cls = 1; cls >= 0; --cls) {
    std::vector<std::string> ids;
    for (const auto& s : ds.samples)
      if (s.label == cls) ids.push_back(s.sample_id);
    shuffle_in_place(ids, master);
    const double nc = static_cast<double>(ids.size());
    const auto n_train = static_cast<std::size_t>(std::llround(nc * config.train_fraction));
    const auto n_val = std::min(ids.size() - std::min(n_train, ids.size()),
                                static_cast<std::size_t>(std::llround(nc * config.val_fraction)));
    for (std::size_t i = 0; i < ids.size(); ++i) {
      auto& dst = i < n_train ? ds.manifest.train_ids
                  : i < n_train + n_val ? ds.manifest.val_ids
                                        : ds.manifest.test_ids;
      dst.push_back(ids[i]);
    }
  }
  for (auto* v : {&ds.manifest.train_ids, &ds.manifest.val_ids, &ds.manifest.test_ids})
    std::sort(v->begin(), v->end());
  return ds;
}

std::vector<FeatureSequence> augment(const FeatureSequence& sample, std::size_t max_shifts,
                                     std::size_t shift_step) {
  if (shift_step == 0) throw ContractError("augment: shift_step must be >= 1");
  std::vector<FeatureSequence> out{sample};
  for (std::size_t k = 1; k <= max_shifts && k * shift_step <= sample.history_margin; ++k) {
    const std::size_t shift = k * shift_step;
    FeatureSequence copy = sample;
    copy.sample_id = sample.base_id() + kShiftTag + std::to_string(shift);
    copy.history_margin = sample.history_margin - shift;
    const std::size_t keep = sample.frames() - shift;
    for (auto& m : copy.modalities) m.track = slice_rows(m.track, 0, keep).detach();
    out.push_back(std::move(copy));
  }
  return out;
}

std::vector<FeatureSequence> augment_training_split(const std::vector<FeatureSequence>& train,
                                                    const DatasetManifest& manifest,
                                                    std::size_t max_shifts,
                                                    std::size_t shift_step) {
  std::vector<FeatureSequence> out;
  for (const auto& s : train) {
    for (auto& copy : augment(s, max_shifts, shift_step)) {
      if (manifest.split_of(copy.base_id()) != Split::train) {
        throw ContractError("augmented copy " + copy.sample_id +
                            " does not belong to the training split");
      }
      out.push_back(std::move(copy));
    }
  }
  return out;
}

// --- file I/O -----------------------------------------------------------

std::filesystem::path manifest_path(const std::filesystem::path& path) {
  auto p = path;
  p += ".manifest.json";
  return p;
}

std::string sample_to_json_line(const FeatureSequence& s) {
  std::string out;
  out += "{\"sample_id\":" + ojson(s.sample_id).dump();
  out += ",\"label\":" + std::to_string(s.label);
  out += ",\"event_frame\":" + std::to_string(s.event_frame);
  out += ",\"fps\":" + std::to_string(s.fps);
  out += ",\"history_margin\":" + std::to_string(s.history_margin);
  out += ",\"modalities\":{";
  for (std::size_t m = 0; m < s.modalities.size(); ++m) {
    const auto& mod = s.modalities[m];
    if (m) out += ',';
    out += ojson(mod.name).dump() + ":[";
    const std::size_t rows = mod.track.rows(), cols = mod.track.cols();
    for (std::size_t r = 0; r < rows; ++r) {
      if (r) out += ',';
      out += '[';
      for (std::size_t c = 0; c < cols; ++c) {
        if (c) out += ',';
        out += format_exact(mod.track.at(r, c));
      }
      out += ']';
    }
    out += ']';
  }
  out += "}}";
  return out;
}

FeatureSequence sample_from_json_line(const std::string& line, std::size_t line_no) {
  const std::string where = "line " + std::to_string(line_no) + ": ";
  ojson j;
  try {
    j = ojson::parse(line);
  } catch (const ojson::parse_error& e) {
    throw ParseError(where + e.what());
  }
  try {
    FeatureSequence s;
    s.sample_id = j.at("sample_id").get<std::string>();
    s.label = j.at("label").get<int>();
    s.event_frame = j.at("event_frame").get<std::size_t>();
    s.fps = j.at("fps").get<int>();
    s.history_margin = j.at("history_margin").get<std::size_t>();
    for (const auto& [name, rows] : j.at("modalities").items()) {
      if (!rows.is_array() || rows.empty() || !rows.front().is_array() ||
          rows.front().empty()) {
        throw ParseError(where + "modality " + name + " is not a non-empty matrix");
      }
      const std::size_t cols = rows.front().size();
      std::vector<double> flat;
      flat.reserve(rows.size() * cols);
      for (const auto& row : rows) {
        if (!row.is_array() || row.size() != cols) {
          throw ParseError(where + "modality " + name + " has ragged rows");
        }
        for (const auto& v : row) flat.push_back(v.get<double>());
      }
      s.modalities.push_back({name, Tensor::from({rows.size(), cols}, std::move(flat))});
    }
    s.validate();
    return s;
  } catch (const ojson::exception& e) {
    throw ParseError(where + e.what());
  } catch (const ContractError& e) {
    throw ParseError(where + e.what());
  }
}

namespace {

ojson manifest_to_json(const DatasetManifest& m) {
  const auto& g = m.generator;
  ojson j;
  j["format_version"] = m.format_version;
  j["seed"] = m.seed;
  j["generator"] = {{"window_frames", g.window_frames},
                    {"max_margin", g.max_margin},
                    {"event_offset_frames", g.event_offset_frames},
                    {"fps", g.fps},
                    {"balance", g.balance},
                    {"context_width", g.context_width},
                    {"pose_width", g.pose_width},
                    {"evidence_ramp_frames", g.evidence_ramp_frames},
                    {"train_fraction", g.train_fraction},
                    {"val_fraction", g.val_fraction},
                    {"test_fraction", g.test_fraction}};
  j["n_pos"] = m.n_pos;
  j["n_neg"] = m.n_neg;
  j["splits"] = {{"train", m.train_ids}, {"val", m.val_ids}, {"test", m.test_ids}};
  return j;
}

DatasetManifest manifest_from_json(const ojson& j) {
  DatasetManifest m;
  m.format_version = j.at("format_version").get<int>();
  if (m.format_version != kDatasetFormatVersion) {
    throw VersionError("dataset format version " + std::to_string(m.format_version) +
                       " is not supported (expected " + std::to_string(kDatasetFormatVersion) +
                       ")");
  }
  m.seed = j.at("seed").get<std::uint64_t>();
  const auto& g = j.at("generator");
  m.generator.window_frames = g.at("window_frames").get<std::size_t>();
  m.generator.max_margin = g.at("max_margin").get<std::size_t>();
  m.generator.event_offset_frames = g.at("event_offset_frames").get<std::size_t>();
  m.generator.fps = g.at("fps").get<int>();
  m.generator.balance = g.at("balance").get<double>();
  m.generator.context_width = g.at("context_width").get<std::size_t>();
  m.generator.pose_width = g.at("pose_width").get<std::size_t>();
  m.generator.evidence_ramp_frames = g.at("evidence_ramp_frames").get<double>();
  m.generator.train_fraction = g.at("train_fraction").get<double>();
  m.generator.val_fraction = g.at("val_fraction").get<double>();
  m.generator.test_fraction = g.at("test_fraction").get<double>();
  m.n_pos = j.at("n_pos").get<std::size_t>();
  m.n_neg = j.at("n_neg").get<std::size_t>();
  const auto& sp = j.at("splits");
  m.train_ids = sp.at("train").get<std::vector<std::string>>();
  m.val_ids = sp.at("val").get<std::vector<std::string>>();
  m.test_ids = sp.at("test").get<std::vector<std::string>>();
  return m;
}

}  // namespace

void save_dataset(const std::filesystem::path& path, const Dataset& dataset) {
  {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write dataset " + path.string());
    for (const auto& s : dataset.samples) os << sample_to_json_line(s) << '\n';
    if (!os) throw IoError("failed writing dataset " + path.string());
  }
  const auto mpath = manifest_path(path);
  std::ofstream ms(mpath, std::ios::binary);
  if (!ms) throw IoError("cannot write manifest " + mpath.string());
  ms << manifest_to_json(dataset.manifest).dump(2) << '\n';
  if (!ms) throw IoError("failed writing manifest " + mpath.string());
}

Dataset load_dataset(const std::filesystem::path& path) {
  Dataset ds;
  const auto mpath = manifest_path(path);
  {
    std::ifstream ms(mpath, std::ios::binary);
    if (!ms) throw IoError("cannot read manifest " + mpath.string());
    ojson j;
    try {
      j = ojson::parse(ms);
    } catch (const ojson::parse_error& e) {
      throw ParseError(mpath.string() + ": " + e.what());
    }
    try {
      ds.manifest = manifest_from_json(j);
    } catch (const ojson::exception& e) {
      throw ParseError(mpath.string() + ": " + e.what());
    }
  }
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read dataset " + path.string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      ds.samples.push_back(sample_from_json_line(line, line_no));
    } catch (const ParseError& e) {
      throw ParseError(path.string() + ": " + e.what());
    }
  }
  const std::size_t expected = ds.manifest.n_pos + ds.manifest.n_neg;
  if (ds.samples.size() != expected) {
    throw ParseError(path.string() + ": line " + std::to_string(line_no + 1) + ": expected " +
                     std::to_string(expected) + " samples, found " +
                     std::to_string(ds.samples.size()));
  }
  return ds;
}

}  // namespace tamformer
