#include "tamformer/model.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include "tamformer/errors.hpp"

namespace tamformer {

using nlohmann::json;

// --- config -------------------------------------------------------------

ModelConfig ModelConfig::desk() {
  ModelConfig c;
  c.modality_names = {"local_context", "bbox", "pose", "speed"};
  c.raw_widths = {16, 4, 12, 1};
  c.modality_widths = {4, 2, 3, 1};
  c.t_enc = 12;
  c.query_stride = 3;
  c.d_model = 8;
  c.heads = 2;
  c.ff_dim = 16;
  c.depth = 1;
  c.mask_hidden = {8, 4, 2};
  return c;
}

ModelConfig ModelConfig::paper() {
  ModelConfig c = desk();
  c.modality_widths = {16, 4, 12, 1};
  c.t_enc = 135;
  c.d_model = 48;
  c.heads = 6;
  c.ff_dim = 1024;
  c.mask_hidden = {128, 64, 32};
  return c;
}

std::size_t ModelConfig::d_cat() const {
  std::size_t s = 0;
  for (auto w : modality_widths) s += w;
  return s;
}

std::vector<std::size_t> ModelConfig::query_frames() const {
  std::vector<std::size_t> f;
  for (std::size_t q = 1; q <= t_query(); ++q) f.push_back(q * query_stride - 1);
  return f;
}

void ModelConfig::validate() const {
  if (modality_names.empty()) throw ContractError("model config: no modalities");
  if (raw_widths.size() != modality_names.size() ||
      modality_widths.size() != modality_names.size()) {
    throw ContractError("model config: modality names and widths disagree in count");
  }
  for (std::size_t m = 0; m < modalities(); ++m) {
    if (raw_widths[m] == 0 || modality_widths[m] == 0) {
      throw ContractError("model config: widths must be positive");
    }
  }
  if (query_stride < 1) throw ContractError("model config: query_stride must be >= 1");
  if (t_enc < query_stride) {
    throw ContractError("model config: t_enc " + std::to_string(t_enc) +
                        " is shorter than query_stride " + std::to_string(query_stride));
  }
  if (heads == 0 || d_model % heads != 0) {
    throw ContractError("model config: d_model must be divisible by heads");
  }
  if (ff_dim == 0 || depth == 0 || head_hidden == 0) {
    throw ContractError("model config: ff_dim, depth and head_hidden must be positive");
  }
  if (d_cat() < 3) throw ContractError("model config: concatenated width must be >= 3");
  if (!(mask_eps > 0.0) || !(ln_eps > 0.0)) throw ContractError("model config: eps must be > 0");
}

void to_json(json& j, const ModelConfig& c) {
  j = json{{"modality_names", c.modality_names},
           {"raw_widths", c.raw_widths},
           {"modality_widths", c.modality_widths},
           {"t_enc", c.t_enc},
           {"query_stride", c.query_stride},
           {"d_model", c.d_model},
           {"heads", c.heads},
           {"ff_dim", c.ff_dim},
           {"depth", c.depth},
           {"mask_hidden", c.mask_hidden},
           {"head_hidden", c.head_hidden},
           {"mask_eps", c.mask_eps},
           {"ln_eps", c.ln_eps}};
}

// Missing keys keep their current values, so partial override files work.
void from_json(const json& j, ModelConfig& c) {
  auto opt = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  opt("modality_names", c.modality_names);
  opt("raw_widths", c.raw_widths);
  opt("modality_widths", c.modality_widths);
  opt("t_enc", c.t_enc);
  opt("query_stride", c.query_stride);
  opt("d_model", c.d_model);
  opt("heads", c.heads);
  opt("ff_dim", c.ff_dim);
  opt("depth", c.depth);
  opt("mask_hidden", c.mask_hidden);
  opt("head_hidden", c.head_hidden);
  opt("mask_eps", c.mask_eps);
  opt("ln_eps", c.ln_eps);
}

bool operator==(const ModelConfig& a, const ModelConfig& b) {
  return json(a) == json(b);
}

// --- parameters ---------------------------------------------------------

namespace {

template <class Params, class F>
void visit_tensors(Params& p, F&& f) {
  for (std::size_t m = 0; m < p.input_shift.size(); ++m) {
    f(p.input_shift[m]);
    f(p.input_scale[m]);
  }
  for (std::size_t m = 0; m < p.proj_w.size(); ++m) {
    f(p.proj_w[m]);
    f(p.proj_b[m]);
  }
  auto block = [&](auto& b) {
    for (auto* t : {&b.wq, &b.wk, &b.wv, &b.wo, &b.ln1_gain, &b.ln1_bias, &b.ln2_gain,
                    &b.ln2_bias, &b.ff_w1, &b.ff_b1, &b.ff_w2, &b.ff_b2})
      if (t->defined()) f(*t);
  };
  for (auto& layers : p.encoders)
    for (auto& b : layers) block(b);
  for (auto& b : p.query_blocks) block(b);
  for (auto& b : p.decoder_blocks) block(b);
  f(p.out_norm_gain);
  f(p.out_norm_bias);
  for (auto* s : {&p.enc_mask, &p.dec_mask})
    for (std::size_t l = 0; l < s->weights.size(); ++l) {
      f(s->weights[l]);
      f(s->biases[l]);
    }
  f(p.head_w1);
  f(p.head_b1);
  f(p.head_w2);
  f(p.head_b2);
}

constexpr double kHeadInitScale = 0.1;

std::size_t block_count(std::size_t width, std::size_t d_model, std::size_t ff) {
  const std::size_t norms = width >= 3 ? 4 * width : 0;
  return 4 * width * d_model + norms + width * ff + ff + ff * width + width;
}

std::size_t scorer_count(std::size_t d_cat, const std::vector<std::size_t>& hidden) {
  std::size_t prev = 2 * d_cat, n = 0;
  for (auto h : hidden) {
    n += prev * h + h;
    prev = h;
  }
  return n + prev + 1;
}

}  // namespace

TamformerParams TamformerParams::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(splitmix64(seed));
  TamformerParams p;
  const std::size_t dc = config.d_cat();
  for (std::size_t m = 0; m < config.modalities(); ++m) {
    p.input_shift.push_back(Tensor::zeros({config.raw_widths[m]}));
    p.input_scale.push_back(Tensor::full({config.raw_widths[m]}, 1.0));
    p.proj_w.push_back(glorot_uniform(config.raw_widths[m], config.modality_widths[m], rng));
    p.proj_b.push_back(Tensor::zeros({config.modality_widths[m]}, true));
  }
  for (std::size_t m = 0; m < config.modalities(); ++m) {
    std::vector<AttentionBlockParams> layers;
    for (std::size_t l = 0; l < config.depth; ++l)
      layers.push_back(AttentionBlockParams::init(config.modality_widths[m], config.d_model,
                                                  config.heads, config.ff_dim, rng));
    p.encoders.push_back(std::move(layers));
  }
  for (std::size_t l = 0; l < config.depth; ++l)
    p.query_blocks.push_back(
        AttentionBlockParams::init(dc, config.d_model, config.heads, config.ff_dim, rng));
  for (std::size_t l = 0; l < config.depth; ++l)
    p.decoder_blocks.push_back(
        AttentionBlockParams::init(dc, config.d_model, config.heads, config.ff_dim, rng));
  p.out_norm_gain = Tensor::full({dc}, 1.0, true);
  p.out_norm_bias = Tensor::zeros({dc}, true);
  p.enc_mask = MaskScorerParams::init(dc, config.mask_hidden, rng);
  p.dec_mask = MaskScorerParams::init(dc, config.mask_hidden, rng);
  p.head_w1 = glorot_uniform(dc, config.head_hidden, rng);
  p.head_b1 = Tensor::zeros({config.head_hidden}, true);
  // Small output layer so untrained scores start near 0.5.
  p.head_w2 = scale(glorot_uniform(config.head_hidden, 1, rng), kHeadInitScale).clone(true);
  p.head_b2 = Tensor::zeros({1}, true);
  return p;
}

std::size_t expected_parameter_count(const ModelConfig& config) {
  config.validate();
  const std::size_t dc = config.d_cat();
  std::size_t n = 0;
  for (std::size_t m = 0; m < config.modalities(); ++m) {
    n += config.raw_widths[m] * config.modality_widths[m] + config.modality_widths[m];
    n += config.depth * block_count(config.modality_widths[m], config.d_model, config.ff_dim);
  }
  n += 2 * config.depth * block_count(dc, config.d_model, config.ff_dim);
  n += 2 * dc;
  n += 2 * scorer_count(dc, config.mask_hidden);
  n += dc * config.head_hidden + config.head_hidden + config.head_hidden + 1;
  return n;
}

std::vector<NamedTensor> TamformerParams::named_tensors() const {
  std::vector<NamedTensor> out;
  for (std::size_t m = 0; m < input_shift.size(); ++m) {
    out.push_back({"input.m" + std::to_string(m) + ".shift", input_shift[m]});
    out.push_back({"input.m" + std::to_string(m) + ".scale", input_scale[m]});
  }
  auto rest = named_parameters();
  out.insert(out.end(), rest.begin(), rest.end());
  return out;
}

std::vector<NamedTensor> TamformerParams::named_parameters() const {
  std::vector<NamedTensor> out;
  for (std::size_t m = 0; m < proj_w.size(); ++m) {
    out.push_back({"proj.m" + std::to_string(m) + ".w", proj_w[m]});
    out.push_back({"proj.m" + std::to_string(m) + ".b", proj_b[m]});
  }
  for (std::size_t m = 0; m < encoders.size(); ++m)
    for (std::size_t l = 0; l < encoders[m].size(); ++l)
      encoders[m][l].append_named("enc.m" + std::to_string(m) + ".l" + std::to_string(l), out);
  for (std::size_t l = 0; l < query_blocks.size(); ++l)
    query_blocks[l].append_named("query.l" + std::to_string(l), out);
  for (std::size_t l = 0; l < decoder_blocks.size(); ++l)
    decoder_blocks[l].append_named("dec.l" + std::to_string(l), out);
  out.push_back({"out_norm.gain", out_norm_gain});
  out.push_back({"out_norm.bias", out_norm_bias});
  enc_mask.append_named("mask_e", out);
  dec_mask.append_named("mask_d", out);
  out.push_back({"head.w1", head_w1});
  out.push_back({"head.b1", head_b1});
  out.push_back({"head.w2", head_w2});
  out.push_back({"head.b2", head_b2});
  return out;
}

std::vector<Tensor> TamformerParams::parameters() const {
  std::vector<Tensor> out;
  for (auto& nt : named_parameters()) out.push_back(nt.tensor);
  return out;
}

std::size_t TamformerParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& nt : named_parameters()) n += nt.tensor.numel();
  return n;
}

void TamformerParams::fit_input_standardization(const ModelConfig& config,
                                                const std::vector<FeatureSequence>& samples) {
  if (samples.empty()) throw ContractError("fit_input_standardization: no samples");
  for (std::size_t m = 0; m < config.modalities(); ++m) {
    const std::size_t w = config.raw_widths[m];
    std::vector<double> sum(w, 0.0), sq(w, 0.0);
    double count = 0.0;
    for (const auto& s : samples) {
      const auto window = encoding_window(s, config);
      const Tensor& x = window[m];
      for (std::size_t r = 0; r < x.rows(); ++r)
        for (std::size_t c = 0; c < w; ++c) {
          sum[c] += x.at(r, c);
          sq[c] += x.at(r, c) * x.at(r, c);
        }
      count += static_cast<double>(x.rows());
    }
    auto shift = input_shift[m].mutable_values();
    auto scale = input_scale[m].mutable_values();
    for (std::size_t c = 0; c < w; ++c) {
      const double mu = sum[c] / count;
      const double var = std::max(sq[c] / count - mu * mu, 0.0);
      shift[c] = mu;
      scale[c] = var > 1e-12 ? 1.0 / std::sqrt(var) : 1.0;
    }
  }
}

TamformerParams TamformerParams::deep_copy() const {
  TamformerParams copy = *this;
  visit_tensors(copy, [](Tensor& t) { t = t.clone(t.requires_grad()); });
  return copy;
}

// --- forward ------------------------------------------------------------

std::vector<double> PredictionTimeline::probabilities() const {
  return {scores.values().begin(), scores.values().end()};
}

std::size_t window_start(const FeatureSequence& sample, const ModelConfig& config) {
  if (sample.frames() < config.t_enc) {
    throw ContractError("sample " + sample.sample_id + " has " + std::to_string(sample.frames()) +
                        " frames, fewer than t_enc " + std::to_string(config.t_enc));
  }
  return sample.frames() - config.t_enc;
}

std::vector<Tensor> encoding_window(const FeatureSequence& sample, const ModelConfig& config) {
  if (sample.modalities.size() != config.modalities()) {
    throw ContractError("sample " + sample.sample_id + " has " +
                        std::to_string(sample.modalities.size()) + " modalities, model expects " +
                        std::to_string(config.modalities()));
  }
  const std::size_t start = window_start(sample, config);
  std::vector<Tensor> out;
  for (std::size_t m = 0; m < config.modalities(); ++m) {
    const auto& mod = sample.modalities[m];
    if (mod.name != config.modality_names[m] || mod.track.cols() != config.raw_widths[m]) {
      throw ContractError("sample " + sample.sample_id + ": modality " + mod.name + " " +
                          shape_str(mod.track.shape()) + " does not match model modality " +
                          config.modality_names[m] + " of width " +
                          std::to_string(config.raw_widths[m]));
    }
    out.push_back(slice_rows(mod.track, start, start + config.t_enc).detach());
  }
  return out;
}

namespace {

// Positional encoding for any width: odd widths take the leading columns of
// the next even table.
Tensor positional_table(std::size_t steps, std::size_t width) {
  if (width % 2 == 0) return positional_encoding(steps, width);
  return slice_cols(positional_encoding(steps, width + 1), 0, width);
}

}  // namespace

std::vector<Tensor> project_inputs(const TamformerParams& params, const ModelConfig& config,
                                   const std::vector<Tensor>& raw) {
  if (raw.size() != config.modalities()) {
    throw ContractError("expected " + std::to_string(config.modalities()) + " modalities, got " +
                        std::to_string(raw.size()));
  }
  std::vector<Tensor> x;
  for (std::size_t m = 0; m < raw.size(); ++m) {
    if (raw[m].rank() != 2 || raw[m].rows() != config.t_enc ||
        raw[m].cols() != config.raw_widths[m]) {
      throw ContractError("modality " + std::to_string(m) + " input " +
                          shape_str(raw[m].shape()) + " does not match [" +
                          std::to_string(config.t_enc) + "x" +
                          std::to_string(config.raw_widths[m]) + "]");
    }
    const Tensor z =
        mul(add(raw[m], scale(params.input_shift[m], -1.0)), params.input_scale[m]);
    x.push_back(add(matmul(z, params.proj_w[m]), params.proj_b[m]));
  }
  return x;
}

Tensor encode(const TamformerParams& params, const ModelConfig& config,
              const std::vector<Tensor>& x, const LearnedMask& mask_e,
              std::vector<Tensor>* attention) {
  if (x.size() != config.modalities()) {
    throw ContractError("encode: expected " + std::to_string(config.modalities()) +
                        " modalities, got " + std::to_string(x.size()));
  }
  if (mask_e.target_steps() != config.t_enc || mask_e.source_steps() != config.t_enc ||
      mask_e.grid_map != identity_grid(config.t_enc)) {
    throw ContractError("encode: encoder mask must be a causal " + std::to_string(config.t_enc) +
                        "x" + std::to_string(config.t_enc) + " mask with identity grid");
  }
  const Tensor bias = mask_to_bias(mask_e, config.mask_eps);
  std::vector<Tensor> z;
  for (std::size_t m = 0; m < x.size(); ++m) {
    if (x[m].rank() != 2 || x[m].rows() != config.t_enc ||
        x[m].cols() != config.modality_widths[m]) {
      throw ContractError("encode: modality " + std::to_string(m) + " has " +
                          shape_str(x[m].shape()) + ", expected width " +
                          std::to_string(config.modality_widths[m]));
    }
    Tensor h = add(x[m], positional_table(config.t_enc, config.modality_widths[m]));
    for (const auto& block : params.encoders[m])
      h = transformer_block(block, h, h, bias, attention, config.ln_eps);
    z.push_back(h);
  }
  return z.size() == 1 ? z.front() : concat_last_axis(z);
}

QueryBatch build_queries(const TamformerParams& params, const ModelConfig& config,
                         const std::vector<Tensor>& x, std::vector<Tensor>* attention) {
  if (config.t_enc < config.query_stride) {
    throw ContractError("build_queries: t_enc " + std::to_string(config.t_enc) +
                        " is shorter than query_stride " + std::to_string(config.query_stride));
  }
  const Tensor fused = x.size() == 1 ? x.front() : concat_last_axis(x);
  QueryBatch qb;
  qb.query_frames = config.query_frames();
  Tensor h = gather_rows(fused, qb.query_frames);
  const Tensor bias = causal_bias(identity_grid(qb.query_frames.size()), qb.query_frames.size());
  for (const auto& block : params.query_blocks)
    h = transformer_block(block, h, h, bias, attention, config.ln_eps);
  qb.z_q = h;
  return qb;
}

PredictionTimeline forward_window(const TamformerParams& params, const ModelConfig& config,
                                  const std::vector<Tensor>& raw, ForwardTrace* trace) {
  const auto x = project_inputs(params, config, raw);
  const Tensor fused = x.size() == 1 ? x.front() : concat_last_axis(x);
  std::vector<Tensor>* attention = trace ? &trace->attention : nullptr;

  LearnedMask mask_e = predict_mask(params.enc_mask, fused, fused, identity_grid(config.t_enc));
  const Tensor z_e = encode(params, config, x, mask_e, attention);

  QueryBatch qb = build_queries(params, config, x, attention);
  LearnedMask mask_d =
      predict_mask(params.dec_mask, gather_rows(fused, qb.query_frames), fused, qb.query_frames);
  const Tensor dec_bias = mask_to_bias(mask_d, config.mask_eps);
  Tensor dec = qb.z_q;
  for (const auto& block : params.decoder_blocks)
    dec = transformer_block(block, dec, z_e, dec_bias, attention, config.ln_eps);
  // Final norm of the pre-norm stack; keeps z_d (and so L_r) on a fixed scale.
  const Tensor z_d = layer_norm(dec, params.out_norm_gain, params.out_norm_bias, config.ln_eps);

  const Tensor hidden = relu(add(matmul(z_d, params.head_w1), params.head_b1));
  PredictionTimeline tl;
  tl.query_frames = qb.query_frames;
  tl.scores = sigmoid(add(matmul(hidden, params.head_w2), params.head_b2));
  tl.embeddings = z_d;
  if (trace) {
    trace->mask_e = std::move(mask_e);
    trace->mask_d = std::move(mask_d);
  }
  return tl;
}

PredictionTimeline forward(const TamformerParams& params, const ModelConfig& config,
                           const FeatureSequence& sample, ForwardTrace* trace) {
  return forward_window(params, config, encoding_window(sample, config), trace);
}

// --- checkpoints --------------------------------------------------------

std::string checkpoint_to_string(const ModelConfig& config, const TamformerParams& params) {
  std::string out = "{\n\"format_version\": " + std::to_string(kCheckpointFormatVersion) + ",\n";
  out += "\"config\": " + json(config).dump() + ",\n\"tensors\": [\n";
  const auto tensors = params.named_tensors();
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto& t = tensors[i].tensor;
    out += "{\"name\": " + json(tensors[i].name).dump() + ", \"shape\": " + json(t.shape()).dump() +
           ", \"values\": [";
    for (std::size_t k = 0; k < t.numel(); ++k) {
      if (k) out += ',';
      out += format_exact(t[k]);
    }
    out += "]}";
    out += i + 1 < tensors.size() ? ",\n" : "\n";
  }
  out += "]\n}\n";
  return out;
}

Checkpoint checkpoint_from_string(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("checkpoint: ") + e.what());
  }
  try {
    const int version = j.at("format_version").get<int>();
    if (version != kCheckpointFormatVersion) {
      throw VersionError("checkpoint format version " + std::to_string(version) +
                         " is not supported (expected " +
                         std::to_string(kCheckpointFormatVersion) + ")");
    }
    Checkpoint ck;
    ck.config = ModelConfig::desk();
    j.at("config").get_to(ck.config);
    ck.params = TamformerParams::init(ck.config, 0);
    std::map<std::string, const json*> by_name;
    for (const auto& t : j.at("tensors")) by_name[t.at("name").get<std::string>()] = &t;
    for (auto& nt : ck.params.named_tensors()) {
      auto it = by_name.find(nt.name);
      if (it == by_name.end()) throw ParseError("checkpoint: missing tensor " + nt.name);
      const auto shape = it->second->at("shape").get<Shape>();
      if (shape != nt.tensor.shape()) {
        throw ParseError("checkpoint: tensor " + nt.name + " has shape " + shape_str(shape) +
                         ", config implies " + shape_str(nt.tensor.shape()));
      }
      const auto values = it->second->at("values").get<std::vector<double>>();
      if (values.size() != nt.tensor.numel()) {
        throw ParseError("checkpoint: tensor " + nt.name + " has wrong value count");
      }
      auto dst = nt.tensor.mutable_values();
      std::copy(values.begin(), values.end(), dst.begin());
      by_name.erase(it);
    }
    if (!by_name.empty()) throw ParseError("checkpoint: unexpected tensor " + by_name.begin()->first);
    return ck;
  } catch (const json::exception& e) {
    throw ParseError(std::string("checkpoint: ") + e.what());
  } catch (const ContractError& e) {
    throw ParseError(std::string("checkpoint: ") + e.what());
  }
}

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config,
                     const TamformerParams& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write checkpoint " + path.string());
  os << checkpoint_to_string(config, params);
  if (!os) throw IoError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read checkpoint " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  try {
    return checkpoint_from_string(ss.str());
  } catch (const VersionError&) {
    throw;
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

}  // namespace tamformer
