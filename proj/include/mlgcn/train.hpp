#pragma once

// Adam, the two-phase training loop (random-negative warm-up, then the
// configured negatives), finite-difference gradient checking and checkpoints.

#include <charconv>
#include <cmath>
#include <cstdio>
#include <functional>
#include <istream>
#include <iterator>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mlgcn/common.hpp"
#include "mlgcn/model.hpp"
#include "mlgcn/sampling.hpp"

namespace mlgcn {

struct AdamHyper {
  double alpha = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  AdamHyper hyper;
  std::uint64_t step = 0;
  ModelParams<T> m;
  ModelParams<T> v;
  std::vector<std::uint64_t> row_step;  // step at which each embedding row was last updated

  static AdamState fresh(const ModelShape& shape, AdamHyper hyper = {}) {
    AdamState s;
    s.hyper = hyper;
    s.m = ModelParams<T>::zeros(shape);
    s.v = ModelParams<T>::zeros(shape);
    s.row_step.assign(shape.vocab_size, 0);
    return s;
  }
};

// Bias-corrected Adam. Embedding rows absent from the gradient are left alone;
// their moments catch up on the decay they missed the next time they are
// touched.
template <typename T>
void adam_step(ModelParams<T>& params, const Gradients<T>& grads, AdamState<T>& state) {
  if (!(params.shape == grads.shape) || !(params.shape == state.m.shape)) {
    throw Error("adam_step: shape mismatch");
  }
  grads.check_finite();
  const AdamHyper& h = state.hyper;
  const std::uint64_t t = ++state.step;
  const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(t));

  auto update = [&](T& theta, T& m, T& v, double g) {
    const double mm = h.beta1 * static_cast<double>(m) + (1.0 - h.beta1) * g;
    const double vv = h.beta2 * static_cast<double>(v) + (1.0 - h.beta2) * g * g;
    m = static_cast<T>(mm);
    v = static_cast<T>(vv);
    const double m_hat = mm / bc1;
    const double v_hat = vv / bc2;
    theta = static_cast<T>(static_cast<double>(theta) - h.alpha * m_hat / (std::sqrt(v_hat) + h.eps));
  };
  auto dense = [&](std::vector<T>& theta, std::vector<T>& m, std::vector<T>& v, const std::vector<T>& g) {
    for (std::size_t i = 0; i < theta.size(); ++i) update(theta[i], m[i], v[i], static_cast<double>(g[i]));
  };
  dense(params.encoder_weight.data, state.m.encoder_weight.data, state.v.encoder_weight.data,
        grads.encoder_weight.data);
  dense(params.encoder_bias, state.m.encoder_bias, state.v.encoder_bias, grads.encoder_bias);
  dense(params.neighbor_weight.data, state.m.neighbor_weight.data, state.v.neighbor_weight.data,
        grads.neighbor_weight.data);
  dense(params.neighbor_bias, state.m.neighbor_bias, state.v.neighbor_bias, grads.neighbor_bias);
  dense(params.fusion_weight.data, state.m.fusion_weight.data, state.v.fusion_weight.data,
        grads.fusion_weight.data);
  dense(params.fusion_bias, state.m.fusion_bias, state.v.fusion_bias, grads.fusion_bias);

  for (const auto& [row, g] : grads.token_embeddings) {
    const std::uint64_t missed = t - state.row_step[row] - 1;
    auto theta = params.token_embeddings.row(row);
    auto m = state.m.token_embeddings.row(row);
    auto v = state.v.token_embeddings.row(row);
    if (missed > 0) {
      const double d1 = std::pow(h.beta1, static_cast<double>(missed));
      const double d2 = std::pow(h.beta2, static_cast<double>(missed));
      for (std::size_t i = 0; i < m.size(); ++i) {
        m[i] = static_cast<T>(static_cast<double>(m[i]) * d1);
        v[i] = static_cast<T>(static_cast<double>(v[i]) * d2);
      }
    }
    for (std::size_t i = 0; i < theta.size(); ++i) update(theta[i], m[i], v[i], static_cast<double>(g[i]));
    state.row_step[row] = t;
  }
}

struct TrainConfig {
  std::size_t total_batches = 20000;
  double warmup_fraction = 0.2;
  std::size_t batch_size = 64;
  NegativeMode negative_mode = NegativeMode::kOnline;
  Fusion fusion = Fusion::kWeightSeparate;
  std::uint64_t seed = 0;
  std::size_t embed_dim = 32;
  std::size_t dim = 32;
  bool gcn = true;
  double smoothing = 0.7;
  bool exclude_self_neighbor = false;
  AdamHyper adam{};
  std::size_t offline_refresh = 5000;
  RankWindow offline_window{};
  std::size_t offline_per_query = 10;
  std::size_t online_pool_size = 0;
  bool online_include_batch_positives = false;
  std::size_t checkpoint_every = 0;
  std::size_t threads = 1;

  std::size_t warmup_batches() const {
    if (!(warmup_fraction >= 0.0 && warmup_fraction <= 1.0)) throw Error("warmup fraction must lie in [0, 1]");
    const double w = warmup_fraction * static_cast<double>(total_batches);
    return static_cast<std::size_t>(std::floor(w + 1e-9 * std::max(1.0, w)));
  }

  // Everything that influences the trained parameters. Thread count and
  // checkpoint cadence are excluded so they cannot change artifact bytes.
  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["total_batches"] = total_batches;
    j["warmup_fraction"] = warmup_fraction;
    j["batch_size"] = batch_size;
    j["neg_mode"] = negative_mode_name(negative_mode);
    j["fusion"] = fusion_name(fusion);
    j["seed"] = seed;
    j["embed_dim"] = embed_dim;
    j["dim"] = dim;
    j["gcn"] = gcn;
    j["smoothing"] = smoothing;
    j["exclude_self_neighbor"] = exclude_self_neighbor;
    j["lr"] = adam.alpha;
    j["beta1"] = adam.beta1;
    j["beta2"] = adam.beta2;
    j["eps"] = adam.eps;
    j["offline_refresh"] = offline_refresh;
    j["offline_window"] = {offline_window.lo, offline_window.hi};
    j["offline_per_query"] = offline_per_query;
    j["online_pool_size"] = online_pool_size;
    j["online_include_batch_positives"] = online_include_batch_positives;
    return j;
  }
};

namespace detail {

template <typename T>
T parse_number(std::string_view key, std::string_view v) {
  T out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw Error("invalid value '" + std::string(v) + "' for " + std::string(key));
  }
  return out;
}

inline bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw Error("invalid value '" + std::string(v) + "' for " + std::string(key));
}

}  // namespace detail

// Keys that configure training, spelled like the command-line flags without
// the leading dashes. Returns false for a key that is not a training key.
inline bool apply_train_override(TrainConfig& c, std::string_view key, std::string_view v) {
  using detail::parse_bool;
  using detail::parse_number;
  if (key == "neg-mode") c.negative_mode = parse_negative_mode(v);
  else if (key == "fusion") c.fusion = parse_fusion(v);
  else if (key == "smoothing") c.smoothing = parse_number<double>(key, v);
  else if (key == "warmup-frac") c.warmup_fraction = parse_number<double>(key, v);
  else if (key == "batch-size") c.batch_size = parse_number<std::size_t>(key, v);
  else if (key == "dim") c.dim = parse_number<std::size_t>(key, v);
  else if (key == "embed-dim") c.embed_dim = parse_number<std::size_t>(key, v);
  else if (key == "total-batches") c.total_batches = parse_number<std::size_t>(key, v);
  else if (key == "gcn") c.gcn = parse_bool(key, v);
  else if (key == "exclude-self-neighbor") c.exclude_self_neighbor = parse_bool(key, v);
  else if (key == "lr") c.adam.alpha = parse_number<double>(key, v);
  else if (key == "seed") c.seed = parse_number<std::uint64_t>(key, v);
  else if (key == "offline-refresh") c.offline_refresh = parse_number<std::size_t>(key, v);
  else if (key == "offline-window-lo") c.offline_window.lo = parse_number<std::size_t>(key, v);
  else if (key == "offline-window-hi") c.offline_window.hi = parse_number<std::size_t>(key, v);
  else if (key == "offline-per-query") c.offline_per_query = parse_number<std::size_t>(key, v);
  else if (key == "online-pool") c.online_pool_size = parse_number<std::size_t>(key, v);
  else if (key == "online-batch-positives") c.online_include_batch_positives = parse_bool(key, v);
  else return false;
  return true;
}

struct TraceRow {
  std::size_t batch = 0;
  std::string language;
  NegativeMode mode = NegativeMode::kRandom;
  float loss = 0.0f;
};

// `batch \t language \t mode \t loss`, with a header line.
inline void write_trace(const std::vector<TraceRow>& trace, std::ostream& out) {
  out << "batch\tlanguage\tmode\tloss\n";
  char buf[64];
  for (const auto& r : trace) {
    std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(r.loss));
    out << r.batch << '\t' << r.language << '\t' << negative_mode_name(r.mode) << '\t' << buf << '\n';
  }
}

inline std::vector<TraceRow> read_trace(std::istream& in) {
  std::vector<TraceRow> out;
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (header) {
      header = false;
      continue;
    }
    const auto f = split_fields(strip_cr(line), '\t');
    if (f.size() != 4) throw Error("malformed loss trace line");
    TraceRow r;
    r.batch = std::stoull(std::string(f[0]));
    r.language = std::string(f[1]);
    r.mode = parse_negative_mode(f[2]);
    r.loss = std::stof(std::string(f[3]));
    out.push_back(std::move(r));
  }
  return out;
}

struct TrainResult {
  ModelParams<float> params;
  std::vector<TraceRow> trace;
  std::size_t offline_refreshes = 0;
};

using CheckpointHook = std::function<void(std::size_t batches_done, const ModelParams<float>&)>;

inline TrainResult train(const TrainConfig& config, const TrainingCorpus& corpus, std::size_t vocab_size,
                         const CheckpointHook& on_checkpoint = {}) {
  if (config.batch_size < 1) throw Error("batch size must be >= 1");
  ModelShape shape{vocab_size, config.embed_dim, config.dim, config.gcn};
  TrainResult result;
  result.params = ModelParams<float>::init(shape, config.seed);
  AdamState<float> adam = AdamState<float>::fresh(shape, config.adam);

  const double S = config.fusion == Fusion::kUnweightSeparate ? 1.0 : config.smoothing;
  SamplerOptions so;
  so.batch_size = config.batch_size;
  so.fusion = config.fusion;
  so.exclude_self_neighbor = config.exclude_self_neighbor;
  so.online_pool_size = config.online_pool_size;
  so.online_include_batch_positives = config.online_include_batch_positives;
  so.offline_window = config.offline_window;
  so.offline_per_query = config.offline_per_query;
  so.threads = config.threads;
  // Sampler stream is derived from, but distinct from, the init stream.
  Sampler sampler(corpus, make_schedule(corpus, S), so, config.seed ^ 0x9e3779b97f4a7c15ULL);

  const std::size_t warmup = config.warmup_batches();
  const std::size_t refresh = std::max<std::size_t>(1, config.offline_refresh);
  result.trace.reserve(config.total_batches);
  for (std::size_t i = 0; i < config.total_batches; ++i) {
    const NegativeMode mode = i < warmup ? NegativeMode::kRandom : config.negative_mode;
    if (mode == NegativeMode::kOffline && (i - warmup) % refresh == 0) sampler.refresh_offline(result.params);
    const TripletBatch batch = sampler.next_batch(mode, &result.params);
    auto lg = loss_and_grads(batch, result.params, config.threads);
    if (!std::isfinite(lg.loss)) throw Error("non-finite loss at batch " + std::to_string(i));
    adam_step(result.params, lg.grads, adam);
    result.trace.push_back({i, batch.language, mode, lg.loss});
    if (on_checkpoint && config.checkpoint_every && (i + 1) % config.checkpoint_every == 0 &&
        i + 1 < config.total_batches) {
      on_checkpoint(i + 1, result.params);
    }
  }
  result.offline_refreshes = sampler.refresh_count();
  return result;
}

// ---------------------------------------------------------------------------
// Gradient checking

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  std::array<std::size_t, kTensorCount> per_tensor{};
};

// Relative error floor: entries whose true gradient is below this are
// compared in absolute terms, since central differences cannot resolve them.
inline constexpr double kGradCheckFloor = 1e-6;

template <typename Analytic>
GradCheckResult grad_check_against(const ModelParams<double>& params, const TripletBatch& batch, double h,
                                   const Analytic& analytic, std::size_t coordinates = 210,
                                   std::uint64_t seed = 0) {
  if (min_abs_preactivation(batch, params) < 10.0 * h) throw Error("kink-adjacent evaluation");
  std::set<TokenId> touched;
  for (const auto& t : batch.triplets) {
    touched.insert(t.query.begin(), t.query.end());
    for (const ProductRef* r : {&t.positive, &t.negative}) {
      touched.insert(r->description.begin(), r->description.end());
      for (const auto& n : r->neighbors) touched.insert(n.begin(), n.end());
    }
  }
  const std::vector<TokenId> rows(touched.begin(), touched.end());
  const std::size_t per = (coordinates + kTensorCount - 1) / kTensorCount;
  const std::size_t de = params.shape.embed_dim;

  Rng rng(seed);
  ModelParams<double> probe = params;
  GradCheckResult out;
  for (std::size_t t = 0; t < kTensorCount; ++t) {
    const std::size_t size = params.tensors()[t].size();
    for (std::size_t k = 0; k < per; ++k) {
      std::size_t flat;
      if (t == 0) {
        if (rows.empty()) break;
        flat = static_cast<std::size_t>(rows[rng.uniform(rows.size())]) * de + rng.uniform(de);
      } else {
        flat = rng.uniform(size);
      }
      const double orig = params.tensors()[t][flat];
      probe.tensors()[t][flat] = orig + h;
      const double up = batch_loss(batch, probe);
      probe.tensors()[t][flat] = orig - h;
      const double down = batch_loss(batch, probe);
      probe.tensors()[t][flat] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic.at(t, flat);
      const double denom = std::max({std::abs(a), std::abs(numeric), kGradCheckFloor});
      out.max_rel_error = std::max(out.max_rel_error, std::abs(a - numeric) / denom);
      ++out.per_tensor[t];
      ++out.coordinates;
    }
  }
  return out;
}

// Central differences on >= `coordinates` sampled entries spanning all seven
// tensors, against loss_and_grads.
inline GradCheckResult grad_check(const ModelParams<double>& params, const TripletBatch& batch, double h,
                                  std::size_t coordinates = 210, std::uint64_t seed = 0) {
  const auto lg = loss_and_grads(batch, params);
  return grad_check_against(params, batch, h, lg.grads, coordinates, seed);
}

struct GradCheckFixture {
  ModelParams<double> params;
  TripletBatch batch;
};

// Small random model (V=20, d_e=d=4, B=3) with unit-scale parameters. Draws
// are repeated until every ReLU pre-activation is at least `margin` away from
// zero and every tensor receives a nonzero gradient.
inline GradCheckFixture make_gradcheck_fixture(std::uint64_t seed = 0, double margin = 0.05) {
  const ModelShape shape{20, 4, 4, true};
  for (std::uint64_t attempt = 0; attempt < 100000; ++attempt) {
    Rng rng(seed * 1000003ULL + attempt);
    GradCheckFixture f;
    f.params = ModelParams<double>::zeros(shape);
    auto tensors = f.params.tensors();
    for (std::size_t t = 0; t < kTensorCount; ++t) {
      const bool bias = t == 2 || t == 4 || t == 6;
      for (double& v : tensors[t]) v = bias ? rng.uniform(-0.5, 0.5) : rng.uniform(-1.0, 1.0);
    }
    auto tokens = [&](std::size_t lo, std::size_t hi) {
      TokenSeq s(lo + rng.uniform(hi - lo + 1));
      for (auto& id : s) id = static_cast<TokenId>(2 + rng.uniform(shape.vocab_size - 2));
      return s;
    };
    auto product = [&] {
      ProductRef r;
      r.description = tokens(1, 4);
      const std::size_t nn = 1 + rng.uniform(3);
      for (std::size_t j = 0; j < nn; ++j) r.neighbors.push_back(tokens(1, 3));
      return r;
    };
    f.batch.language = "xx";
    for (int i = 0; i < 3; ++i) f.batch.triplets.push_back({tokens(1, 3), product(), product()});
    if (min_abs_preactivation(f.batch, f.params) < margin) continue;
    const auto lg = loss_and_grads(f.batch, f.params);
    bool all_nonzero = true;
    for (std::size_t t = 0; t < kTensorCount && all_nonzero; ++t) {
      bool any = false;
      const std::size_t size = t == 0 ? shape.vocab_size * shape.embed_dim : f.params.tensors()[t].size();
      for (std::size_t i = 0; i < size && !any; ++i) any = lg.grads.at(t, i) != 0.0;
      all_nonzero = any;
    }
    if (all_nonzero) return f;
  }
  throw Error("could not draw a kink-free gradient-check fixture");
}

// ---------------------------------------------------------------------------
// Checkpoints: "MLGC1", u32 manifest length, JSON manifest, then the seven
// tensors in declared order as row-major little-endian float32.

inline constexpr std::string_view kCheckpointMagic = "MLGC1";
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  ModelParams<float> params;
  nlohmann::ordered_json manifest;
};

inline nlohmann::ordered_json checkpoint_manifest(const ModelShape& shape, std::uint64_t seed,
                                                  std::uint64_t vocab_hash, const nlohmann::ordered_json& config) {
  nlohmann::ordered_json j;
  j["version"] = kCheckpointVersion;
  j["dims"] = {{"vocab_size", shape.vocab_size}, {"embed_dim", shape.embed_dim}, {"dim", shape.dim}};
  j["gcn"] = shape.gcn;
  j["seed"] = seed;
  j["vocab_hash"] = hex64(vocab_hash);
  j["tensors"] = kTensorNames;
  j["config"] = config;
  return j;
}

inline void save_checkpoint(const ModelParams<float>& params, const nlohmann::ordered_json& manifest,
                            std::ostream& out) {
  params.validate();
  const std::string text = manifest.dump();
  BinaryWriter w(out);
  w.bytes(kCheckpointMagic.data(), kCheckpointMagic.size());
  w.str(text);
  for (auto t : params.tensors()) w.f32s(t);
}

// `expected_vocab_hash` is checked when loading for serving.
inline Checkpoint load_checkpoint(std::istream& in, std::optional<std::uint64_t> expected_vocab_hash = std::nullopt) {
  BinaryReader r(in, "checkpoint file");
  if (!r.magic(kCheckpointMagic)) throw Error("not a checkpoint file");
  Checkpoint c;
  try {
    c.manifest = nlohmann::ordered_json::parse(r.str());
  } catch (const nlohmann::json::exception&) {
    throw Error("checkpoint manifest is not valid JSON");
  }
  try {
    const int version = c.manifest.at("version").get<int>();
    if (version != kCheckpointVersion) throw Error("unsupported checkpoint version " + std::to_string(version));
    const auto& dims = c.manifest.at("dims");
    ModelShape shape{dims.at("vocab_size").get<std::size_t>(), dims.at("embed_dim").get<std::size_t>(),
                     dims.at("dim").get<std::size_t>(), c.manifest.at("gcn").get<bool>()};
    if (expected_vocab_hash && c.manifest.at("vocab_hash").get<std::string>() != hex64(*expected_vocab_hash)) {
      throw Error("vocabulary hash mismatch");
    }
    c.params = ModelParams<float>::zeros(shape);
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("checkpoint manifest incomplete: ") + e.what());
  }
  std::string payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::size_t expected = 0;
  for (auto t : c.params.tensors()) expected += t.size() * 4;
  if (payload.size() != expected) {
    throw Error("dimension mismatch: manifest dims need " + std::to_string(expected) + " tensor bytes, file has " +
                std::to_string(payload.size()));
  }
  std::istringstream ps(payload);
  BinaryReader pr(ps, "checkpoint file");
  for (auto t : c.params.tensors()) pr.f32s(t);
  c.params.validate();
  return c;
}

}  // namespace mlgcn
