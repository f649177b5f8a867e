#pragma once

// Two-tower model: a mean-pool + one-layer feed-forward text encoder shared by
// both towers, a graph-convolution product encoder over neighbor queries, the
// softplus triplet loss, and exact reverse-mode gradients through all of it.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mlgcn/common.hpp"
#include "mlgcn/textcore.hpp"

namespace mlgcn {

struct ModelShape {
  std::size_t vocab_size = 0;
  std::size_t embed_dim = 0;  // token embedding width
  std::size_t dim = 0;        // feature / output width
  bool gcn = true;            // false: product embedding = description feature

  friend bool operator==(const ModelShape&, const ModelShape&) = default;
};

template <typename T>
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, T(0)) {}

  T& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<T> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const T> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  friend bool operator==(const Matrix&, const Matrix&) = default;
};

inline constexpr std::size_t kTensorCount = 7;
inline constexpr std::array<std::string_view, kTensorCount> kTensorNames = {
    "token_embeddings", "encoder_weight", "encoder_bias", "neighbor_weight",
    "neighbor_bias",    "fusion_weight",  "fusion_bias"};

template <typename T>
struct ModelParams {
  ModelShape shape;
  Matrix<T> token_embeddings;  // vocab_size x embed_dim
  Matrix<T> encoder_weight;    // dim x embed_dim
  std::vector<T> encoder_bias;  // dim
  Matrix<T> neighbor_weight;   // dim x dim
  std::vector<T> neighbor_bias;  // dim
  Matrix<T> fusion_weight;     // dim x 2*dim
  std::vector<T> fusion_bias;  // dim

  static ModelParams zeros(const ModelShape& s) {
    if (s.vocab_size < 1 || s.embed_dim < 1 || s.dim < 1) throw Error("model dimensions must be >= 1");
    ModelParams p;
    p.shape = s;
    p.token_embeddings = Matrix<T>(s.vocab_size, s.embed_dim);
    p.encoder_weight = Matrix<T>(s.dim, s.embed_dim);
    p.encoder_bias.assign(s.dim, T(0));
    p.neighbor_weight = Matrix<T>(s.dim, s.dim);
    p.neighbor_bias.assign(s.dim, T(0));
    p.fusion_weight = Matrix<T>(s.dim, 2 * s.dim);
    p.fusion_bias.assign(s.dim, T(0));
    return p;
  }

  // Weights uniform in +-1/sqrt(fan_in), biases zero, embeddings uniform in
  // +-0.05.
  static ModelParams init(const ModelShape& s, std::uint64_t seed) {
    ModelParams p = zeros(s);
    Rng rng(seed);
    for (T& v : p.token_embeddings.data) v = static_cast<T>(rng.uniform(-0.05, 0.05));
    auto fill = [&](Matrix<T>& m) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(m.cols));
      for (T& v : m.data) v = static_cast<T>(rng.uniform(-bound, bound));
    };
    fill(p.encoder_weight);
    fill(p.neighbor_weight);
    fill(p.fusion_weight);
    return p;
  }

  std::array<std::span<T>, kTensorCount> tensors() {
    return {token_embeddings.data, encoder_weight.data, encoder_bias, neighbor_weight.data,
            neighbor_bias,         fusion_weight.data,  fusion_bias};
  }
  std::array<std::span<const T>, kTensorCount> tensors() const {
    return {token_embeddings.data, encoder_weight.data, encoder_bias, neighbor_weight.data,
            neighbor_bias,         fusion_weight.data,  fusion_bias};
  }

  template <typename U>
  ModelParams<U> cast() const {
    ModelParams<U> out = ModelParams<U>::zeros(shape);
    auto src = tensors();
    auto dst = out.tensors();
    for (std::size_t t = 0; t < kTensorCount; ++t) {
      for (std::size_t i = 0; i < src[t].size(); ++i) dst[t][i] = static_cast<U>(src[t][i]);
    }
    return out;
  }

  void validate() const {
    const ModelShape& s = shape;
    if (s.vocab_size < 1 || s.embed_dim < 1 || s.dim < 1) throw Error("model dimensions must be >= 1");
    auto check = [](bool ok) {
      if (!ok) throw Error("dimension mismatch in model parameters");
    };
    check(token_embeddings.rows == s.vocab_size && token_embeddings.cols == s.embed_dim);
    check(encoder_weight.rows == s.dim && encoder_weight.cols == s.embed_dim);
    check(encoder_bias.size() == s.dim);
    check(neighbor_weight.rows == s.dim && neighbor_weight.cols == s.dim);
    check(neighbor_bias.size() == s.dim);
    check(fusion_weight.rows == s.dim && fusion_weight.cols == 2 * s.dim);
    check(fusion_bias.size() == s.dim);
    for (auto t : tensors()) {
      for (T v : t) {
        if (!std::isfinite(static_cast<double>(v))) throw Error("non-finite model parameter");
      }
    }
  }

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

// Dense gradients except for token embeddings, which keep only touched rows.
template <typename T>
struct Gradients {
  ModelShape shape;
  std::map<TokenId, std::vector<T>> token_embeddings;
  Matrix<T> encoder_weight;
  std::vector<T> encoder_bias;
  Matrix<T> neighbor_weight;
  std::vector<T> neighbor_bias;
  Matrix<T> fusion_weight;
  std::vector<T> fusion_bias;

  static Gradients zeros(const ModelShape& s) {
    Gradients g;
    g.shape = s;
    g.encoder_weight = Matrix<T>(s.dim, s.embed_dim);
    g.encoder_bias.assign(s.dim, T(0));
    g.neighbor_weight = Matrix<T>(s.dim, s.dim);
    g.neighbor_bias.assign(s.dim, T(0));
    g.fusion_weight = Matrix<T>(s.dim, 2 * s.dim);
    g.fusion_bias.assign(s.dim, T(0));
    return g;
  }

  std::vector<T>& embedding_row(TokenId id) {
    auto it = token_embeddings.find(id);
    if (it == token_embeddings.end()) {
      it = token_embeddings.emplace(id, std::vector<T>(shape.embed_dim, T(0))).first;
    }
    return it->second;
  }

  void add(const Gradients& o) {
    for (const auto& [id, row] : o.token_embeddings) {
      auto& dst = embedding_row(id);
      for (std::size_t i = 0; i < row.size(); ++i) dst[i] += row[i];
    }
    auto acc = [](std::vector<T>& a, const std::vector<T>& b) {
      for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
    };
    acc(encoder_weight.data, o.encoder_weight.data);
    acc(encoder_bias, o.encoder_bias);
    acc(neighbor_weight.data, o.neighbor_weight.data);
    acc(neighbor_bias, o.neighbor_bias);
    acc(fusion_weight.data, o.fusion_weight.data);
    acc(fusion_bias, o.fusion_bias);
  }

  // Gradient entry for a flat index into tensor `t` (ModelParams::tensors order).
  T at(std::size_t t, std::size_t flat) const {
    switch (t) {
      case 0: {
        auto it = token_embeddings.find(static_cast<TokenId>(flat / shape.embed_dim));
        return it == token_embeddings.end() ? T(0) : it->second[flat % shape.embed_dim];
      }
      case 1: return encoder_weight.data[flat];
      case 2: return encoder_bias[flat];
      case 3: return neighbor_weight.data[flat];
      case 4: return neighbor_bias[flat];
      case 5: return fusion_weight.data[flat];
      case 6: return fusion_bias[flat];
      default: throw Error("tensor index out of range");
    }
  }

  void check_finite() const {
    auto ok = [](std::span<const T> v) {
      return std::all_of(v.begin(), v.end(), [](T x) { return std::isfinite(static_cast<double>(x)); });
    };
    bool good = ok(encoder_weight.data) && ok(encoder_bias) && ok(neighbor_weight.data) &&
                ok(neighbor_bias) && ok(fusion_weight.data) && ok(fusion_bias);
    for (const auto& [_, row] : token_embeddings) good = good && ok(row);
    if (!good) throw Error("non-finite gradient");
  }
};

// A product as seen by the product tower: its description tokens and the
// tokens of its neighbor queries.
struct ProductRef {
  TokenSeq description;
  std::vector<TokenSeq> neighbors;
};

struct Triplet {
  TokenSeq query;
  ProductRef positive;
  ProductRef negative;
};

struct TripletBatch {
  std::string language;  // "*" for mixed-language batches
  std::vector<Triplet> triplets;
};

namespace detail {

template <typename T>
inline void affine(const Matrix<T>& w, std::span<const T> x, std::span<const T> b, std::span<T> out) {
  for (std::size_t r = 0; r < w.rows; ++r) {
    const T* row = w.data.data() + r * w.cols;
    T acc = b[r];
    for (std::size_t c = 0; c < w.cols; ++c) acc += row[c] * x[c];
    out[r] = acc;
  }
}

template <typename T>
inline T relu(T v) {
  return v > T(0) ? v : T(0);
}

template <typename T>
inline void check_tokens(const TokenSeq& tokens, const ModelShape& s) {
  for (TokenId id : tokens) {
    if (id >= s.vocab_size) {
      throw Error("token id " + std::to_string(id) + " out of range for vocabulary of size " +
                  std::to_string(s.vocab_size));
    }
  }
}

template <typename T>
inline void mean_pool(const TokenSeq& tokens, const ModelParams<T>& p, std::span<T> pooled) {
  std::fill(pooled.begin(), pooled.end(), T(0));
  if (tokens.empty()) return;
  for (TokenId id : tokens) {
    auto row = p.token_embeddings.row(id);
    for (std::size_t i = 0; i < pooled.size(); ++i) pooled[i] += row[i];
  }
  const T inv = T(1) / static_cast<T>(tokens.size());
  for (T& v : pooled) v *= inv;
}

// Forward values kept for the backward pass of one encode_text call.
template <typename T>
struct TextTrace {
  const TokenSeq* tokens = nullptr;
  std::vector<T> pooled;
  std::vector<T> pre;
  std::vector<T> out;
};

template <typename T>
inline void text_forward(const TokenSeq& tokens, const ModelParams<T>& p, TextTrace<T>& tr) {
  check_tokens<T>(tokens, p.shape);
  tr.tokens = &tokens;
  tr.pooled.assign(p.shape.embed_dim, T(0));
  tr.pre.assign(p.shape.dim, T(0));
  mean_pool(tokens, p, std::span<T>(tr.pooled));
  affine(p.encoder_weight, std::span<const T>(tr.pooled), std::span<const T>(p.encoder_bias),
         std::span<T>(tr.pre));
  tr.out.resize(tr.pre.size());
  for (std::size_t i = 0; i < tr.pre.size(); ++i) tr.out[i] = relu(tr.pre[i]);
}

template <typename T>
inline void text_backward(const TextTrace<T>& tr, std::span<const T> d_out, const ModelParams<T>& p,
                          Gradients<T>& g) {
  const std::size_t d = p.shape.dim;
  const std::size_t de = p.shape.embed_dim;
  std::vector<T> d_pre(d);
  bool any = false;
  for (std::size_t i = 0; i < d; ++i) {
    d_pre[i] = tr.pre[i] > T(0) ? d_out[i] : T(0);
    any = any || d_pre[i] != T(0);
  }
  if (!any) return;
  std::vector<T> d_pooled(de, T(0));
  for (std::size_t r = 0; r < d; ++r) {
    const T gr = d_pre[r];
    if (gr == T(0)) continue;
    g.encoder_bias[r] += gr;
    T* gw = g.encoder_weight.data.data() + r * de;
    const T* w = p.encoder_weight.data.data() + r * de;
    for (std::size_t c = 0; c < de; ++c) {
      gw[c] += gr * tr.pooled[c];
      d_pooled[c] += gr * w[c];
    }
  }
  const TokenSeq& tokens = *tr.tokens;
  if (tokens.empty()) return;
  const T inv = T(1) / static_cast<T>(tokens.size());
  for (TokenId id : tokens) {
    auto& row = g.embedding_row(id);
    for (std::size_t c = 0; c < de; ++c) row[c] += d_pooled[c] * inv;
  }
}

template <typename T>
struct ProductTrace {
  TextTrace<T> description;
  std::vector<TextTrace<T>> neighbors;
  std::vector<std::vector<T>> neighbor_pre;  // W_q h + b_q per neighbor
  std::vector<T> concat;                     // [h_p, h_q]
  std::vector<T> pre;                        // fusion pre-activation
  std::vector<T> out;
};

// Graph-convolution step given already-extracted features.
template <typename T>
inline void gcn_forward(std::span<const T> description_feature, std::span<const std::vector<T>> neighbor_features,
                        const ModelParams<T>& p, std::vector<std::vector<T>>* neighbor_pre,
                        std::vector<T>& concat, std::vector<T>& pre, std::vector<T>& out) {
  const std::size_t d = p.shape.dim;
  concat.assign(2 * d, T(0));
  std::copy(description_feature.begin(), description_feature.end(), concat.begin());
  if (neighbor_pre) neighbor_pre->assign(neighbor_features.size(), std::vector<T>(d));
  std::vector<T> a(d);
  for (std::size_t j = 0; j < neighbor_features.size(); ++j) {
    affine(p.neighbor_weight, std::span<const T>(neighbor_features[j]), std::span<const T>(p.neighbor_bias),
           std::span<T>(a));
    for (std::size_t i = 0; i < d; ++i) concat[d + i] += relu(a[i]);
    if (neighbor_pre) (*neighbor_pre)[j] = a;
  }
  if (!neighbor_features.empty()) {
    const T inv = T(1) / static_cast<T>(neighbor_features.size());
    for (std::size_t i = 0; i < d; ++i) concat[d + i] *= inv;
  }
  pre.assign(d, T(0));
  affine(p.fusion_weight, std::span<const T>(concat), std::span<const T>(p.fusion_bias), std::span<T>(pre));
  out.resize(d);
  for (std::size_t i = 0; i < d; ++i) out[i] = relu(pre[i]);
}

template <typename T>
inline void product_forward(const ProductRef& ref, const ModelParams<T>& p, ProductTrace<T>& tr) {
  text_forward(ref.description, p, tr.description);
  if (!p.shape.gcn) {
    tr.out = tr.description.out;
    return;
  }
  tr.neighbors.resize(ref.neighbors.size());
  std::vector<std::vector<T>> features(ref.neighbors.size());
  for (std::size_t j = 0; j < ref.neighbors.size(); ++j) {
    text_forward(ref.neighbors[j], p, tr.neighbors[j]);
    features[j] = tr.neighbors[j].out;
  }
  gcn_forward<T>(tr.description.out, features, p, &tr.neighbor_pre, tr.concat, tr.pre, tr.out);
}

template <typename T>
inline void product_backward(const ProductTrace<T>& tr, std::span<const T> d_out, const ModelParams<T>& p,
                             Gradients<T>& g) {
  if (!p.shape.gcn) {
    text_backward(tr.description, d_out, p, g);
    return;
  }
  const std::size_t d = p.shape.dim;
  const std::size_t d2 = 2 * d;
  std::vector<T> d_concat(d2, T(0));
  for (std::size_t r = 0; r < d; ++r) {
    const T gr = tr.pre[r] > T(0) ? d_out[r] : T(0);
    if (gr == T(0)) continue;
    g.fusion_bias[r] += gr;
    T* gw = g.fusion_weight.data.data() + r * d2;
    const T* w = p.fusion_weight.data.data() + r * d2;
    for (std::size_t c = 0; c < d2; ++c) {
      gw[c] += gr * tr.concat[c];
      d_concat[c] += gr * w[c];
    }
  }
  text_backward(tr.description, std::span<const T>(d_concat.data(), d), p, g);
  const std::size_t t = tr.neighbors.size();
  if (t == 0) return;
  const T inv = T(1) / static_cast<T>(t);
  std::vector<T> d_feature(d);
  for (std::size_t j = 0; j < t; ++j) {
    std::fill(d_feature.begin(), d_feature.end(), T(0));
    const auto& a = tr.neighbor_pre[j];
    const auto& h = tr.neighbors[j].out;
    bool any = false;
    for (std::size_t r = 0; r < d; ++r) {
      if (!(a[r] > T(0))) continue;
      const T gr = d_concat[d + r] * inv;
      if (gr == T(0)) continue;
      any = true;
      g.neighbor_bias[r] += gr;
      T* gw = g.neighbor_weight.data.data() + r * d;
      const T* w = p.neighbor_weight.data.data() + r * d;
      for (std::size_t c = 0; c < d; ++c) {
        gw[c] += gr * h[c];
        d_feature[c] += gr * w[c];
      }
    }
    if (any) text_backward(tr.neighbors[j], std::span<const T>(d_feature), p, g);
  }
}

template <typename T>
inline T dot(std::span<const T> a, std::span<const T> b) {
  T acc = T(0);
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

template <typename T>
inline T softplus(T z) {
  return std::max(z, T(0)) + std::log1p(std::exp(-std::abs(z)));
}

template <typename T>
inline T sigmoid(T z) {
  if (z >= T(0)) return T(1) / (T(1) + std::exp(-z));
  const T e = std::exp(z);
  return e / (T(1) + e);
}

}  // namespace detail

// h = ReLU(W_f * mean(E[tokens]) + b_f); an empty sequence pools to zero.
template <typename T>
std::vector<T> encode_text(const TokenSeq& tokens, const ModelParams<T>& params) {
  detail::TextTrace<T> tr;
  detail::text_forward(tokens, params, tr);
  return std::move(tr.out);
}

template <typename T>
std::vector<T> encode_query(const TokenSeq& tokens, const ModelParams<T>& params) {
  return encode_text(tokens, params);
}

// Graph-convolution layer over precomputed features:
//   h_q = mean_j ReLU(W_q h_j + b_q)   (zero when there are no neighbors)
//   x_p = ReLU(W_p [h_p; h_q] + b_p)
// Without the GCN layer the description feature is the product embedding.
template <typename T>
std::vector<T> combine_product(std::span<const T> description_feature,
                               std::span<const std::vector<T>> neighbor_features, const ModelParams<T>& params) {
  if (description_feature.size() != params.shape.dim) throw Error("dimension mismatch in product features");
  if (!params.shape.gcn) return {description_feature.begin(), description_feature.end()};
  std::vector<T> concat, pre, out;
  detail::gcn_forward<T>(description_feature, neighbor_features, params, nullptr, concat, pre, out);
  return out;
}

template <typename T>
std::vector<T> encode_product(const ProductRef& ref, const ModelParams<T>& params) {
  const std::vector<T> h_p = encode_text(ref.description, params);
  if (!params.shape.gcn) return h_p;
  std::vector<std::vector<T>> features;
  features.reserve(ref.neighbors.size());
  for (const auto& n : ref.neighbors) features.push_back(encode_text(n, params));
  return combine_product<T>(h_p, features, params);
}

// softplus(x_q . x_neg - x_q . x_pos), evaluated without overflow.
template <typename T>
T triplet_loss(std::span<const T> x_q, std::span<const T> x_pos, std::span<const T> x_neg) {
  if (x_q.size() != x_pos.size() || x_q.size() != x_neg.size()) throw Error("triplet_loss: dimension mismatch");
  const T s_pos = detail::dot(x_q, x_pos);
  const T s_neg = detail::dot(x_q, x_neg);
  const T z = s_neg - s_pos;
  if (!std::isfinite(static_cast<double>(z))) throw Error("triplet_loss: non-finite input");
  return detail::softplus(z);
}

template <typename T>
struct LossAndGrads {
  T loss = T(0);
  Gradients<T> grads;
};

// Triplets are split into this many fixed shards; each shard accumulates in
// order and shards are summed in order, so the result does not depend on the
// number of worker threads.
inline constexpr std::size_t kGradientShards = 16;

// Mean triplet loss over the batch and its exact gradient (ReLU'(0) = 0).
template <typename T>
LossAndGrads<T> loss_and_grads(const TripletBatch& batch, const ModelParams<T>& params, std::size_t threads = 1) {
  const std::size_t n = batch.triplets.size();
  if (n == 0) throw Error("empty batch");
  const std::size_t d = params.shape.dim;
  const T scale = T(1) / static_cast<T>(n);
  const std::size_t shards = std::min(n, kGradientShards);

  std::vector<T> shard_loss(shards, T(0));
  std::vector<Gradients<T>> shard_grads(shards);
  parallel_for(shards, threads, [&](std::size_t s) {
    Gradients<T> g = Gradients<T>::zeros(params.shape);
    T loss = T(0);
    const std::size_t lo = s * n / shards;
    const std::size_t hi = (s + 1) * n / shards;
    detail::TextTrace<T> q;
    detail::ProductTrace<T> pos, neg;
    std::vector<T> d_q(d), d_pos(d), d_neg(d);
    for (std::size_t i = lo; i < hi; ++i) {
      const Triplet& t = batch.triplets[i];
      detail::text_forward(t.query, params, q);
      detail::product_forward(t.positive, params, pos);
      detail::product_forward(t.negative, params, neg);
      const T s_pos = detail::dot<T>(q.out, pos.out);
      const T s_neg = detail::dot<T>(q.out, neg.out);
      const T z = s_neg - s_pos;
      if (!std::isfinite(static_cast<double>(z))) throw Error("non-finite score in loss");
      loss += detail::softplus(z);
      const T sig = detail::sigmoid(z) * scale;
      for (std::size_t k = 0; k < d; ++k) {
        d_q[k] = sig * (neg.out[k] - pos.out[k]);
        d_pos[k] = -sig * q.out[k];
        d_neg[k] = sig * q.out[k];
      }
      detail::text_backward<T>(q, d_q, params, g);
      detail::product_backward<T>(pos, d_pos, params, g);
      detail::product_backward<T>(neg, d_neg, params, g);
    }
    shard_loss[s] = loss;
    shard_grads[s] = std::move(g);
  });

  LossAndGrads<T> out{T(0), std::move(shard_grads[0])};
  T total = shard_loss[0];
  for (std::size_t s = 1; s < shards; ++s) {
    total += shard_loss[s];
    out.grads.add(shard_grads[s]);
  }
  out.loss = total * scale;
  return out;
}

// Mean loss only; used by finite-difference checks.
template <typename T>
T batch_loss(const TripletBatch& batch, const ModelParams<T>& params) {
  if (batch.triplets.empty()) throw Error("empty batch");
  T total = T(0);
  for (const Triplet& t : batch.triplets) {
    const auto q = encode_query(t.query, params);
    const auto pos = encode_product(t.positive, params);
    const auto neg = encode_product(t.negative, params);
    total += triplet_loss<T>(q, pos, neg);
  }
  return total / static_cast<T>(batch.triplets.size());
}

// Smallest |pre-activation| over every ReLU the batch passes through.
template <typename T>
double min_abs_preactivation(const TripletBatch& batch, const ModelParams<T>& params) {
  double m = std::numeric_limits<double>::infinity();
  auto scan = [&](const std::vector<T>& v) {
    for (T x : v) m = std::min(m, std::abs(static_cast<double>(x)));
  };
  detail::TextTrace<T> q;
  detail::ProductTrace<T> p;
  for (const Triplet& t : batch.triplets) {
    detail::text_forward(t.query, params, q);
    scan(q.pre);
    for (const ProductRef* ref : {&t.positive, &t.negative}) {
      detail::product_forward(*ref, params, p);
      scan(p.description.pre);
      if (!params.shape.gcn) continue;
      for (const auto& n : p.neighbors) scan(n.pre);
      for (const auto& a : p.neighbor_pre) scan(a);
      scan(p.pre);
    }
  }
  return m;
}

// Fingerprint of the parameter values, used to tie indexes to checkpoints.
inline std::uint64_t params_fingerprint(const ModelParams<float>& p) {
  Fnv1a h;
  for (auto t : p.tensors()) h.update(t.data(), t.size_bytes());
  return h.digest();
}

}  // namespace mlgcn
