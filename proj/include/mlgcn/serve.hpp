#pragma once

// Deployment path: deduplicated product-embedding precompute, the binary
// embedding index, and exact top-K retrieval by cosine or inner product.

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "mlgcn/common.hpp"
#include "mlgcn/graphstore.hpp"
#include "mlgcn/model.hpp"
#include "mlgcn/textcore.hpp"

namespace mlgcn {

struct PrecomputeResult {
  std::map<std::string, std::vector<float>> embeddings;  // product_id -> x_p
  std::size_t query_encodes = 0;        // encode_text calls on neighbor queries
  std::size_t description_encodes = 0;  // encode_text calls on descriptions
};

// Encodes every distinct neighbor query once and every description once, then
// joins them per product through the graph-convolution layer. Restricted to
// `ids` when given.
inline PrecomputeResult precompute_embeddings(const BipartiteGraph& graph, const Vocab& vocab,
                                              const ModelParams<float>& params,
                                              std::span<const std::string> ids = {}, std::size_t threads = 1) {
  params.validate();
  std::vector<const ProductNode*> nodes;
  if (ids.empty()) {
    for (const auto& [_, node] : graph.products) nodes.push_back(&node);
  } else {
    for (const auto& id : ids) nodes.push_back(&graph.product(id));
  }

  PrecomputeResult out;
  std::map<std::string, std::size_t, std::less<>> query_slot;
  std::vector<std::string> unique_queries;
  if (params.shape.gcn) {
    for (const ProductNode* n : nodes) {
      for (const auto& e : n->neighbors) {
        if (query_slot.emplace(e.query, unique_queries.size()).second) unique_queries.push_back(e.query);
      }
    }
  }
  std::vector<std::vector<float>> query_features(unique_queries.size());
  parallel_for(unique_queries.size(), threads, [&](std::size_t i) {
    query_features[i] = encode_text(tokenize(unique_queries[i], vocab), params);
  });
  out.query_encodes = unique_queries.size();

  std::vector<std::vector<float>> product_vecs(nodes.size());
  parallel_for(nodes.size(), threads, [&](std::size_t i) {
    const ProductNode& n = *nodes[i];
    const auto h_p = encode_text(tokenize(n.entry.text, vocab), params);
    if (!params.shape.gcn) {
      product_vecs[i] = h_p;
      return;
    }
    std::vector<std::vector<float>> feats;
    feats.reserve(n.neighbors.size());
    for (const auto& e : n.neighbors) feats.push_back(query_features[query_slot.find(e.query)->second]);
    product_vecs[i] = combine_product<float>(h_p, feats, params);
  });
  out.description_encodes = nodes.size();
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    out.embeddings.emplace(nodes[i]->entry.product_id, std::move(product_vecs[i]));
  }
  return out;
}

// Product tower input for one graph product, tokenized from scratch.
inline ProductRef product_ref_from_graph(const BipartiteGraph& graph, std::string_view id, const Vocab& vocab) {
  const ProductNode& n = graph.product(id);
  ProductRef ref;
  ref.description = tokenize(n.entry.text, vocab);
  for (const auto& e : n.neighbors) ref.neighbors.push_back(tokenize(e.query, vocab));
  return ref;
}

struct EmbeddingRow {
  std::string id;
  std::string language;
  std::vector<float> vector;
};

class EmbeddingIndex {
 public:
  EmbeddingIndex() = default;

  std::size_t size() const { return ids_.size(); }
  std::size_t dim() const { return dim_; }
  bool normalized() const { return normalized_; }
  const std::vector<std::string>& ids() const { return ids_; }
  const std::vector<std::string>& languages() const { return languages_; }
  const std::vector<float>& data() const { return data_; }
  std::span<const float> row(std::size_t i) const { return {data_.data() + i * dim_, dim_}; }
  double row_norm(std::size_t i) const { return norms_[i]; }
  bool is_zero_row(std::size_t i) const { return norms_[i] == 0.0; }
  const std::string& params_hash() const { return params_hash_; }
  void set_params_hash(std::string h) { params_hash_ = std::move(h); }

  std::optional<std::size_t> find(std::string_view id) const {
    auto it = lookup_.find(id);
    if (it == lookup_.end()) return std::nullopt;
    return it->second;
  }

  std::size_t zero_row_count() const {
    return static_cast<std::size_t>(std::count(norms_.begin(), norms_.end(), 0.0));
  }

  // Rows are taken as given; no normalization is applied here.
  static EmbeddingIndex from_rows(std::vector<std::string> ids, std::vector<std::string> languages,
                                  std::size_t dim, bool normalized, std::vector<float> data) {
    EmbeddingIndex ix;
    if (ids.size() != languages.size() || data.size() != ids.size() * dim) {
      throw Error("dimension mismatch in index rows");
    }
    ix.ids_ = std::move(ids);
    ix.languages_ = std::move(languages);
    ix.dim_ = dim;
    ix.normalized_ = normalized;
    ix.data_ = std::move(data);
    ix.finish();
    return ix;
  }

  friend bool operator==(const EmbeddingIndex& a, const EmbeddingIndex& b) {
    return a.ids_ == b.ids_ && a.languages_ == b.languages_ && a.dim_ == b.dim_ &&
           a.normalized_ == b.normalized_ && a.data_ == b.data_ && a.params_hash_ == b.params_hash_;
  }

 private:
  void finish() {
    lookup_.clear();
    norms_.assign(ids_.size(), 0.0);
    for (std::size_t i = 0; i < ids_.size(); ++i) {
      if (!lookup_.emplace(ids_[i], i).second) throw Error("duplicate id '" + ids_[i] + "' in index");
      double s = 0.0;
      for (float v : row(i)) s += static_cast<double>(v) * static_cast<double>(v);
      norms_[i] = std::sqrt(s);
    }
  }

  std::vector<std::string> ids_;
  std::vector<std::string> languages_;
  std::size_t dim_ = 0;
  bool normalized_ = false;
  std::vector<float> data_;
  std::vector<double> norms_;
  std::map<std::string, std::size_t, std::less<>> lookup_;
  std::string params_hash_;
};

inline std::vector<float> l2_normalized(std::span<const float> v) {
  double s = 0.0;
  for (float x : v) s += static_cast<double>(x) * static_cast<double>(x);
  std::vector<float> out(v.begin(), v.end());
  if (s == 0.0) return out;  // zero rows stay zero
  const double inv = 1.0 / std::sqrt(s);
  for (float& x : out) x = static_cast<float>(static_cast<double>(x) * inv);
  return out;
}

// Rows keep the given order. `dim` is only consulted for an empty index.
inline EmbeddingIndex build_index(const std::vector<EmbeddingRow>& rows, bool normalize = true, std::size_t dim = 0) {
  if (!rows.empty()) dim = rows.front().vector.size();
  std::vector<std::string> ids, langs;
  std::vector<float> data;
  data.reserve(rows.size() * dim);
  for (const auto& r : rows) {
    if (r.vector.size() != dim) throw Error("dimension mismatch: row '" + r.id + "'");
    ids.push_back(r.id);
    langs.push_back(r.language);
    if (normalize) {
      const auto n = l2_normalized(r.vector);
      data.insert(data.end(), n.begin(), n.end());
    } else {
      data.insert(data.end(), r.vector.begin(), r.vector.end());
    }
  }
  return EmbeddingIndex::from_rows(std::move(ids), std::move(langs), dim, normalize, std::move(data));
}

// Rows for every product in `embeddings` (id order), tagged with the graph language.
inline std::vector<EmbeddingRow> rows_from_embeddings(const BipartiteGraph& graph,
                                                      const std::map<std::string, std::vector<float>>& embeddings) {
  std::vector<EmbeddingRow> rows;
  rows.reserve(embeddings.size());
  for (const auto& [id, v] : embeddings) rows.push_back({id, graph.product(id).entry.language, v});
  return rows;
}

enum class ScoreMode { kCosine, kInner };

inline std::string_view score_mode_name(ScoreMode m) { return m == ScoreMode::kCosine ? "cosine" : "inner"; }

inline ScoreMode parse_score_mode(std::string_view s) {
  if (s == "cosine") return ScoreMode::kCosine;
  if (s == "inner") return ScoreMode::kInner;
  throw Error("unknown score mode '" + std::string(s) + "'");
}

struct SearchOptions {
  ScoreMode score = ScoreMode::kCosine;
  std::string language;  // empty: all languages
  std::size_t shards = 1;
  std::size_t threads = 1;
};

struct SearchHit {
  std::string product_id;
  double score = 0.0;

  friend bool operator==(const SearchHit&, const SearchHit&) = default;
};

struct SearchResult {
  std::vector<SearchHit> hits;
  std::size_t k = 0;
  bool zero_query = false;  // query embedding was zero; every score is 0
};

// Exact top-K over the index for an already-encoded query. The scan is split
// into contiguous shards whose local top-K lists are merged; ordering is by
// score descending then product id ascending, so the shard count cannot
// change the result.
inline SearchResult search_vector(std::span<const float> query, const EmbeddingIndex& index, std::size_t k,
                                  const SearchOptions& options = {}) {
  if (k < 1) throw Error("K must be >= 1");
  if (index.size() == 0) throw Error("empty index");
  if (query.size() != index.dim()) throw Error("dimension mismatch between query and index");

  double qnorm = 0.0;
  for (float v : query) qnorm += static_cast<double>(v) * static_cast<double>(v);
  qnorm = std::sqrt(qnorm);
  SearchResult result;
  result.k = k;
  result.zero_query = qnorm == 0.0;

  struct Cand {
    double score;
    std::size_t row;
  };
  const auto& ids = index.ids();
  auto better = [&](const Cand& a, const Cand& b) {
    if (a.score != b.score) return a.score > b.score;
    return ids[a.row] < ids[b.row];
  };
  auto score_row = [&](std::size_t i) {
    if (result.zero_query) return 0.0;
    double dot = 0.0;
    const auto row = index.row(i);
    for (std::size_t c = 0; c < row.size(); ++c) dot += static_cast<double>(query[c]) * static_cast<double>(row[c]);
    if (options.score == ScoreMode::kInner) return dot;
    if (index.is_zero_row(i)) return 0.0;
    return std::clamp(dot / (qnorm * index.row_norm(i)), -1.0, 1.0);
  };

  const std::size_t n = index.size();
  const std::size_t shards = std::clamp<std::size_t>(options.shards, 1, n);
  std::vector<std::vector<Cand>> local(shards);
  parallel_for(shards, options.threads, [&](std::size_t s) {
    const std::size_t lo = s * n / shards;
    const std::size_t hi = (s + 1) * n / shards;
    auto& out = local[s];
    for (std::size_t i = lo; i < hi; ++i) {
      if (!options.language.empty() && index.languages()[i] != options.language) continue;
      out.push_back({score_row(i), i});
    }
    const std::size_t keep = std::min(k, out.size());
    std::partial_sort(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(keep), out.end(), better);
    out.resize(keep);
  });
  std::vector<Cand> merged;
  for (auto& l : local) merged.insert(merged.end(), l.begin(), l.end());
  const std::size_t keep = std::min(k, merged.size());
  std::partial_sort(merged.begin(), merged.begin() + static_cast<std::ptrdiff_t>(keep), merged.end(), better);
  merged.resize(keep);
  result.hits.reserve(keep);
  for (const auto& c : merged) result.hits.push_back({ids[c.row], c.score});
  return result;
}

inline SearchResult search(std::string_view query, const Vocab& vocab, const ModelParams<float>& params,
                           const EmbeddingIndex& index, std::size_t k, const SearchOptions& options = {}) {
  if (index.size() == 0) throw Error("empty index");
  if (index.dim() != params.shape.dim) throw Error("dimension mismatch between index and model");
  const auto x_q = encode_query(tokenize(query, vocab), params);
  return search_vector(x_q, index, k, options);
}

// Index file: "MLGX1", u32 manifest length, JSON manifest, id table (u32
// length-prefixed strings), then N*d row-major little-endian float32.
inline constexpr std::string_view kIndexMagic = "MLGX1";
inline constexpr int kIndexVersion = 1;

inline void save_index(const EmbeddingIndex& index, std::ostream& out) {
  std::vector<std::string> langs;
  std::map<std::string, std::size_t> lang_slot;
  std::vector<std::size_t> row_lang;
  row_lang.reserve(index.size());
  for (const auto& l : index.languages()) {
    auto [it, fresh] = lang_slot.emplace(l, langs.size());
    if (fresh) langs.push_back(l);
    row_lang.push_back(it->second);
  }
  nlohmann::ordered_json m;
  m["version"] = kIndexVersion;
  m["n"] = index.size();
  m["dim"] = index.dim();
  m["normalized"] = index.normalized();
  m["languages"] = langs;
  m["row_language"] = row_lang;
  m["params_hash"] = index.params_hash();
  BinaryWriter w(out);
  w.bytes(kIndexMagic.data(), kIndexMagic.size());
  w.str(m.dump());
  for (const auto& id : index.ids()) w.str(id);
  w.f32s(index.data());
}

inline EmbeddingIndex load_index(std::istream& in) {
  BinaryReader r(in, "index file");
  if (!r.magic(kIndexMagic)) throw Error("not an index file");
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(r.str());
  } catch (const nlohmann::json::exception&) {
    throw Error("index manifest is not valid JSON");
  }
  std::size_t n = 0, dim = 0;
  bool normalized = false;
  std::vector<std::string> langs;
  std::vector<std::size_t> row_lang;
  std::string params_hash;
  try {
    const int version = m.at("version").get<int>();
    if (version != kIndexVersion) throw Error("unsupported index version " + std::to_string(version));
    n = m.at("n").get<std::size_t>();
    dim = m.at("dim").get<std::size_t>();
    normalized = m.at("normalized").get<bool>();
    langs = m.at("languages").get<std::vector<std::string>>();
    row_lang = m.at("row_language").get<std::vector<std::size_t>>();
    params_hash = m.value("params_hash", std::string{});
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("index manifest incomplete: ") + e.what());
  }
  if (row_lang.size() != n) throw Error("index manifest: language table does not match row count");
  std::vector<std::string> ids(n), row_langs(n);
  for (std::size_t i = 0; i < n; ++i) {
    ids[i] = r.str();
    if (row_lang[i] >= langs.size()) throw Error("index manifest: bad language slot");
    row_langs[i] = langs[row_lang[i]];
  }
  std::vector<float> data(n * dim);
  r.f32s(data);
  auto ix = EmbeddingIndex::from_rows(std::move(ids), std::move(row_langs), dim, normalized, std::move(data));
  ix.set_params_hash(std::move(params_hash));
  return ix;
}

struct UpdateResult {
  EmbeddingIndex index;
  std::size_t recomputed = 0;
};

// Recomputes the rows of `changed` products (new description or neighbor
// list) from the current graph; products not yet indexed are added. When the
// old index is id-sorted the result stays id-sorted, so it matches a rebuild.
inline UpdateResult incremental_update(const EmbeddingIndex& index, const std::vector<std::string>& changed,
                                       const BipartiteGraph& graph, const Vocab& vocab,
                                       const ModelParams<float>& params, std::size_t threads = 1) {
  std::set<std::string> uniq(changed.begin(), changed.end());
  for (const auto& id : uniq) {
    if (!graph.products.contains(id)) throw Error("unknown product_id '" + id + "'");
  }
  if (uniq.empty()) return {index, 0};
  if (index.size() > 0 && index.dim() != params.shape.dim) throw Error("dimension mismatch between index and model");
  const std::vector<std::string> ids(uniq.begin(), uniq.end());
  const auto fresh = precompute_embeddings(graph, vocab, params, ids, threads);

  std::vector<EmbeddingRow> rows;
  rows.reserve(index.size() + ids.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    const auto& id = index.ids()[i];
    auto it = fresh.embeddings.find(id);
    if (it != fresh.embeddings.end()) {
      rows.push_back({id, graph.product(id).entry.language,
                      index.normalized() ? l2_normalized(it->second) : it->second});
    } else {
      const auto r = index.row(i);
      rows.push_back({id, index.languages()[i], {r.begin(), r.end()}});
    }
  }
  for (const auto& id : ids) {
    if (index.find(id)) continue;
    const auto& v = fresh.embeddings.at(id);
    rows.push_back({id, graph.product(id).entry.language, index.normalized() ? l2_normalized(v) : v});
  }
  if (std::is_sorted(index.ids().begin(), index.ids().end())) {
    std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  }
  // Rows are already normalized where required.
  UpdateResult out{build_index(rows, false, params.shape.dim), ids.size()};
  out.index = EmbeddingIndex::from_rows(out.index.ids(), out.index.languages(), out.index.dim(), index.normalized(),
                                        out.index.data());
  out.index.set_params_hash(hex64(params_fingerprint(params)));
  return out;
}

}  // namespace mlgcn
