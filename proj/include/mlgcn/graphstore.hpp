#pragma once

// Behavior-log ingestion and the query-product bipartite graph.

#include <algorithm>
#include <charconv>
#include <functional>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "mlgcn/common.hpp"
#include "mlgcn/textcore.hpp"

namespace mlgcn {

enum class Signal { kImpression, kClick, kPurchase };

inline std::string_view signal_name(Signal s) {
  switch (s) {
    case Signal::kImpression: return "impression";
    case Signal::kClick: return "click";
    case Signal::kPurchase: return "purchase";
  }
  return "?";
}

inline std::optional<Signal> parse_signal(std::string_view s) {
  if (s == "impression") return Signal::kImpression;
  if (s == "click") return Signal::kClick;
  if (s == "purchase") return Signal::kPurchase;
  return std::nullopt;
}

struct LogRecord {
  std::string query;
  std::string product_id;
  std::string language;
  Signal signal = Signal::kImpression;
  std::uint32_t count = 1;

  friend bool operator==(const LogRecord&, const LogRecord&) = default;
};

struct CatalogEntry {
  std::string product_id;
  std::string language;
  std::string text;

  friend bool operator==(const CatalogEntry&, const CatalogEntry&) = default;
};

namespace detail {

[[noreturn]] inline void line_error(std::size_t line_no, const std::string& reason) {
  throw Error("line " + std::to_string(line_no) + ": " + reason);
}

inline LogRecord parse_log_line(std::string_view line, std::size_t line_no) {
  const auto f = split_fields(line, '\t');
  if (f.size() != 5) {
    line_error(line_no, "expected 5 tab-separated fields, got " + std::to_string(f.size()));
  }
  LogRecord r;
  r.query = std::string(f[0]);
  r.product_id = std::string(f[1]);
  r.language = std::string(f[2]);
  if (r.query.empty()) line_error(line_no, "empty query");
  if (r.product_id.empty()) line_error(line_no, "empty product_id");
  if (r.language.empty()) line_error(line_no, "empty language");
  auto sig = parse_signal(f[3]);
  if (!sig) line_error(line_no, "unknown signal '" + std::string(f[3]) + "'");
  r.signal = *sig;
  std::uint64_t count = 0;
  auto [ptr, ec] = std::from_chars(f[4].data(), f[4].data() + f[4].size(), count);
  if (ec != std::errc() || ptr != f[4].data() + f[4].size() || count < 1 || count > UINT32_MAX) {
    line_error(line_no, "invalid count '" + std::string(f[4]) + "'");
  }
  r.count = static_cast<std::uint32_t>(count);
  return r;
}

}  // namespace detail

// Streams `query \t product_id \t language \t signal \t count` lines to `sink`
// one at a time. Blank lines are skipped.
inline void for_each_log_record(std::istream& in, const std::function<void(LogRecord&&)>& sink) {
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string_view v = strip_cr(line);
    if (v.empty()) continue;
    sink(detail::parse_log_line(v, line_no));
  }
}

inline std::vector<LogRecord> ingest_logs(std::istream& in) {
  std::vector<LogRecord> out;
  for_each_log_record(in, [&](LogRecord&& r) { out.push_back(std::move(r)); });
  return out;
}

// `product_id \t language \t description`.
inline std::vector<CatalogEntry> read_catalog(std::istream& in) {
  std::vector<CatalogEntry> out;
  std::set<std::string, std::less<>> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string_view v = strip_cr(line);
    if (v.empty()) continue;
    const auto f = split_fields(v, '\t');
    if (f.size() != 3) {
      detail::line_error(line_no, "expected 3 tab-separated fields, got " + std::to_string(f.size()));
    }
    if (f[0].empty()) detail::line_error(line_no, "empty product_id");
    if (f[1].empty()) detail::line_error(line_no, "empty language");
    if (!seen.emplace(f[0]).second) {
      detail::line_error(line_no, "duplicate product_id '" + std::string(f[0]) + "'");
    }
    out.push_back({std::string(f[0]), std::string(f[1]), std::string(f[2])});
  }
  return out;
}

inline void write_log_records(const std::vector<LogRecord>& records, std::ostream& out) {
  for (const auto& r : records) {
    out << r.query << '\t' << r.product_id << '\t' << r.language << '\t' << signal_name(r.signal) << '\t' << r.count
        << '\n';
  }
}

inline void write_catalog(const std::vector<CatalogEntry>& catalog, std::ostream& out) {
  for (const auto& e : catalog) out << e.product_id << '\t' << e.language << '\t' << e.text << '\n';
}

// Query identity: canonical (normalized) text plus language.
struct QueryKey {
  std::string text;
  std::string language;

  friend auto operator<=>(const QueryKey&, const QueryKey&) = default;
};

struct NeighborEdge {
  std::string query;  // canonical text; language is the product's
  std::uint64_t weight = 0;

  friend bool operator==(const NeighborEdge&, const NeighborEdge&) = default;
};

struct ProductNode {
  CatalogEntry entry;
  std::vector<NeighborEdge> neighbors;  // weight desc, then query asc; size <= t_max

  friend bool operator==(const ProductNode&, const ProductNode&) = default;
};

struct LanguagePartition {
  std::vector<std::string> products;  // sorted ids
  std::vector<std::string> queries;   // sorted canonical texts with >= 1 positive

  friend bool operator==(const LanguagePartition&, const LanguagePartition&) = default;
};

struct BipartiteGraph {
  std::uint32_t t_max = 25;
  std::map<std::string, ProductNode, std::less<>> products;
  std::map<QueryKey, std::set<std::string>> positives;
  std::map<std::string, LanguagePartition, std::less<>> languages;

  friend bool operator==(const BipartiteGraph&, const BipartiteGraph&) = default;

  const ProductNode& product(std::string_view id) const {
    auto it = products.find(id);
    if (it == products.end()) throw Error("unknown product_id '" + std::string(id) + "'");
    return it->second;
  }

  const std::set<std::string>* positives_of(const QueryKey& key) const {
    auto it = positives.find(key);
    return it == positives.end() ? nullptr : &it->second;
  }
};

struct GraphOptions {
  std::uint32_t t_max = 25;
  std::set<Signal> positive_signals{Signal::kPurchase};
};

inline BipartiteGraph build_graph(const std::vector<LogRecord>& records,
                                  const std::vector<CatalogEntry>& catalog,
                                  const GraphOptions& options = {}) {
  for (Signal s : options.positive_signals) {
    if (s == Signal::kImpression) throw Error("impression cannot be a positive signal");
  }
  BipartiteGraph g;
  g.t_max = options.t_max;
  for (const auto& e : catalog) {
    if (e.product_id.empty() || e.language.empty()) throw Error("catalog entry with empty id or language");
    if (!g.products.emplace(e.product_id, ProductNode{e, {}}).second) {
      throw Error("duplicate product_id '" + e.product_id + "' in catalog");
    }
    g.languages[e.language].products.push_back(e.product_id);
  }

  // Pre-cap edge weights per product.
  std::map<std::string, std::map<std::string, std::uint64_t>, std::less<>> edges;
  for (const auto& r : records) {
    if (!options.positive_signals.contains(r.signal)) continue;
    auto it = g.products.find(r.product_id);
    if (it == g.products.end()) {
      throw Error("positive record references product '" + r.product_id + "' absent from catalog");
    }
    if (it->second.entry.language != r.language) {
      throw Error("language mismatch for product '" + r.product_id + "': record '" + r.language +
                  "' vs catalog '" + it->second.entry.language + "'");
    }
    std::string q = canonical_text(r.query);
    if (q.empty()) continue;
    edges[r.product_id][q] += r.count;
    g.positives[QueryKey{q, r.language}].insert(r.product_id);
  }

  for (auto& [pid, weights] : edges) {
    ProductNode& node = g.products.find(pid)->second;
    std::vector<NeighborEdge> list;
    list.reserve(weights.size());
    for (const auto& [q, w] : weights) list.push_back({q, w});
    std::stable_sort(list.begin(), list.end(), [](const NeighborEdge& a, const NeighborEdge& b) {
      if (a.weight != b.weight) return a.weight > b.weight;
      return a.query < b.query;
    });
    if (list.size() > g.t_max) list.resize(g.t_max);
    node.neighbors = std::move(list);
  }
  for (const auto& [key, _] : g.positives) g.languages[key.language].queries.push_back(key.text);
  for (auto& [_, part] : g.languages) {
    std::sort(part.products.begin(), part.products.end());
    std::sort(part.queries.begin(), part.queries.end());
  }
  return g;
}

struct TrainPair {
  std::string query;
  std::string product_id;
  std::string language;

  friend bool operator==(const TrainPair&, const TrainPair&) = default;
};

// One pair per capped neighbor edge, ordered by product id then neighbor rank.
inline std::vector<TrainPair> train_pairs(const BipartiteGraph& g) {
  std::vector<TrainPair> out;
  for (const auto& [pid, node] : g.products) {
    for (const auto& e : node.neighbors) out.push_back({e.query, pid, node.entry.language});
  }
  return out;
}

// Graph file: "MLGG1", u32 manifest length, manifest (t_max, counts, language
// table), then product blocks and query blocks. Little-endian throughout.
inline constexpr std::string_view kGraphMagic = "MLGG1";

inline void save_graph(const BipartiteGraph& g, std::ostream& out) {
  std::ostringstream manifest_buf;
  {
    BinaryWriter m(manifest_buf);
    m.u32(g.t_max);
    m.u64(g.products.size());
    m.u64(g.positives.size());
    m.u32(static_cast<std::uint32_t>(g.languages.size()));
    for (const auto& [lang, part] : g.languages) {
      m.str(lang);
      m.u64(part.products.size());
      m.u64(part.queries.size());
    }
  }
  BinaryWriter w(out);
  w.bytes(kGraphMagic.data(), kGraphMagic.size());
  w.str(manifest_buf.str());
  for (const auto& [pid, node] : g.products) {
    w.str(pid);
    w.str(node.entry.language);
    w.str(node.entry.text);
    w.u32(static_cast<std::uint32_t>(node.neighbors.size()));
    for (const auto& e : node.neighbors) {
      w.str(e.query);
      w.u64(e.weight);
    }
  }
  for (const auto& [key, ids] : g.positives) {
    w.str(key.text);
    w.str(key.language);
    w.u32(static_cast<std::uint32_t>(ids.size()));
    for (const auto& id : ids) w.str(id);
  }
}

inline BipartiteGraph load_graph(std::istream& in) {
  BinaryReader r(in, "graph file");
  if (!r.magic(kGraphMagic)) throw Error("not a graph file (bad magic or version)");
  const std::string manifest = r.str();
  std::istringstream ms(manifest);
  BinaryReader m(ms, "graph file");
  BipartiteGraph g;
  g.t_max = m.u32();
  const std::uint64_t n_products = m.u64();
  const std::uint64_t n_queries = m.u64();
  const std::uint32_t n_langs = m.u32();
  std::map<std::string, std::pair<std::uint64_t, std::uint64_t>> expected_langs;
  for (std::uint32_t i = 0; i < n_langs; ++i) {
    std::string lang = m.str();
    const std::uint64_t np = m.u64();
    const std::uint64_t nq = m.u64();
    expected_langs[lang] = {np, nq};
  }

  for (std::uint64_t i = 0; i < n_products; ++i) {
    ProductNode node;
    node.entry.product_id = r.str();
    node.entry.language = r.str();
    node.entry.text = r.str();
    const std::uint32_t nn = r.u32();
    if (nn > g.t_max) throw Error("graph file: neighbor list exceeds t_max");
    for (std::uint32_t j = 0; j < nn; ++j) {
      NeighborEdge e;
      e.query = r.str();
      e.weight = r.u64();
      node.neighbors.push_back(std::move(e));
    }
    g.languages[node.entry.language].products.push_back(node.entry.product_id);
    std::string id = node.entry.product_id;
    if (!g.products.emplace(std::move(id), std::move(node)).second) {
      throw Error("graph file: duplicate product");
    }
  }
  for (std::uint64_t i = 0; i < n_queries; ++i) {
    QueryKey key;
    key.text = r.str();
    key.language = r.str();
    const std::uint32_t np = r.u32();
    std::set<std::string> ids;
    for (std::uint32_t j = 0; j < np; ++j) ids.insert(r.str());
    g.languages[key.language].queries.push_back(key.text);
    g.positives.emplace(std::move(key), std::move(ids));
  }
  for (auto& [lang, part] : g.languages) {
    std::sort(part.products.begin(), part.products.end());
    std::sort(part.queries.begin(), part.queries.end());
    auto it = expected_langs.find(lang);
    if (it == expected_langs.end() || it->second.first != part.products.size() ||
        it->second.second != part.queries.size()) {
      throw Error("graph file: language table does not match records");
    }
  }
  if (expected_langs.size() != g.languages.size()) {
    throw Error("graph file: language table does not match records");
  }
  return g;
}

}  // namespace mlgcn
