#pragma once

// Retrieval metrics and the offline evaluation / ablation harness.

#include <algorithm>
#include <cstdio>
#include <functional>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mlgcn/common.hpp"
#include "mlgcn/graphstore.hpp"
#include "mlgcn/model.hpp"
#include "mlgcn/sampling.hpp"
#include "mlgcn/serve.hpp"
#include "mlgcn/textcore.hpp"
#include "mlgcn/train.hpp"

namespace mlgcn {

// |top-K ∩ relevant| / |relevant|
inline double recall_at_k(std::span<const std::string> ranking, const std::set<std::string>& relevant, std::size_t k) {
  if (relevant.empty()) throw Error("empty relevant set");
  std::size_t hits = 0;
  const std::size_t n = std::min(k, ranking.size());
  for (std::size_t i = 0; i < n; ++i) hits += relevant.contains(ranking[i]);
  return static_cast<double>(hits) / static_cast<double>(relevant.size());
}

// Mean of precision@rank over the ranks holding relevant items, divided by
// |relevant| so unretrieved items count as zero.
inline double average_precision(std::span<const std::string> ranking, const std::set<std::string>& relevant) {
  if (relevant.empty()) throw Error("empty relevant set");
  std::size_t hits = 0;
  double sum = 0.0;
  for (std::size_t i = 0; i < ranking.size(); ++i) {
    if (!relevant.contains(ranking[i])) continue;
    ++hits;
    sum += static_cast<double>(hits) / static_cast<double>(i + 1);
  }
  return sum / static_cast<double>(relevant.size());
}

struct EvalQuery {
  std::string text;
  std::string language;
  std::set<std::string> relevant;
  bool gap = false;

  friend bool operator==(const EvalQuery&, const EvalQuery&) = default;
};

// `query \t language \t relevant_ids (comma-separated) \t gap|nongap`
inline std::vector<EvalQuery> read_eval_queries(std::istream& in) {
  std::vector<EvalQuery> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string_view v = strip_cr(line);
    if (v.empty()) continue;
    const auto f = split_fields(v, '\t');
    if (f.size() != 4) {
      detail::line_error(line_no, "expected 4 tab-separated fields, got " + std::to_string(f.size()));
    }
    EvalQuery q;
    q.text = std::string(f[0]);
    q.language = std::string(f[1]);
    if (q.language.empty()) detail::line_error(line_no, "empty language");
    if (!f[2].empty()) {
      for (auto id : split_fields(f[2], ',')) {
        if (!id.empty()) q.relevant.emplace(id);
      }
    }
    if (f[3] == "gap") q.gap = true;
    else if (f[3] != "nongap") detail::line_error(line_no, "gap label must be 'gap' or 'nongap'");
    out.push_back(std::move(q));
  }
  return out;
}

inline void write_eval_queries(const std::vector<EvalQuery>& queries, std::ostream& out) {
  for (const auto& q : queries) {
    out << q.text << '\t' << q.language << '\t';
    bool first = true;
    for (const auto& id : q.relevant) {
      if (!first) out << ',';
      out << id;
      first = false;
    }
    out << '\t' << (q.gap ? "gap" : "nongap") << '\n';
  }
}

struct EvalSet {
  std::vector<EvalQuery> queries;
  std::map<std::string, std::vector<std::string>> corpus;  // language -> sorted ids
};

// Per language: the corpus is every relevant id plus uniformly drawn
// same-language distractors up to `corpus_per_language` (or the whole
// catalog if it is smaller).
inline EvalSet build_eval_set(std::vector<EvalQuery> queries, const BipartiteGraph& graph,
                              std::size_t corpus_per_language = 5000, std::uint64_t seed = 0) {
  EvalSet es;
  std::map<std::string, std::set<std::string>> chosen;
  for (const auto& q : queries) {
    if (graph.positives.contains(QueryKey{canonical_text(q.text), q.language})) {
      throw Error("held-out query '" + q.text + "' appears in the training graph");
    }
    auto& c = chosen[q.language];
    for (const auto& id : q.relevant) {
      const auto& node = graph.product(id);
      if (node.entry.language != q.language) throw Error("relevant product '" + id + "' has another language");
      c.insert(id);
    }
  }
  Rng rng(seed);
  for (auto& [lang, ids] : chosen) {
    auto part = graph.languages.find(lang);
    if (part == graph.languages.end()) throw Error("no catalog for language '" + lang + "'");
    std::vector<std::string> pool;
    for (const auto& id : part->second.products) {
      if (!ids.contains(id)) pool.push_back(id);
    }
    rng.shuffle(pool);
    for (std::size_t i = 0; i < pool.size() && ids.size() < corpus_per_language; ++i) ids.insert(pool[i]);
    es.corpus[lang] = {ids.begin(), ids.end()};
  }
  es.queries = std::move(queries);
  return es;
}

struct EvalOptions {
  std::size_t k = 10;
  ScoreMode score = ScoreMode::kCosine;
  std::size_t threads = 1;
  bool keep_per_query = false;
};

struct QueryScore {
  std::string text;
  std::string language;
  bool gap = false;
  double recall = 0.0;
  double ap = 0.0;
};

struct MetricsRow {
  std::string group;  // language, "all", or "<language|all>:gap|nongap"
  double recall = 0.0;
  double map = 0.0;
  std::size_t n_queries = 0;
  std::size_t skipped = 0;      // queries with no relevant products
  std::size_t corpus_size = 0;  // summed over the group's languages
};

struct MetricsReport {
  std::size_t k = 10;
  ScoreMode score = ScoreMode::kCosine;
  std::vector<MetricsRow> rows;
  std::vector<QueryScore> per_query;  // filled when requested
  nlohmann::ordered_json config;      // echo of whatever produced the report

  const MetricsRow& row(std::string_view group) const {
    for (const auto& r : rows) {
      if (r.group == group) return r;
    }
    throw Error("no metrics for group '" + std::string(group) + "'");
  }
  bool has(std::string_view group) const {
    return std::any_of(rows.begin(), rows.end(), [&](const MetricsRow& r) { return r.group == group; });
  }
};

namespace detail {

inline std::string fmt6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace detail

// Ranks every held-out query against its language's corpus, taking corpus
// vectors from `index` by id.
inline MetricsReport evaluate_index(const EmbeddingIndex& index, const Vocab& vocab, const ModelParams<float>& params,
                                    const EvalSet& eval_set, const EvalOptions& options = {}) {
  if (options.k < 1) throw Error("K must be >= 1");
  std::map<std::string, EmbeddingIndex> per_language;
  for (const auto& [lang, ids] : eval_set.corpus) {
    std::vector<std::string> langs(ids.size(), lang);
    std::vector<float> data;
    data.reserve(ids.size() * index.dim());
    for (const auto& id : ids) {
      auto row = index.find(id);
      if (!row) throw Error("eval corpus product '" + id + "' missing from index");
      const auto r = index.row(*row);
      data.insert(data.end(), r.begin(), r.end());
    }
    per_language.emplace(lang, EmbeddingIndex::from_rows(ids, std::move(langs), index.dim(), index.normalized(),
                                                         std::move(data)));
  }

  const auto& qs = eval_set.queries;
  std::vector<QueryScore> scores(qs.size());
  std::vector<char> scored(qs.size(), 0);
  parallel_for(qs.size(), options.threads, [&](std::size_t i) {
    const EvalQuery& q = qs[i];
    scores[i] = {q.text, q.language, q.gap, 0.0, 0.0};
    if (q.relevant.empty()) return;
    auto it = per_language.find(q.language);
    if (it == per_language.end()) throw Error("no eval corpus for language '" + q.language + "'");
    const auto x_q = encode_query(tokenize(q.text, vocab), params);
    SearchOptions so;
    so.score = options.score;
    const auto res = search_vector(x_q, it->second, it->second.size(), so);
    std::vector<std::string> ranking;
    ranking.reserve(res.hits.size());
    for (const auto& h : res.hits) ranking.push_back(h.product_id);
    scores[i].recall = recall_at_k(ranking, q.relevant, options.k);
    scores[i].ap = average_precision(ranking, q.relevant);
    scored[i] = 1;
  });

  struct Acc {
    double recall = 0.0, ap = 0.0;
    std::size_t n = 0, skipped = 0;
    std::set<std::string> langs;
  };
  std::map<std::string, Acc> acc;
  std::vector<std::string> order;
  auto add = [&](const std::string& group, std::size_t i) {
    auto [it, fresh] = acc.try_emplace(group);
    Acc& a = it->second;
    a.langs.insert(qs[i].language);
    if (!scored[i]) {
      ++a.skipped;
      return;
    }
    a.recall += scores[i].recall;
    a.ap += scores[i].ap;
    ++a.n;
  };
  for (std::size_t i = 0; i < qs.size(); ++i) {
    const std::string sub = qs[i].gap ? ":gap" : ":nongap";
    add(qs[i].language, i);
    add("all", i);
    add("all" + sub, i);
    add(qs[i].language + sub, i);
  }

  MetricsReport report;
  report.k = options.k;
  report.score = options.score;
  auto emit = [&](const std::string& group) {
    auto it = acc.find(group);
    if (it == acc.end()) return;
    const Acc& a = it->second;
    MetricsRow r;
    r.group = group;
    r.n_queries = a.n;
    r.skipped = a.skipped;
    if (a.n > 0) {
      r.recall = a.recall / static_cast<double>(a.n);
      r.map = a.ap / static_cast<double>(a.n);
    }
    for (const auto& l : a.langs) {
      auto c = eval_set.corpus.find(l);
      if (c != eval_set.corpus.end()) r.corpus_size += c->second.size();
    }
    report.rows.push_back(r);
  };
  std::set<std::string> langs;
  for (const auto& q : qs) langs.insert(q.language);
  for (const auto& l : langs) emit(l);
  emit("all");
  emit("all:gap");
  emit("all:nongap");
  for (const auto& l : langs) {
    emit(l + ":gap");
    emit(l + ":nongap");
  }
  if (options.keep_per_query) {
    for (std::size_t i = 0; i < qs.size(); ++i) {
      if (scored[i]) report.per_query.push_back(scores[i]);
    }
  }
  return report;
}

inline MetricsReport evaluate(const ModelParams<float>& params, const Vocab& vocab, const BipartiteGraph& graph,
                              const EvalSet& eval_set, const EvalOptions& options = {}) {
  std::vector<std::string> ids;
  for (const auto& [_, c] : eval_set.corpus) ids.insert(ids.end(), c.begin(), c.end());
  std::sort(ids.begin(), ids.end());
  if (ids.empty()) throw Error("empty eval corpus");
  const auto pre = precompute_embeddings(graph, vocab, params, ids, options.threads);
  const auto index = build_index(rows_from_embeddings(graph, pre.embeddings), options.score == ScoreMode::kCosine);
  return evaluate_index(index, vocab, params, eval_set, options);
}

// `arm \t language \t recall_at_k \t map \t n_queries`
inline void write_metrics_header(std::ostream& out) { out << "arm\tlanguage\trecall_at_k\tmap\tn_queries\n"; }

inline void write_metrics_rows(const MetricsReport& report, std::string_view arm, std::ostream& out) {
  for (const auto& r : report.rows) {
    out << arm << '\t' << r.group << '\t' << detail::fmt6(r.recall) << '\t' << detail::fmt6(r.map) << '\t'
        << r.n_queries << '\n';
  }
}

inline void write_metrics_tsv(const MetricsReport& report, std::string_view arm, std::ostream& out) {
  write_metrics_header(out);
  write_metrics_rows(report, arm, out);
}

inline void write_per_query_tsv(const MetricsReport& report, std::string_view arm, std::ostream& out) {
  out << "arm\tlanguage\tquery\tgap\trecall_at_k\tap\n";
  for (const auto& q : report.per_query) {
    out << arm << '\t' << q.language << '\t' << q.text << '\t' << (q.gap ? "gap" : "nongap") << '\t'
        << detail::fmt6(q.recall) << '\t' << detail::fmt6(q.ap) << '\n';
  }
}

inline nlohmann::ordered_json metrics_json(const MetricsReport& report) {
  nlohmann::ordered_json j;
  j["k"] = report.k;
  j["score"] = score_mode_name(report.score);
  for (const auto& r : report.rows) {
    j["groups"][r.group] = {{"recall_at_k", r.recall}, {"map", r.map}, {"n_queries", r.n_queries},
                            {"skipped", r.skipped},    {"corpus_size", r.corpus_size}};
  }
  j["config"] = report.config;
  return j;
}

struct AblationArm {
  std::string name;
  std::vector<std::pair<std::string, std::string>> overrides;  // training keys, applied in order
};

struct AblationTable {
  std::vector<std::string> arms;
  std::vector<MetricsReport> reports;
  std::vector<TrainConfig> configs;
};

using ArmCallback = std::function<void(const AblationArm&, const TrainResult&, const MetricsReport&)>;

// Trains every arm from the same base config, corpus and seed, and evaluates
// each on the same eval set.
inline AblationTable run_ablation_grid(const TrainConfig& base, const std::vector<AblationArm>& arms,
                                       const TrainingCorpus& corpus, const Vocab& vocab, const BipartiteGraph& graph,
                                       const EvalSet& eval_set, const EvalOptions& options = {},
                                       const ArmCallback& on_arm = {}) {
  std::vector<TrainConfig> configs;
  for (const auto& arm : arms) {
    TrainConfig c = base;
    for (const auto& [k, v] : arm.overrides) {
      if (!apply_train_override(c, k, v)) throw Error("arm '" + arm.name + "': unknown override '" + k + "'");
    }
    c.warmup_batches();
    configs.push_back(c);
  }
  AblationTable table;
  for (std::size_t i = 0; i < arms.size(); ++i) {
    auto trained = train(configs[i], corpus, vocab.size());
    auto report = evaluate(trained.params, vocab, graph, eval_set, options);
    report.config = configs[i].to_json();
    if (on_arm) on_arm(arms[i], trained, report);
    table.arms.push_back(arms[i].name);
    table.reports.push_back(std::move(report));
    table.configs.push_back(configs[i]);
  }
  return table;
}

// One row per arm; columns are recall and mAP per language, then overall.
inline void write_ablation_tsv(const AblationTable& table, std::ostream& out) {
  std::vector<std::string> groups;
  if (!table.reports.empty()) {
    for (const auto& r : table.reports.front().rows) {
      if (r.group.find(':') == std::string::npos && r.group != "all") groups.push_back(r.group);
    }
    groups.push_back("all");
  }
  out << "arm";
  for (const auto& g : groups) out << '\t' << g << "_recall\t" << g << "_map";
  out << '\n';
  for (std::size_t i = 0; i < table.arms.size(); ++i) {
    out << table.arms[i];
    for (const auto& g : groups) {
      const auto& r = table.reports[i].row(g);
      out << '\t' << detail::fmt6(r.recall) << '\t' << detail::fmt6(r.map);
    }
    out << '\n';
  }
}

}  // namespace mlgcn
