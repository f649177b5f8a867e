#include <gtest/gtest.h>

#include <sstream>

#include "mlgcn/eval.hpp"
#include "mlgcn/synthgen.hpp"

using namespace mlgcn;

namespace {

using Ranking = std::vector<std::string>;

// Precision@rank summed over relevant positions, written independently of
// the library: enumerate relevant ranks first, then average.
double oracle_ap(const Ranking& r, const std::set<std::string>& rel) {
  std::vector<std::size_t> ranks;
  for (std::size_t i = 0; i < r.size(); ++i)
    if (rel.count(r[i])) ranks.push_back(i + 1);
  double s = 0;
  for (std::size_t j = 0; j < ranks.size(); ++j) s += double(j + 1) / double(ranks[j]);
  return s / double(rel.size());
}

std::string word(std::size_t i) {
  std::string w;
  do {
    w += static_cast<char>('a' + i % 26);
    i /= 26;
  } while (i);
  return "w" + w;
}

// One-hot world: product i's description is word i, embedded as e_i.
struct OneHot {
  BipartiteGraph graph;
  Vocab vocab = Vocab({"[PAD]", "[UNK]"});
  ModelParams<float> params;

  explicit OneHot(std::size_t n) {
    std::vector<CatalogEntry> cat;
    std::vector<std::string> pieces{"[PAD]", "[UNK]"};
    for (std::size_t i = 0; i < n; ++i) {
      cat.push_back({"P" + std::to_string(i), "en", word(i)});
      pieces.push_back(word(i));
    }
    graph = build_graph({}, cat);
    vocab = Vocab(pieces);
    params = ModelParams<float>::zeros({vocab.size(), n, n, false});
    for (std::size_t i = 0; i < n; ++i) {
      params.encoder_weight(i, i) = 1.0f;
      params.token_embeddings(*vocab.find(word(i)), i) = 1.0f;
    }
  }
};

}  // namespace

TEST(Recall, Examples) {
  const Ranking r{"x", "a", "y", "b"};
  EXPECT_EQ(recall_at_k(r, {"a"}, 10), 1.0);
  EXPECT_EQ(recall_at_k(r, {"a", "z"}, 10), 0.5);
  EXPECT_EQ(recall_at_k(r, {"q"}, 10), 0.0);
  EXPECT_EQ(recall_at_k(r, {"a", "b"}, 2), 0.5);
  EXPECT_THROW(recall_at_k(r, {}, 10), Error);
}

TEST(AveragePrecision, Examples) {
  EXPECT_DOUBLE_EQ(average_precision(Ranking{"a", "b", "c"}, {"a", "b"}), 1.0);
  EXPECT_NEAR(average_precision(Ranking{"a", "x", "b"}, {"a", "b"}), (1.0 + 2.0 / 3.0) / 2.0, 1e-12);
  EXPECT_NEAR(average_precision(Ranking{"a", "x", "b"}, {"a", "b"}), 0.833333, 1e-6);
  EXPECT_EQ(average_precision(Ranking{"x", "y"}, {"a"}), 0.0);
  EXPECT_THROW(average_precision(Ranking{"x"}, {}), Error);
}

TEST(Metrics, PropertiesOnRandomRankings) {
  Rng rng(1);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 5 + rng.uniform(30);
    Ranking r;
    for (std::size_t i = 0; i < n; ++i) r.push_back("p" + std::to_string(i));
    rng.shuffle(r);
    std::set<std::string> rel;
    const std::size_t nrel = 1 + rng.uniform(5);
    while (rel.size() < nrel) rel.insert("p" + std::to_string(rng.uniform(n + 3)));

    EXPECT_NEAR(average_precision(r, rel), oracle_ap(r, rel), 1e-12);
    double prev = 0;
    for (std::size_t k = 1; k <= n + 1; ++k) {
      const double rk = recall_at_k(r, rel, k);
      EXPECT_GE(rk, prev);
      prev = rk;
    }
    const double ap = average_precision(r, rel);
    std::size_t present = 0;
    for (const auto& id : rel) present += std::count(r.begin(), r.end(), id);
    bool top = present == rel.size();
    for (std::size_t i = 0; i < rel.size() && top && i < r.size(); ++i) top = rel.count(r[i]) > 0;
    EXPECT_EQ(ap == 1.0, top);

    // Shuffle the tail past both K and the last relevant rank.
    std::size_t last = 0;
    for (std::size_t i = 0; i < r.size(); ++i)
      if (rel.count(r[i])) last = i + 1;
    const std::size_t cut = std::max<std::size_t>(10, last);
    if (cut < r.size()) {
      Ranking p = r;
      std::vector<std::string> tail(p.begin() + cut, p.end());
      rng.shuffle(tail);
      std::copy(tail.begin(), tail.end(), p.begin() + cut);
      EXPECT_EQ(recall_at_k(p, rel, 10), recall_at_k(r, rel, 10));
      EXPECT_EQ(average_precision(p, rel), ap);
    }
  }
}

TEST(EvalQueries, ReadWriteRoundTrip) {
  const std::vector<EvalQuery> qs{{"red shoe", "en", {"P1", "P2"}, true}, {"zapato", "es", {}, false}};
  std::stringstream s;
  write_eval_queries(qs, s);
  EXPECT_EQ(read_eval_queries(s), qs);
  std::istringstream bad("q\ten\tP1\tmaybe\n");
  EXPECT_THROW(read_eval_queries(bad), Error);
}

TEST(EvalSetBuild, CorpusAndErrors) {
  std::vector<CatalogEntry> cat;
  for (int i = 0; i < 50; ++i) cat.push_back({"P" + std::to_string(i), i < 40 ? "en" : "de", "x"});
  const auto g = build_graph({{"seen", "P0", "en", Signal::kPurchase, 1}}, cat);
  const auto es = build_eval_set({{"new", "en", {"P3"}, false}, {"neu", "de", {"P41"}, true}}, g, 10, 0);
  EXPECT_EQ(es.corpus.at("en").size(), 10u);
  EXPECT_EQ(es.corpus.at("de").size(), 10u);
  EXPECT_TRUE(std::binary_search(es.corpus.at("en").begin(), es.corpus.at("en").end(), "P3"));
  for (const auto& id : es.corpus.at("de")) EXPECT_EQ(g.product(id).entry.language, "de");
  EXPECT_THROW(build_eval_set({{"Seen", "en", {"P3"}, false}}, g), Error);
  EXPECT_THROW(build_eval_set({{"x", "en", {"P45"}, false}}, g), Error);
}

TEST(Evaluate, OracleModelIsPerfect) {
  OneHot w(40);
  std::vector<EvalQuery> qs;
  for (std::size_t i = 0; i < 40; ++i) qs.push_back({word(i), "en", {"P" + std::to_string(i)}, i % 2 == 0});
  const auto es = build_eval_set(qs, w.graph, 40);
  for (auto mode : {ScoreMode::kCosine, ScoreMode::kInner}) {
    EvalOptions o;
    o.score = mode;
    const auto rep = evaluate(w.params, w.vocab, w.graph, es, o);
    EXPECT_EQ(rep.row("all").recall, 1.0);
    EXPECT_EQ(rep.row("all").map, 1.0);
    EXPECT_EQ(rep.row("all:gap").n_queries, 20u);
  }
}

TEST(Evaluate, RandomParamsGiveChanceRecall) {
  const std::size_t n = 1000, nq = 600;
  Rng rng(2);
  std::vector<CatalogEntry> cat;
  std::vector<std::string> text;
  for (std::size_t i = 0; i < n; ++i) {
    cat.push_back({"P" + std::to_string(i), "en", word(rng.uniform(300)) + " " + word(rng.uniform(300))});
    text.push_back(cat.back().text);
  }
  const auto graph = build_graph({}, cat);
  const auto vocab = build_vocab(text, 4096, 1);
  const auto params = ModelParams<float>::init({vocab.size(), 32, 32, true}, 0);
  std::vector<EvalQuery> qs;
  for (std::size_t i = 0; i < nq; ++i) {
    qs.push_back({word(rng.uniform(300)) + " " + word(rng.uniform(300)), "en", {"P" + std::to_string(rng.uniform(n))}, false});
  }
  const auto rep = evaluate(params, vocab, graph, build_eval_set(qs, graph, n), {});
  const double p = 10.0 / n;
  const double sigma = std::sqrt(p * (1 - p) / nq);
  EXPECT_NEAR(rep.row("all").recall, p, 3 * sigma);
}

TEST(Evaluate, DuplicateQueriesAndPerQueryMeans) {
  SynthConfig sc;
  sc.languages = {{"en", 400}, {"fr", 100}};
  sc.concepts = 40;
  sc.distractors = 100;
  sc.eval_queries = 30;
  const auto c = generate_corpus(sc);
  const auto graph = build_graph(c.logs, c.catalog);
  std::vector<std::string> text;
  for (const auto& e : c.catalog) text.push_back(e.text);
  for (const auto& r : c.logs) text.push_back(r.query);
  const auto vocab = build_vocab(text, 2048, 1);
  auto qs = c.eval;
  qs.push_back(qs.front());
  qs.push_back({"nothing relevant", "en", {}, false});
  const auto params = ModelParams<float>::init({vocab.size(), 8, 8, true}, 5);
  EvalOptions o;
  o.keep_per_query = true;
  const auto rep = evaluate(params, vocab, graph, build_eval_set(qs, graph), o);
  const auto& pq = rep.per_query;
  ASSERT_EQ(pq.size(), qs.size() - 1);
  EXPECT_EQ(pq.front().recall, pq.back().recall);
  EXPECT_EQ(pq.front().ap, pq.back().ap);
  EXPECT_EQ(rep.row("en").skipped, 1u);
  EXPECT_EQ(rep.row("all").skipped, 1u);
  std::map<std::string, std::pair<double, int>> sums;
  for (const auto& q : pq) {
    for (const auto& g : {q.language, std::string("all"), std::string(q.gap ? "all:gap" : "all:nongap")}) {
      sums[g].first += q.recall;
      sums[g].second += 1;
    }
  }
  for (const auto& [g, s] : sums) {
    EXPECT_NEAR(rep.row(g).recall, s.first / s.second, 1e-12) << g;
    EXPECT_EQ(rep.row(g).n_queries, static_cast<std::size_t>(s.second));
  }
}

TEST(Ablation, TableShapeAndDuplicateArms) {
  SynthConfig sc;
  sc.languages = {{"en", 400}, {"fr", 100}};
  sc.concepts = 40;
  sc.distractors = 100;
  sc.eval_queries = 20;
  const auto c = generate_corpus(sc);
  const auto graph = build_graph(c.logs, c.catalog);
  std::vector<std::string> text;
  for (const auto& e : c.catalog) text.push_back(e.text);
  for (const auto& r : c.logs) text.push_back(r.query);
  const auto vocab = build_vocab(text, 2048, 1);
  const TrainingCorpus corpus(graph, vocab);
  TrainConfig base;
  base.total_batches = 60;
  base.batch_size = 8;
  base.embed_dim = 8;
  base.dim = 8;
  const std::vector<AblationArm> arms{{"full", {}}, {"no-gcn", {{"gcn", "false"}}}, {"full-again", {}}};
  const auto table = run_ablation_grid(base, arms, corpus, vocab, graph, build_eval_set(c.eval, graph, 200));
  std::stringstream s;
  write_ablation_tsv(table, s);
  std::vector<std::string> lines;
  for (std::string l; std::getline(s, l);) lines.push_back(l);
  ASSERT_EQ(lines.size(), 4u);
  EXPECT_EQ(lines[0], "arm\ten_recall\ten_map\tfr_recall\tfr_map\tall_recall\tall_map");
  EXPECT_EQ(lines[1].substr(lines[1].find('\t')), lines[3].substr(lines[3].find('\t')));
  EXPECT_FALSE(table.configs[1].gcn);
  EXPECT_THROW(run_ablation_grid(base, {{"bad", {{"nope", "1"}}}}, corpus, vocab, graph,
                                 build_eval_set(c.eval, graph, 200)),
               Error);
}

TEST(MetricsFiles, TsvLayout) {
  MetricsReport rep;
  rep.rows = {{"en", 0.5, 0.25, 4, 0, 10}, {"all", 0.5, 0.25, 4, 0, 10}};
  std::stringstream s;
  write_metrics_tsv(rep, "full", s);
  EXPECT_EQ(s.str(), "arm\tlanguage\trecall_at_k\tmap\tn_queries\nfull\ten\t0.500000\t0.250000\t4\nfull\tall\t0.500000\t0.250000\t4\n");
  EXPECT_EQ(metrics_json(rep)["groups"]["en"]["corpus_size"], 10);
}
