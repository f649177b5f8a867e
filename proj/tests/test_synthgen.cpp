#include <gtest/gtest.h>

#include <sstream>

#include "mlgcn/eval.hpp"
#include "mlgcn/synthgen.hpp"

using namespace mlgcn;

namespace {

SynthConfig small(double gap_rate, std::uint64_t seed = 0) {
  SynthConfig c;
  c.languages = {{"en", 800}, {"es", 200}, {"de", 60}};
  c.concepts = 80;
  c.distractors = 200;
  c.eval_queries = 40;
  c.gap_rate = gap_rate;
  c.seed = seed;
  return c;
}

std::set<std::string> words_of(const std::string& text) {
  std::set<std::string> out;
  for (const auto& w : split_words(normalize_text(text))) out.insert(w.text);
  return out;
}

bool overlaps(const std::string& a, const std::string& b) {
  const auto wa = words_of(a), wb = words_of(b);
  return std::any_of(wa.begin(), wa.end(), [&](const std::string& w) { return wb.contains(w); });
}

std::map<std::string, std::string> descriptions(const SynthCorpus& c) {
  std::map<std::string, std::string> out;
  for (const auto& e : c.catalog) out[e.product_id] = e.text;
  return out;
}

std::string files(const SynthCorpus& c) {
  std::ostringstream s;
  write_log_records(c.logs, s);
  write_catalog(c.catalog, s);
  write_eval_queries(c.eval, s);
  return s.str();
}

}  // namespace

TEST(Synthgen, NoGapMeansSharedWords) {
  const auto c = generate_corpus(small(0.0));
  const auto desc = descriptions(c);
  for (const auto& r : c.logs) {
    if (r.signal == Signal::kImpression) continue;
    EXPECT_TRUE(overlaps(r.query, desc.at(r.product_id))) << r.query;
  }
  for (const auto& q : c.eval) {
    EXPECT_FALSE(q.gap);
    for (const auto& id : q.relevant) EXPECT_TRUE(overlaps(q.text, desc.at(id))) << q.text;
  }
}

TEST(Synthgen, FullGapMeansDisjointWords) {
  const auto c = generate_corpus(small(1.0));
  const auto desc = descriptions(c);
  for (const auto& r : c.logs) {
    if (r.signal == Signal::kImpression) continue;
    EXPECT_FALSE(overlaps(r.query, desc.at(r.product_id))) << r.query;
  }
  for (const auto& q : c.eval) {
    EXPECT_TRUE(q.gap);
    for (const auto& id : q.relevant) EXPECT_FALSE(overlaps(q.text, desc.at(id))) << q.text;
  }
}

TEST(Synthgen, SameSeedSameBytes) {
  EXPECT_EQ(files(generate_corpus(small(0.5, 3))), files(generate_corpus(small(0.5, 3))));
  EXPECT_NE(files(generate_corpus(small(0.5, 3))), files(generate_corpus(small(0.5, 4))));
}

TEST(Synthgen, LanguageSharesMatchConfig) {
  const auto cfg = small(0.5);
  const auto c = generate_corpus(cfg);
  std::map<std::string, std::size_t> pairs;
  for (const auto& r : c.logs) pairs[r.language] += r.signal == Signal::kPurchase;
  for (const auto& l : cfg.languages) EXPECT_EQ(pairs[l.code], l.pairs) << l.code;
}

TEST(Synthgen, EvalQueriesAreLabeledHeldOutAndResolvable) {
  const auto c = generate_corpus(small(0.5));
  const auto desc = descriptions(c);
  const auto graph = build_graph(c.logs, c.catalog);
  std::size_t gap = 0;
  for (const auto& q : c.eval) {
    ASSERT_FALSE(q.relevant.empty());
    for (const auto& id : q.relevant) {
      ASSERT_TRUE(desc.contains(id));
      EXPECT_EQ(graph.product(id).entry.language, q.language);
      EXPECT_EQ(overlaps(q.text, desc.at(id)), !q.gap) << q.text;
    }
    EXPECT_FALSE(graph.positives.contains(QueryKey{canonical_text(q.text), q.language})) << q.text;
    gap += q.gap;
  }
  EXPECT_GT(gap, 0u);
  EXPECT_LT(gap, c.eval.size());
  EXPECT_NO_THROW(build_eval_set(c.eval, graph));
}

TEST(Synthgen, DefaultCorpusShape) {
  const auto c = generate_corpus(SynthConfig{});
  std::map<std::string, std::size_t> purchases, eval;
  for (const auto& r : c.logs) purchases[r.language] += r.signal == Signal::kPurchase;
  for (const auto& q : c.eval) ++eval[q.language];
  EXPECT_EQ(purchases, (std::map<std::string, std::size_t>{{"de", 400}, {"en", 16000}, {"es", 2000}, {"fr", 1000}, {"it", 600}}));
  for (const auto& [lang, n] : eval) EXPECT_EQ(n, 500u) << lang;
  std::set<std::string> ids;
  for (const auto& e : c.catalog) EXPECT_TRUE(ids.insert(e.product_id).second);
}

TEST(Synthgen, InvalidConfig) {
  auto c = small(0.5);
  c.gap_rate = 1.5;
  EXPECT_THROW(generate_corpus(c), Error);
  c = small(0.5);
  c.languages.push_back({"en", 5});
  EXPECT_THROW(generate_corpus(c), Error);
  c = small(0.5);
  c.languages[0].pairs = 0;
  EXPECT_THROW(generate_corpus(c), Error);
}
