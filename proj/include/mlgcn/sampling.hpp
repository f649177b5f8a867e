#pragma once

// Negative sampling (random, behavior, offline model-based, online
// model-based) and the language-weighted batch scheduler.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mlgcn/common.hpp"
#include "mlgcn/graphstore.hpp"
#include "mlgcn/model.hpp"
#include "mlgcn/textcore.hpp"

namespace mlgcn {

enum class NegativeMode { kRandom, kBehavior, kOffline, kOnline };
enum class Fusion { kUnweightSeparate, kWeightMix, kWeightSeparate };

inline std::string_view negative_mode_name(NegativeMode m) {
  switch (m) {
    case NegativeMode::kRandom: return "random";
    case NegativeMode::kBehavior: return "behavior";
    case NegativeMode::kOffline: return "offline";
    case NegativeMode::kOnline: return "online";
  }
  return "?";
}

inline NegativeMode parse_negative_mode(std::string_view s) {
  if (s == "random") return NegativeMode::kRandom;
  if (s == "behavior") return NegativeMode::kBehavior;
  if (s == "offline") return NegativeMode::kOffline;
  if (s == "online") return NegativeMode::kOnline;
  throw Error("unknown negative mode '" + std::string(s) + "'");
}

inline std::string_view fusion_name(Fusion f) {
  switch (f) {
    case Fusion::kUnweightSeparate: return "unweight-separate";
    case Fusion::kWeightMix: return "weight-mix";
    case Fusion::kWeightSeparate: return "weight-separate";
  }
  return "?";
}

inline Fusion parse_fusion(std::string_view s) {
  if (s == "unweight-separate") return Fusion::kUnweightSeparate;
  if (s == "weight-mix") return Fusion::kWeightMix;
  if (s == "weight-separate") return Fusion::kWeightSeparate;
  throw Error("unknown fusion strategy '" + std::string(s) + "'");
}

// p_l = share_l^S / sum_m share_m^S. Zero shares stay at zero.
inline std::map<std::string, double> language_weights(const std::map<std::string, double>& shares, double S) {
  if (!(S >= 0.0 && S <= 1.0)) throw Error("smoothing exponent must lie in [0, 1]");
  double sum = 0.0;
  for (const auto& [lang, share] : shares) {
    if (!(share >= 0.0) || !std::isfinite(share)) throw Error("language share for '" + lang + "' is negative");
    sum += share;
  }
  if (sum == 0.0) throw Error("all language shares are zero");
  if (std::abs(sum - 1.0) > 1e-9) throw Error("language shares must sum to 1");
  std::map<std::string, double> out;
  double norm = 0.0;
  for (const auto& [lang, share] : shares) {
    const double w = share > 0.0 ? std::pow(share, S) : 0.0;
    out[lang] = w;
    norm += w;
  }
  for (auto& [_, w] : out) w /= norm;
  return out;
}

// Graph and behavior data resolved to dense indices and token sequences.
class TrainingCorpus {
 public:
  struct Product {
    std::string id;
    std::string language;
    TokenSeq description;
    std::vector<std::size_t> neighbors;  // query indices, in neighbor rank order
  };
  struct Language {
    std::string code;
    std::vector<std::size_t> products;
    std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (query, product)
  };

  TrainingCorpus(const BipartiteGraph& graph, const Vocab& vocab,
                 const std::map<QueryKey, std::set<std::string>>& behavior = {}) {
    for (const auto& [key, ids] : graph.positives) {
      query_index_.emplace(key, queries_.size());
      queries_.push_back(key);
      query_tokens_.push_back(tokenize(key.text, vocab));
    }
    std::map<std::string, std::size_t, std::less<>> lang_index;
    for (const auto& [code, _] : graph.languages) {
      lang_index.emplace(code, languages_.size());
      languages_.push_back(Language{code, {}, {}});
    }
    for (const auto& [pid, node] : graph.products) {
      Product p;
      p.id = pid;
      p.language = node.entry.language;
      p.description = tokenize(node.entry.text, vocab);
      for (const auto& e : node.neighbors) {
        auto it = query_index_.find(QueryKey{e.query, p.language});
        if (it == query_index_.end()) throw Error("neighbor query missing from query table: '" + e.query + "'");
        p.neighbors.push_back(it->second);
      }
      product_index_.emplace(pid, products_.size());
      languages_[lang_index.at(p.language)].products.push_back(products_.size());
      products_.push_back(std::move(p));
    }
    positives_.resize(queries_.size());
    for (std::size_t q = 0; q < queries_.size(); ++q) {
      for (const auto& id : graph.positives.at(queries_[q])) positives_[q].push_back(product_index_.at(id));
      std::sort(positives_[q].begin(), positives_[q].end());
    }
    for (const auto& tp : train_pairs(graph)) {
      const std::size_t q = query_index_.at(QueryKey{tp.query, tp.language});
      languages_[lang_index.at(tp.language)].pairs.emplace_back(q, product_index_.at(tp.product_id));
    }
    behavior_.resize(queries_.size());
    for (const auto& [key, ids] : behavior) {
      auto qit = query_index_.find(key);
      if (qit == query_index_.end()) continue;  // no positive, never a training query
      for (const auto& id : ids) {
        auto pit = product_index_.find(id);
        if (pit == product_index_.end()) continue;
        if (products_[pit->second].language != key.language) continue;
        if (is_positive(qit->second, pit->second)) continue;
        behavior_[qit->second].push_back(pit->second);
      }
    }
  }

  const std::vector<Product>& products() const { return products_; }
  const std::vector<QueryKey>& queries() const { return queries_; }
  const TokenSeq& query_tokens(std::size_t q) const { return query_tokens_.at(q); }
  const std::vector<Language>& languages() const { return languages_; }
  const std::vector<std::size_t>& positives(std::size_t q) const { return positives_.at(q); }
  const std::vector<std::size_t>& behavior(std::size_t q) const { return behavior_.at(q); }

  bool is_positive(std::size_t q, std::size_t p) const {
    const auto& v = positives_[q];
    return std::binary_search(v.begin(), v.end(), p);
  }

  std::size_t product_index(std::string_view id) const {
    auto it = product_index_.find(id);
    if (it == product_index_.end()) throw Error("unknown product_id '" + std::string(id) + "'");
    return it->second;
  }
  std::optional<std::size_t> query_index(const QueryKey& key) const {
    auto it = query_index_.find(key);
    if (it == query_index_.end()) return std::nullopt;
    return it->second;
  }
  const Language& language(std::string_view code) const {
    for (const auto& l : languages_) {
      if (l.code == code) return l;
    }
    throw Error("unknown language '" + std::string(code) + "'");
  }

  // Product tower input. `drop_query` removes that query from the neighbor
  // list (self-neighbor exclusion during training).
  ProductRef product_ref(std::size_t p, std::optional<std::size_t> drop_query = std::nullopt) const {
    const Product& prod = products_.at(p);
    ProductRef ref;
    ref.description = prod.description;
    ref.neighbors.reserve(prod.neighbors.size());
    for (std::size_t q : prod.neighbors) {
      if (drop_query && *drop_query == q) continue;
      ref.neighbors.push_back(query_tokens_[q]);
    }
    return ref;
  }

 private:
  std::vector<Product> products_;
  std::map<std::string, std::size_t, std::less<>> product_index_;
  std::vector<QueryKey> queries_;
  std::vector<TokenSeq> query_tokens_;
  std::map<QueryKey, std::size_t> query_index_;
  std::vector<std::vector<std::size_t>> positives_;
  std::vector<std::vector<std::size_t>> behavior_;
  std::vector<Language> languages_;
};

// Impressed (query, product) pairs that never received a click or purchase.
inline std::map<QueryKey, std::set<std::string>> behavior_negatives(const std::vector<LogRecord>& records) {
  std::map<QueryKey, std::set<std::string>> impressed, engaged;
  for (const auto& r : records) {
    QueryKey key{canonical_text(r.query), r.language};
    if (r.signal == Signal::kImpression) {
      impressed[key].insert(r.product_id);
    } else {
      engaged[key].insert(r.product_id);
    }
  }
  std::map<QueryKey, std::set<std::string>> out;
  for (auto& [key, ids] : impressed) {
    auto& dst = out[key];
    auto eit = engaged.find(key);
    for (const auto& id : ids) {
      if (eit == engaged.end() || !eit->second.contains(id)) dst.insert(id);
    }
  }
  return out;
}

// Uniform over `candidates` excluding the query's known positives.
inline std::size_t sample_random_negative(const TrainingCorpus& corpus, std::size_t query,
                                          std::span<const std::size_t> candidates, Rng& rng) {
  if (candidates.size() < 2) throw Error("language has fewer than 2 products; cannot sample a negative");
  for (int attempt = 0; attempt < 64; ++attempt) {
    const std::size_t p = candidates[rng.uniform(candidates.size())];
    if (!corpus.is_positive(query, p)) return p;
  }
  std::vector<std::size_t> rest;
  for (std::size_t p : candidates) {
    if (!corpus.is_positive(query, p)) rest.push_back(p);
  }
  if (rest.empty()) throw Error("candidate set empty");
  return rest[rng.uniform(rest.size())];
}

// For each query vector, the candidate with the highest inner product among
// those not excluded; ties go to the lowest candidate index. nullopt when
// every candidate is excluded.
template <typename T, typename Excluded>
std::vector<std::optional<std::size_t>> select_hard_negatives(std::span<const std::vector<T>> queries,
                                                              std::span<const std::vector<T>> candidates,
                                                              Excluded&& excluded) {
  std::vector<std::optional<std::size_t>> out(queries.size());
  for (std::size_t i = 0; i < queries.size(); ++i) {
    T best = T(0);
    for (std::size_t c = 0; c < candidates.size(); ++c) {
      if (excluded(i, c)) continue;
      const T s = detail::dot<T>(queries[i], candidates[c]);
      if (!out[i] || s > best) {
        out[i] = c;
        best = s;
      }
    }
  }
  return out;
}

// Online model-based hard negatives: embed the candidate products and the
// batch queries with the current parameters and take the per-query argmax.
template <typename T>
std::vector<std::optional<std::size_t>> sample_online_hard_negatives(const TrainingCorpus& corpus,
                                                                     std::span<const std::size_t> batch_queries,
                                                                     std::span<const std::size_t> candidates,
                                                                     const ModelParams<T>& params,
                                                                     std::size_t threads = 1) {
  if (candidates.empty()) throw Error("online mining needs at least one candidate");
  std::vector<std::vector<T>> cand_vecs(candidates.size());
  parallel_for(candidates.size(), threads, [&](std::size_t c) {
    cand_vecs[c] = encode_product(corpus.product_ref(candidates[c]), params);
  });
  std::vector<std::vector<T>> query_vecs(batch_queries.size());
  parallel_for(batch_queries.size(), threads, [&](std::size_t i) {
    query_vecs[i] = encode_query(corpus.query_tokens(batch_queries[i]), params);
  });
  auto picks = select_hard_negatives<T>(query_vecs, cand_vecs, [&](std::size_t i, std::size_t c) {
    return corpus.is_positive(batch_queries[i], candidates[c]);
  });
  std::vector<std::optional<std::size_t>> out(picks.size());
  for (std::size_t i = 0; i < picks.size(); ++i) {
    if (picks[i]) out[i] = candidates[*picks[i]];
  }
  return out;
}

struct RankWindow {
  std::size_t lo = 200;
  std::size_t hi = 1000;
};

// Offline model-based hard negatives: score every same-language product for
// each training query, rank by inner product (ties by product id), and sample
// `per_query` ids uniformly from ranks [lo, hi] (1-based, clipped to the
// catalog), excluding known positives. An empty entry means "fall back to
// random".
template <typename T>
std::vector<std::vector<std::size_t>> refresh_offline_hard_negatives(const TrainingCorpus& corpus,
                                                                     const ModelParams<T>& params,
                                                                     RankWindow window, std::size_t per_query,
                                                                     Rng& rng, std::size_t threads = 1) {
  if (window.lo < 1 || window.lo > window.hi) throw Error("invalid rank window");
  const auto& products = corpus.products();
  std::vector<std::vector<T>> prod_vecs(products.size());
  parallel_for(products.size(), threads,
               [&](std::size_t p) { prod_vecs[p] = encode_product(corpus.product_ref(p), params); });

  const std::size_t nq = corpus.queries().size();
  std::vector<std::vector<std::size_t>> eligible(nq);
  parallel_for(nq, threads, [&](std::size_t q) {
    const auto& lang = corpus.language(corpus.queries()[q].language);
    const std::size_t n = lang.products.size();
    const std::size_t hi = std::min(window.hi, n);
    if (window.lo > hi) return;
    const auto x_q = encode_query(corpus.query_tokens(q), params);
    std::vector<std::pair<T, std::size_t>> scored;
    scored.reserve(n);
    for (std::size_t p : lang.products) scored.emplace_back(detail::dot<T>(x_q, prod_vecs[p]), p);
    auto better = [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    };
    std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(hi), scored.end(), better);
    for (std::size_t r = window.lo - 1; r < hi; ++r) {
      if (!corpus.is_positive(q, scored[r].second)) eligible[q].push_back(scored[r].second);
    }
  });

  std::vector<std::vector<std::size_t>> out(nq);
  for (std::size_t q = 0; q < nq; ++q) {
    auto& pool = eligible[q];
    const std::size_t take = std::min(per_query, pool.size());
    for (std::size_t k = 0; k < take; ++k) {
      const std::size_t j = k + static_cast<std::size_t>(rng.uniform(pool.size() - k));
      std::swap(pool[k], pool[j]);
      out[q].push_back(pool[k]);
    }
  }
  return out;
}

struct LanguageSchedule {
  std::vector<std::string> languages;
  std::vector<double> shares;
  double smoothing = 0.7;
  std::vector<double> probabilities;
};

// Shares are each language's fraction of training pairs.
inline LanguageSchedule make_schedule(const TrainingCorpus& corpus, double smoothing) {
  std::map<std::string, double> shares;
  double total = 0.0;
  for (const auto& l : corpus.languages()) total += static_cast<double>(l.pairs.size());
  if (total == 0.0) throw Error("no training pairs");
  for (const auto& l : corpus.languages()) {
    if (!l.pairs.empty()) shares[l.code] = static_cast<double>(l.pairs.size()) / total;
  }
  const auto probs = language_weights(shares, smoothing);
  LanguageSchedule s;
  s.smoothing = smoothing;
  for (const auto& [code, share] : shares) {
    s.languages.push_back(code);
    s.shares.push_back(share);
    s.probabilities.push_back(probs.at(code));
  }
  return s;
}

struct SamplerOptions {
  std::size_t batch_size = 64;
  Fusion fusion = Fusion::kWeightSeparate;
  bool exclude_self_neighbor = false;
  std::size_t online_pool_size = 0;  // 0: same as batch_size
  bool online_include_batch_positives = false;
  RankWindow offline_window{};
  std::size_t offline_per_query = 10;
  std::size_t threads = 1;
};

// Single-owner sampler state: generator, per-language shuffled pair streams,
// and the offline hard-negative map.
class Sampler {
 public:
  Sampler(const TrainingCorpus& corpus, LanguageSchedule schedule, SamplerOptions options, std::uint64_t seed)
      : corpus_(corpus), schedule_(std::move(schedule)), options_(options), rng_(seed) {
    if (options_.batch_size < 1) throw Error("batch size must be >= 1");
    for (const auto& code : schedule_.languages) {
      const auto& lang = corpus_.language(code);
      if (lang.pairs.empty()) throw Error("language '" + code + "' has no training pairs");
      Stream s;
      s.language = &lang;
      streams_.push_back(std::move(s));
    }
    for (std::size_t p = 0; p < corpus_.products().size(); ++p) all_products_.push_back(p);
  }

  const LanguageSchedule& schedule() const { return schedule_; }
  std::size_t refresh_count() const { return refresh_count_; }
  bool has_offline_map() const { return !offline_.empty(); }

  void refresh_offline(const ModelParams<float>& params) {
    offline_ = refresh_offline_hard_negatives(corpus_, params, options_.offline_window, options_.offline_per_query,
                                              rng_, options_.threads);
    ++refresh_count_;
  }

  // Index into schedule().languages.
  std::size_t draw_language() { return rng_.categorical(schedule_.probabilities); }

  TripletBatch next_batch(NegativeMode mode, const ModelParams<float>* params = nullptr) {
    const bool mixed = options_.fusion == Fusion::kWeightMix;
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    TripletBatch batch;
    if (mixed) {
      batch.language = "*";
      for (std::size_t i = 0; i < options_.batch_size; ++i) pairs.push_back(next_pair(draw_language()));
    } else {
      const std::size_t l = draw_language();
      batch.language = schedule_.languages[l];
      for (std::size_t i = 0; i < options_.batch_size; ++i) pairs.push_back(next_pair(l));
    }

    std::vector<std::size_t> negatives(pairs.size());
    if (mode == NegativeMode::kOnline) {
      if (!params) throw Error("online negatives need model parameters");
      online_negatives(pairs, batch.language, *params, negatives);
    } else {
      if (mode == NegativeMode::kOffline && offline_.empty()) {
        if (!params) throw Error("offline negatives need model parameters");
        refresh_offline(*params);
      }
      for (std::size_t i = 0; i < pairs.size(); ++i) {
        const std::size_t q = pairs[i].first;
        const std::vector<std::size_t>* pool = nullptr;
        if (mode == NegativeMode::kBehavior) pool = &corpus_.behavior(q);
        if (mode == NegativeMode::kOffline) pool = &offline_[q];
        if (pool && !pool->empty()) {
          negatives[i] = (*pool)[rng_.uniform(pool->size())];
        } else {
          negatives[i] = random_negative(q, mixed);
        }
      }
    }

    batch.triplets.reserve(pairs.size());
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      const auto [q, p] = pairs[i];
      Triplet t;
      t.query = corpus_.query_tokens(q);
      t.positive = corpus_.product_ref(p, options_.exclude_self_neighbor ? std::optional<std::size_t>(q)
                                                                        : std::nullopt);
      t.negative = corpus_.product_ref(negatives[i]);
      batch.triplets.push_back(std::move(t));
    }
    last_pairs_ = std::move(pairs);
    last_negatives_ = std::move(negatives);
    return batch;
  }

  // (query, positive, negative) indices behind the most recent batch.
  const std::vector<std::pair<std::size_t, std::size_t>>& last_pairs() const { return last_pairs_; }
  const std::vector<std::size_t>& last_negatives() const { return last_negatives_; }

 private:
  struct Stream {
    const TrainingCorpus::Language* language = nullptr;
    std::vector<std::size_t> order;
    std::size_t cursor = 0;
  };

  std::pair<std::size_t, std::size_t> next_pair(std::size_t l) {
    Stream& s = streams_[l];
    if (s.cursor >= s.order.size()) {
      s.order.resize(s.language->pairs.size());
      std::iota(s.order.begin(), s.order.end(), std::size_t{0});
      rng_.shuffle(s.order);
      s.cursor = 0;
    }
    return s.language->pairs[s.order[s.cursor++]];
  }

  std::span<const std::size_t> candidates_for(std::size_t q, bool mixed) const {
    if (mixed) return all_products_;
    return corpus_.language(corpus_.queries()[q].language).products;
  }

  std::size_t random_negative(std::size_t q, bool mixed) {
    return sample_random_negative(corpus_, q, candidates_for(q, mixed), rng_);
  }

  void online_negatives(const std::vector<std::pair<std::size_t, std::size_t>>& pairs, const std::string& language,
                        const ModelParams<float>& params, std::vector<std::size_t>& negatives) {
    const bool mixed = options_.fusion == Fusion::kWeightMix;
    std::span<const std::size_t> universe =
        mixed ? std::span<const std::size_t>(all_products_) : corpus_.language(language).products;
    const std::size_t pool_size = options_.online_pool_size ? options_.online_pool_size : options_.batch_size;
    std::vector<std::size_t> pool;
    if (pool_size >= universe.size()) {
      pool.assign(universe.begin(), universe.end());
    } else {
      // Partial Fisher-Yates over a sparse permutation.
      std::map<std::size_t, std::size_t> swapped;
      auto get = [&](std::size_t i) {
        auto it = swapped.find(i);
        return it == swapped.end() ? i : it->second;
      };
      for (std::size_t k = 0; k < pool_size; ++k) {
        const std::size_t j = k + static_cast<std::size_t>(rng_.uniform(universe.size() - k));
        const std::size_t vj = get(j);
        swapped[j] = get(k);
        pool.push_back(universe[vj]);
      }
    }
    if (options_.online_include_batch_positives) {
      std::set<std::size_t> seen(pool.begin(), pool.end());
      for (const auto& [q, p] : pairs) {
        if (seen.insert(p).second) pool.push_back(p);
      }
    }
    std::vector<std::size_t> queries;
    queries.reserve(pairs.size());
    for (const auto& [q, p] : pairs) queries.push_back(q);
    const auto picks = sample_online_hard_negatives<float>(corpus_, queries, pool, params, options_.threads);
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      negatives[i] = picks[i] ? *picks[i] : random_negative(pairs[i].first, mixed);
    }
  }

  const TrainingCorpus& corpus_;
  LanguageSchedule schedule_;
  SamplerOptions options_;
  Rng rng_;
  std::vector<Stream> streams_;
  std::vector<std::size_t> all_products_;
  std::vector<std::vector<std::size_t>> offline_;
  std::size_t refresh_count_ = 0;
  std::vector<std::pair<std::size_t, std::size_t>> last_pairs_;
  std::vector<std::size_t> last_negatives_;
};

}  // namespace mlgcn
