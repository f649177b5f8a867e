#pragma once

// Deterministic synthetic multilingual corpus with a controllable
// query/catalog vocabulary gap.
//
// Every latent concept owns one product whose description uses catalog-side
// terms (a category word and two specific words). Each catalog word has a
// single query-side synonym. A gap query uses only query-side words, so it
// shares no whole word with its product; a non-gap query contains at least
// one specific catalog word.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "mlgcn/common.hpp"
#include "mlgcn/eval.hpp"
#include "mlgcn/graphstore.hpp"
#include "mlgcn/textcore.hpp"

namespace mlgcn {

struct SynthLanguage {
  std::string code;
  std::size_t pairs = 0;  // purchase records emitted for this language
};

struct SynthConfig {
  std::vector<SynthLanguage> languages{{"en", 16000}, {"es", 2000}, {"fr", 1000}, {"it", 600}, {"de", 400}};
  std::size_t concepts = 1200;  // split across languages in proportion to pairs
  double gap_rate = 0.5;
  std::size_t min_multiplicity = 8;  // distinct training queries per concept
  std::size_t max_multiplicity = 16;
  std::size_t concepts_per_category = 8;
  std::size_t fillers = 10;  // query-only filler words per language
  std::size_t distractors = 5000;
  std::size_t distractor_lexicon = 200;
  std::size_t impressions_per_record = 2;
  std::size_t eval_queries = 500;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(gap_rate >= 0.0 && gap_rate <= 1.0)) throw Error("gap_rate must lie in [0, 1]");
    if (languages.empty()) throw Error("at least one language required");
    std::set<std::string> codes;
    for (const auto& l : languages) {
      if (l.code.empty() || l.code.find_first_of("\t\n,: ") != std::string::npos) {
        throw Error("invalid language code '" + l.code + "'");
      }
      if (!codes.insert(l.code).second) throw Error("duplicate language '" + l.code + "'");
      if (l.pairs < 1) throw Error("pair count for '" + l.code + "' must be >= 1");
    }
    if (concepts < 1 || min_multiplicity < 1 || max_multiplicity < min_multiplicity || concepts_per_category < 1 ||
        fillers < 1 || distractor_lexicon < 2) {
      throw Error("synthetic counts must be >= 1");
    }
  }
};

struct SynthCorpus {
  std::vector<LogRecord> logs;
  std::vector<CatalogEntry> catalog;
  std::vector<EvalQuery> eval;
};

namespace detail {

struct SynthAlphabet {
  std::vector<std::string> onsets;
  std::vector<std::string> vowels;
};

// Words are unique across all languages; other codes use the plain alphabet.
inline SynthAlphabet synth_alphabet(std::string_view code) {
  SynthAlphabet a{{"b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"}, {"a", "e", "i", "o", "u"}};
  if (code == "es") {
    a.onsets.push_back("ñ");
    a.vowels.push_back("á");
  } else if (code == "fr") {
    a.onsets.push_back("ç");
    a.vowels.push_back("é");
  } else if (code == "it") {
    a.vowels.push_back("ò");
  } else if (code == "de") {
    a.vowels.push_back("ü");
    a.vowels.push_back("ö");
  }
  return a;
}

class WordForge {
 public:
  WordForge(std::string_view code, Rng& rng, std::set<std::string>& taken)
      : alphabet_(synth_alphabet(code)), rng_(rng), taken_(taken) {}

  std::string fresh() {
    for (;;) {
      const std::size_t syllables = 2 + rng_.uniform(2);
      std::string w;
      for (std::size_t s = 0; s < syllables; ++s) {
        w += alphabet_.onsets[rng_.uniform(alphabet_.onsets.size())];
        w += alphabet_.vowels[rng_.uniform(alphabet_.vowels.size())];
      }
      if (taken_.insert(w).second) return w;
    }
  }

 private:
  SynthAlphabet alphabet_;
  Rng& rng_;
  std::set<std::string>& taken_;
};

struct SynthConcept {
  std::string product_id;
  std::size_t category = 0;
  std::array<std::string, 2> terms;     // catalog side
  std::array<std::string, 2> synonyms;  // query side, synonyms[i] <-> terms[i]
  std::set<std::vector<std::string>> used;  // sorted word sets already emitted
  std::vector<std::string> pool;            // training query texts
};

struct SynthLanguageState {
  std::string code;
  std::vector<std::string> categories;       // catalog side
  std::vector<std::string> category_synonyms;  // query side
  std::vector<std::string> fillers;
  std::vector<std::string> lexicon;
  std::vector<SynthConcept> concepts;
};

// Draws an unseen query for `c`; returns false when attempts run out.
inline bool draw_query(const SynthLanguageState& L, SynthConcept& c, bool gap, Rng& rng, std::string& text) {
  for (int attempt = 0; attempt < 200; ++attempt) {
    std::vector<std::string> words;
    const auto& spec = gap ? c.synonyms : c.terms;
    const std::size_t pick = rng.uniform(3);  // first, second, or both specific words
    if (pick != 1) words.push_back(spec[0]);
    if (pick != 0) words.push_back(spec[1]);
    if (rng.uniform(2) == 0) words.push_back(gap ? L.category_synonyms[c.category] : L.categories[c.category]);
    if (rng.uniform(2) == 0) words.push_back(L.fillers[rng.uniform(L.fillers.size())]);
    std::vector<std::string> key = words;
    std::sort(key.begin(), key.end());
    if (!c.used.insert(key).second) continue;
    rng.shuffle(words);
    text.clear();
    for (const auto& w : words) {
      if (!text.empty()) text += ' ';
      text += w;
    }
    return true;
  }
  return false;
}

}  // namespace detail

inline SynthCorpus generate_corpus(const SynthConfig& config) {
  config.validate();
  Rng rng(config.seed);
  std::set<std::string> taken;
  std::size_t total_pairs = 0;
  for (const auto& l : config.languages) total_pairs += l.pairs;

  SynthCorpus out;
  for (const auto& lang : config.languages) {
    detail::SynthLanguageState L;
    L.code = lang.code;
    detail::WordForge forge(lang.code, rng, taken);
    const auto share = static_cast<double>(lang.pairs) / static_cast<double>(total_pairs);
    const std::size_t n_concepts =
        std::max<std::size_t>(4, static_cast<std::size_t>(std::llround(share * static_cast<double>(config.concepts))));
    const std::size_t n_categories = std::max<std::size_t>(2, n_concepts / config.concepts_per_category);
    for (std::size_t i = 0; i < n_categories; ++i) {
      L.categories.push_back(forge.fresh());
      L.category_synonyms.push_back(forge.fresh());
    }
    for (std::size_t i = 0; i < config.fillers; ++i) L.fillers.push_back(forge.fresh());
    for (std::size_t i = 0; i < config.distractor_lexicon; ++i) L.lexicon.push_back(forge.fresh());

    char id[64];
    for (std::size_t i = 0; i < n_concepts; ++i) {
      detail::SynthConcept c;
      std::snprintf(id, sizeof id, "%s-c%05zu", lang.code.c_str(), i);
      c.product_id = id;
      c.category = i % n_categories;
      for (std::size_t k = 0; k < 2; ++k) {
        c.terms[k] = forge.fresh();
        c.synonyms[k] = forge.fresh();
      }
      std::vector<std::string> words{L.categories[c.category], c.terms[0], c.terms[1]};
      rng.shuffle(words);
      out.catalog.push_back({c.product_id, lang.code, words[0] + " " + words[1] + " " + words[2]});
      L.concepts.push_back(std::move(c));
    }
    for (std::size_t i = 0; i < config.distractors; ++i) {
      std::snprintf(id, sizeof id, "%s-d%05zu", lang.code.c_str(), i);
      std::vector<std::string> words{L.categories[i % n_categories], L.lexicon[rng.uniform(L.lexicon.size())],
                                     L.lexicon[rng.uniform(L.lexicon.size())]};
      rng.shuffle(words);
      out.catalog.push_back({id, lang.code, words[0] + " " + words[1] + " " + words[2]});
    }

    // Training query pools.
    for (auto& c : L.concepts) {
      const std::size_t m =
          config.min_multiplicity + rng.uniform(config.max_multiplicity - config.min_multiplicity + 1);
      std::string text;
      for (std::size_t k = 0; k < m; ++k) {
        const bool gap = rng.uniform01() < config.gap_rate;
        if (!detail::draw_query(L, c, gap, rng, text)) break;
        c.pool.push_back(text);
      }
      if (c.pool.empty()) throw Error("synthetic query space exhausted for " + c.product_id);
    }

    // Exactly `pairs` purchase records, each followed by impressions of
    // same-category distractors that were shown but not bought.
    for (std::size_t r = 0; r < lang.pairs; ++r) {
      const auto& c = L.concepts[rng.uniform(L.concepts.size())];
      const auto& q = c.pool[rng.uniform(c.pool.size())];
      out.logs.push_back({q, c.product_id, lang.code, Signal::kPurchase, static_cast<std::uint32_t>(1 + rng.uniform(5))});
      for (std::size_t k = 0; k < config.impressions_per_record && config.distractors > 0; ++k) {
        const std::size_t per_cat = (config.distractors + n_categories - 1 - c.category) / n_categories;
        if (per_cat == 0) break;
        const std::size_t d = c.category + n_categories * rng.uniform(per_cat);
        std::snprintf(id, sizeof id, "%s-d%05zu", lang.code.c_str(), d);
        out.logs.push_back({q, id, lang.code, Signal::kImpression, 1});
      }
    }

    // Held-out queries: word sets never used for training.
    for (std::size_t e = 0; e < config.eval_queries; ++e) {
      const std::size_t first = rng.uniform(L.concepts.size());
      const bool gap = rng.uniform01() < config.gap_rate;
      std::string text;
      bool ok = false;
      for (std::size_t probe = 0; !ok && probe < L.concepts.size(); ++probe) {
        auto& c = L.concepts[(first + probe) % L.concepts.size()];
        if (detail::draw_query(L, c, gap, rng, text)) {
          out.eval.push_back({text, lang.code, {c.product_id}, gap});
          ok = true;
        }
      }
      if (!ok) throw Error("synthetic query space exhausted for language '" + lang.code + "'");
    }
  }
  return out;
}

}  // namespace mlgcn
