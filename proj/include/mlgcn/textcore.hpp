#pragma once

// Shared multilingual subword vocabulary and greedy longest-match tokenization.

#include <cstdint>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <ranges>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <unicode/normalizer2.h>
#include <unicode/uchar.h>
#include <unicode/unistr.h>
#include <unicode/locid.h>

#include "mlgcn/common.hpp"

namespace mlgcn {

using TokenId = std::uint32_t;
using TokenSeq = std::vector<TokenId>;

// A normalized word with the byte offset of every code point boundary, so
// prefixes can be sliced by character count.
struct Word {
  std::string text;
  std::vector<std::size_t> bounds;  // size = chars + 1

  std::size_t chars() const { return bounds.size() - 1; }
  std::string_view slice(std::size_t from, std::size_t to) const {
    return std::string_view(text).substr(bounds[from], bounds[to] - bounds[from]);
  }
};

// NFKC, then lowercase. Invalid UTF-8 sequences become U+FFFD.
inline std::string normalize_text(std::string_view text) {
  UErrorCode status = U_ZERO_ERROR;
  const icu::Normalizer2* nfkc = icu::Normalizer2::getNFKCInstance(status);
  if (U_FAILURE(status)) throw Error("ICU NFKC normalizer unavailable");
  icu::UnicodeString src = icu::UnicodeString::fromUTF8(
      icu::StringPiece(text.data(), static_cast<int32_t>(text.size())));
  icu::UnicodeString norm = nfkc->normalize(src, status);
  if (U_FAILURE(status)) throw Error("text normalization failed");
  norm.toLower(icu::Locale::getRoot());
  std::string out;
  norm.toUTF8String(out);
  return out;
}

// Normalizes then splits on Unicode whitespace.
inline std::vector<Word> split_words(std::string_view text) {
  const std::string norm = normalize_text(text);
  std::vector<Word> words;
  Word cur;
  const auto n = static_cast<int32_t>(norm.size());
  auto flush = [&] {
    if (!cur.text.empty()) {
      cur.bounds.push_back(cur.text.size());
      words.push_back(std::move(cur));
    }
    cur = Word{};
  };
  int32_t pos = 0;
  while (pos < n) {
    const int32_t start = pos;
    UChar32 c;
    U8_NEXT(norm.data(), pos, n, c);
    if (u_isUWhiteSpace(c)) {
      flush();
    } else {
      cur.bounds.push_back(cur.text.size());
      cur.text.append(norm, static_cast<std::size_t>(start), static_cast<std::size_t>(pos - start));
    }
  }
  flush();
  return words;
}

// Normalized words joined by single spaces; the identity of a query string.
inline std::string canonical_text(std::string_view text) {
  std::string out;
  for (const Word& w : split_words(text)) {
    if (!out.empty()) out.push_back(' ');
    out += w.text;
  }
  return out;
}

class Vocab {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kUnk = 1;
  static constexpr std::string_view kPadPiece = "[PAD]";
  static constexpr std::string_view kUnkPiece = "[UNK]";
  static constexpr std::size_t kDefaultMaxWordChars = 100;

  Vocab() : Vocab(std::vector<std::string>{std::string(kPadPiece), std::string(kUnkPiece)}) {}

  explicit Vocab(std::vector<std::string> pieces, std::size_t max_word_chars = kDefaultMaxWordChars)
      : pieces_(std::move(pieces)), max_word_chars_(max_word_chars) {
    if (pieces_.size() < 2 || pieces_[0] != kPadPiece || pieces_[1] != kUnkPiece) {
      throw Error("vocabulary must start with [PAD] and [UNK]");
    }
    if (pieces_.size() > UINT32_MAX) throw Error("vocabulary too large");
    for (std::size_t id = 0; id < pieces_.size(); ++id) {
      const std::string& p = pieces_[id];
      if (p.empty()) throw Error("empty vocabulary piece at id " + std::to_string(id));
      if (p.find_first_of(" \t\r\n") != std::string::npos) {
        throw Error("vocabulary piece contains whitespace at id " + std::to_string(id));
      }
      if (!index_.emplace(p, static_cast<TokenId>(id)).second) {
        throw Error("duplicate vocabulary piece '" + p + "'");
      }
    }
  }

  std::size_t size() const { return pieces_.size(); }
  const std::string& piece(TokenId id) const { return pieces_.at(id); }
  const std::vector<std::string>& pieces() const { return pieces_; }
  std::size_t max_word_chars() const { return max_word_chars_; }

  std::optional<TokenId> find(std::string_view piece) const {
    auto it = index_.find(piece);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }
  bool contains(std::string_view piece) const { return find(piece).has_value(); }

  std::uint64_t content_hash() const {
    Fnv1a h;
    for (const auto& p : pieces_) {
      h.update(p);
      h.update("\n");
    }
    return h.digest();
  }

  // One piece per line; line number is the id.
  void save(std::ostream& out) const {
    for (const auto& p : pieces_) out << p << '\n';
    if (!out) throw Error("failed to write vocabulary");
  }

  static Vocab load(std::istream& in) {
    std::vector<std::string> pieces;
    std::string line;
    while (std::getline(in, line)) {
      std::string_view v = strip_cr(line);
      if (v.empty()) continue;
      pieces.emplace_back(v);
    }
    return Vocab(std::move(pieces));
  }

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.pieces_ == b.pieces_; }

 private:
  std::vector<std::string> pieces_;
  std::map<std::string, TokenId, std::less<>> index_;
  std::size_t max_word_chars_;
};

inline std::string continuation(std::string_view s) { return "##" + std::string(s); }

// Whole words with frequency >= min_freq (most frequent first, ties
// lexicographic) plus every observed character in bare and "##" form.
template <std::ranges::input_range Corpus>
Vocab build_vocab(Corpus&& corpus, std::size_t max_size, std::size_t min_freq) {
  std::map<std::string, std::size_t> freq;
  std::map<std::string, bool> alphabet;
  for (const auto& line : corpus) {
    for (Word& w : split_words(std::string_view(line))) {
      for (std::size_t c = 0; c < w.chars(); ++c) alphabet.emplace(std::string(w.slice(c, c + 1)), true);
      ++freq[std::move(w.text)];
    }
  }
  if (freq.empty()) throw Error("empty corpus");
  const std::size_t needed = 2 + 2 * alphabet.size();
  if (max_size < needed) {
    throw Error("max_size " + std::to_string(max_size) + " too small: alphabet of " +
                std::to_string(alphabet.size()) + " characters needs " + std::to_string(needed) +
                " pieces");
  }

  std::vector<std::string> pieces{std::string(Vocab::kPadPiece), std::string(Vocab::kUnkPiece)};
  std::map<std::string, bool, std::less<>> present;
  for (const auto& [c, _] : alphabet) {
    pieces.push_back(c);
    pieces.push_back(continuation(c));
    present.emplace(c, true);
  }

  std::vector<std::pair<std::string, std::size_t>> ranked;
  for (const auto& [w, f] : freq) {
    if (f >= min_freq && !present.contains(w)) ranked.emplace_back(w, f);
  }
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  for (const auto& [w, f] : ranked) {
    if (pieces.size() >= max_size) break;
    pieces.push_back(w);
  }
  return Vocab(std::move(pieces));
}

// Greedy longest-prefix segmentation of one normalized word.
inline void tokenize_word(const Word& word, const Vocab& vocab, TokenSeq& out) {
  const std::size_t n = word.chars();
  if (n > vocab.max_word_chars()) {
    out.push_back(Vocab::kUnk);
    return;
  }
  if (auto whole = vocab.find(word.text)) {
    out.push_back(*whole);
    return;
  }
  std::string probe;
  std::size_t start = 0;
  while (start < n) {
    std::optional<TokenId> match;
    std::size_t end = n;
    for (; end > start; --end) {
      probe.clear();
      if (start > 0) probe = "##";
      probe += word.slice(start, end);
      match = vocab.find(probe);
      if (match) break;
    }
    if (match) {
      out.push_back(*match);
      start = end;
    } else {
      out.push_back(Vocab::kUnk);
      ++start;
    }
  }
}

inline TokenSeq tokenize(std::string_view text, const Vocab& vocab) {
  TokenSeq out;
  for (const Word& w : split_words(text)) tokenize_word(w, vocab, out);
  return out;
}

// Inverse of tokenize for in-vocabulary text: "##" pieces glue to the
// previous piece, everything else starts a new word.
inline std::string detokenize(const TokenSeq& tokens, const Vocab& vocab) {
  std::string out;
  for (TokenId id : tokens) {
    const std::string& p = vocab.piece(id);
    if (p.size() > 2 && p[0] == '#' && p[1] == '#' && !out.empty()) {
      out.append(p, 2);
    } else {
      if (!out.empty()) out.push_back(' ');
      out += p;
    }
  }
  return out;
}

}  // namespace mlgcn
