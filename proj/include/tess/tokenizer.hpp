#pragma once

#include <cctype>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <unordered_map>

#include "tess/common.hpp"

namespace tess {

constexpr int kPadId = 0;
constexpr int kUnkId = 1;
constexpr int kClsId = 2;
constexpr int kSepId = 3;
constexpr int kMaskId = 4;
constexpr int kNumSpecials = 5;

inline const std::vector<std::string>& special_tokens() {
  static const std::vector<std::string> s = {"[PAD]", "[UNK]", "[CLS]",
                                             "[SEP]", "[MASK]"};
  return s;
}

namespace detail {

// Split text into UTF-8 codepoint units. Invalid bytes pass through as
// single-byte units so tokenization stays total.
inline std::vector<std::string> utf8_units(const std::string& s) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < s.size()) {
    unsigned char c = static_cast<unsigned char>(s[i]);
    std::size_t len = 1;
    if ((c & 0x80) == 0)
      len = 1;
    else if ((c & 0xE0) == 0xC0)
      len = 2;
    else if ((c & 0xF0) == 0xE0)
      len = 3;
    else if ((c & 0xF8) == 0xF0)
      len = 4;
    if (i + len > s.size()) len = 1;
    for (std::size_t j = 1; j < len; ++j)
      if ((static_cast<unsigned char>(s[i + j]) & 0xC0) != 0x80) {
        len = 1;
        break;
      }
    out.push_back(s.substr(i, len));
    i += len;
  }
  return out;
}

inline bool is_ascii_space(const std::string& u) {
  return u.size() == 1 && std::isspace(static_cast<unsigned char>(u[0]));
}

inline bool is_ascii_punct(const std::string& u) {
  return u.size() == 1 && std::ispunct(static_cast<unsigned char>(u[0]));
}

}  // namespace detail

// Lowercase (ASCII), split on whitespace, isolate each punctuation
// character as its own pre-token.
inline std::vector<std::string> pre_tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (auto& u : detail::utf8_units(text)) {
    std::string unit = u;
    if (unit.size() == 1)
      unit[0] = static_cast<char>(
          std::tolower(static_cast<unsigned char>(unit[0])));
    if (detail::is_ascii_space(unit)) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else if (detail::is_ascii_punct(unit)) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
      out.push_back(unit);
    } else {
      cur += unit;
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

class Vocabulary {
 public:
  Vocabulary() {
    for (const auto& s : special_tokens()) push(s);
  }

  int add(const std::string& token) {
    auto it = ids_.find(token);
    if (it != ids_.end()) return it->second;
    return push(token);
  }

  std::size_t size() const { return tokens_.size(); }
  bool contains(const std::string& token) const { return ids_.count(token); }

  int id(const std::string& token) const {
    auto it = ids_.find(token);
    return it == ids_.end() ? kUnkId : it->second;
  }

  const std::string& token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
      throw InputError("token id " + std::to_string(id) + " out of range");
    return tokens_[static_cast<std::size_t>(id)];
  }

  const std::vector<std::string>& tokens() const { return tokens_; }

  // One token per line, line number = id, specials first.
  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write vocabulary file: " + path);
    for (const auto& t : tokens_) out << t << '\n';
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read vocabulary file: " + path);
    Vocabulary v;
    v.tokens_.clear();
    v.ids_.clear();
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      v.push(line);
    }
    for (int i = 0; i < kNumSpecials; ++i)
      if (v.tokens_.size() <= static_cast<std::size_t>(i) ||
          v.tokens_[static_cast<std::size_t>(i)] != special_tokens()[static_cast<std::size_t>(i)])
        throw InputError("vocabulary file " + path +
                         " is missing special tokens at ids 0-4");
    return v;
  }

 private:
  int push(const std::string& token) {
    int id = static_cast<int>(tokens_.size());
    tokens_.push_back(token);
    ids_.emplace(token, id);
    return id;
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

// WordPiece-style training: seed with every observed character form (plain
// for word-initial, "##"-prefixed for continuations), then greedily merge the
// most frequent adjacent symbol pair until target_size is reached. Ties break
// lexicographically on the (left, right) pair, so output is deterministic.
inline Vocabulary train_vocab(const std::vector<std::string>& documents,
                              std::size_t target_size) {
  std::map<std::vector<std::string>, long long> words;
  for (const auto& doc : documents)
    for (const auto& w : pre_tokenize(doc)) {
      auto units = detail::utf8_units(w);
      std::vector<std::string> syms;
      syms.reserve(units.size());
      for (std::size_t i = 0; i < units.size(); ++i)
        syms.push_back(i == 0 ? units[i] : "##" + units[i]);
      ++words[syms];
    }
  if (words.empty()) throw InputError("train_vocab: empty corpus");

  std::map<std::string, bool> seed;  // sorted for deterministic ids
  for (const auto& [syms, cnt] : words)
    for (const auto& s : syms) seed[s] = true;

  Vocabulary vocab;
  for (const auto& [s, _] : seed) vocab.add(s);
  if (target_size < vocab.size())
    throw InputError("train_vocab: target size " +
                     std::to_string(target_size) +
                     " is below the seed vocabulary size " +
                     std::to_string(vocab.size()));

  std::vector<std::pair<std::vector<std::string>, long long>> work(
      words.begin(), words.end());
  while (vocab.size() < target_size) {
    std::map<std::pair<std::string, std::string>, long long> pair_counts;
    for (const auto& [syms, cnt] : work)
      for (std::size_t i = 0; i + 1 < syms.size(); ++i)
        pair_counts[{syms[i], syms[i + 1]}] += cnt;
    const std::pair<std::string, std::string>* best = nullptr;
    long long best_count = 0;
    for (const auto& [p, c] : pair_counts)
      if (c > best_count) {  // map order = lexicographic tie-break
        best = &p;
        best_count = c;
      }
    if (!best) break;
    std::string merged =
        best->first + (best->second.rfind("##", 0) == 0 ? best->second.substr(2)
                                                        : best->second);
    vocab.add(merged);
    for (auto& [syms, cnt] : work) {
      std::vector<std::string> next;
      next.reserve(syms.size());
      for (std::size_t i = 0; i < syms.size(); ++i) {
        if (i + 1 < syms.size() && syms[i] == best->first &&
            syms[i + 1] == best->second) {
          next.push_back(merged);
          ++i;
        } else {
          next.push_back(syms[i]);
        }
      }
      syms = std::move(next);
    }
  }
  return vocab;
}

// Greedy longest-match segmentation of one pre-token. Returns empty when no
// valid segmentation exists (caller maps that to [UNK]).
inline std::vector<int> wordpiece_segment(const Vocabulary& vocab,
                                          const std::string& word) {
  constexpr std::size_t kMaxWordUnits = 100;
  auto units = detail::utf8_units(word);
  if (units.size() > kMaxWordUnits) return {};
  std::vector<int> out;
  std::size_t start = 0;
  while (start < units.size()) {
    std::size_t end = units.size();
    int match = -1;
    while (end > start) {
      std::string piece = start > 0 ? "##" : "";
      for (std::size_t i = start; i < end; ++i) piece += units[i];
      if (vocab.contains(piece)) {
        match = vocab.id(piece);
        break;
      }
      --end;
    }
    if (match < 0) return {};
    out.push_back(match);
    start = end;
  }
  return out;
}

inline std::vector<int> tokenize(const Vocabulary& vocab,
                                 const std::string& text) {
  std::vector<int> ids;
  for (const auto& w : pre_tokenize(text)) {
    auto piece_ids = wordpiece_segment(vocab, w);
    if (piece_ids.empty())
      ids.push_back(kUnkId);
    else
      ids.insert(ids.end(), piece_ids.begin(), piece_ids.end());
  }
  return ids;
}

// Inverse of tokenize up to lowercasing and whitespace normalization.
inline std::string decode(const Vocabulary& vocab, const std::vector<int>& ids) {
  std::string out;
  for (int id : ids) {
    const std::string& t = vocab.token(id);
    if (t.rfind("##", 0) == 0) {
      out += t.substr(2);
    } else {
      if (!out.empty()) out += ' ';
      out += t;
    }
  }
  return out;
}

struct EncodedSequence {
  std::vector<int> token_ids;
  std::vector<int> attention_mask;
  std::vector<int> segment_ids;
  std::vector<int> special_mask;  // 1 at [CLS]/[SEP]/[PAD]

  std::size_t length() const { return token_ids.size(); }
};

// [CLS] a... [SEP] (b... [SEP]) padded to t_max. Over-length pairs are
// trimmed token by token from the end of whichever span is currently longer.
inline EncodedSequence encode_pair(const Vocabulary& vocab,
                                   const std::string& text_a,
                                   const std::optional<std::string>& text_b,
                                   std::size_t t_max = 768) {
  if (t_max < 8)
    throw InputError("encode_pair: t_max must be >= 8, got " +
                     std::to_string(t_max));
  std::vector<int> a = tokenize(vocab, text_a);
  std::vector<int> b = text_b ? tokenize(vocab, *text_b) : std::vector<int>{};
  std::size_t specials = text_b ? 3 : 2;  // [CLS] + [SEP] per span
  std::size_t budget = t_max - specials;
  while (a.size() + b.size() > budget) {
    if (a.size() >= b.size())
      a.pop_back();
    else
      b.pop_back();
  }

  EncodedSequence seq;
  auto put = [&seq](int id, int segment, int special) {
    seq.token_ids.push_back(id);
    seq.attention_mask.push_back(id == kPadId && special ? 0 : 1);
    seq.segment_ids.push_back(segment);
    seq.special_mask.push_back(special);
  };
  put(kClsId, 0, 1);
  for (int id : a) put(id, 0, 0);
  put(kSepId, 0, 1);
  if (text_b) {
    for (int id : b) put(id, 1, 0);
    put(kSepId, 1, 1);
  }
  while (seq.token_ids.size() < t_max) {
    seq.token_ids.push_back(kPadId);
    seq.attention_mask.push_back(0);
    seq.segment_ids.push_back(text_b ? 1 : 0);
    seq.special_mask.push_back(1);
  }
  return seq;
}

}  // namespace tess
