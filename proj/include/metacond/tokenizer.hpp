#ifndef METACOND_TOKENIZER_HPP
#define METACOND_TOKENIZER_HPP

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "metacond/common.hpp"

namespace metacond {

using TokenId = uint32_t;

// Special tokens occupy the lowest id range and are never produced by
// encoding plain text; the packer injects them.
namespace tok {
constexpr TokenId BOS = 0;   // <s>
constexpr TokenId BOC = 1;   // <boc>
constexpr TokenId EOC = 2;   // <eoc>
constexpr TokenId META1 = 3; // <s1> .. <s5> are contiguous
constexpr TokenId PAD = 8;
constexpr TokenId SPECIAL_COUNT = 9;
constexpr TokenId BYTE_BASE = SPECIAL_COUNT;  // byte b maps to id BYTE_BASE + b
constexpr TokenId FIRST_MERGE = BYTE_BASE + 256;

inline const char* special_name(TokenId id) {
  static const char* names[SPECIAL_COUNT] = {"<s>",  "<boc>", "<eoc>", "<s1>", "<s2>",
                                             "<s3>", "<s4>",  "<s5>",  "<pad>"};
  return names[id];
}
}  // namespace tok

/// Byte-level BPE. Text is pre-split into runs of one character class
/// (alphanumeric incl. non-ASCII bytes, whitespace, punctuation) and merges
/// never cross run boundaries. Every byte is in the base alphabet, so
/// decode(encode(s)) == s for arbitrary UTF-8 input.
class Tokenizer {
 public:
  Tokenizer() { rebuild_tables({}); }

  explicit Tokenizer(std::vector<std::pair<TokenId, TokenId>> merges) {
    rebuild_tables(std::move(merges));
  }

  size_t vocab_size() const { return tok::FIRST_MERGE + merges_.size(); }

  const std::vector<std::pair<TokenId, TokenId>>& merges() const { return merges_; }

  std::vector<TokenId> encode(const std::string& text) const {
    std::vector<TokenId> out;
    for_each_run(text, [&](const std::string& run) { encode_word(run, out); });
    return out;
  }

  std::string decode(const std::vector<TokenId>& ids) const {
    std::string out;
    for (TokenId id : ids) {
      if (id >= token_bytes_.size()) throw DataError("decode: token id out of range");
      out += token_bytes_[id];
    }
    return out;
  }

  void save(const std::filesystem::path& path) const {
    nlohmann::json j;
    j["format"] = "metacond-bpe";
    j["version"] = 1;
    j["vocab_size"] = vocab_size();
    nlohmann::json m = nlohmann::json::array();
    for (const auto& [a, b] : merges_) m.push_back({a, b});
    j["merges"] = std::move(m);
    write_file(path, j.dump());
  }

  static Tokenizer load(const std::filesystem::path& path) {
    nlohmann::json j = nlohmann::json::parse(read_file(path), nullptr, false);
    if (j.is_discarded() || j.value("format", "") != "metacond-bpe")
      throw DataError("not a tokenizer file: " + path.string());
    std::vector<std::pair<TokenId, TokenId>> merges;
    for (const auto& pair : j["merges"])
      merges.emplace_back(pair[0].get<TokenId>(), pair[1].get<TokenId>());
    return Tokenizer(std::move(merges));
  }

  /// Greedy BPE training: repeatedly merge the highest-frequency adjacent
  /// pair (ties broken by lowest id pair) until vocab_size is reached or no
  /// pair occurs twice. Deterministic given corpus order.
  static Tokenizer train(const std::vector<std::string>& corpus, size_t vocab_size) {
    if (vocab_size < tok::FIRST_MERGE)
      throw UsageError("vocab_size must be at least " + std::to_string(tok::FIRST_MERGE));

    // Word histogram in first-seen order.
    std::vector<std::pair<std::string, uint64_t>> histogram;
    std::unordered_map<std::string, size_t> index;
    for (const std::string& text : corpus) {
      for_each_run(text, [&](const std::string& word) {
        auto it = index.find(word);
        if (it == index.end()) {
          index.emplace(word, histogram.size());
          histogram.emplace_back(word, 1);
        } else {
          ++histogram[it->second].second;
        }
      });
    }

    std::vector<std::vector<TokenId>> words(histogram.size());
    for (size_t w = 0; w < histogram.size(); ++w)
      for (unsigned char c : histogram[w].first)
        words[w].push_back(tok::BYTE_BASE + c);

    std::vector<std::pair<TokenId, TokenId>> merges;
    while (tok::FIRST_MERGE + merges.size() < vocab_size) {
      std::map<std::pair<TokenId, TokenId>, uint64_t> counts;
      for (size_t w = 0; w < words.size(); ++w) {
        uint64_t freq = histogram[w].second;
        const auto& ids = words[w];
        for (size_t i = 0; i + 1 < ids.size(); ++i)
          counts[{ids[i], ids[i + 1]}] += freq;
      }
      std::pair<TokenId, TokenId> best{};
      uint64_t best_count = 0;
      for (const auto& [pair, count] : counts) {
        if (count > best_count) {
          best = pair;
          best_count = count;
        }
      }
      if (best_count < 2) break;
      TokenId new_id = static_cast<TokenId>(tok::FIRST_MERGE + merges.size());
      merges.push_back(best);
      for (auto& ids : words) {
        size_t out = 0;
        for (size_t i = 0; i < ids.size(); ++i) {
          if (i + 1 < ids.size() && ids[i] == best.first && ids[i + 1] == best.second) {
            ids[out++] = new_id;
            ++i;
          } else {
            ids[out++] = ids[i];
          }
        }
        ids.resize(out);
      }
    }
    return Tokenizer(std::move(merges));
  }

 private:
  static int byte_class(unsigned char c) {
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v') return 0;
    if ((c >= '0' && c <= '9') || (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c >= 0x80)
      return 1;
    return 2;
  }

  // Pre-tokenization: maximal same-class runs, except that a single space
  // directly before a word attaches to it. Merges never cross run bounds.
  template <typename Fn>
  static void for_each_run(const std::string& text, Fn&& fn) {
    size_t i = 0;
    while (i < text.size()) {
      size_t j = i;
      if (text[i] == ' ' && i + 1 < text.size() &&
          byte_class(static_cast<unsigned char>(text[i + 1])) == 1) {
        ++j;  // leading space joins the word
      }
      int cls = byte_class(static_cast<unsigned char>(text[j]));
      ++j;
      while (j < text.size() && byte_class(static_cast<unsigned char>(text[j])) == cls) ++j;
      fn(text.substr(i, j - i));
      i = j;
    }
  }

  void rebuild_tables(std::vector<std::pair<TokenId, TokenId>> merges) {
    merges_ = std::move(merges);
    token_bytes_.resize(tok::FIRST_MERGE + merges_.size());
    for (TokenId s = 0; s < tok::SPECIAL_COUNT; ++s) token_bytes_[s] = tok::special_name(s);
    for (int b = 0; b < 256; ++b)
      token_bytes_[tok::BYTE_BASE + b] = std::string(1, static_cast<char>(b));
    rank_.clear();
    for (size_t r = 0; r < merges_.size(); ++r) {
      TokenId id = static_cast<TokenId>(tok::FIRST_MERGE + r);
      if (merges_[r].first >= id || merges_[r].second >= id)
        throw DataError("tokenizer merges out of order");
      token_bytes_[id] = token_bytes_[merges_[r].first] + token_bytes_[merges_[r].second];
      rank_[pack_pair(merges_[r].first, merges_[r].second)] = r;
    }
    cache_.clear();
  }

  static uint64_t pack_pair(TokenId a, TokenId b) {
    return (static_cast<uint64_t>(a) << 32) | b;
  }

  void encode_word(const std::string& word, std::vector<TokenId>& out) const {
    auto it = cache_.find(word);
    if (it != cache_.end()) {
      out.insert(out.end(), it->second.begin(), it->second.end());
      return;
    }
    std::vector<TokenId> ids;
    ids.reserve(word.size());
    for (unsigned char c : word) ids.push_back(tok::BYTE_BASE + c);
    while (ids.size() > 1) {
      size_t best_rank = SIZE_MAX, best_pos = 0;
      for (size_t i = 0; i + 1 < ids.size(); ++i) {
        auto r = rank_.find(pack_pair(ids[i], ids[i + 1]));
        if (r != rank_.end() && r->second < best_rank) {
          best_rank = r->second;
          best_pos = i;
        }
      }
      if (best_rank == SIZE_MAX) break;
      ids[best_pos] = static_cast<TokenId>(tok::FIRST_MERGE + best_rank);
      ids.erase(ids.begin() + static_cast<std::ptrdiff_t>(best_pos) + 1);
    }
    if (cache_.size() < kCacheCap) cache_.emplace(word, ids);
    out.insert(out.end(), ids.begin(), ids.end());
  }

  static constexpr size_t kCacheCap = 1 << 18;

  std::vector<std::pair<TokenId, TokenId>> merges_;
  std::vector<std::string> token_bytes_;
  std::unordered_map<uint64_t, size_t> rank_;
  mutable std::unordered_map<std::string, std::vector<TokenId>> cache_;
};

}  // namespace metacond

#endif  // METACOND_TOKENIZER_HPP
