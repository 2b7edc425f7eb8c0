#ifndef METACOND_TESTS_HELPERS_HPP
#define METACOND_TESTS_HELPERS_HPP

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "metacond/pack.hpp"
#include "metacond/tokenizer.hpp"

namespace metacond::testutil {

// Validates one packed sequence against the chunk grammar
//   (BOS (BOC meta EOC)? doc (BOC meta EOC)?)* PAD*
// and the mask rules for the given spec. Throws std::runtime_error with a
// description on the first violation.
inline void check_sequence(const PackedSequence& seq, const ConditioningSpec& spec) {
  const size_t L = seq.tokens.size();
  auto fail = [&](const std::string& why, size_t pos) {
    throw std::runtime_error(why + " at position " + std::to_string(pos));
  };
  if (seq.backprop_mask.size() != L || seq.report_mask.size() != L)
    fail("mask length mismatch", 0);

  auto expect_mask = [&](size_t pos, bool bp, bool rp, const std::string& what) {
    if ((seq.backprop_mask[pos] != 0) != bp || (seq.report_mask[pos] != 0) != rp)
      fail("bad mask on " + what, pos);
  };

  size_t cursor = 0;
  for (const ChunkSpan& span : seq.chunk_spans) {
    if (span.begin != cursor) fail("chunk spans do not tile the sequence", span.begin);
    if (span.end <= span.begin || span.end > L) fail("bad chunk extent", span.end);
    size_t pos = span.begin;
    if (seq.tokens[pos] != tok::BOS) fail("chunk does not begin with BOS", pos);
    expect_mask(pos, false, false, "BOS");
    ++pos;

    bool has_boc = false;
    for (size_t i = pos; i < span.end; ++i) has_boc |= seq.tokens[i] == tok::BOC;
    bool kept = spec.has_prepend() ? (pos < span.end && seq.tokens[pos] == tok::BOC) : has_boc;
    if (has_boc && !spec.has_prepend() && !spec.has_append())
      fail("wrapper block without conditioning", pos);
    if (spec.has_prepend() && !kept && has_boc)
      fail("append block present without prepend block", pos);

    if (kept && spec.has_prepend()) {
      expect_mask(pos, false, false, "prepend BOC");
      ++pos;
      size_t meta_len = 0;
      while (pos < span.end && seq.tokens[pos] != tok::EOC) {
        if (seq.tokens[pos] == tok::BOS || seq.tokens[pos] == tok::PAD ||
            seq.tokens[pos] == tok::BOC)
          fail("special token inside metadata", pos);
        if (spec.uses_meta_tokens()) {
          if (seq.tokens[pos] != tok::META1 + static_cast<TokenId>(meta_len))
            fail("meta tokens out of order", pos);
        } else if (seq.tokens[pos] < tok::SPECIAL_COUNT) {
          fail("special token as metadata text", pos);
        }
        expect_mask(pos, false, false, "prepend metadata");
        ++meta_len;
        ++pos;
      }
      if (pos >= span.end) fail("prepend block not closed by EOC", pos);
      expect_mask(pos, false, false, "prepend EOC");
      ++pos;
    }

    size_t doc_len = 0;
    while (pos < span.end && seq.tokens[pos] >= tok::SPECIAL_COUNT) {
      expect_mask(pos, true, true, "document token");
      ++doc_len;
      ++pos;
    }
    if (doc_len == 0) fail("chunk has no document tokens", pos);

    if (pos < span.end) {
      if (!kept || !spec.has_append()) fail("unexpected trailing block", pos);
      if (seq.tokens[pos] != tok::BOC) fail("append block must open with BOC", pos);
      expect_mask(pos, spec.wrapper_masked, false, "append BOC");
      ++pos;
      while (pos < span.end && seq.tokens[pos] != tok::EOC) {
        if (seq.tokens[pos] < tok::SPECIAL_COUNT) fail("special token as metadata text", pos);
        expect_mask(pos, true, false, "append metadata");
        ++pos;
      }
      if (pos >= span.end) fail("append block not closed by EOC", pos);
      expect_mask(pos, spec.wrapper_masked, false, "append EOC");
      ++pos;
    } else if (kept && spec.has_append()) {
      fail("append block missing", pos);
    }
    if (pos != span.end) fail("chunk content does not reach its end", pos);
    cursor = span.end;
  }
  for (size_t pos = cursor; pos < L; ++pos) {
    if (seq.tokens[pos] != tok::PAD) fail("non-PAD token after last chunk", pos);
    expect_mask(pos, false, false, "PAD");
  }
}

// Concatenates the document-token spans of every chunk, keyed by doc hash.
inline std::map<uint64_t, std::vector<TokenId>> collect_doc_tokens(
    const std::vector<PackedSequence>& sequences) {
  std::map<uint64_t, std::vector<TokenId>> out;
  for (const PackedSequence& seq : sequences)
    for (const ChunkSpan& span : seq.chunk_spans)
      for (size_t pos = span.begin; pos < span.end; ++pos)
        if (seq.report_mask[pos]) out[span.doc_hash].push_back(seq.tokens[pos]);
  return out;
}

inline size_t count_chunks(const std::vector<PackedSequence>& sequences) {
  size_t n = 0;
  for (const auto& seq : sequences) n += seq.chunk_spans.size();
  return n;
}

inline size_t count_chunks_with_metadata(const std::vector<PackedSequence>& sequences) {
  size_t n = 0;
  for (const auto& seq : sequences)
    for (const ChunkSpan& span : seq.chunk_spans)
      for (size_t pos = span.begin; pos < span.end; ++pos)
        if (seq.tokens[pos] == tok::BOC) {
          ++n;
          break;
        }
  return n;
}

}  // namespace metacond::testutil

#endif  // METACOND_TESTS_HELPERS_HPP
