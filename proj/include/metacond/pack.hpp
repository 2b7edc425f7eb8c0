#ifndef METACOND_PACK_HPP
#define METACOND_PACK_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "metacond/common.hpp"
#include "metacond/corpus.hpp"
#include "metacond/tokenizer.hpp"

namespace metacond {

/// Where and how metadata is attached to training sequences.
struct ConditioningSpec {
  std::vector<MetaKind> prepend_kinds;
  std::vector<MetaKind> append_kinds;
  double dropout = 0.1;
  bool wrapper_masked = true;
  int meta_token_count = 5;

  void validate() const {
    if (dropout < 0.0 || dropout >= 1.0)
      throw UsageError("conditioning: dropout must be in [0, 1)");
    for (MetaKind k : append_kinds)
      if (k == MetaKind::META_TOKENS)
        throw UsageError("conditioning: meta_tokens may only be prepended");
    bool has_meta_tokens = false;
    for (MetaKind k : prepend_kinds) has_meta_tokens |= (k == MetaKind::META_TOKENS);
    if (has_meta_tokens && prepend_kinds.size() != 1)
      throw UsageError("conditioning: meta_tokens cannot be combined with text kinds");
    if (meta_token_count < 1 || meta_token_count > 5)
      throw UsageError("conditioning: meta_token_count must be in [1, 5]");
  }

  bool has_prepend() const { return !prepend_kinds.empty(); }
  bool has_append() const { return !append_kinds.empty(); }
  bool uses_meta_tokens() const {
    return prepend_kinds.size() == 1 && prepend_kinds[0] == MetaKind::META_TOKENS;
  }
};

struct ChunkSpan {
  uint64_t doc_hash = 0;
  uint32_t begin = 0;  // position of the chunk's BOS
  uint32_t end = 0;    // one past the chunk's last token

  bool operator==(const ChunkSpan&) const = default;
};

/// Fixed-length training sequence. Masks describe positions as prediction
/// targets: backprop_mask gates the differentiated loss, report_mask the
/// logged loss. Document targets are (1,1), prepended metadata and wrappers
/// (0,0), appended metadata (1,0), BOS and PAD (0,0).
struct PackedSequence {
  std::vector<TokenId> tokens;
  std::vector<uint8_t> backprop_mask;
  std::vector<uint8_t> report_mask;
  std::vector<ChunkSpan> chunk_spans;

  bool operator==(const PackedSequence&) const = default;
};

namespace detail {

inline double dropout_unit(uint64_t seed, uint64_t doc_hash, uint32_t chunk_index) {
  uint64_t u = derive_seed(seed, "pack/dropout", doc_hash ^ splitmix64(chunk_index));
  return static_cast<double>(u >> 11) * 0x1.0p-53;
}

// Token lists for one document's metadata blocks under a spec.
struct MetaBlocks {
  std::vector<TokenId> prepend;
  std::vector<TokenId> append;
};

inline MetaBlocks render_blocks(const Document& doc, const ConditioningSpec& spec,
                                const Tokenizer& tokenizer) {
  MetaBlocks blocks;
  if (spec.has_prepend()) {
    if (spec.uses_meta_tokens()) {
      for (int i = 0; i < spec.meta_token_count; ++i)
        blocks.prepend.push_back(tok::META1 + static_cast<TokenId>(i));
    } else {
      blocks.prepend = tokenizer.encode(render_metadata(doc, spec.prepend_kinds).text);
    }
  }
  if (spec.has_append())
    blocks.append = tokenizer.encode(render_metadata(doc, spec.append_kinds).text);
  return blocks;
}

}  // namespace detail

struct PackResult {
  std::vector<PackedSequence> sequences;
  size_t skipped_empty = 0;
};

/// Packs documents into length-L sequences. Per chunk the layout is
///   prepend:  <s> <boc> m.. <eoc> d..
///   append:   <s> d.. <boc> m.. <eoc>
///   both:     <s> <boc> m.. <eoc> d.. <boc> m.. <eoc>
/// A document crossing the sequence boundary is split; every continuation
/// chunk restarts with <s> and re-attached metadata, and in append mode each
/// chunk reserves room for its trailing block. Metadata is kept with
/// probability 1-dropout per chunk, drawn from hash(seed, doc id, chunk
/// index); a dropped chunk carries no wrapper block at all. Trailing space is
/// PAD-filled.
inline PackResult build_sequences(const std::vector<Document>& docs,
                                  const ConditioningSpec& spec, const Tokenizer& tokenizer,
                                  size_t seq_len, uint64_t seed) {
  spec.validate();
  if (seq_len < 16) throw UsageError("sequence length too small");

  PackResult result;
  PackedSequence cur;
  auto flush = [&]() {
    if (cur.tokens.empty()) return;
    cur.tokens.resize(seq_len, tok::PAD);
    cur.backprop_mask.resize(seq_len, 0);
    cur.report_mask.resize(seq_len, 0);
    result.sequences.push_back(std::move(cur));
    cur = {};
  };
  auto push = [&](TokenId id, bool bp, bool rp) {
    cur.tokens.push_back(id);
    cur.backprop_mask.push_back(bp ? 1 : 0);
    cur.report_mask.push_back(rp ? 1 : 0);
  };

  for (const Document& doc : docs) {
    std::vector<TokenId> doc_tokens = tokenizer.encode(doc.text);
    if (doc_tokens.empty()) {
      ++result.skipped_empty;
      continue;
    }
    detail::MetaBlocks blocks = detail::render_blocks(doc, spec, tokenizer);
    if (blocks.prepend.size() + 8 > seq_len || blocks.append.size() + 8 > seq_len)
      throw DataError("document " + doc.id + ": metadata block longer than sequence length - 8");
    const size_t kept_overhead = 1 + (spec.has_prepend() ? 2 + blocks.prepend.size() : 0) +
                                 (spec.has_append() ? 2 + blocks.append.size() : 0);
    if (kept_overhead + 1 > seq_len)
      throw DataError("document " + doc.id + ": metadata blocks leave no room for text");

    const uint64_t doc_hash = fnv1a64(doc.id);
    size_t consumed = 0;
    uint32_t chunk_index = 0;
    while (consumed < doc_tokens.size()) {
      bool kept = spec.dropout <= 0.0 ||
                  detail::dropout_unit(seed, doc_hash, chunk_index) >= spec.dropout;
      if (!spec.has_prepend() && !spec.has_append()) kept = false;
      const size_t overhead = kept ? kept_overhead : 1;
      if (cur.tokens.size() + overhead + 1 > seq_len) flush();

      const uint32_t chunk_begin = static_cast<uint32_t>(cur.tokens.size());
      const size_t capacity = seq_len - cur.tokens.size() - overhead;
      const size_t n_take = std::min(doc_tokens.size() - consumed, capacity);

      push(tok::BOS, false, false);
      if (kept && spec.has_prepend()) {
        push(tok::BOC, false, false);
        for (TokenId id : blocks.prepend) push(id, false, false);
        push(tok::EOC, false, false);
      }
      for (size_t i = 0; i < n_take; ++i) push(doc_tokens[consumed + i], true, true);
      if (kept && spec.has_append()) {
        push(tok::BOC, spec.wrapper_masked, false);
        for (TokenId id : blocks.append) push(id, true, false);
        push(tok::EOC, spec.wrapper_masked, false);
      }
      cur.chunk_spans.push_back(
          {doc_hash, chunk_begin, static_cast<uint32_t>(cur.tokens.size())});

      consumed += n_take;
      ++chunk_index;
    }
  }
  flush();
  return result;
}

// ---------------------------------------------------------------------------
// Single-document layouts for evaluation and analysis passes
// ---------------------------------------------------------------------------

/// One document packed alone, unpadded, metadata always attached. Block
/// bounds are recorded so analyses can address metadata and document spans
/// directly.
struct SingleDocLayout {
  std::vector<TokenId> tokens;
  std::vector<uint8_t> backprop_mask;
  std::vector<uint8_t> report_mask;
  size_t doc_begin = 0;
  size_t doc_end = 0;
  size_t pre_meta_begin = 0;  // metadata tokens inside the prepended block
  size_t pre_meta_end = 0;
  size_t app_meta_begin = 0;
  size_t app_meta_end = 0;
  bool truncated = false;
};

inline SingleDocLayout pack_single(const Document& doc, const ConditioningSpec& spec,
                                   const Tokenizer& tokenizer, size_t max_len) {
  spec.validate();
  std::vector<TokenId> doc_tokens = tokenizer.encode(doc.text);
  if (doc_tokens.empty()) throw DataError("document " + doc.id + ": empty after tokenization");
  detail::MetaBlocks blocks = detail::render_blocks(doc, spec, tokenizer);
  const size_t overhead = 1 + (spec.has_prepend() ? 2 + blocks.prepend.size() : 0) +
                          (spec.has_append() ? 2 + blocks.append.size() : 0);
  if (overhead + 1 > max_len)
    throw DataError("document " + doc.id + ": metadata blocks leave no room for text");

  SingleDocLayout layout;
  auto push = [&](TokenId id, bool bp, bool rp) {
    layout.tokens.push_back(id);
    layout.backprop_mask.push_back(bp ? 1 : 0);
    layout.report_mask.push_back(rp ? 1 : 0);
  };
  push(tok::BOS, false, false);
  if (spec.has_prepend()) {
    push(tok::BOC, false, false);
    layout.pre_meta_begin = layout.tokens.size();
    for (TokenId id : blocks.prepend) push(id, false, false);
    layout.pre_meta_end = layout.tokens.size();
    push(tok::EOC, false, false);
  }
  size_t n_take = std::min(doc_tokens.size(), max_len - overhead);
  layout.truncated = n_take < doc_tokens.size();
  layout.doc_begin = layout.tokens.size();
  for (size_t i = 0; i < n_take; ++i) push(doc_tokens[i], true, true);
  layout.doc_end = layout.tokens.size();
  if (spec.has_append()) {
    push(tok::BOC, spec.wrapper_masked, false);
    layout.app_meta_begin = layout.tokens.size();
    for (TokenId id : blocks.append) push(id, true, false);
    layout.app_meta_end = layout.tokens.size();
    push(tok::EOC, spec.wrapper_masked, false);
  }
  return layout;
}

}  // namespace metacond

#endif  // METACOND_PACK_HPP
