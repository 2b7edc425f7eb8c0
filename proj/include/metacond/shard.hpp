#ifndef METACOND_SHARD_HPP
#define METACOND_SHARD_HPP

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include "metacond/common.hpp"
#include "metacond/pack.hpp"

namespace metacond {

static_assert(std::endian::native == std::endian::little,
              "shard format is little-endian; big-endian hosts are unsupported");

// Shard layout, all little-endian:
//   magic "MCPK" | u32 version | u32 vocab_size | u32 sequence_length |
//   u64 sequence_count
// then per sequence:
//   u32 tokens[L] | backprop bits (ceil(L/8) bytes) | report bits |
//   u32 span_count | span_count x { u64 doc_hash, u32 begin, u32 end }

struct ShardHeader {
  uint32_t vocab_size = 0;
  uint32_t sequence_length = 0;
  uint64_t sequence_count = 0;
};

namespace detail {

constexpr char kShardMagic[4] = {'M', 'C', 'P', 'K'};
constexpr uint32_t kShardVersion = 1;

inline void pack_bits(const std::vector<uint8_t>& mask, std::string& out) {
  size_t bytes = (mask.size() + 7) / 8;
  size_t base = out.size();
  out.resize(base + bytes, '\0');
  for (size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) out[base + i / 8] |= static_cast<char>(1u << (i % 8));
}

template <typename T>
inline void put(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

class Cursor {
 public:
  Cursor(const std::string& data, const std::string& name) : data_(data), name_(name) {}

  template <typename T>
  T get() {
    if (pos_ + sizeof(T) > data_.size())
      throw DataError("truncated shard " + name_ + " at byte offset " + std::to_string(pos_));
    T value;
    std::memcpy(&value, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }

  void skip(size_t n) {
    if (pos_ + n > data_.size())
      throw DataError("truncated shard " + name_ + " at byte offset " + std::to_string(pos_));
    pos_ += n;
  }

  void get_bits(std::vector<uint8_t>& mask, size_t n) {
    size_t bytes = (n + 7) / 8;
    if (pos_ + bytes > data_.size())
      throw DataError("truncated shard " + name_ + " at byte offset " + std::to_string(pos_));
    mask.assign(n, 0);
    for (size_t i = 0; i < n; ++i)
      mask[i] = (data_[pos_ + i / 8] >> (i % 8)) & 1;
    pos_ += bytes;
  }

  size_t pos() const { return pos_; }

 private:
  const std::string& data_;
  std::string name_;
  size_t pos_ = 0;
};

}  // namespace detail

inline void write_shard(const std::vector<PackedSequence>& sequences, uint32_t vocab_size,
                        uint32_t sequence_length, const std::filesystem::path& path) {
  std::string out;
  out.append(detail::kShardMagic, 4);
  detail::put<uint32_t>(out, detail::kShardVersion);
  detail::put<uint32_t>(out, vocab_size);
  detail::put<uint32_t>(out, sequence_length);
  detail::put<uint64_t>(out, sequences.size());
  for (const PackedSequence& seq : sequences) {
    if (seq.tokens.size() != sequence_length)
      throw DataError("sequence length mismatch while writing shard");
    for (TokenId id : seq.tokens) detail::put<uint32_t>(out, id);
    detail::pack_bits(seq.backprop_mask, out);
    detail::pack_bits(seq.report_mask, out);
    detail::put<uint32_t>(out, static_cast<uint32_t>(seq.chunk_spans.size()));
    for (const ChunkSpan& span : seq.chunk_spans) {
      detail::put<uint64_t>(out, span.doc_hash);
      detail::put<uint32_t>(out, span.begin);
      detail::put<uint32_t>(out, span.end);
    }
  }
  write_file(path, out);
}

struct ShardData {
  ShardHeader header;
  std::vector<PackedSequence> sequences;
};

inline ShardData read_shard(const std::filesystem::path& path) {
  std::string data = read_file(path);
  detail::Cursor cur(data, path.filename().string());
  if (data.size() < 4 || std::memcmp(data.data(), detail::kShardMagic, 4) != 0)
    throw DataError("bad magic in shard " + path.string());
  (void)cur.get<uint32_t>();  // skip magic (validated above)
  uint32_t version = cur.get<uint32_t>();
  if (version != detail::kShardVersion)
    throw DataError("unsupported shard version " + std::to_string(version));
  ShardData shard;
  shard.header.vocab_size = cur.get<uint32_t>();
  shard.header.sequence_length = cur.get<uint32_t>();
  shard.header.sequence_count = cur.get<uint64_t>();
  const size_t L = shard.header.sequence_length;
  shard.sequences.resize(shard.header.sequence_count);
  for (PackedSequence& seq : shard.sequences) {
    seq.tokens.resize(L);
    for (size_t i = 0; i < L; ++i) seq.tokens[i] = cur.get<uint32_t>();
    cur.get_bits(seq.backprop_mask, L);
    cur.get_bits(seq.report_mask, L);
    uint32_t n_spans = cur.get<uint32_t>();
    seq.chunk_spans.resize(n_spans);
    for (ChunkSpan& span : seq.chunk_spans) {
      span.doc_hash = cur.get<uint64_t>();
      span.begin = cur.get<uint32_t>();
      span.end = cur.get<uint32_t>();
    }
  }
  return shard;
}

}  // namespace metacond

#endif  // METACOND_SHARD_HPP
