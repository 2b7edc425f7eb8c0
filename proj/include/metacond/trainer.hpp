#ifndef METACOND_TRAINER_HPP
#define METACOND_TRAINER_HPP

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "metacond/common.hpp"
#include "metacond/model.hpp"
#include "metacond/optim.hpp"
#include "metacond/pack.hpp"
#include "metacond/shard.hpp"

namespace metacond {

struct TrainConfig {
  double max_lr = 3e-4;
  double weight_decay = 0.1;
  double warmup_fraction = 0.05;
  size_t total_steps = 0;
  size_t batch_tokens = 0;
  uint64_t seed = 0;
  double grad_clip = 0.0;        // 0 disables clipping; grad_norm is logged regardless
  size_t checkpoint_every = 0;   // 0 = final checkpoint only

  void validate() const {
    if (max_lr <= 0.0) throw UsageError("train config: max_lr must be positive");
    if (warmup_fraction <= 0.0 || warmup_fraction >= 1.0)
      throw UsageError("train config: warmup_fraction must be in (0, 1)");
    if (total_steps == 0) throw UsageError("train config: total_steps must be positive");
    if (batch_tokens == 0) throw UsageError("train config: batch_tokens must be positive");
  }
};

struct StepMetrics {
  size_t step = 0;
  double backprop_loss = 0.0;
  double report_loss = 0.0;
  double grad_norm = 0.0;
  double lr = 0.0;
};

// ---------------------------------------------------------------------------
// Checkpoint format: magic "MCLM" | u32 version | u32 n_layers n_heads
// d_model d_ff vocab_size max_seq_len precision | tensors row-major f32 LE in
// declared parameter order. Optimizer state goes to a sidecar (magic "MCOS")
// so interrupted runs resume with identical dynamics.
// ---------------------------------------------------------------------------

namespace detail {
constexpr char kCkptMagic[4] = {'M', 'C', 'L', 'M'};
constexpr char kOptMagic[4] = {'M', 'C', 'O', 'S'};
constexpr uint32_t kCkptVersion = 1;

template <typename T>
inline void append_tensor_f32(std::string& out, const Matrix<T>& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      float v = static_cast<float>(m(r, c));
      char buf[4];
      std::memcpy(buf, &v, 4);
      out.append(buf, 4);
    }
}

template <typename T>
inline void read_tensor_f32(Cursor& cur, Matrix<T>& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = static_cast<T>(cur.get<float>());
}
}  // namespace detail

template <typename T>
inline void save_checkpoint(const MicroLM<T>& model, const std::filesystem::path& path) {
  const ModelConfig& cfg = model.config();
  std::string out;
  out.append(detail::kCkptMagic, 4);
  detail::put<uint32_t>(out, detail::kCkptVersion);
  for (int v : {cfg.n_layers, cfg.n_heads, cfg.d_model, cfg.d_ff, cfg.vocab_size,
                cfg.max_seq_len, cfg.precision == Precision::f64 ? 1 : 0})
    detail::put<uint32_t>(out, static_cast<uint32_t>(v));
  for (const auto& p : model.params()) detail::append_tensor_f32(out, p.value);
  write_file(path, out);
}

inline ModelConfig checkpoint_config(const std::string& data, const std::string& name) {
  detail::Cursor cur(data, name);
  if (data.size() < 4 || std::memcmp(data.data(), detail::kCkptMagic, 4) != 0)
    throw DataError("bad magic in checkpoint " + name);
  (void)cur.get<uint32_t>();
  uint32_t version = cur.get<uint32_t>();
  if (version != detail::kCkptVersion)
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  ModelConfig cfg;
  cfg.n_layers = static_cast<int>(cur.get<uint32_t>());
  cfg.n_heads = static_cast<int>(cur.get<uint32_t>());
  cfg.d_model = static_cast<int>(cur.get<uint32_t>());
  cfg.d_ff = static_cast<int>(cur.get<uint32_t>());
  cfg.vocab_size = static_cast<int>(cur.get<uint32_t>());
  cfg.max_seq_len = static_cast<int>(cur.get<uint32_t>());
  cfg.precision = cur.get<uint32_t>() ? Precision::f64 : Precision::f32;
  return cfg;
}

template <typename T>
inline MicroLM<T> load_checkpoint(const std::filesystem::path& path) {
  std::string data = read_file(path);
  ModelConfig cfg = checkpoint_config(data, path.string());
  MicroLM<T> model(cfg, 0);
  detail::Cursor cur(data, path.string());
  cur.skip(4 + 4 + 7 * 4);
  for (auto& p : model.params()) detail::read_tensor_f32(cur, p.value);
  return model;
}

inline uint64_t checkpoint_hash(const std::filesystem::path& path) {
  std::string data = read_file(path);
  return fnv1a64(data);
}

template <typename T>
inline void save_optimizer_state(AdamW<T>& opt, size_t step,
                                 const std::filesystem::path& path) {
  std::string out;
  out.append(detail::kOptMagic, 4);
  detail::put<uint32_t>(out, detail::kCkptVersion);
  detail::put<uint64_t>(out, static_cast<uint64_t>(step));
  detail::put<uint64_t>(out, static_cast<uint64_t>(opt.step_count()));
  for (const auto& m : opt.m()) detail::append_tensor_f32(out, m);
  for (const auto& v : opt.v()) detail::append_tensor_f32(out, v);
  write_file(path, out);
}

template <typename T>
inline size_t load_optimizer_state(AdamW<T>& opt, const std::filesystem::path& path) {
  std::string data = read_file(path);
  detail::Cursor cur(data, path.string());
  if (data.size() < 4 || std::memcmp(data.data(), detail::kOptMagic, 4) != 0)
    throw DataError("bad magic in optimizer state " + path.string());
  (void)cur.get<uint32_t>();
  (void)cur.get<uint32_t>();
  size_t step = static_cast<size_t>(cur.get<uint64_t>());
  opt.set_step_count(static_cast<size_t>(cur.get<uint64_t>()));
  for (auto& m : opt.m()) detail::read_tensor_f32(cur, m);
  for (auto& v : opt.v()) detail::read_tensor_f32(cur, v);
  return step;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

template <typename T>
class Trainer {
 public:
  Trainer(MicroLM<T>& model, const std::vector<PackedSequence>& sequences, TrainConfig cfg)
      : model_(model),
        sequences_(sequences),
        cfg_(cfg),
        opt_(model.params(), cfg.weight_decay) {
    cfg_.validate();
    if (sequences_.empty()) throw DataError("trainer: no training sequences");
    seq_len_ = sequences_.front().tokens.size();
    if (static_cast<int>(seq_len_) > model_.config().max_seq_len)
      throw DataError("trainer: sequence length exceeds model max_seq_len");
    batch_size_ = std::max<size_t>(1, cfg_.batch_tokens / seq_len_);
    order_.resize(sequences_.size());
    for (size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    Rng rng(derive_seed(cfg_.seed, "train/order"));
    rng.shuffle(order_);
  }

  AdamW<T>& optimizer() { return opt_; }
  size_t batch_size() const { return batch_size_; }

  StepMetrics run_step(size_t step) {
    const size_t L = seq_len_;
    const size_t B = batch_size_;
    std::vector<TokenId> tokens(B * L);
    std::vector<TokenId> targets(B * L, 0);
    std::vector<uint8_t> bp(B * L, 0), rp(B * L, 0);
    for (size_t b = 0; b < B; ++b) {
      const PackedSequence& seq = sequences_[order_[(step * B + b) % sequences_.size()]];
      std::copy(seq.tokens.begin(), seq.tokens.end(), tokens.begin() + b * L);
      for (size_t t = 0; t + 1 < L; ++t) {
        targets[b * L + t] = seq.tokens[t + 1];
        bp[b * L + t] = seq.backprop_mask[t + 1];
        rp[b * L + t] = seq.report_mask[t + 1];
      }
    }

    const Matrix<T>& logits =
        model_.forward(tokens, static_cast<int>(B), static_cast<int>(L));
    Matrix<T> dlogits;
    auto loss = masked_loss<T>(logits, targets, bp, rp, &dlogits);
    model_.zero_grad();
    model_.backward(dlogits);
    double lr = lr_at_step(step, cfg_.total_steps, cfg_.max_lr, cfg_.warmup_fraction);
    double grad_norm = opt_.step(model_.params(), lr, cfg_.grad_clip);

    StepMetrics metrics{step, static_cast<double>(loss.backprop_loss),
                        static_cast<double>(loss.report_loss), grad_norm, lr};
    if (!std::isfinite(metrics.backprop_loss) || !std::isfinite(metrics.grad_norm))
      throw NumericError("non-finite loss or gradient at step " + std::to_string(step));
    return metrics;
  }

  /// Runs steps [from, to); invokes on_step per step and on_checkpoint at the
  /// configured cadence plus once at the end.
  void run(size_t from, size_t to, const std::function<void(const StepMetrics&)>& on_step,
           const std::function<void(size_t)>& on_checkpoint = {}) {
    for (size_t step = from; step < to; ++step) {
      StepMetrics metrics = run_step(step);
      if (on_step) on_step(metrics);
      bool at_interval = cfg_.checkpoint_every && (step + 1) % cfg_.checkpoint_every == 0;
      if (on_checkpoint && (at_interval || step + 1 == to)) on_checkpoint(step + 1);
    }
  }

 private:
  MicroLM<T>& model_;
  const std::vector<PackedSequence>& sequences_;
  TrainConfig cfg_;
  AdamW<T> opt_;
  size_t seq_len_ = 0;
  size_t batch_size_ = 0;
  std::vector<size_t> order_;
};

template <typename T>
inline void check_shard_compatible(const MicroLM<T>& model, const ShardHeader& header) {
  if (header.vocab_size != static_cast<uint32_t>(model.config().vocab_size))
    throw DataError("shard vocab_size " + std::to_string(header.vocab_size) +
                    " does not match model vocab_size " +
                    std::to_string(model.config().vocab_size));
  if (header.sequence_length > static_cast<uint32_t>(model.config().max_seq_len))
    throw DataError("shard sequence length exceeds model max_seq_len");
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

enum class PrefixMode { none, empty_context };

inline PrefixMode prefix_mode_from_name(const std::string& s) {
  if (s == "none") return PrefixMode::none;
  if (s == "empty_context") return PrefixMode::empty_context;
  throw UsageError("unknown prefix mode: " + s);
}

struct EvalResult {
  double mean_loss = 0.0;   // pooled over all document targets
  double perplexity = 0.0;
  size_t n_targets = 0;
  std::vector<double> per_doc_loss;  // mean per document
};

namespace detail {
template <typename T>
inline std::pair<double, size_t> doc_report_loss(MicroLM<T>& model,
                                                 const std::vector<TokenId>& tokens,
                                                 const std::vector<uint8_t>& report_mask) {
  const size_t n = tokens.size();
  const Matrix<T>& logits = model.forward(tokens, 1, static_cast<int>(n));
  double sum = 0.0;
  size_t count = 0;
  RowVec<T> probs(logits.cols());
  for (size_t t = 0; t + 1 < n; ++t) {
    if (!report_mask[t + 1]) continue;
    const auto row = logits.row(static_cast<Eigen::Index>(t));
    T mx = row.maxCoeff();
    T z = (row.array() - mx).exp().sum();
    sum += static_cast<double>(std::log(z) + mx - row(static_cast<Eigen::Index>(tokens[t + 1])));
    ++count;
  }
  return {sum, count};
}
}  // namespace detail

/// Report loss over document targets only. empty_context prepends
/// <s><boc><eoc>, none prepends just <s>; the prefix is never a target.
template <typename T>
inline EvalResult eval_report_loss(MicroLM<T>& model, const std::vector<Document>& docs,
                                   const Tokenizer& tokenizer, PrefixMode mode) {
  if (docs.empty()) throw DataError("eval: empty document set");
  const size_t max_len = static_cast<size_t>(model.config().max_seq_len);
  EvalResult result;
  double total = 0.0;
  for (const Document& doc : docs) {
    std::vector<TokenId> doc_tokens = tokenizer.encode(doc.text);
    if (doc_tokens.empty()) throw DataError("eval: document " + doc.id + " is empty");
    std::vector<TokenId> tokens{tok::BOS};
    if (mode == PrefixMode::empty_context) {
      tokens.push_back(tok::BOC);
      tokens.push_back(tok::EOC);
    }
    size_t cap = max_len - tokens.size();
    tokens.insert(tokens.end(), doc_tokens.begin(),
                  doc_tokens.begin() + static_cast<std::ptrdiff_t>(std::min(cap, doc_tokens.size())));
    std::vector<uint8_t> report(tokens.size(), 0);
    for (size_t i = (mode == PrefixMode::empty_context) ? 3 : 1; i < tokens.size(); ++i)
      report[i] = 1;
    auto [sum, count] = detail::doc_report_loss(model, tokens, report);
    total += sum;
    result.n_targets += count;
    result.per_doc_loss.push_back(count ? sum / static_cast<double>(count) : 0.0);
  }
  if (result.n_targets == 0) throw DataError("eval: no document targets");
  result.mean_loss = total / static_cast<double>(result.n_targets);
  result.perplexity = std::exp(result.mean_loss);
  return result;
}

/// Report loss with a run's own conditioning attached (metadata always kept).
/// Only document targets count, so prepended blocks condition the prediction
/// while appended blocks, being causal successors, cannot.
template <typename T>
inline EvalResult eval_conditioned(MicroLM<T>& model, const std::vector<Document>& docs,
                                   const ConditioningSpec& spec, const Tokenizer& tokenizer) {
  if (docs.empty()) throw DataError("eval: empty document set");
  const size_t max_len = static_cast<size_t>(model.config().max_seq_len);
  EvalResult result;
  double total = 0.0;
  for (const Document& doc : docs) {
    SingleDocLayout layout = pack_single(doc, spec, tokenizer, max_len);
    auto [sum, count] = detail::doc_report_loss(model, layout.tokens, layout.report_mask);
    total += sum;
    result.n_targets += count;
    result.per_doc_loss.push_back(count ? sum / static_cast<double>(count) : 0.0);
  }
  if (result.n_targets == 0) throw DataError("eval: no document targets");
  result.mean_loss = total / static_cast<double>(result.n_targets);
  result.perplexity = std::exp(result.mean_loss);
  return result;
}

/// Greedy continuation after <s> doc.. <boc>; stops at <eoc> or max_new.
/// Returns the generated metadata tokens (without the closing <eoc>).
template <typename T>
inline std::vector<TokenId> greedy_metadata_continuation(MicroLM<T>& model,
                                                         const Document& doc,
                                                         const Tokenizer& tokenizer,
                                                         size_t max_new) {
  const size_t max_len = static_cast<size_t>(model.config().max_seq_len);
  std::vector<TokenId> doc_tokens = tokenizer.encode(doc.text);
  if (doc_tokens.empty()) throw DataError("continuation: document " + doc.id + " is empty");
  std::vector<TokenId> tokens{tok::BOS};
  size_t cap = max_len - 2 - max_new;
  tokens.insert(tokens.end(), doc_tokens.begin(),
                doc_tokens.begin() + static_cast<std::ptrdiff_t>(std::min(cap, doc_tokens.size())));
  tokens.push_back(tok::BOC);

  std::vector<TokenId> generated;
  for (size_t i = 0; i < max_new; ++i) {
    const Matrix<T>& logits = model.forward(tokens, 1, static_cast<int>(tokens.size()));
    Eigen::Index best = 0;
    logits.row(logits.rows() - 1).maxCoeff(&best);
    TokenId next = static_cast<TokenId>(best);
    if (next == tok::EOC) break;
    generated.push_back(next);
    tokens.push_back(next);
    if (tokens.size() >= max_len) break;
  }
  return generated;
}

inline double median(std::vector<double> values) {
  if (values.empty()) throw UsageError("median of empty set");
  std::sort(values.begin(), values.end());
  size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

}  // namespace metacond

#endif  // METACOND_TRAINER_HPP
