#ifndef METACOND_PROBE_HPP
#define METACOND_PROBE_HPP

#include <algorithm>
#include <cstring>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "metacond/common.hpp"
#include "metacond/model.hpp"
#include "metacond/optim.hpp"
#include "metacond/pack.hpp"

namespace metacond {

enum class ProbeTask { QUALITY, TOPIC, AUTHORSHIP };

inline const char* probe_task_name(ProbeTask t) {
  switch (t) {
    case ProbeTask::QUALITY: return "quality";
    case ProbeTask::TOPIC: return "topic";
    case ProbeTask::AUTHORSHIP: return "authorship";
  }
  return "?";
}

inline ProbeTask probe_task_from_name(const std::string& s) {
  if (s == "quality") return ProbeTask::QUALITY;
  if (s == "topic") return ProbeTask::TOPIC;
  if (s == "authorship") return ProbeTask::AUTHORSHIP;
  throw UsageError("unknown probe task: " + s);
}

/// Train/test fraction per task: 90/10 for quality and topic, 70/30 for
/// authorship.
inline double probe_test_fraction(ProbeTask task) {
  return task == ProbeTask::AUTHORSHIP ? 0.3 : 0.1;
}

// ---------------------------------------------------------------------------
// Representation extraction: the hidden state at the 100th document token
// (final token for shorter documents), counting document tokens only; any
// prepended context sits before the counted span and is excluded.
// ---------------------------------------------------------------------------

inline size_t representation_index(size_t doc_begin, size_t doc_len) {
  return doc_begin + std::min<size_t>(99, doc_len - 1);
}

template <typename T>
inline RowVec<T> extract_representation(MicroLM<T>& model, const SingleDocLayout& layout,
                                        int layer) {
  if (layer < 0 || layer >= model.config().n_layers)
    throw UsageError("extract_representation: layer out of range");
  size_t doc_len = layout.doc_end - layout.doc_begin;
  if (doc_len == 0) throw DataError("extract_representation: empty document span");
  Capture<T> capture;
  model.forward(layout.tokens, 1, static_cast<int>(layout.tokens.size()), &capture,
                {.hidden_states = true, .attention = false});
  size_t pos = representation_index(layout.doc_begin, doc_len);
  return capture.hidden[static_cast<size_t>(layer)].row(static_cast<Eigen::Index>(pos));
}

/// Per-layer representations for a whole document set in one forward pass
/// per document. Output: one [n_docs, d_model] matrix per layer.
template <typename T>
inline std::vector<Matrix<float>> extract_representations(MicroLM<T>& model,
                                                          const std::vector<Document>& docs,
                                                          const ConditioningSpec& spec,
                                                          const Tokenizer& tokenizer) {
  const int n_layers = model.config().n_layers;
  std::vector<Matrix<float>> out(static_cast<size_t>(n_layers));
  for (auto& m : out)
    m = Matrix<float>::Zero(static_cast<Eigen::Index>(docs.size()), model.config().d_model);
  Capture<T> capture;
  for (size_t i = 0; i < docs.size(); ++i) {
    SingleDocLayout layout = pack_single(docs[i], spec, tokenizer,
                                         static_cast<size_t>(model.config().max_seq_len));
    model.forward(layout.tokens, 1, static_cast<int>(layout.tokens.size()), &capture,
                  {.hidden_states = true, .attention = false});
    size_t pos = representation_index(layout.doc_begin, layout.doc_end - layout.doc_begin);
    for (int l = 0; l < n_layers; ++l)
      out[static_cast<size_t>(l)].row(static_cast<Eigen::Index>(i)) =
          capture.hidden[static_cast<size_t>(l)]
              .row(static_cast<Eigen::Index>(pos))
              .template cast<float>();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Labels
// ---------------------------------------------------------------------------

struct LabelSet {
  std::vector<int> labels;          // aligned with the document list
  std::vector<std::string> names;   // class id -> display name
  int n_classes = 0;
};

/// Maps documents to contiguous class ids for a task. String classes are
/// numbered in sorted order for determinism. Authorship falls back to the
/// synthetic cluster when no author field exists.
inline LabelSet probe_labels(const std::vector<Document>& docs, ProbeTask task) {
  LabelSet set;
  auto key_of = [&](const Document& doc) -> std::string {
    switch (task) {
      case ProbeTask::QUALITY:
        if (doc.quality_level) return std::to_string(*doc.quality_level);
        if (doc.int_score) return std::to_string(*doc.int_score);
        throw DataError("document " + doc.id + ": no quality label");
      case ProbeTask::TOPIC:
        if (doc.topic_coarse) return *doc.topic_coarse;
        throw DataError("document " + doc.id + ": no topic label");
      case ProbeTask::AUTHORSHIP:
        if (doc.author) return *doc.author;
        if (doc.cluster) return "cluster-" + std::to_string(*doc.cluster);
        throw DataError("document " + doc.id + ": no author label");
    }
    throw UsageError("bad probe task");
  };
  std::map<std::string, int> ids;
  for (const Document& doc : docs) ids.emplace(key_of(doc), 0);
  for (auto& [name, id] : ids) {
    id = set.n_classes++;
    set.names.push_back(name);
  }
  for (const Document& doc : docs) set.labels.push_back(ids.at(key_of(doc)));
  return set;
}

// ---------------------------------------------------------------------------
// Stratified split
// ---------------------------------------------------------------------------

struct Split {
  std::vector<size_t> train;
  std::vector<size_t> test;
};

inline Split stratified_split(const std::vector<int>& labels, int n_classes,
                              double test_fraction, uint64_t seed) {
  std::vector<std::vector<size_t>> per_class(static_cast<size_t>(n_classes));
  for (size_t i = 0; i < labels.size(); ++i)
    per_class[static_cast<size_t>(labels[i])].push_back(i);
  Split split;
  for (int c = 0; c < n_classes; ++c) {
    auto& members = per_class[static_cast<size_t>(c)];
    if (members.size() < 2)
      throw DataError("class " + std::to_string(c) +
                      " cannot populate both splits (needs at least 2 examples)");
    Rng rng(derive_seed(seed, "probe/split", static_cast<uint64_t>(c)));
    rng.shuffle(members);
    size_t n_test = static_cast<size_t>(
        std::llround(test_fraction * static_cast<double>(members.size())));
    n_test = std::max<size_t>(1, std::min(n_test, members.size() - 1));
    for (size_t i = 0; i < members.size(); ++i)
      (i < n_test ? split.test : split.train).push_back(members[i]);
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.test.begin(), split.test.end());
  return split;
}

// ---------------------------------------------------------------------------
// Three-layer MLP probe (two hidden layers + softmax head), trained with the
// same AdamW machinery as the language model. Fixed budget, no early
// stopping, deterministic per seed.
// ---------------------------------------------------------------------------

struct ProbeConfig {
  int hidden = 256;
  int epochs = 30;
  size_t batch = 64;
  double lr = 1e-3;
  double weight_decay = 0.0;
};

struct ProbeLayerReport {
  int layer = 0;
  double train_acc = 0.0;
  double test_acc = 0.0;
  std::vector<std::vector<int>> confusion;  // test counts, [true][predicted]
};

namespace detail {

class ProbeMlp {
 public:
  ProbeMlp(int d_in, int hidden, int n_classes, uint64_t seed) {
    auto add = [&](const std::string& name, int rows, int cols, bool decay) {
      Param<float> p;
      p.name = name;
      p.value = Matrix<float>::Zero(rows, cols);
      p.decay = decay;
      p.init_zero_grad();
      params_.push_back(std::move(p));
    };
    add("w1", hidden, d_in, true);
    add("b1", 1, hidden, false);
    add("w2", hidden, hidden, true);
    add("b2", 1, hidden, false);
    add("w3", n_classes, hidden, true);
    add("b3", 1, n_classes, false);
    for (size_t i = 0; i < params_.size(); ++i) {
      Rng rng(derive_seed(seed, "probe/init", i));
      auto& p = params_[i];
      if (p.name[0] == 'b') continue;
      float scale = std::sqrt(2.0f / static_cast<float>(p.value.cols()));
      for (Eigen::Index r = 0; r < p.value.rows(); ++r)
        for (Eigen::Index c = 0; c < p.value.cols(); ++c)
          p.value(r, c) = static_cast<float>(rng.next_normal()) * scale;
    }
  }

  std::vector<Param<float>>& params() { return params_; }

  Matrix<float> forward(const Matrix<float>& x) {
    x_ = x;
    h1_ = (x * params_[0].value.transpose()).rowwise() + params_[1].value.row(0);
    a1_ = h1_.cwiseMax(0.0f);
    h2_ = (a1_ * params_[2].value.transpose()).rowwise() + params_[3].value.row(0);
    a2_ = h2_.cwiseMax(0.0f);
    return (a2_ * params_[4].value.transpose()).rowwise() + params_[5].value.row(0);
  }

  void backward(const Matrix<float>& dlogits) {
    params_[4].grad.noalias() += dlogits.transpose() * a2_;
    params_[5].grad.row(0) += dlogits.colwise().sum();
    Matrix<float> da2 = dlogits * params_[4].value;
    Matrix<float> dh2 = da2.cwiseProduct(
        h2_.unaryExpr([](float v) { return v > 0.0f ? 1.0f : 0.0f; }));
    params_[2].grad.noalias() += dh2.transpose() * a1_;
    params_[3].grad.row(0) += dh2.colwise().sum();
    Matrix<float> da1 = dh2 * params_[2].value;
    Matrix<float> dh1 = da1.cwiseProduct(
        h1_.unaryExpr([](float v) { return v > 0.0f ? 1.0f : 0.0f; }));
    params_[0].grad.noalias() += dh1.transpose() * x_;
    params_[1].grad.row(0) += dh1.colwise().sum();
  }

  void zero_grad() {
    for (auto& p : params_) p.grad.setZero();
  }

 private:
  std::vector<Param<float>> params_;
  Matrix<float> x_, h1_, a1_, h2_, a2_;
};

inline double accuracy(ProbeMlp& mlp, const Matrix<float>& x, const std::vector<int>& labels,
                       const std::vector<size_t>& subset,
                       std::vector<std::vector<int>>* confusion = nullptr) {
  if (subset.empty()) return 0.0;
  Matrix<float> sub(static_cast<Eigen::Index>(subset.size()), x.cols());
  for (size_t i = 0; i < subset.size(); ++i)
    sub.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(subset[i]));
  Matrix<float> logits = mlp.forward(sub);
  size_t correct = 0;
  for (size_t i = 0; i < subset.size(); ++i) {
    Eigen::Index best = 0;
    logits.row(static_cast<Eigen::Index>(i)).maxCoeff(&best);
    int truth = labels[subset[i]];
    if (confusion)
      ++(*confusion)[static_cast<size_t>(truth)][static_cast<size_t>(best)];
    correct += static_cast<int>(best) == truth;
  }
  return static_cast<double>(correct) / static_cast<double>(subset.size());
}

}  // namespace detail

/// Trains one probe on a single layer's representations.
inline ProbeLayerReport train_probe(const Matrix<float>& x, const std::vector<int>& labels,
                                    int n_classes, ProbeTask task, uint64_t seed,
                                    const ProbeConfig& cfg = {}) {
  if (n_classes < 2) throw DataError("probe needs at least two classes");
  if (static_cast<size_t>(x.rows()) != labels.size())
    throw UsageError("probe: labels misaligned with vectors");
  Split split = stratified_split(labels, n_classes, probe_test_fraction(task), seed);

  detail::ProbeMlp mlp(static_cast<int>(x.cols()), cfg.hidden, n_classes,
                       derive_seed(seed, "probe/model"));
  AdamW<float> opt(mlp.params(), cfg.weight_decay);

  std::vector<size_t> order = split.train;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng(derive_seed(seed, "probe/epoch", static_cast<uint64_t>(epoch)));
    rng.shuffle(order);
    for (size_t start = 0; start < order.size(); start += cfg.batch) {
      size_t n = std::min(cfg.batch, order.size() - start);
      Matrix<float> batch(static_cast<Eigen::Index>(n), x.cols());
      for (size_t i = 0; i < n; ++i)
        batch.row(static_cast<Eigen::Index>(i)) =
            x.row(static_cast<Eigen::Index>(order[start + i]));
      Matrix<float> logits = mlp.forward(batch);
      Matrix<float> dlogits(logits.rows(), logits.cols());
      for (size_t i = 0; i < n; ++i) {
        auto row = logits.row(static_cast<Eigen::Index>(i));
        float mx = row.maxCoeff();
        RowVec<float> p = (row.array() - mx).exp();
        p /= p.sum();
        dlogits.row(static_cast<Eigen::Index>(i)) = p / static_cast<float>(n);
        dlogits(static_cast<Eigen::Index>(i), labels[order[start + i]]) -=
            1.0f / static_cast<float>(n);
      }
      mlp.zero_grad();
      mlp.backward(dlogits);
      opt.step(mlp.params(), cfg.lr);
    }
  }

  ProbeLayerReport report;
  report.confusion.assign(static_cast<size_t>(n_classes),
                          std::vector<int>(static_cast<size_t>(n_classes), 0));
  report.train_acc = detail::accuracy(mlp, x, labels, split.train);
  report.test_acc = detail::accuracy(mlp, x, labels, split.test, &report.confusion);
  return report;
}

// ---------------------------------------------------------------------------
// Extraction cache: binary records keyed by (checkpoint hash, layer, doc id).
// ---------------------------------------------------------------------------

class ExtractionCache {
 public:
  explicit ExtractionCache(std::filesystem::path path) : path_(std::move(path)) {
    if (!std::filesystem::exists(path_)) return;
    std::string data = read_file(path_);
    size_t pos = 0;
    auto get = [&](void* dst, size_t n) {
      if (pos + n > data.size()) throw DataError("truncated extraction cache " + path_.string());
      std::memcpy(dst, data.data() + pos, n);
      pos += n;
    };
    char magic[4];
    if (data.size() < 4) throw DataError("truncated extraction cache " + path_.string());
    get(magic, 4);
    if (std::memcmp(magic, "MCPC", 4) != 0)
      throw DataError("bad magic in extraction cache " + path_.string());
    while (pos < data.size()) {
      Key key{};
      uint32_t dim = 0;
      get(&key.checkpoint, 8);
      get(&key.layer, 4);
      get(&key.doc, 8);
      get(&dim, 4);
      std::vector<float> vec(dim);
      get(vec.data(), dim * sizeof(float));
      entries_[key] = std::move(vec);
    }
  }

  std::optional<std::vector<float>> get(uint64_t checkpoint, int layer,
                                        const std::string& doc_id) const {
    auto it = entries_.find({checkpoint, static_cast<uint32_t>(layer), fnv1a64(doc_id)});
    if (it == entries_.end()) return std::nullopt;
    return it->second;
  }

  void put(uint64_t checkpoint, int layer, const std::string& doc_id,
           std::vector<float> vec) {
    entries_[{checkpoint, static_cast<uint32_t>(layer), fnv1a64(doc_id)}] = std::move(vec);
  }

  void flush() const {
    std::string out;
    out.append("MCPC", 4);
    for (const auto& [key, vec] : entries_) {
      auto put_raw = [&](const void* src, size_t n) {
        out.append(static_cast<const char*>(src), n);
      };
      uint32_t dim = static_cast<uint32_t>(vec.size());
      put_raw(&key.checkpoint, 8);
      put_raw(&key.layer, 4);
      put_raw(&key.doc, 8);
      put_raw(&dim, 4);
      put_raw(vec.data(), vec.size() * sizeof(float));
    }
    write_file(path_, out);
  }

  size_t size() const { return entries_.size(); }

 private:
  struct Key {
    uint64_t checkpoint;
    uint32_t layer;
    uint64_t doc;
    bool operator<(const Key& o) const {
      return std::tie(checkpoint, layer, doc) < std::tie(o.checkpoint, o.layer, o.doc);
    }
  };
  std::filesystem::path path_;
  std::map<Key, std::vector<float>> entries_;
};

}  // namespace metacond

#endif  // METACOND_PROBE_HPP
