#ifndef METACOND_ATTN_HPP
#define METACOND_ATTN_HPP

#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "metacond/common.hpp"
#include "metacond/corpus.hpp"
#include "metacond/model.hpp"
#include "metacond/pack.hpp"

namespace metacond {

// Attention key categories. BOS and META_TEXT extend the URL-part set so the
// spans always partition a sequence (every chunk starts with <s>, and
// non-URL metadata needs a bucket); PAD never appears in analysis layouts.
enum class Category {
  URL_PREFIX,
  URL_DOMAIN,
  URL_SUFFIX,
  BOC,
  EOC,
  META_1,
  META_2,
  META_3,
  META_4,
  META_5,
  BOS,
  META_TEXT,
  DOC,
  PAD,
};

constexpr int kCategoryCount = 14;

inline const char* category_name(Category c) {
  static const char* names[kCategoryCount] = {
      "url_prefix", "url_domain", "url_suffix", "boc",  "eoc",       "meta_1", "meta_2",
      "meta_3",     "meta_4",     "meta_5",     "bos",  "meta_text", "doc",    "pad"};
  return names[static_cast<int>(c)];
}

struct CategorySpan {
  Category category;
  size_t begin = 0;
  size_t end = 0;
};

/// Builds the category partition of a single-document layout. URL metadata
/// is subdivided into prefix/domain/suffix token spans; meta tokens get one
/// span each; any other metadata text is a single META_TEXT span.
inline std::vector<CategorySpan> category_spans(const SingleDocLayout& layout,
                                                const ConditioningSpec& spec,
                                                const Document& doc,
                                                const Tokenizer& tokenizer) {
  std::vector<CategorySpan> spans;
  spans.push_back({Category::BOS, 0, 1});
  if (spec.has_prepend()) {
    spans.push_back({Category::BOC, layout.pre_meta_begin - 1, layout.pre_meta_begin});
    if (spec.uses_meta_tokens()) {
      for (size_t i = layout.pre_meta_begin; i < layout.pre_meta_end; ++i) {
        int slot = static_cast<int>(layout.tokens[i] - tok::META1);
        spans.push_back({static_cast<Category>(static_cast<int>(Category::META_1) + slot),
                         i, i + 1});
      }
    } else if (spec.prepend_kinds.size() == 1 && spec.prepend_kinds[0] == MetaKind::URL) {
      if (!doc.url) throw DataError("document " + doc.id + ": no url for span analysis");
      UrlParts parts = split_url(*doc.url);
      size_t n_prefix = tokenizer.encode(parts.prefix).size();
      size_t n_domain = tokenizer.encode(parts.domain).size();
      size_t n_suffix = tokenizer.encode(parts.suffix).size();
      if (layout.pre_meta_begin + n_prefix + n_domain + n_suffix != layout.pre_meta_end)
        throw DataError("document " + doc.id + ": url parts do not tile its token span");
      size_t at = layout.pre_meta_begin;
      if (n_prefix) spans.push_back({Category::URL_PREFIX, at, at + n_prefix});
      at += n_prefix;
      if (n_domain) spans.push_back({Category::URL_DOMAIN, at, at + n_domain});
      at += n_domain;
      if (n_suffix) spans.push_back({Category::URL_SUFFIX, at, at + n_suffix});
    } else {
      spans.push_back({Category::META_TEXT, layout.pre_meta_begin, layout.pre_meta_end});
    }
    spans.push_back({Category::EOC, layout.pre_meta_end, layout.pre_meta_end + 1});
  }
  spans.push_back({Category::DOC, layout.doc_begin, layout.doc_end});
  if (spec.has_append()) {
    spans.push_back({Category::BOC, layout.app_meta_begin - 1, layout.app_meta_begin});
    spans.push_back({Category::META_TEXT, layout.app_meta_begin, layout.app_meta_end});
    spans.push_back({Category::EOC, layout.app_meta_end, layout.app_meta_end + 1});
  }
  return spans;
}

// ---------------------------------------------------------------------------
// Aggregated attention mass per (layer, head, category)
// ---------------------------------------------------------------------------

struct AttentionProfile {
  int n_layers = 0;
  int n_heads = 0;
  // mass[layer][head][category]: attention mass averaged over document-token
  // queries, then over documents
  std::vector<std::vector<std::array<double, kCategoryCount>>> mass;
  size_t documents = 0;
  size_t skipped = 0;

  void init(int layers, int heads) {
    n_layers = layers;
    n_heads = heads;
    mass.assign(static_cast<size_t>(layers),
                std::vector<std::array<double, kCategoryCount>>(
                    static_cast<size_t>(heads), std::array<double, kCategoryCount>{}));
  }

  /// Unweighted mean over heads for one layer and category.
  double layer_mean(int layer, Category c) const {
    double total = 0.0;
    for (int h = 0; h < n_heads; ++h)
      total += mass[static_cast<size_t>(layer)][static_cast<size_t>(h)]
                   [static_cast<size_t>(c)];
    return total / n_heads;
  }
};

/// Accumulates one document's attention maps into per-category masses.
/// Queries are document tokens only; each query row's mass over the spans
/// sums to one because the spans partition the non-future keys... masses are
/// averaged over the document's queries.
template <typename T>
inline void accumulate_attention(const Capture<T>& capture,
                                 const std::vector<CategorySpan>& spans,
                                 const SingleDocLayout& layout, int n_heads,
                                 size_t max_queries, AttentionProfile& profile) {
  const size_t q_begin = layout.doc_begin;
  const size_t q_end = std::min(layout.doc_end, layout.doc_begin + max_queries);
  const size_t n_queries = q_end - q_begin;
  if (n_queries == 0) throw DataError("attention aggregation: no document queries");
  const auto L = static_cast<Eigen::Index>(layout.tokens.size());
  for (size_t layer = 0; layer < capture.attention.size(); ++layer) {
    const Matrix<T>& att = capture.attention[layer];
    for (int h = 0; h < n_heads; ++h) {
      auto& cell = profile.mass[layer][static_cast<size_t>(h)];
      for (size_t q = q_begin; q < q_end; ++q) {
        const auto row = att.row(static_cast<Eigen::Index>(h) * L +
                                 static_cast<Eigen::Index>(q));
        for (const CategorySpan& span : spans) {
          size_t hi = std::min(span.end, q + 1);  // causal: keys beyond q hold no mass
          if (span.begin >= hi) continue;
          double sum = 0.0;
          for (size_t k = span.begin; k < hi; ++k)
            sum += static_cast<double>(row(static_cast<Eigen::Index>(k)));
          cell[static_cast<size_t>(span.category)] +=
              sum / static_cast<double>(n_queries);
        }
      }
    }
  }
}

/// Figure-style URL attention profile: documents packed with their URL
/// prepended, attention mass aggregated to prefix/domain/suffix and wrapper
/// categories. Documents without a URL are skipped and counted.
template <typename T>
inline AttentionProfile url_attention_profile(MicroLM<T>& model,
                                              const std::vector<Document>& docs,
                                              const Tokenizer& tokenizer,
                                              size_t sample_size = 100) {
  ConditioningSpec spec;
  spec.prepend_kinds = {MetaKind::URL};
  spec.dropout = 0.0;
  AttentionProfile profile;
  profile.init(model.config().n_layers, model.config().n_heads);
  Capture<T> capture;
  for (const Document& doc : docs) {
    if (profile.documents >= sample_size) break;
    if (!doc.url) {
      ++profile.skipped;
      continue;
    }
    SingleDocLayout layout =
        pack_single(doc, spec, tokenizer, static_cast<size_t>(model.config().max_seq_len));
    std::vector<CategorySpan> spans = category_spans(layout, spec, doc, tokenizer);
    model.forward(layout.tokens, 1, static_cast<int>(layout.tokens.size()), &capture,
                  {.hidden_states = false, .attention = true});
    accumulate_attention(capture, spans, layout, model.config().n_heads,
                         layout.tokens.size(), profile);
    ++profile.documents;
  }
  if (profile.documents == 0) throw DataError("url attention profile: no usable documents");
  for (auto& layer : profile.mass)
    for (auto& head : layer)
      for (double& v : head) v /= static_cast<double>(profile.documents);
  return profile;
}

/// Entropy of the five URL-part categories (prefix, domain, suffix, boc,
/// eoc) after renormalization; 0 ln 0 counts as 0.
inline double attention_entropy(const std::array<double, 5>& masses) {
  double total = 0.0;
  for (double m : masses) {
    if (m < 0.0) throw NumericError("attention entropy: negative mass");
    total += m;
  }
  if (total <= 0.0) throw DataError("attention entropy: no metadata mass present");
  double entropy = 0.0;
  for (double m : masses) {
    if (m <= 0.0) continue;
    double p = m / total;
    entropy -= p * std::log(p);
  }
  return entropy;
}

inline std::array<double, 5> url_part_masses(const AttentionProfile& profile, int layer,
                                             int head) {
  const auto& cell = profile.mass[static_cast<size_t>(layer)][static_cast<size_t>(head)];
  return {cell[static_cast<size_t>(Category::URL_PREFIX)],
          cell[static_cast<size_t>(Category::URL_DOMAIN)],
          cell[static_cast<size_t>(Category::URL_SUFFIX)],
          cell[static_cast<size_t>(Category::BOC)],
          cell[static_cast<size_t>(Category::EOC)]};
}

// ---------------------------------------------------------------------------
// Meta-token attention profiles and cluster distances
// ---------------------------------------------------------------------------

enum class ClusterField { QUALITY, TOPIC, FORMAT };

inline ClusterField cluster_field_from_name(const std::string& s) {
  if (s == "quality") return ClusterField::QUALITY;
  if (s == "topic") return ClusterField::TOPIC;
  if (s == "format") return ClusterField::FORMAT;
  throw UsageError("unknown cluster field: " + s);
}

inline std::string cluster_key(const Document& doc, ClusterField field) {
  switch (field) {
    case ClusterField::QUALITY:
      if (doc.quality_level) return std::to_string(*doc.quality_level);
      if (doc.int_score) return std::to_string(*doc.int_score);
      throw DataError("document " + doc.id + ": no quality cluster");
    case ClusterField::TOPIC:
      if (doc.topic_coarse) return *doc.topic_coarse;
      throw DataError("document " + doc.id + ": no topic cluster");
    case ClusterField::FORMAT:
      if (doc.format_coarse) return *doc.format_coarse;
      throw DataError("document " + doc.id + ": no format cluster");
  }
  throw UsageError("bad cluster field");
}

struct MetaTokenProfile {
  // Per document: attention from the first 100 document-token queries to the
  // meta-token keys at one layer, averaged over heads, flattened row-major
  // to a 100*n_meta vector; rows beyond the document length stay zero.
  Matrix<float> vectors;
  std::vector<int> labels;
  std::vector<std::string> cluster_names;
  // mean mass per meta token within each cluster (averaged over queries,
  // then documents)
  std::vector<std::vector<double>> cluster_token_means;
  int layer = 0;
  size_t skipped = 0;
};

template <typename T>
inline MetaTokenProfile meta_token_profile(MicroLM<T>& model, const std::vector<Document>& docs,
                                           const Tokenizer& tokenizer, ClusterField field,
                                           int layer = -1, int meta_count = 5,
                                           size_t sample_size = SIZE_MAX) {
  if (static_cast<TokenId>(model.config().vocab_size) < tok::META1 + 5)
    throw DataError("model vocabulary lacks meta tokens");
  if (layer < 0) layer = model.config().n_layers - 1;  // last layer by default
  if (layer >= model.config().n_layers) throw UsageError("meta token profile: bad layer");

  ConditioningSpec spec;
  spec.prepend_kinds = {MetaKind::META_TOKENS};
  spec.meta_token_count = meta_count;
  spec.dropout = 0.0;

  MetaTokenProfile profile;
  profile.layer = layer;
  const size_t dim = 100 * static_cast<size_t>(meta_count);
  std::map<std::string, int> cluster_ids;
  std::vector<std::vector<float>> rows;
  std::vector<std::string> row_keys;

  Capture<T> capture;
  const int n_heads = model.config().n_heads;
  for (const Document& doc : docs) {
    if (rows.size() >= sample_size) break;
    std::string key = cluster_key(doc, field);
    SingleDocLayout layout =
        pack_single(doc, spec, tokenizer, static_cast<size_t>(model.config().max_seq_len));
    model.forward(layout.tokens, 1, static_cast<int>(layout.tokens.size()), &capture,
                  {.hidden_states = false, .attention = true});
    const Matrix<T>& att = capture.attention[static_cast<size_t>(layer)];
    const auto L = static_cast<Eigen::Index>(layout.tokens.size());
    std::vector<float> flat(dim, 0.0f);
    size_t n_queries = std::min<size_t>(100, layout.doc_end - layout.doc_begin);
    for (size_t q = 0; q < n_queries; ++q) {
      for (int m = 0; m < meta_count; ++m) {
        double mass = 0.0;
        for (int h = 0; h < n_heads; ++h)
          mass += static_cast<double>(
              att(static_cast<Eigen::Index>(h) * L +
                      static_cast<Eigen::Index>(layout.doc_begin + q),
                  static_cast<Eigen::Index>(layout.pre_meta_begin + static_cast<size_t>(m))));
        flat[q * static_cast<size_t>(meta_count) + static_cast<size_t>(m)] =
            static_cast<float>(mass / n_heads);
      }
    }
    cluster_ids.emplace(key, 0);
    rows.push_back(std::move(flat));
    row_keys.push_back(std::move(key));
  }
  if (rows.empty()) throw DataError("meta token profile: no usable documents");

  int next_id = 0;
  for (auto& [name, id] : cluster_ids) {
    id = next_id++;
    profile.cluster_names.push_back(name);
  }
  profile.vectors = Matrix<float>::Zero(static_cast<Eigen::Index>(rows.size()),
                                        static_cast<Eigen::Index>(dim));
  for (size_t i = 0; i < rows.size(); ++i) {
    for (size_t j = 0; j < dim; ++j)
      profile.vectors(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
    profile.labels.push_back(cluster_ids.at(row_keys[i]));
  }

  // per-cluster mean mass per meta token (mean over query rows, then docs)
  profile.cluster_token_means.assign(cluster_ids.size(),
                                     std::vector<double>(static_cast<size_t>(meta_count), 0.0));
  std::vector<size_t> cluster_counts(cluster_ids.size(), 0);
  for (size_t i = 0; i < rows.size(); ++i) {
    auto cluster = static_cast<size_t>(profile.labels[i]);
    ++cluster_counts[cluster];
    for (int m = 0; m < meta_count; ++m) {
      double mean_over_queries = 0.0;
      for (size_t q = 0; q < 100; ++q)
        mean_over_queries += rows[i][q * static_cast<size_t>(meta_count) + static_cast<size_t>(m)];
      profile.cluster_token_means[cluster][static_cast<size_t>(m)] += mean_over_queries / 100.0;
    }
  }
  for (size_t c = 0; c < cluster_ids.size(); ++c)
    for (double& v : profile.cluster_token_means[c])
      v /= static_cast<double>(std::max<size_t>(1, cluster_counts[c]));
  return profile;
}

// ---------------------------------------------------------------------------
// Euclidean cluster distances
// ---------------------------------------------------------------------------

struct ClusterDistanceReport {
  int n_clusters = 0;
  // matrix[i][j]: mean pairwise distance between members of clusters i and
  // j; diagonal is within-cluster, NaN for singleton clusters.
  std::vector<std::vector<double>> matrix;
  double intra = 0.0;  // mean over all unordered within-cluster pairs
  double inter = 0.0;  // mean over all unordered across-cluster pairs
};

inline Matrix<double> pairwise_distances(const Matrix<float>& vectors) {
  const Eigen::Index n = vectors.rows();
  Matrix<double> dist = Matrix<double>::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j) {
      double d = std::sqrt(
          (vectors.row(i).template cast<double>() - vectors.row(j).template cast<double>())
              .squaredNorm());
      dist(i, j) = d;
      dist(j, i) = d;
    }
  return dist;
}

inline ClusterDistanceReport cluster_distances_from_matrix(const Matrix<double>& dist,
                                                           const std::vector<int>& labels,
                                                           int n_clusters) {
  if (n_clusters < 2) throw DataError("cluster distances need at least two clusters");
  const auto n = static_cast<size_t>(dist.rows());
  if (labels.size() != n) throw UsageError("cluster distances: labels misaligned");
  ClusterDistanceReport report;
  report.n_clusters = n_clusters;
  std::vector<std::vector<double>> sums(static_cast<size_t>(n_clusters),
                                        std::vector<double>(static_cast<size_t>(n_clusters), 0.0));
  std::vector<std::vector<size_t>> counts(
      static_cast<size_t>(n_clusters), std::vector<size_t>(static_cast<size_t>(n_clusters), 0));
  double intra_sum = 0.0, inter_sum = 0.0;
  size_t intra_count = 0, inter_count = 0;
  for (size_t i = 0; i < n; ++i)
    for (size_t j = i + 1; j < n; ++j) {
      auto a = static_cast<size_t>(std::min(labels[i], labels[j]));
      auto b = static_cast<size_t>(std::max(labels[i], labels[j]));
      double d = dist(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      sums[a][b] += d;
      ++counts[a][b];
      if (a == b) {
        intra_sum += d;
        ++intra_count;
      } else {
        inter_sum += d;
        ++inter_count;
      }
    }
  if (inter_count == 0) throw DataError("cluster distances: no across-cluster pairs");
  report.matrix.assign(static_cast<size_t>(n_clusters),
                       std::vector<double>(static_cast<size_t>(n_clusters),
                                           std::numeric_limits<double>::quiet_NaN()));
  for (int a = 0; a < n_clusters; ++a)
    for (int b = a; b < n_clusters; ++b) {
      size_t c = counts[static_cast<size_t>(a)][static_cast<size_t>(b)];
      if (c == 0) continue;  // singleton diagonal stays NaN
      double mean = sums[static_cast<size_t>(a)][static_cast<size_t>(b)] /
                    static_cast<double>(c);
      report.matrix[static_cast<size_t>(a)][static_cast<size_t>(b)] = mean;
      report.matrix[static_cast<size_t>(b)][static_cast<size_t>(a)] = mean;
    }
  report.intra = intra_count ? intra_sum / static_cast<double>(intra_count)
                             : std::numeric_limits<double>::quiet_NaN();
  report.inter = inter_sum / static_cast<double>(inter_count);
  return report;
}

inline ClusterDistanceReport cluster_distances(const Matrix<float>& vectors,
                                               const std::vector<int>& labels) {
  int n_clusters = 0;
  for (int label : labels) n_clusters = std::max(n_clusters, label + 1);
  return cluster_distances_from_matrix(pairwise_distances(vectors), labels, n_clusters);
}

/// Permutation distribution of (inter - intra) under random label
/// reassignment; distances are label-independent so the matrix is reused.
inline std::vector<double> permutation_gaps(const Matrix<double>& dist,
                                            std::vector<int> labels, int n_clusters,
                                            size_t permutations, uint64_t seed) {
  std::vector<double> gaps;
  gaps.reserve(permutations);
  for (size_t p = 0; p < permutations; ++p) {
    Rng rng(derive_seed(seed, "attn/permutation", p));
    rng.shuffle(labels);
    ClusterDistanceReport report = cluster_distances_from_matrix(dist, labels, n_clusters);
    gaps.push_back(report.inter - report.intra);
  }
  return gaps;
}

}  // namespace metacond

#endif  // METACOND_ATTN_HPP
