#ifndef METACOND_CORPUS_HPP
#define METACOND_CORPUS_HPP

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "metacond/common.hpp"

namespace metacond {

/// One ingested document plus whatever metadata the source provides.
/// Synthetic corpora additionally carry the generating cluster and quality
/// level as ground truth for probing and attention analyses.
struct Document {
  std::string id;
  std::string text;
  std::optional<std::string> url;
  std::optional<double> score;       // raw quality regressor output
  std::optional<int> int_score;      // rounded score, {3,4,5}
  std::optional<std::string> topic_coarse;
  std::optional<std::string> format_coarse;
  std::optional<std::string> topic_fine;
  std::optional<std::string> format_fine;
  std::optional<std::string> author;
  std::optional<int> cluster;        // synthetic ground truth
  std::optional<int> quality_level;  // synthetic ground truth
  bool score_out_of_range = false;
};

/// Character-exact URL decomposition: prefix + domain + suffix == url.
struct UrlParts {
  std::string prefix;  // scheme plus "://", or empty
  std::string domain;  // host
  std::string suffix;  // everything after the host, possibly empty
};

enum class MetaKind {
  URL,
  URL_PREFIX,
  URL_DOMAIN,
  URL_SUFFIX,
  QS_COARSE,
  QS_FINE,
  DI_COARSE,
  DI_FINE,
  META_TOKENS,
  COMBINED,
};

inline const char* meta_kind_name(MetaKind k) {
  switch (k) {
    case MetaKind::URL: return "url";
    case MetaKind::URL_PREFIX: return "url_prefix";
    case MetaKind::URL_DOMAIN: return "url_domain";
    case MetaKind::URL_SUFFIX: return "url_suffix";
    case MetaKind::QS_COARSE: return "qs_coarse";
    case MetaKind::QS_FINE: return "qs_fine";
    case MetaKind::DI_COARSE: return "di_coarse";
    case MetaKind::DI_FINE: return "di_fine";
    case MetaKind::META_TOKENS: return "meta_tokens";
    case MetaKind::COMBINED: return "combined";
  }
  return "?";
}

inline MetaKind meta_kind_from_name(const std::string& s) {
  for (MetaKind k : {MetaKind::URL, MetaKind::URL_PREFIX, MetaKind::URL_DOMAIN,
                     MetaKind::URL_SUFFIX, MetaKind::QS_COARSE, MetaKind::QS_FINE,
                     MetaKind::DI_COARSE, MetaKind::DI_FINE, MetaKind::META_TOKENS,
                     MetaKind::COMBINED}) {
    if (s == meta_kind_name(k)) return k;
  }
  throw UsageError("unknown metadata kind: " + s);
}

struct MetadataString {
  MetaKind kind;
  std::string text;  // empty for META_TOKENS; those are injected at pack time
};

/// Splits any string into (prefix, domain, suffix). Never fails: a string
/// without "://" has an empty prefix and starts at the domain. The domain is
/// the maximal run up to the first '/', '?' or '#'.
inline UrlParts split_url(const std::string& url) {
  UrlParts parts;
  size_t host_begin = 0;
  size_t scheme_end = url.find("://");
  if (scheme_end != std::string::npos) {
    host_begin = scheme_end + 3;
    parts.prefix = url.substr(0, host_begin);
  }
  size_t host_end = url.find_first_of("/?#", host_begin);
  if (host_end == std::string::npos) host_end = url.size();
  parts.domain = url.substr(host_begin, host_end - host_begin);
  parts.suffix = url.substr(host_end);
  return parts;
}

namespace detail {

inline const std::string& require_field(const Document& doc, MetaKind kind,
                                        const std::optional<std::string>& field) {
  if (!field) {
    throw DataError("document " + doc.id + ": missing source field for metadata kind " +
                    meta_kind_name(kind));
  }
  return *field;
}

inline std::string render_one(const Document& doc, MetaKind kind) {
  switch (kind) {
    case MetaKind::URL:
      return require_field(doc, kind, doc.url);
    case MetaKind::URL_PREFIX:
      return split_url(require_field(doc, kind, doc.url)).prefix;
    case MetaKind::URL_DOMAIN:
      return split_url(require_field(doc, kind, doc.url)).domain;
    case MetaKind::URL_SUFFIX:
      return split_url(require_field(doc, kind, doc.url)).suffix;
    case MetaKind::QS_COARSE: {
      if (!doc.int_score)
        throw DataError("document " + doc.id + ": missing source field for metadata kind qs_coarse");
      return std::to_string(*doc.int_score);
    }
    case MetaKind::QS_FINE: {
      if (!doc.score)
        throw DataError("document " + doc.id + ": missing source field for metadata kind qs_fine");
      if (doc.score_out_of_range)
        throw DataError("document " + doc.id + ": score flagged out of range, cannot render qs_fine");
      return std::to_string(static_cast<long long>(std::floor(*doc.score * 10.0)));
    }
    case MetaKind::DI_COARSE:
      return require_field(doc, kind, doc.topic_coarse) + ", " +
             require_field(doc, kind, doc.format_coarse);
    case MetaKind::DI_FINE:
      return require_field(doc, kind, doc.topic_fine) + ", " +
             require_field(doc, kind, doc.format_fine);
    case MetaKind::META_TOKENS:
      return {};
    case MetaKind::COMBINED:
      throw UsageError("combined is a result kind, not a source kind");
  }
  throw UsageError("bad metadata kind");
}

}  // namespace detail

/// Renders the requested kinds into one metadata string. Multiple kinds are
/// joined by a single space in the given order and reported as COMBINED.
/// META_TOKENS has no text form and cannot be combined with text kinds.
inline MetadataString render_metadata(const Document& doc, const std::vector<MetaKind>& kinds) {
  if (kinds.empty()) throw UsageError("render_metadata: no kinds requested");
  if (kinds.size() == 1) return {kinds[0], detail::render_one(doc, kinds[0])};
  std::string joined;
  for (const MetaKind kind : kinds) {
    if (kind == MetaKind::META_TOKENS)
      throw UsageError("meta_tokens cannot be combined with text metadata kinds");
    if (!joined.empty()) joined += ' ';
    joined += detail::render_one(doc, kind);
  }
  return {MetaKind::COMBINED, joined};
}

// ---------------------------------------------------------------------------
// JSONL ingest / emit
// ---------------------------------------------------------------------------

struct LoadResult {
  std::vector<Document> documents;
  size_t skipped_empty = 0;
};

inline Document document_from_json(const nlohmann::json& j) {
  Document doc;
  if (j.contains("id")) {
    if (j["id"].is_string()) doc.id = j["id"].get<std::string>();
    else doc.id = j["id"].dump();
  }
  if (j.contains("text") && j["text"].is_string()) doc.text = j["text"].get<std::string>();
  auto opt_str = [&](const char* key) -> std::optional<std::string> {
    if (j.contains(key) && j[key].is_string()) return j[key].get<std::string>();
    return std::nullopt;
  };
  doc.url = opt_str("url");
  doc.topic_coarse = opt_str("topic");
  doc.format_coarse = opt_str("format");
  doc.topic_fine = opt_str("fine_topic");
  doc.format_fine = opt_str("fine_format");
  doc.author = opt_str("author");
  if (j.contains("score") && j["score"].is_number()) {
    doc.score = j["score"].get<double>();
    if (*doc.score < 0.0 || *doc.score > 5.0) doc.score_out_of_range = true;
  }
  if (j.contains("int_score") && j["int_score"].is_number_integer())
    doc.int_score = j["int_score"].get<int>();
  if (j.contains("cluster") && j["cluster"].is_number_integer())
    doc.cluster = j["cluster"].get<int>();
  if (j.contains("quality_level") && j["quality_level"].is_number_integer())
    doc.quality_level = j["quality_level"].get<int>();
  return doc;
}

inline nlohmann::json document_to_json(const Document& doc) {
  nlohmann::json j;
  j["id"] = doc.id;
  j["text"] = doc.text;
  if (doc.url) j["url"] = *doc.url;
  if (doc.score) j["score"] = *doc.score;
  if (doc.int_score) j["int_score"] = *doc.int_score;
  if (doc.topic_coarse) j["topic"] = *doc.topic_coarse;
  if (doc.format_coarse) j["format"] = *doc.format_coarse;
  if (doc.topic_fine) j["fine_topic"] = *doc.topic_fine;
  if (doc.format_fine) j["fine_format"] = *doc.format_fine;
  if (doc.author) j["author"] = *doc.author;
  if (doc.cluster) j["cluster"] = *doc.cluster;
  if (doc.quality_level) j["quality_level"] = *doc.quality_level;
  return j;
}

/// Loads a JSONL corpus. Unknown fields are ignored, empty-text documents are
/// skipped and counted, a malformed line aborts with its line number.
inline LoadResult load_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open jsonl file: " + path.string());
  LoadResult result;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
      throw DataError("malformed JSON at " + path.string() + ":" + std::to_string(line_no));
    }
    Document doc = document_from_json(j);
    if (trim(doc.text).empty()) {
      ++result.skipped_empty;
      continue;
    }
    if (doc.int_score && (*doc.int_score < 3 || *doc.int_score > 5)) {
      throw DataError("int_score out of {3,4,5} at " + path.string() + ":" +
                      std::to_string(line_no));
    }
    result.documents.push_back(std::move(doc));
  }
  return result;
}

inline void save_jsonl(const std::filesystem::path& path, const std::vector<Document>& docs) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write jsonl file: " + path.string());
  for (const Document& doc : docs) out << document_to_json(doc).dump() << "\n";
}

// ---------------------------------------------------------------------------
// Synthetic clustered corpora
// ---------------------------------------------------------------------------
//
// Each cluster is a first-order Markov chain over a shared word alphabet. All
// clusters share the same successor graph; what distinguishes them is how the
// transition probability profile is assigned to the successors. Knowing the
// cluster therefore tells a model which of several near-identical chains it
// is reading, while inferring the cluster from text alone requires
// accumulating evidence over many transitions. Quality is realized as a
// uniform-substitution noise rate: higher quality means cleaner chain
// statistics, which keeps quality recoverable from the surface text.

struct SynthConfig {
  size_t n_docs = 1000;
  int n_clusters = 4;
  int n_quality_levels = 3;
  uint64_t seed = 0;
  int alphabet_size = 64;
  int successors_per_word = 4;
  double successor_share = 0.62;  // probability mass ratio of the profile
  int min_words = 40;
  int max_words = 110;
  int group_size = 2;  // clusters per coarse group label
  double noise_low = 0.16;   // substitution rate at the lowest quality level
  double noise_high = 0.01;  // at the highest
};

namespace detail {

inline std::string synth_word(int index) {
  // Two-letter stem plus vowel tail, pronounceable and distinct.
  static const char* consonants = "bdfgklmnprstvz";
  static const char* vowels = "aeiou";
  std::string word;
  word += consonants[index % 14];
  word += vowels[(index / 14) % 5];
  word += consonants[(index / 70) % 14];
  if (index >= 70 * 14) word += vowels[(index / (70 * 14)) % 5];
  return word;
}

}  // namespace detail

inline std::vector<Document> synth_corpus(const SynthConfig& cfg) {
  if (cfg.n_clusters < 2) throw UsageError("synth_corpus: n_clusters must be >= 2");
  if (cfg.n_quality_levels < 1 || cfg.n_quality_levels > 3)
    throw UsageError("synth_corpus: n_quality_levels must be in {1,2,3}");
  if (cfg.alphabet_size < cfg.successors_per_word + 1)
    throw UsageError("synth_corpus: alphabet too small");

  const int W = cfg.alphabet_size;
  const int S = cfg.successors_per_word;

  std::vector<std::string> words(W);
  for (int w = 0; w < W; ++w) words[w] = detail::synth_word(w);

  // Shared successor graph: every word has the same S candidate successors in
  // every cluster.
  Rng graph_rng(derive_seed(cfg.seed, "synth/graph"));
  std::vector<std::vector<int>> successors(W);
  for (int w = 0; w < W; ++w) {
    std::vector<int> pool(W);
    for (int i = 0; i < W; ++i) pool[i] = i;
    graph_rng.shuffle(pool);
    successors[w].assign(pool.begin(), pool.begin() + S);
  }

  // Per-cluster transition profiles: a fixed sharp probability profile whose
  // assignment to the successor slots is a cluster-specific permutation.
  std::vector<double> profile(S);
  {
    double mass = 1.0, share = cfg.successor_share;
    for (int i = 0; i < S - 1; ++i) {
      profile[i] = mass * share;
      mass -= profile[i];
    }
    profile[S - 1] = mass;
  }
  std::vector<std::vector<std::vector<double>>> cum(cfg.n_clusters);
  for (int k = 0; k < cfg.n_clusters; ++k) {
    Rng perm_rng(derive_seed(cfg.seed, "synth/profile", static_cast<uint64_t>(k)));
    cum[k].resize(W);
    for (int w = 0; w < W; ++w) {
      std::vector<int> order(S);
      for (int i = 0; i < S; ++i) order[i] = i;
      perm_rng.shuffle(order);
      std::vector<double> p(S);
      for (int i = 0; i < S; ++i) p[order[i]] = profile[i];
      cum[k][w].resize(S);
      double acc = 0.0;
      for (int i = 0; i < S; ++i) {
        acc += p[i];
        cum[k][w][i] = acc;
      }
      cum[k][w][S - 1] = 1.0;
    }
  }

  // Noise rate per quality level; level 0 is noisiest.
  auto noise_rate = [&](int level) {
    if (cfg.n_quality_levels == 1) return 0.5 * (cfg.noise_low + cfg.noise_high);
    return cfg.noise_low + (cfg.noise_high - cfg.noise_low) * static_cast<double>(level) /
                               static_cast<double>(cfg.n_quality_levels - 1);
  };

  std::vector<Document> docs;
  docs.reserve(cfg.n_docs);
  for (size_t i = 0; i < cfg.n_docs; ++i) {
    Rng rng(derive_seed(cfg.seed, "synth/doc", static_cast<uint64_t>(i)));
    Document doc;
    doc.id = std::to_string(i);
    int k = static_cast<int>(rng.next_below(static_cast<uint64_t>(cfg.n_clusters)));
    int level = static_cast<int>(rng.next_below(static_cast<uint64_t>(cfg.n_quality_levels)));
    double eps = noise_rate(level);

    int len = cfg.min_words +
              static_cast<int>(rng.next_below(static_cast<uint64_t>(cfg.max_words - cfg.min_words + 1)));
    int cur = static_cast<int>(rng.next_below(static_cast<uint64_t>(W)));
    std::string text = words[cur];
    for (int t = 1; t < len; ++t) {
      double u = rng.next_double();
      const std::vector<double>& c = cum[k][cur];
      int next = successors[cur][0];
      for (int s = 0; s < S; ++s) {
        if (u < c[s]) {
          next = successors[cur][s];
          break;
        }
      }
      cur = next;
      int emitted = cur;
      if (rng.next_double() < eps)
        emitted = static_cast<int>(rng.next_below(static_cast<uint64_t>(W)));
      text += ' ';
      text += words[emitted];
    }

    doc.text = std::move(text);
    doc.cluster = k;
    doc.quality_level = level;
    doc.url = "https://c" + std::to_string(k) + ".example.org/doc/" + doc.id;
    doc.score = 3.0 + 0.7 * level + rng.next_double() * 0.6;
    doc.int_score = 3 + level;
    doc.topic_coarse = "cluster-" + std::to_string(k);
    doc.format_coarse = "synthetic";
    doc.topic_fine = "group-" + std::to_string(k / std::max(1, cfg.group_size));
    doc.format_fine = "synthetic";
    doc.author = "writer-" + std::to_string(k);
    docs.push_back(std::move(doc));
  }
  return docs;
}

}  // namespace metacond

#endif  // METACOND_CORPUS_HPP
