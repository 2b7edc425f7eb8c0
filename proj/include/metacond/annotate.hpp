#ifndef METACOND_ANNOTATE_HPP
#define METACOND_ANNOTATE_HPP

#include <cstdlib>
#include <optional>
#include <string>
#include <vector>

#include <httplib.h>
// httplib drags in <resolv.h>, whose _res macro mangles Eigen headers
// included later in the same translation unit.
#ifdef _res
#undef _res
#endif
#include <nlohmann/json.hpp>

#include "metacond/common.hpp"
#include "metacond/corpus.hpp"

namespace metacond {

struct AnnotateConfig {
  std::string base_url = "http://localhost:8000";
  std::string path = "/v1/chat/completions";
  std::string model = "annotator";
  std::string reply_path = "choices/0/message/content";  // '/'-separated JSON path
  std::string credential_env;  // empty: no auth header
  int max_retries = 3;
  size_t snippet_chars = 2000;
  int timeout_seconds = 60;

  static AnnotateConfig from_json(const nlohmann::json& j) {
    AnnotateConfig cfg;
    cfg.base_url = j.value("base_url", cfg.base_url);
    cfg.path = j.value("path", cfg.path);
    cfg.model = j.value("model", cfg.model);
    cfg.reply_path = j.value("reply_path", cfg.reply_path);
    cfg.credential_env = j.value("credential_env", cfg.credential_env);
    cfg.max_retries = j.value("max_retries", cfg.max_retries);
    cfg.snippet_chars = j.value("snippet_chars", cfg.snippet_chars);
    cfg.timeout_seconds = j.value("timeout_seconds", cfg.timeout_seconds);
    return cfg;
  }
};

struct AnnotateTransportError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct AnnotateParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

inline const char* annotation_prompt_template() {
  return
      "Based on the given sampled snippet from a document (it could be a webpage, "
      "book, codebase, paper, or anything else), write two concise keyphrases that "
      "together capture the document's domain:\n"
      "\n"
      "TOPIC (less than 3 words) - the main subject matter.\n"
      "\n"
      "FORMAT (less than 3 words) - the document's genre or source type.\n"
      "\n"
      "Examples of valid outputs include:\n"
      "quantum physics, research paper\n"
      "\n"
      "healthy cooking, personal blog\n"
      "\n"
      "video games, forum thread\n"
      "\n"
      "*** Start of the snippet ***\n"
      "\n"
      "{snippet}\n"
      "\n"
      "*** End of the snippet ***\n"
      "\n"
      "Now output only the two keyphrases in the exact form:\n"
      "\n"
      "<TOPIC>, <FORMAT>";
}

inline const nlohmann::json& walk_json_path(const nlohmann::json& j, const std::string& path) {
  const nlohmann::json* node = &j;
  size_t pos = 0;
  while (pos < path.size()) {
    size_t next = path.find('/', pos);
    std::string key = path.substr(pos, next == std::string::npos ? next : next - pos);
    if (node->is_array()) {
      size_t index = 0;
      try {
        index = std::stoul(key);
      } catch (...) {
        throw AnnotateParseError("reply path step '" + key + "' is not an array index");
      }
      if (index >= node->size()) throw AnnotateParseError("reply path index out of range");
      node = &(*node)[index];
    } else if (node->is_object() && node->contains(key)) {
      node = &(*node)[key];
    } else {
      throw AnnotateParseError("reply path step '" + key + "' not found");
    }
    pos = next == std::string::npos ? path.size() : next + 1;
  }
  return *node;
}

}  // namespace detail

inline std::string annotation_prompt(const std::string& text, size_t snippet_chars) {
  std::string snippet = text.substr(0, snippet_chars);
  std::string prompt = detail::annotation_prompt_template();
  size_t at = prompt.find("{snippet}");
  prompt.replace(at, 9, snippet);
  return prompt;
}

/// Parses the annotator reply: final non-empty line, split on the last ", ",
/// both halves trimmed and lowercased.
inline std::pair<std::string, std::string> parse_annotation_reply(const std::string& reply) {
  std::string last_line;
  size_t start = 0;
  while (start <= reply.size()) {
    size_t end = reply.find('\n', start);
    std::string line = trim(reply.substr(start, end == std::string::npos
                                                    ? std::string::npos
                                                    : end - start));
    if (!line.empty()) last_line = line;
    if (end == std::string::npos) break;
    start = end + 1;
  }
  size_t comma = last_line.rfind(", ");
  if (last_line.empty() || comma == std::string::npos || comma == 0)
    throw AnnotateParseError("reply has no 'topic, format' line: " + last_line);
  std::string topic = to_lower(trim(last_line.substr(0, comma)));
  std::string format = to_lower(trim(last_line.substr(comma + 2)));
  if (topic.empty() || format.empty())
    throw AnnotateParseError("reply has empty topic or format: " + last_line);
  return {topic, format};
}

/// Speaks the chat-completions wire format to the configured endpoint.
class AnnotationClient {
 public:
  explicit AnnotationClient(AnnotateConfig cfg) : cfg_(std::move(cfg)) {
    if (!cfg_.credential_env.empty()) {
      const char* value = std::getenv(cfg_.credential_env.c_str());
      if (!value || !*value)
        throw UsageError("credential environment variable " + cfg_.credential_env +
                         " is not set");
      bearer_ = value;
    }
  }

  const AnnotateConfig& config() const { return cfg_; }

  std::string complete(const std::string& prompt) const {
    nlohmann::json body = {
        {"model", cfg_.model},
        {"messages", nlohmann::json::array({{{"role", "user"}, {"content", prompt}}})},
        {"temperature", 0},
    };
    httplib::Client client(cfg_.base_url);
    client.set_connection_timeout(cfg_.timeout_seconds);
    client.set_read_timeout(cfg_.timeout_seconds);
    httplib::Headers headers;
    if (!bearer_.empty()) headers.emplace("Authorization", "Bearer " + bearer_);

    std::string last_error;
    for (int attempt = 0; attempt <= cfg_.max_retries; ++attempt) {
      auto res = client.Post(cfg_.path, headers, body.dump(), "application/json");
      if (!res) {
        last_error = "transport error " + httplib::to_string(res.error());
        continue;
      }
      if (res->status >= 500) {
        last_error = "server status " + std::to_string(res->status);
        continue;
      }
      if (res->status != 200)
        throw AnnotateParseError("endpoint returned status " + std::to_string(res->status));
      nlohmann::json reply = nlohmann::json::parse(res->body, nullptr, false);
      if (reply.is_discarded()) throw AnnotateParseError("endpoint returned non-JSON body");
      const nlohmann::json& node = detail::walk_json_path(reply, cfg_.reply_path);
      if (!node.is_string()) throw AnnotateParseError("reply path does not hold a string");
      return node.get<std::string>();
    }
    throw AnnotateTransportError("annotation endpoint unreachable after " +
                                 std::to_string(cfg_.max_retries + 1) + " attempts: " +
                                 last_error);
  }

 private:
  AnnotateConfig cfg_;
  std::string bearer_;
};

/// Annotates one document; the document text is read, never modified.
inline std::pair<std::string, std::string> annotate_di_fine(const Document& doc,
                                                            const AnnotationClient& client) {
  if (trim(doc.text).empty()) throw DataError("document " + doc.id + ": empty text");
  std::string prompt = annotation_prompt(doc.text, client.config().snippet_chars);
  return parse_annotation_reply(client.complete(prompt));
}

struct AnnotateStats {
  size_t annotated = 0;
  size_t transport_failures = 0;
  size_t parse_failures = 0;
};

/// Fills fine_topic/fine_format in place; failed documents are flagged
/// unannotated (fields left absent) and counted rather than aborting the
/// batch.
inline AnnotateStats annotate_corpus(std::vector<Document>& docs,
                                     const AnnotationClient& client) {
  AnnotateStats stats;
  for (Document& doc : docs) {
    try {
      auto [topic, format] = annotate_di_fine(doc, client);
      doc.topic_fine = topic;
      doc.format_fine = format;
      ++stats.annotated;
    } catch (const AnnotateTransportError&) {
      ++stats.transport_failures;
    } catch (const AnnotateParseError&) {
      ++stats.parse_failures;
    }
  }
  return stats;
}

}  // namespace metacond

#endif  // METACOND_ANNOTATE_HPP
