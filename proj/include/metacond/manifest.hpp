#ifndef METACOND_MANIFEST_HPP
#define METACOND_MANIFEST_HPP

#include <filesystem>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "metacond/attn.hpp"
#include "metacond/common.hpp"
#include "metacond/corpus.hpp"
#include "metacond/pack.hpp"
#include "metacond/probe.hpp"
#include "metacond/shard.hpp"
#include "metacond/tokenizer.hpp"
#include "metacond/trainer.hpp"

namespace metacond {

// ---------------------------------------------------------------------------
// JSON bindings for the config types
// ---------------------------------------------------------------------------

inline nlohmann::json conditioning_to_json(const ConditioningSpec& spec) {
  nlohmann::json j;
  j["prepend"] = nlohmann::json::array();
  for (MetaKind k : spec.prepend_kinds) j["prepend"].push_back(meta_kind_name(k));
  j["append"] = nlohmann::json::array();
  for (MetaKind k : spec.append_kinds) j["append"].push_back(meta_kind_name(k));
  j["dropout"] = spec.dropout;
  j["wrapper_masked"] = spec.wrapper_masked;
  j["meta_token_count"] = spec.meta_token_count;
  return j;
}

inline ConditioningSpec conditioning_from_json(const nlohmann::json& j) {
  ConditioningSpec spec;
  for (const auto& k : j.value("prepend", nlohmann::json::array()))
    spec.prepend_kinds.push_back(meta_kind_from_name(k.get<std::string>()));
  for (const auto& k : j.value("append", nlohmann::json::array()))
    spec.append_kinds.push_back(meta_kind_from_name(k.get<std::string>()));
  spec.dropout = j.value("dropout", spec.dropout);
  spec.wrapper_masked = j.value("wrapper_masked", spec.wrapper_masked);
  spec.meta_token_count = j.value("meta_token_count", spec.meta_token_count);
  spec.validate();
  return spec;
}

inline nlohmann::json model_to_json(const ModelConfig& cfg) {
  return {{"n_layers", cfg.n_layers},     {"n_heads", cfg.n_heads},
          {"d_model", cfg.d_model},       {"d_ff", cfg.d_ff},
          {"vocab_size", cfg.vocab_size}, {"max_seq_len", cfg.max_seq_len},
          {"precision", cfg.precision == Precision::f64 ? "f64" : "f32"}};
}

inline ModelConfig model_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  cfg.n_layers = j.value("n_layers", cfg.n_layers);
  cfg.n_heads = j.value("n_heads", cfg.n_heads);
  cfg.d_model = j.value("d_model", cfg.d_model);
  cfg.d_ff = j.value("d_ff", cfg.d_ff);
  cfg.vocab_size = j.value("vocab_size", cfg.vocab_size);
  cfg.max_seq_len = j.value("max_seq_len", cfg.max_seq_len);
  cfg.precision = j.value("precision", "f32") == "f64" ? Precision::f64 : Precision::f32;
  return cfg;
}

inline nlohmann::json train_to_json(const TrainConfig& cfg) {
  return {{"max_lr", cfg.max_lr},
          {"weight_decay", cfg.weight_decay},
          {"warmup_fraction", cfg.warmup_fraction},
          {"total_steps", cfg.total_steps},
          {"batch_tokens", cfg.batch_tokens},
          {"seed", cfg.seed},
          {"grad_clip", cfg.grad_clip},
          {"checkpoint_every", cfg.checkpoint_every}};
}

inline TrainConfig train_from_json(const nlohmann::json& j) {
  TrainConfig cfg;
  cfg.max_lr = j.value("max_lr", cfg.max_lr);
  cfg.weight_decay = j.value("weight_decay", cfg.weight_decay);
  cfg.warmup_fraction = j.value("warmup_fraction", cfg.warmup_fraction);
  cfg.total_steps = j.value("total_steps", cfg.total_steps);
  cfg.batch_tokens = j.value("batch_tokens", cfg.batch_tokens);
  cfg.seed = j.value("seed", cfg.seed);
  cfg.grad_clip = j.value("grad_clip", cfg.grad_clip);
  cfg.checkpoint_every = j.value("checkpoint_every", cfg.checkpoint_every);
  return cfg;
}

inline nlohmann::json synth_to_json(const SynthConfig& cfg) {
  return {{"docs", cfg.n_docs},
          {"clusters", cfg.n_clusters},
          {"quality_levels", cfg.n_quality_levels},
          {"seed", cfg.seed},
          {"alphabet_size", cfg.alphabet_size},
          {"successors_per_word", cfg.successors_per_word},
          {"successor_share", cfg.successor_share},
          {"min_words", cfg.min_words},
          {"max_words", cfg.max_words},
          {"group_size", cfg.group_size},
          {"noise_low", cfg.noise_low},
          {"noise_high", cfg.noise_high}};
}

inline SynthConfig synth_from_json(const nlohmann::json& j) {
  SynthConfig cfg;
  cfg.n_docs = j.value("docs", cfg.n_docs);
  cfg.n_clusters = j.value("clusters", cfg.n_clusters);
  cfg.n_quality_levels = j.value("quality_levels", cfg.n_quality_levels);
  cfg.seed = j.value("seed", cfg.seed);
  cfg.alphabet_size = j.value("alphabet_size", cfg.alphabet_size);
  cfg.successors_per_word = j.value("successors_per_word", cfg.successors_per_word);
  cfg.successor_share = j.value("successor_share", cfg.successor_share);
  cfg.min_words = j.value("min_words", cfg.min_words);
  cfg.max_words = j.value("max_words", cfg.max_words);
  cfg.group_size = j.value("group_size", cfg.group_size);
  cfg.noise_low = j.value("noise_low", cfg.noise_low);
  cfg.noise_high = j.value("noise_high", cfg.noise_high);
  return cfg;
}

// ---------------------------------------------------------------------------
// Experiment manifest
// ---------------------------------------------------------------------------

struct Condition {
  std::string name;
  ConditioningSpec conditioning;
};

struct ExperimentManifest {
  std::string name;
  std::vector<uint64_t> seeds;
  std::optional<SynthConfig> synth;  // either synthetic parameters...
  std::string corpus_path;           // ...or an existing JSONL corpus
  size_t heldout_docs = 0;
  size_t vocab_size = 512;
  size_t seq_len = 128;
  ModelConfig model;
  TrainConfig train;
  std::vector<Condition> conditions;
  std::vector<std::string> analyses;  // "eval", "probe:<task>", "attn:url", "attn:meta:<field>"

  void validate() const {
    if (name.empty()) throw UsageError("manifest: name required");
    if (seeds.empty()) throw UsageError("manifest: at least one seed required");
    if (conditions.empty()) throw UsageError("manifest: at least one condition required");
    if (!synth && corpus_path.empty())
      throw UsageError("manifest: corpus source required (synth or path)");
    if (!corpus_path.empty() && !std::filesystem::exists(corpus_path))
      throw UsageError("manifest: corpus path does not exist: " + corpus_path);
    for (const auto& c : conditions) c.conditioning.validate();
  }

  static ExperimentManifest from_json(const nlohmann::json& j) {
    ExperimentManifest m;
    m.name = j.value("name", "");
    for (const auto& s : j.value("seeds", nlohmann::json::array()))
      m.seeds.push_back(s.get<uint64_t>());
    if (j.contains("corpus")) {
      const auto& c = j["corpus"];
      if (c.contains("synth")) m.synth = synth_from_json(c["synth"]);
      if (c.contains("path")) m.corpus_path = c["path"].get<std::string>();
    }
    m.heldout_docs = j.value("heldout_docs", m.heldout_docs);
    m.vocab_size = j.value("vocab_size", m.vocab_size);
    m.seq_len = j.value("seq_len", m.seq_len);
    if (j.contains("model")) m.model = model_from_json(j["model"]);
    if (j.contains("train")) m.train = train_from_json(j["train"]);
    for (const auto& c : j.value("conditions", nlohmann::json::array())) {
      Condition cond;
      cond.name = c.value("name", "");
      if (cond.name.empty()) throw UsageError("manifest: condition without a name");
      cond.conditioning = conditioning_from_json(c.value("conditioning", nlohmann::json::object()));
      m.conditions.push_back(std::move(cond));
    }
    for (const auto& a : j.value("analyses", nlohmann::json::array()))
      m.analyses.push_back(a.get<std::string>());
    m.validate();
    return m;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["name"] = name;
    j["seeds"] = seeds;
    if (synth) j["corpus"]["synth"] = synth_to_json(*synth);
    if (!corpus_path.empty()) j["corpus"]["path"] = corpus_path;
    j["heldout_docs"] = heldout_docs;
    j["vocab_size"] = vocab_size;
    j["seq_len"] = seq_len;
    j["model"] = model_to_json(model);
    j["train"] = train_to_json(train);
    j["conditions"] = nlohmann::json::array();
    for (const auto& c : conditions)
      j["conditions"].push_back(
          {{"name", c.name}, {"conditioning", conditioning_to_json(c.conditioning)}});
    j["analyses"] = analyses;
    return j;
  }
};

// ---------------------------------------------------------------------------
// Staged runner with content-hash caching
// ---------------------------------------------------------------------------

class StageRunner {
 public:
  StageRunner(std::filesystem::path dir, std::function<void(const std::string&)> log)
      : dir_(std::move(dir)), log_(std::move(log)) {
    std::filesystem::create_directories(dir_);
  }

  /// Executes `body` unless the stage's fingerprint matches the stored stamp
  /// and every declared output already exists.
  bool run_stage(const std::string& stage, const nlohmann::json& fingerprint_source,
                 const std::vector<std::filesystem::path>& outputs,
                 const std::function<void()>& body) {
    uint64_t fingerprint = fnv1a64(fingerprint_source.dump());
    std::filesystem::path stamp = dir_ / (stage + ".stamp");
    bool cached = std::filesystem::exists(stamp) &&
                  trim(read_file(stamp)) == std::to_string(fingerprint);
    for (const auto& out : outputs) cached = cached && std::filesystem::exists(out);
    if (cached) {
      log_("cached: " + stage);
      return false;
    }
    log_("running: " + stage);
    try {
      body();
    } catch (const std::exception& e) {
      throw DataError("stage " + stage + " failed: " + e.what());
    }
    write_file(stamp, std::to_string(fingerprint));
    return true;
  }

  const std::filesystem::path& dir() const { return dir_; }

 private:
  std::filesystem::path dir_;
  std::function<void(const std::string&)> log_;
};

namespace detail {

/// Tokenizer training corpus: all training document texts plus every
/// rendered metadata string any condition will attach. The union is shared
/// across conditions, so they all see one vocabulary.
inline std::vector<std::string> tokenizer_corpus(const std::vector<Document>& docs,
                                                 const ExperimentManifest& manifest) {
  std::vector<std::string> corpus;
  corpus.reserve(docs.size());
  for (const auto& doc : docs) corpus.push_back(doc.text);
  std::set<std::vector<MetaKind>> kind_lists;
  for (const auto& cond : manifest.conditions) {
    const auto& spec = cond.conditioning;
    if (spec.has_prepend() && !spec.uses_meta_tokens()) kind_lists.insert(spec.prepend_kinds);
    if (spec.has_append()) kind_lists.insert(spec.append_kinds);
  }
  for (const auto& kinds : kind_lists)
    for (const auto& doc : docs) corpus.push_back(render_metadata(doc, kinds).text);
  return corpus;
}

}  // namespace detail

struct RunPaths {
  std::filesystem::path run_dir;
  std::filesystem::path corpus;
  std::filesystem::path heldout;
  std::filesystem::path tokenizer;
  std::filesystem::path condition_dir(const std::string& cond) const {
    return run_dir / cond;
  }
};

/// Executes every stage of one manifest seed under out_root/<name>/<seed>/.
/// Stages already completed with identical inputs are skipped. Returns the
/// run directory layout.
inline RunPaths run_manifest_seed(const ExperimentManifest& manifest, uint64_t seed,
                                  const std::filesystem::path& out_root,
                                  const std::function<void(const std::string&)>& log) {
  manifest.validate();
  RunPaths paths;
  paths.run_dir = out_root / manifest.name / std::to_string(seed);
  StageRunner runner(paths.run_dir, log);
  paths.corpus = paths.run_dir / "corpus.jsonl";
  paths.heldout = paths.run_dir / "heldout.jsonl";
  paths.tokenizer = paths.run_dir / "tokenizer.json";

  // resolved-config snapshot: manifest plus the seed actually used
  nlohmann::json resolved = manifest.to_json();
  resolved["resolved_seed"] = seed;
  write_file(paths.run_dir / "resolved.json", resolved.dump(2));

  // corpus stage
  nlohmann::json corpus_fp;
  if (manifest.synth) {
    SynthConfig synth_cfg = *manifest.synth;
    synth_cfg.seed = seed;
    corpus_fp = {{"synth", synth_to_json(synth_cfg)}, {"heldout", manifest.heldout_docs}};
    runner.run_stage("corpus", corpus_fp, {paths.corpus, paths.heldout}, [&] {
      auto docs = synth_corpus(synth_cfg);
      size_t heldout = std::min(manifest.heldout_docs, docs.size() / 2);
      std::vector<Document> train_docs(docs.begin(), docs.end() - static_cast<std::ptrdiff_t>(heldout));
      std::vector<Document> heldout_docs(docs.end() - static_cast<std::ptrdiff_t>(heldout), docs.end());
      save_jsonl(paths.corpus, train_docs);
      save_jsonl(paths.heldout, heldout_docs);
    });
  } else {
    corpus_fp = {{"path", manifest.corpus_path},
                 {"hash", fnv1a64(read_file(manifest.corpus_path))},
                 {"heldout", manifest.heldout_docs}};
    runner.run_stage("corpus", corpus_fp, {paths.corpus, paths.heldout}, [&] {
      auto docs = load_jsonl(manifest.corpus_path).documents;
      size_t heldout = std::min(manifest.heldout_docs, docs.size() / 2);
      std::vector<Document> train_docs(docs.begin(), docs.end() - static_cast<std::ptrdiff_t>(heldout));
      std::vector<Document> heldout_docs(docs.end() - static_cast<std::ptrdiff_t>(heldout), docs.end());
      save_jsonl(paths.corpus, train_docs);
      save_jsonl(paths.heldout, heldout_docs);
    });
  }

  auto train_docs = load_jsonl(paths.corpus).documents;
  auto heldout_docs = load_jsonl(paths.heldout).documents;

  // tokenizer stage (shared across conditions)
  nlohmann::json tok_fp = {{"corpus", corpus_fp}, {"vocab", manifest.vocab_size}};
  runner.run_stage("tokenizer", tok_fp, {paths.tokenizer}, [&] {
    auto corpus = detail::tokenizer_corpus(train_docs, manifest);
    Tokenizer tokenizer = Tokenizer::train(corpus, manifest.vocab_size);
    tokenizer.save(paths.tokenizer);
  });
  Tokenizer tokenizer = Tokenizer::load(paths.tokenizer);

  for (const auto& cond : manifest.conditions) {
    auto cond_dir = paths.condition_dir(cond.name);
    std::filesystem::create_directories(cond_dir);
    nlohmann::json cond_json = conditioning_to_json(cond.conditioning);

    // pack stage
    auto shard_path = cond_dir / "train.mcpk";
    nlohmann::json pack_fp = {{"tokenizer", tok_fp},
                              {"conditioning", cond_json},
                              {"seq_len", manifest.seq_len}};
    runner.run_stage("pack/" + cond.name, pack_fp, {shard_path}, [&] {
      auto packed = build_sequences(train_docs, cond.conditioning, tokenizer,
                                    manifest.seq_len, derive_seed(seed, "pack"));
      write_shard(packed.sequences, static_cast<uint32_t>(tokenizer.vocab_size()),
                  static_cast<uint32_t>(manifest.seq_len), shard_path);
    });

    // train stage
    auto ckpt_path = cond_dir / "ckpt.mclm";
    auto opt_path = cond_dir / "ckpt.opt";
    auto metrics_path = cond_dir / "metrics.csv";
    ModelConfig model_cfg = manifest.model;
    model_cfg.vocab_size = static_cast<int>(tokenizer.vocab_size());
    TrainConfig train_cfg = manifest.train;
    train_cfg.seed = derive_seed(seed, "train");
    nlohmann::json train_fp = {{"pack", pack_fp},
                               {"model", model_to_json(model_cfg)},
                               {"train", train_to_json(train_cfg)},
                               {"init_seed", derive_seed(seed, "model")}};
    runner.run_stage("train/" + cond.name, train_fp, {ckpt_path, metrics_path}, [&] {
      ShardData shard = read_shard(shard_path);
      MicroLM<float> model(model_cfg, derive_seed(seed, "model"));
      check_shard_compatible(model, shard.header);
      Trainer<float> trainer(model, shard.sequences, train_cfg);
      CsvWriter csv(metrics_path, "step,backprop_loss,report_loss,grad_norm,lr");
      trainer.run(0, train_cfg.total_steps,
                  [&](const StepMetrics& m) {
                    csv.fields(m.step, m.backprop_loss, m.report_loss, m.grad_norm, m.lr);
                  },
                  [&](size_t) {
                    save_checkpoint(model, ckpt_path);
                    save_optimizer_state(trainer.optimizer(), train_cfg.total_steps, opt_path);
                  });
    });

    // analyses
    for (const std::string& analysis : manifest.analyses) {
      nlohmann::json analysis_fp = {{"train", train_fp}, {"analysis", analysis}};
      if (analysis == "eval") {
        auto eval_path = cond_dir / "eval.csv";
        runner.run_stage("eval/" + cond.name, analysis_fp, {eval_path}, [&] {
          MicroLM<float> model = load_checkpoint<float>(ckpt_path);
          CsvWriter csv(eval_path, "mode,mean_loss,median_doc_loss,perplexity,n_targets");
          ConditioningSpec eval_spec = cond.conditioning;
          eval_spec.dropout = 0.0;
          auto conditioned = eval_conditioned(model, heldout_docs, eval_spec, tokenizer);
          csv.fields("conditioned", conditioned.mean_loss, median(conditioned.per_doc_loss),
                     conditioned.perplexity, conditioned.n_targets);
          auto none = eval_report_loss(model, heldout_docs, tokenizer, PrefixMode::none);
          csv.fields("none", none.mean_loss, median(none.per_doc_loss), none.perplexity,
                     none.n_targets);
          auto empty_ctx =
              eval_report_loss(model, heldout_docs, tokenizer, PrefixMode::empty_context);
          csv.fields("empty_context", empty_ctx.mean_loss, median(empty_ctx.per_doc_loss),
                     empty_ctx.perplexity, empty_ctx.n_targets);
        });
      } else if (analysis.starts_with("probe:")) {
        ProbeTask task = probe_task_from_name(analysis.substr(6));
        auto probe_path = cond_dir / ("probe_" + analysis.substr(6) + ".csv");
        runner.run_stage("probe/" + cond.name + "/" + analysis.substr(6), analysis_fp,
                         {probe_path}, [&] {
                           MicroLM<float> model = load_checkpoint<float>(ckpt_path);
                           ConditioningSpec probe_spec = cond.conditioning;
                           probe_spec.dropout = 0.0;
                           auto reps = extract_representations(model, heldout_docs,
                                                               probe_spec, tokenizer);
                           LabelSet labels = probe_labels(heldout_docs, task);
                           CsvWriter csv(probe_path, "task,layer,train_acc,test_acc");
                           for (int l = 0; l < model.config().n_layers; ++l) {
                             auto report = train_probe(reps[static_cast<size_t>(l)],
                                                       labels.labels, labels.n_classes, task,
                                                       derive_seed(seed, "probe", l));
                             csv.fields(probe_task_name(task), l, report.train_acc,
                                        report.test_acc);
                           }
                         });
      } else if (analysis == "attn:url") {
        if (cond.conditioning.prepend_kinds != std::vector<MetaKind>{MetaKind::URL}) continue;
        auto mass_path = cond_dir / "attn_url_mass.csv";
        auto entropy_path = cond_dir / "attn_url_entropy.csv";
        runner.run_stage("attn_url/" + cond.name, analysis_fp, {mass_path, entropy_path}, [&] {
          MicroLM<float> model = load_checkpoint<float>(ckpt_path);
          auto profile = url_attention_profile(model, heldout_docs, tokenizer);
          CsvWriter mass_csv(mass_path, "layer,head,category,mass");
          CsvWriter entropy_csv(entropy_path, "layer,head,entropy");
          for (int l = 0; l < profile.n_layers; ++l)
            for (int h = 0; h < profile.n_heads; ++h) {
              for (int c = 0; c < kCategoryCount; ++c)
                mass_csv.fields(l, h, category_name(static_cast<Category>(c)),
                                profile.mass[static_cast<size_t>(l)][static_cast<size_t>(h)]
                                            [static_cast<size_t>(c)]);
              entropy_csv.fields(l, h, attention_entropy(url_part_masses(profile, l, h)));
            }
        });
      } else if (analysis.starts_with("attn:meta")) {
        if (!cond.conditioning.uses_meta_tokens()) continue;
        ClusterField field = ClusterField::QUALITY;
        if (analysis.size() > 10) field = cluster_field_from_name(analysis.substr(10));
        auto dist_path = cond_dir / "attn_meta_distance.csv";
        auto mean_path = cond_dir / "attn_meta_means.csv";
        runner.run_stage("attn_meta/" + cond.name, analysis_fp, {dist_path, mean_path}, [&] {
          MicroLM<float> model = load_checkpoint<float>(ckpt_path);
          auto profile = meta_token_profile(model, heldout_docs, tokenizer, field);
          auto report = cluster_distances(profile.vectors, profile.labels);
          CsvWriter dist_csv(dist_path, "cluster_i,cluster_j,mean_distance");
          for (int a = 0; a < report.n_clusters; ++a)
            for (int b = 0; b < report.n_clusters; ++b)
              dist_csv.fields(profile.cluster_names[static_cast<size_t>(a)],
                              profile.cluster_names[static_cast<size_t>(b)],
                              report.matrix[static_cast<size_t>(a)][static_cast<size_t>(b)]);
          CsvWriter mean_csv(mean_path, "cluster,meta_token,mean_mass");
          for (size_t c = 0; c < profile.cluster_token_means.size(); ++c)
            for (size_t m = 0; m < profile.cluster_token_means[c].size(); ++m)
              mean_csv.fields(profile.cluster_names[c], m + 1,
                              profile.cluster_token_means[c][m]);
        });
      } else {
        throw UsageError("manifest: unknown analysis '" + analysis + "'");
      }
    }
  }
  return paths;
}

inline std::vector<RunPaths> run_manifest(const ExperimentManifest& manifest,
                                          const std::filesystem::path& out_root,
                                          const std::function<void(const std::string&)>& log) {
  std::vector<RunPaths> out;
  for (uint64_t seed : manifest.seeds)
    out.push_back(run_manifest_seed(manifest, seed, out_root, log));
  return out;
}

}  // namespace metacond

#endif  // METACOND_MANIFEST_HPP
