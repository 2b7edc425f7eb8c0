// Command-line entry point wiring the pipeline:
//   synth/annotate -> pack -> train -> eval/probe/attn, plus manifest mode.
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "metacond/annotate.hpp"
#include "metacond/attn.hpp"
#include "metacond/corpus.hpp"
#include "metacond/manifest.hpp"
#include "metacond/pack.hpp"
#include "metacond/probe.hpp"
#include "metacond/shard.hpp"
#include "metacond/tokenizer.hpp"
#include "metacond/trainer.hpp"

namespace fs = std::filesystem;
using namespace metacond;

namespace {

nlohmann::json load_json(const std::string& path) {
  nlohmann::json j = nlohmann::json::parse(read_file(path), nullptr, false);
  if (j.is_discarded()) throw DataError("not valid JSON: " + path);
  return j;
}

ConditioningSpec load_conditioning(const std::string& path) {
  if (path.empty()) return {};
  return conditioning_from_json(load_json(path));
}

void add_synth(CLI::App& app) {
  auto* cmd = app.add_subcommand("synth", "generate a synthetic clustered corpus");
  auto cfg = std::make_shared<SynthConfig>();
  auto out = std::make_shared<std::string>();
  cmd->add_option("--docs", cfg->n_docs, "number of documents")->required();
  cmd->add_option("--clusters", cfg->n_clusters, "number of latent clusters")->required();
  cmd->add_option("--quality-levels", cfg->n_quality_levels, "quality levels (1-3)");
  cmd->add_option("--seed", cfg->seed, "generation seed")->required();
  cmd->add_option("--alphabet", cfg->alphabet_size, "word alphabet size");
  cmd->add_option("--successors", cfg->successors_per_word, "successors per word");
  cmd->add_option("--min-words", cfg->min_words, "minimum words per document");
  cmd->add_option("--max-words", cfg->max_words, "maximum words per document");
  cmd->add_option("--group-size", cfg->group_size, "clusters per coarse group");
  cmd->add_option("--out", *out, "output JSONL path")->required();
  cmd->callback([cfg, out] {
    auto docs = synth_corpus(*cfg);
    save_jsonl(*out, docs);
    std::cout << "wrote " << docs.size() << " documents to " << *out << "\n";
  });
}

void add_annotate(CLI::App& app) {
  auto* cmd = app.add_subcommand("annotate", "fill fine_topic/fine_format via an LLM endpoint");
  auto input = std::make_shared<std::string>();
  auto output = std::make_shared<std::string>();
  auto config = std::make_shared<std::string>();
  cmd->add_option("--input", *input, "input JSONL")->required();
  cmd->add_option("--out", *output, "output JSONL")->required();
  cmd->add_option("--config", *config, "endpoint config JSON")->required();
  cmd->callback([input, output, config] {
    AnnotateConfig cfg = AnnotateConfig::from_json(load_json(*config));
    AnnotationClient client(cfg);
    LoadResult loaded = load_jsonl(*input);
    AnnotateStats stats = annotate_corpus(loaded.documents, client);
    save_jsonl(*output, loaded.documents);
    std::cout << "annotated " << stats.annotated << ", transport failures "
              << stats.transport_failures << ", parse failures " << stats.parse_failures
              << "\n";
  });
}

void add_pack(CLI::App& app) {
  auto* cmd = app.add_subcommand("pack", "tokenize and pack documents into training shards");
  auto input = std::make_shared<std::string>();
  auto spec_path = std::make_shared<std::string>();
  auto tokenizer_path = std::make_shared<std::string>();
  auto out_dir = std::make_shared<std::string>();
  auto seq_len = std::make_shared<size_t>(128);
  auto seed = std::make_shared<uint64_t>(0);
  auto vocab = std::make_shared<size_t>(512);
  cmd->add_option("--input", *input, "input JSONL")->required();
  cmd->add_option("--spec", *spec_path, "conditioning spec JSON");
  cmd->add_option("--seqlen", *seq_len, "sequence length")->required();
  cmd->add_option("--seed", *seed, "dropout seed")->required();
  cmd->add_option("--out", *out_dir, "output directory")->required();
  cmd->add_option("--tokenizer", *tokenizer_path, "existing tokenizer JSON (else trained)");
  cmd->add_option("--vocab-size", *vocab, "vocabulary size when training a tokenizer");
  cmd->callback([=] {
    LoadResult loaded = load_jsonl(*input);
    ConditioningSpec spec = load_conditioning(*spec_path);
    Tokenizer tokenizer;
    if (!tokenizer_path->empty()) {
      tokenizer = Tokenizer::load(*tokenizer_path);
    } else {
      std::vector<std::string> corpus;
      for (const auto& d : loaded.documents) corpus.push_back(d.text);
      if (spec.has_prepend() && !spec.uses_meta_tokens())
        for (const auto& d : loaded.documents)
          corpus.push_back(render_metadata(d, spec.prepend_kinds).text);
      if (spec.has_append())
        for (const auto& d : loaded.documents)
          corpus.push_back(render_metadata(d, spec.append_kinds).text);
      tokenizer = Tokenizer::train(corpus, *vocab);
      tokenizer.save(fs::path(*out_dir) / "tokenizer.json");
    }
    PackResult packed = build_sequences(loaded.documents, spec, tokenizer, *seq_len, *seed);
    fs::create_directories(*out_dir);
    write_shard(packed.sequences, static_cast<uint32_t>(tokenizer.vocab_size()),
                static_cast<uint32_t>(*seq_len), fs::path(*out_dir) / "train.mcpk");
    std::cout << "packed " << packed.sequences.size() << " sequences ("
              << packed.skipped_empty << " empty documents skipped) into " << *out_dir
              << "\n";
  });
}

void add_train(CLI::App& app) {
  auto* cmd = app.add_subcommand("train", "train a model on packed shards");
  auto shards = std::make_shared<std::string>();
  auto out_dir = std::make_shared<std::string>();
  auto model_json = std::make_shared<std::string>();
  auto train_json = std::make_shared<std::string>();
  auto init_seed = std::make_shared<uint64_t>(0);
  auto resume = std::make_shared<bool>(false);
  // flag overrides win over the config file
  auto steps = std::make_shared<int64_t>(-1);
  auto batch_tokens = std::make_shared<int64_t>(-1);
  auto max_lr = std::make_shared<double>(-1.0);
  auto seed = std::make_shared<int64_t>(-1);
  cmd->add_option("--shards", *shards, "shard file")->required();
  cmd->add_option("--out", *out_dir, "output directory")->required();
  cmd->add_option("--model", *model_json, "model config JSON");
  cmd->add_option("--config", *train_json, "train config JSON");
  cmd->add_option("--init-seed", *init_seed, "parameter init seed");
  cmd->add_option("--steps", *steps, "override: total steps");
  cmd->add_option("--batch-tokens", *batch_tokens, "override: tokens per step");
  cmd->add_option("--max-lr", *max_lr, "override: peak learning rate");
  cmd->add_option("--seed", *seed, "override: data order seed");
  cmd->add_flag("--resume", *resume, "resume from the checkpoint in --out");
  cmd->callback([=] {
    ShardData shard = read_shard(*shards);
    ModelConfig mcfg;
    if (!model_json->empty()) mcfg = model_from_json(load_json(*model_json));
    mcfg.vocab_size = static_cast<int>(shard.header.vocab_size);
    TrainConfig tcfg;
    if (!train_json->empty()) tcfg = train_from_json(load_json(*train_json));
    if (*steps >= 0) tcfg.total_steps = static_cast<size_t>(*steps);
    if (*batch_tokens >= 0) tcfg.batch_tokens = static_cast<size_t>(*batch_tokens);
    if (*max_lr >= 0) tcfg.max_lr = *max_lr;
    if (*seed >= 0) tcfg.seed = static_cast<uint64_t>(*seed);

    fs::path dir(*out_dir);
    fs::create_directories(dir);
    auto ckpt = dir / "ckpt.mclm";
    auto opt_state = dir / "ckpt.opt";
    auto metrics = dir / "metrics.csv";

    MicroLM<float> model = *resume ? load_checkpoint<float>(ckpt)
                                   : MicroLM<float>(mcfg, *init_seed);
    check_shard_compatible(model, shard.header);
    Trainer<float> trainer(model, shard.sequences, tcfg);
    size_t start = 0;
    if (*resume) start = load_optimizer_state(trainer.optimizer(), opt_state);

    std::ofstream csv;
    if (*resume && fs::exists(metrics)) {
      csv.open(metrics, std::ios::app);
    } else {
      csv.open(metrics, std::ios::trunc);
      csv << "step,backprop_loss,report_loss,grad_norm,lr\n";
    }
    trainer.run(
        start, tcfg.total_steps,
        [&](const StepMetrics& m) {
          csv << m.step << "," << m.backprop_loss << "," << m.report_loss << ","
              << m.grad_norm << "," << m.lr << "\n";
          if (m.step % 100 == 0)
            std::cout << "step " << m.step << " loss " << m.report_loss << " grad "
                      << m.grad_norm << "\n";
        },
        [&](size_t step) {
          save_checkpoint(model, ckpt);
          save_optimizer_state(trainer.optimizer(), step, opt_state);
        });
    std::cout << "trained to step " << tcfg.total_steps << ", checkpoint at " << ckpt << "\n";
  });
}

void add_eval(CLI::App& app) {
  auto* cmd = app.add_subcommand("eval", "held-out report loss / perplexity");
  auto ckpt = std::make_shared<std::string>();
  auto docs_path = std::make_shared<std::string>();
  auto tok_path = std::make_shared<std::string>();
  auto prefix = std::make_shared<std::string>("none");
  auto cond_path = std::make_shared<std::string>();
  auto out = std::make_shared<std::string>();
  cmd->add_option("--checkpoint", *ckpt, "model checkpoint")->required();
  cmd->add_option("--docs", *docs_path, "documents JSONL")->required();
  cmd->add_option("--tokenizer", *tok_path, "tokenizer JSON")->required();
  cmd->add_option("--prefix", *prefix, "none | empty_context");
  cmd->add_option("--cond", *cond_path, "evaluate with this conditioning attached");
  cmd->add_option("--out", *out, "output CSV")->required();
  cmd->callback([=] {
    MicroLM<float> model = load_checkpoint<float>(*ckpt);
    Tokenizer tokenizer = Tokenizer::load(*tok_path);
    auto docs = load_jsonl(*docs_path).documents;
    CsvWriter csv(*out, "mode,mean_loss,median_doc_loss,perplexity,n_targets");
    if (!cond_path->empty()) {
      ConditioningSpec spec = load_conditioning(*cond_path);
      spec.dropout = 0.0;
      auto r = eval_conditioned(model, docs, spec, tokenizer);
      csv.fields("conditioned", r.mean_loss, median(r.per_doc_loss), r.perplexity,
                 r.n_targets);
      std::cout << "conditioned loss " << r.mean_loss << " ppl " << r.perplexity << "\n";
    }
    auto r = eval_report_loss(model, docs, tokenizer, prefix_mode_from_name(*prefix));
    csv.fields(*prefix, r.mean_loss, median(r.per_doc_loss), r.perplexity, r.n_targets);
    std::cout << *prefix << " loss " << r.mean_loss << " ppl " << r.perplexity << "\n";
  });
}

void add_probe(CLI::App& app) {
  auto* cmd = app.add_subcommand("probe", "layer-wise MLP probes on document representations");
  auto ckpt = std::make_shared<std::string>();
  auto docs_path = std::make_shared<std::string>();
  auto tok_path = std::make_shared<std::string>();
  auto task_name = std::make_shared<std::string>();
  auto cond_path = std::make_shared<std::string>();
  auto out = std::make_shared<std::string>();
  auto layer = std::make_shared<int>(-1);
  auto seed = std::make_shared<uint64_t>(0);
  auto cache_path = std::make_shared<std::string>();
  cmd->add_option("--checkpoint", *ckpt, "model checkpoint")->required();
  cmd->add_option("--docs", *docs_path, "documents JSONL")->required();
  cmd->add_option("--tokenizer", *tok_path, "tokenizer JSON")->required();
  cmd->add_option("--task", *task_name, "quality | topic | authorship")->required();
  cmd->add_option("--cond", *cond_path, "conditioning attached during extraction");
  cmd->add_option("--layer", *layer, "probe one layer (-1 = all)");
  cmd->add_option("--seed", *seed, "probe seed");
  cmd->add_option("--cache", *cache_path, "extraction cache file");
  cmd->add_option("--out", *out, "output CSV")->required();
  cmd->callback([=] {
    MicroLM<float> model = load_checkpoint<float>(*ckpt);
    Tokenizer tokenizer = Tokenizer::load(*tok_path);
    auto docs = load_jsonl(*docs_path).documents;
    ProbeTask task = probe_task_from_name(*task_name);
    ConditioningSpec spec = load_conditioning(*cond_path);
    spec.dropout = 0.0;
    LabelSet labels = probe_labels(docs, task);

    std::vector<Matrix<float>> reps;
    if (!cache_path->empty()) {
      uint64_t ckpt_hash = checkpoint_hash(*ckpt);
      ExtractionCache cache(*cache_path);
      bool all_hit = true;
      for (const auto& doc : docs)
        for (int l = 0; l < model.config().n_layers && all_hit; ++l)
          all_hit = cache.get(ckpt_hash, l, doc.id).has_value();
      if (!all_hit) {
        reps = extract_representations(model, docs, spec, tokenizer);
        for (size_t i = 0; i < docs.size(); ++i)
          for (int l = 0; l < model.config().n_layers; ++l) {
            const auto row = reps[static_cast<size_t>(l)].row(static_cast<Eigen::Index>(i));
            cache.put(ckpt_hash, l, docs[i].id,
                      std::vector<float>(row.data(), row.data() + row.cols()));
          }
        cache.flush();
      } else {
        reps.assign(static_cast<size_t>(model.config().n_layers),
                    Matrix<float>::Zero(static_cast<Eigen::Index>(docs.size()),
                                        model.config().d_model));
        for (size_t i = 0; i < docs.size(); ++i)
          for (int l = 0; l < model.config().n_layers; ++l) {
            auto vec = *cache.get(ckpt_hash, l, docs[i].id);
            for (int d = 0; d < model.config().d_model; ++d)
              reps[static_cast<size_t>(l)](static_cast<Eigen::Index>(i), d) =
                  vec[static_cast<size_t>(d)];
          }
      }
    } else {
      reps = extract_representations(model, docs, spec, tokenizer);
    }

    CsvWriter csv(*out, "task,layer,train_acc,test_acc");
    for (int l = 0; l < model.config().n_layers; ++l) {
      if (*layer >= 0 && l != *layer) continue;
      auto report = train_probe(reps[static_cast<size_t>(l)], labels.labels, labels.n_classes,
                                task, derive_seed(*seed, "probe", static_cast<uint64_t>(l)));
      csv.fields(*task_name, l, report.train_acc, report.test_acc);
      std::cout << *task_name << " layer " << l << " train " << report.train_acc << " test "
                << report.test_acc << "\n";
    }
  });
}

void add_attn(CLI::App& app) {
  auto* cmd = app.add_subcommand("attn", "attention-pattern analytics");
  auto ckpt = std::make_shared<std::string>();
  auto docs_path = std::make_shared<std::string>();
  auto tok_path = std::make_shared<std::string>();
  auto mode = std::make_shared<std::string>("url");
  auto out_dir = std::make_shared<std::string>();
  auto layer = std::make_shared<int>(-1);
  auto sample = std::make_shared<size_t>(100);
  auto field_name = std::make_shared<std::string>("quality");
  auto permutations = std::make_shared<size_t>(0);
  cmd->add_option("--checkpoint", *ckpt, "model checkpoint")->required();
  cmd->add_option("--docs", *docs_path, "documents JSONL")->required();
  cmd->add_option("--tokenizer", *tok_path, "tokenizer JSON")->required();
  cmd->add_option("--mode", *mode, "url | meta");
  cmd->add_option("--layer", *layer, "analysis layer (-1 = last for meta)");
  cmd->add_option("--sample", *sample, "documents to sample");
  cmd->add_option("--cluster-field", *field_name, "quality | topic | format");
  cmd->add_option("--permutations", *permutations, "label permutations for the null band");
  cmd->add_option("--out-dir", *out_dir, "output directory")->required();
  cmd->callback([=] {
    MicroLM<float> model = load_checkpoint<float>(*ckpt);
    Tokenizer tokenizer = Tokenizer::load(*tok_path);
    auto docs = load_jsonl(*docs_path).documents;
    fs::path dir(*out_dir);
    fs::create_directories(dir);
    if (*mode == "url") {
      auto profile = url_attention_profile(model, docs, tokenizer, *sample);
      CsvWriter mass_csv(dir / "attn_url_mass.csv", "layer,head,category,mass");
      CsvWriter entropy_csv(dir / "attn_url_entropy.csv", "layer,head,entropy");
      CsvWriter layer_csv(dir / "attn_url_layer_mean.csv", "layer,category,mass");
      for (int l = 0; l < profile.n_layers; ++l) {
        for (int h = 0; h < profile.n_heads; ++h) {
          for (int c = 0; c < kCategoryCount; ++c)
            mass_csv.fields(l, h, category_name(static_cast<Category>(c)),
                            profile.mass[static_cast<size_t>(l)][static_cast<size_t>(h)]
                                        [static_cast<size_t>(c)]);
          entropy_csv.fields(l, h, attention_entropy(url_part_masses(profile, l, h)));
        }
        for (int c = 0; c < kCategoryCount; ++c)
          layer_csv.fields(l, category_name(static_cast<Category>(c)),
                           profile.layer_mean(l, static_cast<Category>(c)));
      }
      std::cout << "url attention profile over " << profile.documents << " documents ("
                << profile.skipped << " skipped)\n";
    } else if (*mode == "meta") {
      ClusterField field = cluster_field_from_name(*field_name);
      auto profile = meta_token_profile(model, docs, tokenizer, field, *layer, 5, *sample);
      auto report = cluster_distances(profile.vectors, profile.labels);
      CsvWriter dist_csv(dir / "attn_meta_distance.csv", "cluster_i,cluster_j,mean_distance");
      for (int a = 0; a < report.n_clusters; ++a)
        for (int b = 0; b < report.n_clusters; ++b)
          dist_csv.fields(profile.cluster_names[static_cast<size_t>(a)],
                          profile.cluster_names[static_cast<size_t>(b)],
                          report.matrix[static_cast<size_t>(a)][static_cast<size_t>(b)]);
      CsvWriter mean_csv(dir / "attn_meta_means.csv", "cluster,meta_token,mean_mass");
      for (size_t c = 0; c < profile.cluster_token_means.size(); ++c)
        for (size_t m = 0; m < profile.cluster_token_means[c].size(); ++m)
          mean_csv.fields(profile.cluster_names[c], m + 1, profile.cluster_token_means[c][m]);
      std::cout << "meta-token attention: intra " << report.intra << " inter " << report.inter
                << "\n";
      if (*permutations > 0) {
        auto dist = pairwise_distances(profile.vectors);
        auto gaps = permutation_gaps(dist, profile.labels, report.n_clusters, *permutations, 1);
        std::sort(gaps.begin(), gaps.end());
        CsvWriter gap_csv(dir / "attn_meta_null_gaps.csv", "quantile,gap");
        for (double q : {0.025, 0.5, 0.975})
          gap_csv.fields(q, gaps[static_cast<size_t>(q * (gaps.size() - 1))]);
        std::cout << "true gap " << report.inter - report.intra << ", null 97.5% "
                  << gaps[static_cast<size_t>(0.975 * (gaps.size() - 1))] << "\n";
      }
    } else {
      throw UsageError("unknown attn mode: " + *mode);
    }
  });
}

void add_run(CLI::App& app) {
  auto* cmd = app.add_subcommand("run", "execute an experiment manifest");
  auto manifest_path = std::make_shared<std::string>();
  auto out_root = std::make_shared<std::string>("runs");
  cmd->add_option("--manifest", *manifest_path, "manifest JSON")->required();
  cmd->add_option("--out", *out_root, "output root directory");
  cmd->callback([=] {
    ExperimentManifest manifest = ExperimentManifest::from_json(load_json(*manifest_path));
    run_manifest(manifest, *out_root,
                 [](const std::string& line) { std::cout << line << "\n"; });
    std::cout << "manifest " << manifest.name << " complete under " << *out_root << "\n";
  });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"metadata-conditioned LM pretraining laboratory"};
  app.require_subcommand(1);
  add_synth(app);
  add_annotate(app);
  add_pack(app);
  add_train(app);
  add_eval(app);
  add_probe(app);
  add_attn(app);
  add_run(app);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
