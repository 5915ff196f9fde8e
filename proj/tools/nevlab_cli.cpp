// Licensed under the Apache License, Version 2.0 (the "License"); you
// may not use this file except in compliance with the License.  You
// may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or
// implied.  See the License for the specific language governing
// permissions and limitations under the License.

// Command-line driver wiring data generation, corpus building, concept
// retrieval, the two training stages, evaluation, the ablation table, and
// the gradient-check suite.  Every subcommand reads an optional JSON
// config plus dotted-key --set overrides, writes its artifacts into
// --out, and drops a config.resolved.json snapshot next to them so a run
// can be reproduced from the snapshot alone.
//
// Exit codes: 0 success, 1 usage/config error, 2 runtime failure,
// 3 gradient-check failure.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "nevlab/config_io.hpp"
#include "nevlab/corpus.hpp"
#include "nevlab/frozen.hpp"
#include "nevlab/synth.hpp"
#include "nevlab/train.hpp"
#include "nevlab/vocab.hpp"

namespace {

using nevlab::ConceptCorpus;
using nevlab::PairedSample;
using nevlab::RunConfig;
using nevlab::Vocab;
using nlohmann::json;
using nlohmann::ordered_json;

// Options shared by every subcommand.
struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::string out = ".";
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "JSON config file");
  sub->add_option("--set", c.sets,
                  "dotted-key=value override, e.g. train.seed=7");
  sub->add_option("--out", c.out, "output directory (default .)");
}

// Effective configuration: file (if any), then overrides in order.
RunConfig resolve_config(const Common& c) {
  RunConfig cfg;
  if (!c.config.empty()) cfg = nevlab::load_run_config(c.config);
  for (const std::string& kv : c.sets) {
    const std::size_t eq = kv.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config: override must be key=value: " +
                                  kv);
    }
    nevlab::apply_override(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  return cfg;
}

std::string out_path(const Common& c, const std::string& name) {
  std::filesystem::create_directories(c.out);
  return (std::filesystem::path(c.out) / name).string();
}

// Every run leaves a snapshot sufficient to reproduce it.
void write_snapshot(const Common& c, const RunConfig& cfg) {
  nevlab::save_run_config(out_path(c, "config.resolved.json"), cfg);
}

void log_line(const std::string& line) { std::cout << line << "\n"; }

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cli: cannot write " + path);
  out << text;
  if (!out) throw std::runtime_error("cli: cannot write " + path);
}

// ---- concept files ----

void save_concepts(const std::vector<PairedSample>& samples,
                   const std::vector<std::vector<std::string>>& nouns,
                   const std::string& path) {
  ordered_json out;
  out["samples"] = ordered_json::array();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    ordered_json row;
    row["id"] = samples[i].id;
    row["concepts"] = nouns[i];
    out["samples"].push_back(std::move(row));
  }
  write_text(path, out.dump(2) + "\n");
}

// Maps the concept file onto the dataset order; every sample needs an
// entry, every noun must be a vocabulary token.
std::vector<std::vector<int>> load_concept_ids(
    const std::string& path, const std::vector<PairedSample>& samples,
    const Vocab& vocab) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("concepts: cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw std::invalid_argument("concepts: cannot parse " + path + ": " +
                                e.what());
  }
  std::map<int, std::vector<std::string>> by_id;
  for (const json& row : j.at("samples")) {
    by_id[row.at("id").get<int>()] =
        row.at("concepts").get<std::vector<std::string>>();
  }
  std::vector<std::vector<int>> ids;
  ids.reserve(samples.size());
  for (const PairedSample& s : samples) {
    const auto it = by_id.find(s.id);
    if (it == by_id.end()) {
      throw std::invalid_argument("concepts: missing sample id " +
                                  std::to_string(s.id));
    }
    std::vector<int> row;
    row.reserve(it->second.size());
    for (const std::string& noun : it->second) row.push_back(vocab.id(noun));
    ids.push_back(std::move(row));
  }
  return ids;
}

// The retrieval stub embeds raw features of width num_objects, so it is
// always built over the full noun list regardless of corpus pruning.
nevlab::RetrievalVlmStub world_stub(std::size_t num_objects) {
  std::vector<std::string> nouns;
  nouns.reserve(num_objects);
  for (std::size_t o = 0; o < num_objects; ++o) {
    nouns.push_back(Vocab::object_noun(o));
  }
  return nevlab::RetrievalVlmStub(nouns);
}

ordered_json retrieval_to_json(const nevlab::RetrievalResult& r) {
  ordered_json j;
  j["r1_i2t"] = r.r1_i2t;
  j["r5_i2t"] = r.r5_i2t;
  j["r1_t2i"] = r.r1_t2i;
  j["r5_t2i"] = r.r5_t2i;
  j["mean_r1"] = r.mean_r1();
  return j;
}

// Restores a stage-1 trainer from its checkpoint; the original training
// dataset and concepts are required because the checkpoint stores only
// the learned state.
nevlab::Stage1Trainer restore_stage1(const RunConfig& cfg,
                                     const std::string& data_path,
                                     const std::string& concepts_path,
                                     const std::string& ckpt_path) {
  const std::vector<PairedSample> data = nevlab::load_dataset(data_path);
  const Vocab vocab = Vocab::build(cfg.pipeline.world.num_objects);
  const auto ids = load_concept_ids(concepts_path, data, vocab);
  nevlab::Stage1Trainer trainer(cfg.pipeline, data, ids, cfg.variant);
  trainer.set_log(log_line);
  trainer.load_checkpoint(ckpt_path);
  return trainer;
}

// Clean samples, every fifth one held out: deterministic split for the
// stage-2 language-model objective.
void split_stage2(const std::vector<PairedSample>& data,
                  std::vector<PairedSample>& train,
                  std::vector<PairedSample>& heldout) {
  std::size_t clean_seen = 0;
  for (const PairedSample& s : data) {
    if (!s.is_noisy && clean_seen++ % 5 == 4) {
      heldout.push_back(s);
    } else {
      train.push_back(s);
    }
  }
}

// ---- subcommand bodies ----

int cmd_gen_data(const Common& c, const RunConfig& cfg) {
  const auto data = nevlab::generate_dataset(cfg.pipeline.world);
  const std::string path = out_path(c, "dataset.jsonl");
  nevlab::save_dataset(data, path);
  std::size_t noisy = 0;
  for (const auto& s : data) noisy += s.is_noisy ? 1 : 0;
  write_snapshot(c, cfg);
  log_line("event=gen_data samples=" + std::to_string(data.size()) +
           " noisy=" + std::to_string(noisy) + " path=" + path);
  return 0;
}

int cmd_build_corpus(const Common& c, const RunConfig& cfg,
                     const std::string& data_path) {
  const auto data = nevlab::load_dataset(data_path);
  const ConceptCorpus corpus = nevlab::corpus_from_dataset(
      data, cfg.pipeline.world.num_objects, cfg.corpus_min_count);
  const std::string path = out_path(c, "corpus.tsv");
  nevlab::save_corpus(corpus, path);
  write_snapshot(c, cfg);
  log_line("event=build_corpus nouns=" + std::to_string(corpus.size()) +
           " min_count=" + std::to_string(corpus.min_count) +
           " path=" + path);
  return 0;
}

int cmd_retrieve_concepts(const Common& c, const RunConfig& cfg,
                          const std::string& data_path,
                          const std::string& corpus_path) {
  const auto data = nevlab::load_dataset(data_path);
  const ConceptCorpus corpus =
      nevlab::load_corpus(corpus_path, cfg.corpus_min_count);
  const auto stub = world_stub(cfg.pipeline.world.num_objects);
  const std::size_t k = cfg.pipeline.train.num_concepts;
  std::vector<std::vector<std::string>> nouns;
  nouns.reserve(data.size());
  for (const PairedSample& s : data) {
    nouns.push_back(nevlab::retrieve_concepts(
                        s.id, nevlab::Tensor::row_vector(s.features), corpus,
                        stub, std::min(k, corpus.size()))
                        .concepts);
  }
  const std::string path = out_path(c, "concepts.json");
  save_concepts(data, nouns, path);
  write_snapshot(c, cfg);
  log_line("event=retrieve_concepts samples=" + std::to_string(data.size()) +
           " k=" + std::to_string(k) + " path=" + path);
  return 0;
}

int cmd_train_stage1(const Common& c, const RunConfig& cfg,
                     const std::string& data_path,
                     const std::string& concepts_path) {
  const auto data = nevlab::load_dataset(data_path);
  const Vocab vocab = Vocab::build(cfg.pipeline.world.num_objects);
  const auto ids = load_concept_ids(concepts_path, data, vocab);
  nevlab::Stage1Trainer trainer(cfg.pipeline, data, ids, cfg.variant);
  trainer.set_log(log_line);
  write_snapshot(c, cfg);
  log_line(std::string("event=train_stage1_start variant=") +
           nevlab::variant_name(cfg.variant) +
           " samples=" + std::to_string(data.size()));
  trainer.run();

  trainer.save_checkpoint(out_path(c, "stage1.ckpt"));
  write_text(out_path(c, "metrics_stage1.json"), trainer.report().to_json());
  trainer.report().write_csv(out_path(c, "losses_stage1.csv"));
  nevlab::save_revised_dataset(trainer.dataset(), trainer.captions(),
                               trainer.archived_captions(),
                               out_path(c, "revised_dataset.jsonl"));
  if (!trainer.epsilon().empty()) {
    nevlab::save_noise_estimates(trainer.dataset(),
                                 trainer.per_sample_losses(),
                                 trainer.epsilon(), trainer.omega(),
                                 out_path(c, "noise_estimates.json"));
  }
  std::ostringstream done;
  done << "event=train_stage1_done steps=" << trainer.optimizer_steps()
       << " replaced=" << trainer.report().refresh_replaced
       << " truncated=" << trainer.report().refresh_truncated;
  if (trainer.report().auc) done << " auc=" << *trainer.report().auc;
  done << " wall_secs=" << trainer.report().wall_clock_seconds;
  log_line(done.str());
  return 0;
}

int cmd_refresh_captions(const Common& c, const RunConfig& cfg,
                         const std::string& data_path,
                         const std::string& concepts_path,
                         const std::string& ckpt_path) {
  nevlab::Stage1Trainer trainer =
      restore_stage1(cfg, data_path, concepts_path, ckpt_path);
  if (trainer.epsilon().empty()) {
    throw std::runtime_error(
        "refresh: checkpoint carries no noise estimates yet");
  }
  // Checkpoints taken after phase D already hold revised captions; apply
  // the refresh only when it has not happened yet.
  if (trainer.phase() < nevlab::Stage1Trainer::Phase::post) {
    trainer.refresh_captions();
  }
  write_snapshot(c, cfg);
  nevlab::save_revised_dataset(trainer.dataset(), trainer.captions(),
                               trainer.archived_captions(),
                               out_path(c, "revised_dataset.jsonl"));
  nevlab::save_noise_estimates(trainer.dataset(), trainer.per_sample_losses(),
                               trainer.epsilon(), trainer.omega(),
                               out_path(c, "noise_estimates.json"));
  log_line("event=refresh_captions replaced=" +
           std::to_string(trainer.report().refresh_replaced) +
           " truncated=" +
           std::to_string(trainer.report().refresh_truncated));
  return 0;
}

int cmd_train_stage2(const Common& c, const RunConfig& cfg,
                     const std::string& data_path,
                     const std::string& stage1_data,
                     const std::string& stage1_concepts,
                     const std::string& stage1_ckpt) {
  const auto data = nevlab::load_dataset(data_path);
  const Vocab vocab = Vocab::build(cfg.pipeline.world.num_objects);

  nevlab::BridgeModel bridge(nevlab::resolved_bridge_config(cfg.pipeline));
  if (!stage1_ckpt.empty()) {
    if (stage1_data.empty() || stage1_concepts.empty()) {
      throw std::invalid_argument(
          "cli: --stage1-data and --stage1-concepts are required with "
          "--stage1");
    }
    bridge = restore_stage1(cfg, stage1_data, stage1_concepts, stage1_ckpt)
                 .model();
  }

  std::vector<PairedSample> train_split, heldout;
  split_stage2(data, train_split, heldout);
  const std::size_t n_train = train_split.size();
  const std::size_t n_heldout = heldout.size();

  const auto& dc = cfg.pipeline.decoder;
  nevlab::FrozenDecoderLM lm(vocab.size(), dc.d_llm, dc.layers, dc.heads,
                             dc.max_len, dc.seed);
  std::vector<std::vector<int>> captions;
  captions.reserve(train_split.size());
  for (const PairedSample& s : train_split) captions.push_back(s.caption);
  nevlab::pretrain_decoder(lm, captions, dc.pretrain_steps, dc.pretrain_batch,
                           dc.pretrain_lr, cfg.pipeline.train.seed);
  lm.freeze();

  nevlab::Stage2Trainer trainer(cfg.pipeline, std::move(bridge),
                                std::move(lm), std::move(train_split),
                                std::move(heldout));
  write_snapshot(c, cfg);
  log_line("event=train_stage2_start train=" + std::to_string(n_train) +
           " heldout=" + std::to_string(n_heldout));
  trainer.run();

  trainer.save_checkpoint(out_path(c, "stage2.ckpt"));
  write_text(out_path(c, "metrics_stage2.json"), trainer.report().to_json());
  trainer.report().write_csv(out_path(c, "losses_stage2.csv"));
  std::ostringstream done;
  done << "event=train_stage2_done steps=" << trainer.steps_done();
  if (trainer.report().stage2_initial_lm) {
    done << " initial_lm=" << *trainer.report().stage2_initial_lm;
  }
  if (trainer.report().stage2_final_lm) {
    done << " final_lm=" << *trainer.report().stage2_final_lm;
  }
  log_line(done.str());
  return 0;
}

int cmd_eval(const Common& c, const RunConfig& cfg,
             const std::string& data_path, const std::string& concepts_path,
             const std::string& train_data, const std::string& train_concepts,
             const std::string& ckpt_path) {
  const auto data = nevlab::load_dataset(data_path);
  const Vocab vocab = Vocab::build(cfg.pipeline.world.num_objects);
  const auto ids = load_concept_ids(concepts_path, data, vocab);

  nevlab::RetrievalResult result;
  if (ckpt_path.empty()) {
    const nevlab::BridgeModel bridge(
        nevlab::resolved_bridge_config(cfg.pipeline));
    const nevlab::FrozenImageEncoder encoder(
        cfg.pipeline.world.raw_dim(), cfg.pipeline.encoder.num_patches,
        cfg.pipeline.encoder.enc_dim, cfg.pipeline.encoder.seed);
    result =
        nevlab::eval_retrieval(bridge, encoder, data, ids, cfg.pipeline.train);
  } else {
    if (train_data.empty() || train_concepts.empty()) {
      throw std::invalid_argument(
          "cli: --train-data and --train-concepts are required with "
          "--checkpoint");
    }
    const nevlab::Stage1Trainer trainer =
        restore_stage1(cfg, train_data, train_concepts, ckpt_path);
    result = nevlab::eval_retrieval(trainer.model(), trainer.encoder(), data,
                                    ids, cfg.pipeline.train);
  }
  write_snapshot(c, cfg);
  write_text(out_path(c, "retrieval.json"),
             retrieval_to_json(result).dump(2) + "\n");
  std::ostringstream line;
  line << "event=eval r1_i2t=" << result.r1_i2t << " r5_i2t=" << result.r5_i2t
       << " r1_t2i=" << result.r1_t2i << " r5_t2i=" << result.r5_t2i
       << " mean_r1=" << result.mean_r1();
  log_line(line.str());
  return 0;
}

int cmd_ablate(const Common& c, const RunConfig& cfg,
               const std::string& data_path, const std::string& concepts_path,
               const std::string& eval_data_path,
               const std::string& eval_concepts_path) {
  const auto data = nevlab::load_dataset(data_path);
  const auto eval_data = nevlab::load_dataset(eval_data_path);
  const Vocab vocab = Vocab::build(cfg.pipeline.world.num_objects);
  const auto ids = load_concept_ids(concepts_path, data, vocab);
  const auto eval_ids = load_concept_ids(eval_concepts_path, eval_data, vocab);

  write_snapshot(c, cfg);
  const std::vector<nevlab::AblationRow> rows =
      nevlab::ablate(cfg.pipeline, data, ids, eval_data, eval_ids);

  ordered_json table = ordered_json::array();
  for (const nevlab::AblationRow& row : rows) {
    ordered_json j;
    j["variant"] = row.name;
    j["retrieval"] = retrieval_to_json(row.retrieval);
    j["auc"] = row.auc ? ordered_json(*row.auc) : ordered_json(nullptr);
    table.push_back(std::move(j));
    std::ostringstream line;
    line << "event=ablate variant=" << row.name
         << " mean_r1=" << row.retrieval.mean_r1();
    if (row.auc) line << " auc=" << *row.auc;
    log_line(line.str());
  }
  write_text(out_path(c, "ablation.json"), table.dump(2) + "\n");
  return 0;
}

int cmd_gradcheck(const Common& c, const RunConfig& cfg,
                  std::size_t instances, double h, double tol) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<nevlab::GradCheckResult> results =
      nevlab::run_gradient_checks(instances, cfg.pipeline.train.seed, h);
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();

  write_snapshot(c, cfg);
  ordered_json table = ordered_json::array();
  bool ok = true;
  for (const nevlab::GradCheckResult& r : results) {
    const bool pass = std::isfinite(r.max_rel_error) && r.max_rel_error <= tol;
    ok = ok && pass;
    ordered_json j;
    j["loss"] = r.name;
    j["max_rel_error"] = r.max_rel_error;
    j["instances"] = r.instances;
    j["pass"] = pass;
    table.push_back(std::move(j));
    std::ostringstream line;
    line << "event=gradcheck loss=" << r.name
         << " max_rel_error=" << r.max_rel_error
         << " instances=" << r.instances << " pass=" << (pass ? 1 : 0);
    log_line(line.str());
  }
  write_text(out_path(c, "gradcheck.json"), table.dump(2) + "\n");
  std::ostringstream line;
  line << "event=gradcheck_done tol=" << tol << " secs=" << secs
       << " ok=" << (ok ? 1 : 0);
  log_line(line.str());
  return ok ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"noise-robust vision-language pre-training pipeline"};
  app.require_subcommand(0, 1);
  bool print_defaults = false;
  app.add_flag("--print-defaults", print_defaults,
               "print the default config as JSON and exit");

  Common common;
  std::string data_path, corpus_path, concepts_path, ckpt_path;
  std::string eval_data_path, eval_concepts_path;
  std::string stage1_data, stage1_concepts, stage1_ckpt;
  std::size_t gc_instances = 20;
  double gc_h = 1e-6, gc_tol = 1e-5;

  CLI::App* gen = app.add_subcommand("gen-data", "generate a paired dataset");
  add_common(gen, common);

  CLI::App* corpus = app.add_subcommand(
      "build-corpus", "count object nouns into a concept corpus");
  add_common(corpus, common);
  corpus->add_option("--data", data_path, "dataset JSONL")->required();

  CLI::App* retrieve = app.add_subcommand(
      "retrieve-concepts", "retrieve top-k concepts per image");
  add_common(retrieve, common);
  retrieve->add_option("--data", data_path, "dataset JSONL")->required();
  retrieve->add_option("--corpus", corpus_path, "corpus JSON")->required();

  CLI::App* s1 = app.add_subcommand(
      "train-stage1", "bridging-transformer pre-training with noise "
                      "estimation and caption refresh");
  add_common(s1, common);
  s1->add_option("--data", data_path, "dataset JSONL")->required();
  s1->add_option("--concepts", concepts_path, "concepts JSON")->required();

  CLI::App* refresh = app.add_subcommand(
      "refresh-captions",
      "export the revised dataset and noise estimates from a stage-1 "
      "checkpoint");
  add_common(refresh, common);
  refresh->add_option("--data", data_path, "stage-1 dataset JSONL")
      ->required();
  refresh->add_option("--concepts", concepts_path, "stage-1 concepts JSON")
      ->required();
  refresh->add_option("--checkpoint", ckpt_path, "stage-1 checkpoint")
      ->required();

  CLI::App* s2 = app.add_subcommand(
      "train-stage2", "generative pre-training against the frozen decoder");
  add_common(s2, common);
  s2->add_option("--data", data_path,
                 "dataset JSONL (typically the revised one)")
      ->required();
  s2->add_option("--stage1", stage1_ckpt,
                 "stage-1 checkpoint to initialize the bridge");
  s2->add_option("--stage1-data", stage1_data, "stage-1 dataset JSONL");
  s2->add_option("--stage1-concepts", stage1_concepts,
                 "stage-1 concepts JSON");

  CLI::App* ev = app.add_subcommand(
      "eval", "shortlist-and-rerank retrieval on a clean eval set");
  add_common(ev, common);
  ev->add_option("--data", data_path, "clean eval dataset JSONL")->required();
  ev->add_option("--concepts", concepts_path, "eval concepts JSON")
      ->required();
  ev->add_option("--checkpoint", ckpt_path, "stage-1 checkpoint (optional)");
  ev->add_option("--train-data", stage1_data,
                 "dataset the checkpoint was trained on");
  ev->add_option("--train-concepts", stage1_concepts,
                 "concepts the checkpoint was trained with");

  CLI::App* ab = app.add_subcommand(
      "ablate", "full vs no-noise-adaptation vs no-concepts comparison");
  add_common(ab, common);
  ab->add_option("--data", data_path, "training dataset JSONL")->required();
  ab->add_option("--concepts", concepts_path, "training concepts JSON")
      ->required();
  ab->add_option("--eval-data", eval_data_path, "clean eval dataset JSONL")
      ->required();
  ab->add_option("--eval-concepts", eval_concepts_path, "eval concepts JSON")
      ->required();

  CLI::App* gc = app.add_subcommand(
      "gradcheck", "finite-difference validation of every loss");
  add_common(gc, common);
  gc->add_option("--instances", gc_instances,
                 "randomized instances per loss (default 20)");
  gc->add_option("--fd-step", gc_h, "finite-difference step (default 1e-6)");
  gc->add_option("--tol", gc_tol, "max relative error (default 1e-5)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;  // usage problems collapse to exit 1
  }

  try {
    if (print_defaults) {
      std::cout << nevlab::run_config_to_json(RunConfig{});
      return 0;
    }
    if (app.get_subcommands().empty()) {
      std::cerr << app.help();
      return 1;
    }
    const RunConfig cfg = resolve_config(common);
    if (gen->parsed()) return cmd_gen_data(common, cfg);
    if (corpus->parsed()) return cmd_build_corpus(common, cfg, data_path);
    if (retrieve->parsed()) {
      return cmd_retrieve_concepts(common, cfg, data_path, corpus_path);
    }
    if (s1->parsed()) {
      return cmd_train_stage1(common, cfg, data_path, concepts_path);
    }
    if (refresh->parsed()) {
      return cmd_refresh_captions(common, cfg, data_path, concepts_path,
                                  ckpt_path);
    }
    if (s2->parsed()) {
      return cmd_train_stage2(common, cfg, data_path, stage1_data,
                              stage1_concepts, stage1_ckpt);
    }
    if (ev->parsed()) {
      return cmd_eval(common, cfg, data_path, concepts_path, stage1_data,
                      stage1_concepts, ckpt_path);
    }
    if (ab->parsed()) {
      return cmd_ablate(common, cfg, data_path, concepts_path, eval_data_path,
                        eval_concepts_path);
    }
    if (gc->parsed()) {
      return cmd_gradcheck(common, cfg, gc_instances, gc_h, gc_tol);
    }
    std::cerr << app.help();
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
