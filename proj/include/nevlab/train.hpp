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

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "nevlab/bridge.hpp"
#include "nevlab/checkpoint.hpp"
#include "nevlab/corpus.hpp"
#include "nevlab/frozen.hpp"
#include "nevlab/gmm.hpp"
#include "nevlab/objectives.hpp"
#include "nevlab/rng.hpp"
#include "nevlab/synth.hpp"
#include "nevlab/tensor.hpp"
#include "nevlab/vocab.hpp"

namespace nevlab {

// Optimizer and schedule settings shared by both training stages, plus
// the pipeline knobs that shape each phase. Paper-scale batch sizes are
// 1600 (stage 1) and 1440 (stage 2); the desk defaults below run in
// minutes on one CPU core.
struct TrainConfig {
  double peak_lr = 1e-4;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t batch_size = 64;
  std::size_t stage2_batch_size = 32;
  std::size_t warmup_steps = 300;
  std::size_t nitc_steps = 1500;
  std::size_t post_refresh_steps = 500;
  std::size_t stage2_steps = 800;
  double lambda = 0.5;     // smoothing slope: omega = min(lambda*eps, cap)
  double omega_max = 0.9;  // cap keeps every log(1 - omega) finite
  double tau = 1.0;        // similarity temperature
  std::uint64_t seed = 1;
  bool strict_itc_denominator = false;
  std::size_t reestimate_every = 0;  // 0 = estimate noise exactly once
  double max_grad_norm = 0.0;        // 0 = no clipping
  std::size_t num_concepts = 3;      // concepts retrieved per image
  std::size_t max_caption_len = 8;   // decode budget for caption refresh
  std::size_t eval_candidates = 16;  // shortlist size before reranking
  QueryPooling pooling = QueryPooling::max_query;
};

// Frozen image encoder settings (weights derive from the seed alone).
struct EncoderConfig {
  std::size_t num_patches = 4;
  std::size_t enc_dim = 32;
  std::uint64_t seed = 7;
};

// Frozen decoder settings plus its own (pre-freeze) training recipe.
struct DecoderConfig {
  std::size_t d_llm = 32;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t max_len = 16;
  std::uint64_t seed = 9;
  std::size_t pretrain_steps = 200;
  std::size_t pretrain_batch = 32;
  double pretrain_lr = 1e-3;
};

// Everything one run needs. The bridge's enc_dim and vocab_size are not
// free knobs: they are derived from the encoder and world settings.
struct PipelineConfig {
  WorldConfig world;
  BridgeConfig bridge;
  TrainConfig train;
  EncoderConfig encoder;
  DecoderConfig decoder;
};

// bridge config with enc_dim/vocab_size filled in from the rest.
BridgeConfig resolved_bridge_config(const PipelineConfig& cfg);

// ---- optimizer and schedule ----

// Decoupled-weight-decay Adam with bias correction. Parameters that do
// not require gradients are skipped at construction (frozen components
// never enter the optimizer). step() consumes and clears the current
// gradients; a missing gradient counts as zero.
class AdamW {
 public:
  AdamW(const std::vector<Tensor>& params, double beta1, double beta2,
        double eps, double weight_decay);
  AdamW(const std::vector<Tensor>& params, const TrainConfig& cfg);

  // Applies one update with the given learning rate. Any non-finite
  // gradient aborts before touching parameters or moments.
  void step(double lr);

  // Scales all gradients so their global l2 norm is at most max_norm
  // (no-op when max_norm <= 0 or the norm is already smaller).
  void clip_gradients(double max_norm);

  std::uint64_t steps_taken() const { return t_; }

  void save(CheckpointWriter& w) const;
  void load(CheckpointReader& r);

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  std::uint64_t t_ = 0;
  double beta1_, beta2_, eps_, weight_decay_;
};

// peak * (1 + cos(pi * t / total)) / 2; exact at both endpoints.
double cosine_lr(std::size_t step, std::size_t total, double peak);

// ---- metrics ----

struct LossPoint {
  std::uint64_t step = 0;
  std::string component;
  double value = 0.0;
};

struct RetrievalResult {
  double r1_i2t = 0.0, r5_i2t = 0.0;
  double r1_t2i = 0.0, r5_t2i = 0.0;

  double mean_r1() const { return 0.5 * (r1_i2t + r1_t2i); }
};

// Everything a run reports. Identical seeded runs must produce
// byte-identical to_json() output, so wall-clock time stays out of the
// canonical form (it is surfaced through logs instead).
struct MetricsReport {
  std::vector<LossPoint> curve;
  std::optional<double> auc;  // noise detection vs planted flags
  std::optional<RetrievalResult> retrieval;
  std::optional<double> stage2_initial_lm;
  std::optional<double> stage2_final_lm;
  std::uint64_t refresh_replaced = 0;
  std::uint64_t refresh_truncated = 0;
  double wall_clock_seconds = 0.0;  // informational only

  std::string to_json() const;  // canonical, deterministic
  void write_csv(const std::string& path) const;  // step,component,value

  void save(CheckpointWriter& w) const;
  void load(CheckpointReader& r);
};

// ---- concept assignment ----

// Retrieves the top-k corpus concepts per sample and maps them to vocab
// token ids (dataset order). k is clamped to the corpus size.
std::vector<std::vector<int>> assign_concepts(
    const std::vector<PairedSample>& samples, const ConceptCorpus& corpus,
    const RetrievalVlmStub& stub, const Vocab& vocab, std::size_t k);

// Same mapping from pre-computed retrievals (e.g. a cache file); every
// sample must have a retrieval entry.
std::vector<std::vector<int>> concept_ids_from_retrievals(
    const std::vector<ConceptRetrieval>& retrievals,
    const std::vector<PairedSample>& samples, const Vocab& vocab);

// ---- stage 1 ----

enum class Variant {
  full,                  // NITC + CITG + CITM
  no_noise_adaptation,   // plain ITC throughout; no noise estimate/refresh
  no_concepts,           // empty concept segment everywhere
};

const char* variant_name(Variant v);

// Two-phase-group trainer: warmup (ITC+CITG+CITM) -> one fixed-weights
// pass estimating per-pair noise -> NITC phase -> caption refresh ->
// continued training on the revised pairs. step() performs exactly one
// unit of work (an optimizer step or a whole estimate/refresh pass), so
// checkpoints can cut the run anywhere and resume bitwise.
class Stage1Trainer {
 public:
  enum class Phase : std::uint32_t {
    warmup = 0,
    estimate = 1,
    nitc = 2,
    refresh = 3,
    post = 4,
    done = 5,
  };

  Stage1Trainer(const PipelineConfig& cfg, std::vector<PairedSample> dataset,
                std::vector<std::vector<int>> concept_ids,
                Variant variant = Variant::full);

  // One unit of progress; false once the schedule is exhausted.
  bool step();
  void run();

  Phase phase() const { return phase_; }
  Variant variant() const { return variant_; }
  std::uint64_t optimizer_steps() const { return global_step_; }

  BridgeModel& model() { return bridge_; }
  const BridgeModel& model() const { return bridge_; }
  const FrozenImageEncoder& encoder() const { return encoder_; }
  const Vocab& vocab() const { return vocab_; }
  MetricsReport& report() { return report_; }
  const MetricsReport& report() const { return report_; }

  const std::vector<double>& per_sample_losses() const { return losses_; }
  const std::vector<double>& epsilon() const { return eps_; }
  const std::vector<double>& omega() const { return omega_; }

  const std::vector<PairedSample>& dataset() const { return dataset_; }
  const std::vector<std::vector<int>>& captions() const { return captions_; }
  const std::vector<std::optional<std::vector<int>>>& archived_captions()
      const {
    return archived_;
  }
  const std::vector<std::vector<int>>& concept_ids() const {
    return concepts_;
  }

  // Dataset with the current working captions swapped in.
  std::vector<PairedSample> revised_dataset() const;

  double last_total() const { return last_total_; }
  double last_contrastive() const { return last_contrastive_; }
  double last_citg() const { return last_citg_; }
  double last_citm() const { return last_citm_; }

  // Messages about notable events (caption truncation, re-estimation).
  void set_log(std::function<void(const std::string&)> sink) {
    log_ = std::move(sink);
  }

  void save_checkpoint(const std::string& path) const;
  // Restores onto a trainer constructed with the same config/dataset.
  void load_checkpoint(const std::string& path);

  // Replaces the caption of every sample with epsilon > 0.5 by a greedy
  // decode from the current model, archiving the original. Runs as phase
  // D of the schedule but can also be applied to a restored checkpoint.
  void refresh_captions();

 private:
  void train_step();
  void estimate_noise();
  std::vector<int> greedy_decode(std::size_t sample, bool* truncated) const;
  void log(const std::string& line) const;

  PipelineConfig cfg_;
  Variant variant_;
  Vocab vocab_;
  FrozenImageEncoder encoder_;
  BridgeModel bridge_;
  AdamW adam_;
  Rng rng_;

  std::vector<PairedSample> dataset_;
  std::vector<Tensor> patches_;  // frozen-encoder output per sample
  std::vector<std::vector<int>> concepts_;
  std::vector<std::vector<int>> captions_;  // working copies
  std::vector<std::optional<std::vector<int>>> archived_;

  std::vector<double> losses_, eps_, omega_;

  Phase phase_ = Phase::warmup;
  std::uint64_t steps_in_phase_ = 0;
  std::uint64_t global_step_ = 0;
  std::uint64_t since_estimate_ = 0;
  std::uint64_t total_opt_steps_ = 0;  // cosine horizon over all phases

  double last_total_ = 0.0, last_contrastive_ = 0.0;
  double last_citg_ = 0.0, last_citm_ = 0.0;

  MetricsReport report_;
  std::function<void(const std::string&)> log_;
};

// Trains the decoder on captions as a plain language model, then leaves
// freezing to the caller. Uses AdamW without weight decay and a cosine
// schedule over `steps`.
void pretrain_decoder(FrozenDecoderLM& lm,
                      const std::vector<std::vector<int>>& captions,
                      std::size_t steps, std::size_t batch_size, double lr,
                      std::uint64_t seed);

// ---- stage 2 ----

// Trains the bridge plus the projection into the frozen decoder with the
// generative loss. The decoder must already be frozen; its content hash
// is verified when the run ends.
class Stage2Trainer {
 public:
  Stage2Trainer(const PipelineConfig& cfg, BridgeModel bridge,
                FrozenDecoderLM lm, std::vector<PairedSample> train_set,
                std::vector<PairedSample> heldout_set);

  bool step();  // one optimizer step; false once done
  void run();   // heldout loss at step 0, full schedule, heldout at end

  std::uint64_t steps_done() const { return step_; }
  BridgeModel& model() { return bridge_; }
  const LlmProjection& projection() const { return fc_; }
  const FrozenDecoderLM& decoder() const { return lm_; }
  MetricsReport& report() { return report_; }
  const MetricsReport& report() const { return report_; }

  // Mean generative loss over the held-out set, gradients off.
  double heldout_loss() const;

  void save_checkpoint(const std::string& path) const;
  void load_checkpoint(const std::string& path);

 private:
  void verify_frozen() const;

  PipelineConfig cfg_;
  BridgeModel bridge_;
  FrozenDecoderLM lm_;
  LlmProjection fc_;
  AdamW adam_;
  Rng rng_;
  FrozenImageEncoder encoder_;

  std::vector<PairedSample> train_set_, heldout_;
  std::vector<Tensor> train_patches_, heldout_patches_;

  std::uint64_t step_ = 0;
  std::uint64_t lm_hash_ = 0;
  MetricsReport report_;
};

// ---- evaluation ----

// Shortlist-then-rerank retrieval. sims[i][j] scores image i against
// text j; the matcher refines the top-k shortlist. Recall counts a query
// as hit when its own index ranks first (R@1) or in the top five (R@5).
RetrievalResult eval_retrieval_from_scores(
    const std::vector<std::vector<double>>& sims, std::size_t k_candidates,
    const std::function<double(std::size_t, std::size_t)>& match_score);

// Bridge-backed evaluation: pooled contrastive similarity for the
// shortlist, match log-odds for the rerank. The eval set must be clean.
// NEVLAB_THREADS (default 1) shards match scoring; results are identical
// at any thread count.
RetrievalResult eval_retrieval(const BridgeModel& bridge,
                               const FrozenImageEncoder& encoder,
                               const std::vector<PairedSample>& samples,
                               const std::vector<std::vector<int>>& concept_ids,
                               const TrainConfig& cfg);

// ---- ablation ----

struct AblationRow {
  std::string name;
  RetrievalResult retrieval;
  std::optional<double> auc;
};

// Runs stage 1 under the full recipe and both ablations with identical
// seeds and step counts, then evaluates retrieval on the eval set.
std::vector<AblationRow> ablate(
    const PipelineConfig& cfg, const std::vector<PairedSample>& train_set,
    const std::vector<std::vector<int>>& train_concepts,
    const std::vector<PairedSample>& eval_set,
    const std::vector<std::vector<int>>& eval_concepts);

// ---- artifact writers ----

// JSONL like the dataset writer, with the working caption in `caption`
// and, for replaced samples, the original under `original_caption`.
void save_revised_dataset(
    const std::vector<PairedSample>& samples,
    const std::vector<std::vector<int>>& captions,
    const std::vector<std::optional<std::vector<int>>>& archived,
    const std::string& path);

// Per-sample noise estimates keyed by sample id (JSON).
void save_noise_estimates(const std::vector<PairedSample>& samples,
                          const std::vector<double>& losses,
                          const std::vector<double>& epsilon,
                          const std::vector<double>& omega,
                          const std::string& path);

// ---- gradient-check harness ----

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t instances = 0;
};

// Finite-difference validation of every loss on randomized small
// instances; returns the worst relative error per loss family.
std::vector<GradCheckResult> run_gradient_checks(std::size_t instances,
                                                 std::uint64_t seed,
                                                 double h = 1e-6);

}  // namespace nevlab
