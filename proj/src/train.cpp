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

#include "nevlab/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <limits>
#include <numbers>
#include <numeric>
#include <stdexcept>
#include <thread>
#include <unordered_map>

#include <json.hpp>

namespace nevlab {

BridgeConfig resolved_bridge_config(const PipelineConfig& cfg) {
  BridgeConfig b = cfg.bridge;
  b.enc_dim = cfg.encoder.enc_dim;
  b.vocab_size = Vocab::kNumSpecials + cfg.world.num_objects;
  return b;
}

// ---- optimizer ----

AdamW::AdamW(const std::vector<Tensor>& params, double beta1, double beta2,
             double eps, double weight_decay)
    : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {
  for (const Tensor& p : params) {
    if (!p.requires_grad()) continue;  // frozen parameters never enter
    params_.push_back(p);
    m_.emplace_back(p.rows() * p.cols(), 0.0);
    v_.emplace_back(p.rows() * p.cols(), 0.0);
  }
}

AdamW::AdamW(const std::vector<Tensor>& params, const TrainConfig& cfg)
    : AdamW(params, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay) {}

void AdamW::step(double lr) {
  // Abort before mutating anything if any gradient went non-finite.
  for (const Tensor& p : params_) {
    if (!p.has_grad()) continue;
    for (double g : p.grad()) {
      if (!std::isfinite(g)) throw std::runtime_error("diverged");
    }
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t p = 0; p < params_.size(); ++p) {
    Tensor param = params_[p];
    auto& val = param.data();
    const bool has = param.has_grad();
    for (std::size_t i = 0; i < val.size(); ++i) {
      const double g = has ? param.grad()[i] : 0.0;
      m_[p][i] = beta1_ * m_[p][i] + (1.0 - beta1_) * g;
      v_[p][i] = beta2_ * v_[p][i] + (1.0 - beta2_) * g * g;
      const double mhat = m_[p][i] / bc1;
      const double vhat = v_[p][i] / bc2;
      val[i] -= lr * mhat / (std::sqrt(vhat) + eps_) +
                lr * weight_decay_ * val[i];
    }
    param.zero_grad();
  }
}

void AdamW::clip_gradients(double max_norm) {
  if (max_norm <= 0.0) return;
  double sq = 0.0;
  for (const Tensor& p : params_) {
    if (!p.has_grad()) continue;
    for (double g : p.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (norm <= max_norm) return;
  const double scale = max_norm / norm;
  for (Tensor p : params_) {
    if (!p.has_grad()) continue;
    for (double& g : p.grad()) g *= scale;
  }
}

void AdamW::save(CheckpointWriter& w) const {
  w.u64(t_);
  w.u64(params_.size());
  for (std::size_t p = 0; p < params_.size(); ++p) {
    w.doubles(m_[p]);
    w.doubles(v_[p]);
  }
}

void AdamW::load(CheckpointReader& r) {
  t_ = r.u64();
  if (r.u64() != params_.size()) {
    throw std::runtime_error("checkpoint: parameter mismatch");
  }
  for (std::size_t p = 0; p < params_.size(); ++p) {
    std::vector<double> m = r.doubles();
    std::vector<double> v = r.doubles();
    if (m.size() != m_[p].size() || v.size() != v_[p].size()) {
      throw std::runtime_error("checkpoint: parameter mismatch");
    }
    m_[p] = std::move(m);
    v_[p] = std::move(v);
  }
}

double cosine_lr(std::size_t step, std::size_t total, double peak) {
  if (total < 1) throw std::invalid_argument("cosine_lr: total must be >= 1");
  if (step > total) {
    throw std::invalid_argument("cosine_lr: step beyond schedule");
  }
  const double frac =
      static_cast<double>(step) / static_cast<double>(total);
  return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

// ---- metrics ----

std::string MetricsReport::to_json() const {
  nlohmann::ordered_json j;
  auto arr = nlohmann::ordered_json::array();
  for (const LossPoint& p : curve) {
    arr.push_back({{"step", p.step}, {"component", p.component},
                   {"value", p.value}});
  }
  j["curve"] = std::move(arr);
  if (auc) j["auc"] = *auc;
  if (retrieval) {
    nlohmann::ordered_json r;
    r["r1_i2t"] = retrieval->r1_i2t;
    r["r5_i2t"] = retrieval->r5_i2t;
    r["r1_t2i"] = retrieval->r1_t2i;
    r["r5_t2i"] = retrieval->r5_t2i;
    r["mean_r1"] = retrieval->mean_r1();
    j["retrieval"] = std::move(r);
  }
  if (stage2_initial_lm) j["stage2_initial_lm"] = *stage2_initial_lm;
  if (stage2_final_lm) j["stage2_final_lm"] = *stage2_final_lm;
  j["refresh_replaced"] = refresh_replaced;
  j["refresh_truncated"] = refresh_truncated;
  return j.dump(2) + "\n";
}

void MetricsReport::write_csv(const std::string& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("metrics: cannot open " + path);
  out << "step,component,value\n";
  char buf[64];
  for (const LossPoint& p : curve) {
    std::snprintf(buf, sizeof(buf), "%.17g", p.value);
    out << p.step << ',' << p.component << ',' << buf << '\n';
  }
  if (!out) throw std::runtime_error("metrics: write failed for " + path);
}

namespace {

void save_optional(CheckpointWriter& w, const std::optional<double>& v) {
  w.u8(v ? 1 : 0);
  if (v) w.f64(*v);
}

std::optional<double> load_optional(CheckpointReader& r) {
  if (r.u8() == 0) return std::nullopt;
  return r.f64();
}

}  // namespace

void MetricsReport::save(CheckpointWriter& w) const {
  w.u64(curve.size());
  for (const LossPoint& p : curve) {
    w.u64(p.step);
    w.str(p.component);
    w.f64(p.value);
  }
  save_optional(w, auc);
  w.u8(retrieval ? 1 : 0);
  if (retrieval) {
    w.f64(retrieval->r1_i2t);
    w.f64(retrieval->r5_i2t);
    w.f64(retrieval->r1_t2i);
    w.f64(retrieval->r5_t2i);
  }
  save_optional(w, stage2_initial_lm);
  save_optional(w, stage2_final_lm);
  w.u64(refresh_replaced);
  w.u64(refresh_truncated);
}

void MetricsReport::load(CheckpointReader& r) {
  curve.clear();
  const std::uint64_t n = r.u64();
  curve.reserve(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    LossPoint p;
    p.step = r.u64();
    p.component = r.str();
    p.value = r.f64();
    curve.push_back(std::move(p));
  }
  auc = load_optional(r);
  if (r.u8() != 0) {
    RetrievalResult rr;
    rr.r1_i2t = r.f64();
    rr.r5_i2t = r.f64();
    rr.r1_t2i = r.f64();
    rr.r5_t2i = r.f64();
    retrieval = rr;
  } else {
    retrieval.reset();
  }
  stage2_initial_lm = load_optional(r);
  stage2_final_lm = load_optional(r);
  refresh_replaced = r.u64();
  refresh_truncated = r.u64();
}

// ---- concept assignment ----

std::vector<std::vector<int>> assign_concepts(
    const std::vector<PairedSample>& samples, const ConceptCorpus& corpus,
    const RetrievalVlmStub& stub, const Vocab& vocab, std::size_t k) {
  const std::size_t kk = std::min(k, corpus.size());
  std::vector<std::vector<int>> out;
  out.reserve(samples.size());
  for (const PairedSample& s : samples) {
    std::vector<int> ids;
    if (kk > 0) {
      Tensor raw = Tensor::row_vector(s.features);
      ConceptRetrieval ret = retrieve_concepts(s.id, raw, corpus, stub, kk);
      ids.reserve(ret.concepts.size());
      for (const std::string& noun : ret.concepts) ids.push_back(vocab.id(noun));
    }
    out.push_back(std::move(ids));
  }
  return out;
}

std::vector<std::vector<int>> concept_ids_from_retrievals(
    const std::vector<ConceptRetrieval>& retrievals,
    const std::vector<PairedSample>& samples, const Vocab& vocab) {
  std::unordered_map<int, const ConceptRetrieval*> by_id;
  for (const ConceptRetrieval& r : retrievals) by_id[r.image_id] = &r;
  std::vector<std::vector<int>> out;
  out.reserve(samples.size());
  for (const PairedSample& s : samples) {
    auto it = by_id.find(s.id);
    if (it == by_id.end()) {
      throw std::invalid_argument("concepts: no retrieval for sample " +
                                  std::to_string(s.id));
    }
    std::vector<int> ids;
    ids.reserve(it->second->concepts.size());
    for (const std::string& noun : it->second->concepts) {
      ids.push_back(vocab.id(noun));
    }
    out.push_back(std::move(ids));
  }
  return out;
}

// ---- stage 1 ----

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::full:
      return "full";
    case Variant::no_noise_adaptation:
      return "no_noise_adaptation";
    case Variant::no_concepts:
      return "no_concepts";
  }
  return "unknown";
}

Stage1Trainer::Stage1Trainer(const PipelineConfig& cfg,
                             std::vector<PairedSample> dataset,
                             std::vector<std::vector<int>> concept_ids,
                             Variant variant)
    : cfg_(cfg),
      variant_(variant),
      vocab_(Vocab::build(cfg.world.num_objects)),
      encoder_(cfg.world.raw_dim(), cfg.encoder.num_patches,
               cfg.encoder.enc_dim, cfg.encoder.seed),
      bridge_(resolved_bridge_config(cfg)),
      adam_(bridge_.params(), cfg.train),
      rng_(cfg.train.seed),
      dataset_(std::move(dataset)),
      concepts_(std::move(concept_ids)) {
  const std::size_t n = dataset_.size();
  if (n < 2) {
    throw std::invalid_argument("train: dataset must have at least 2 samples");
  }
  if (cfg_.train.batch_size < 2) {
    throw std::invalid_argument("train: batch size must be >= 2");
  }
  if (concepts_.size() != n) {
    throw std::invalid_argument("train: concept list size mismatch");
  }
  if (variant_ == Variant::no_concepts) {
    for (auto& c : concepts_) c.clear();
  }
  captions_.reserve(n);
  patches_.reserve(n);
  archived_.resize(n);
  for (const PairedSample& s : dataset_) {
    if (s.caption.empty()) throw std::invalid_argument("train: empty caption");
    captions_.push_back(s.caption);
    patches_.push_back(encoder_.encode(Tensor::row_vector(s.features)));
  }
  for (const auto& c : concepts_) {
    if (c.size() > cfg_.train.num_concepts) {
      throw std::invalid_argument("train: too many concepts for a sample");
    }
  }
  total_opt_steps_ = cfg_.train.warmup_steps + cfg_.train.nitc_steps +
                     cfg_.train.post_refresh_steps;
}

void Stage1Trainer::log(const std::string& line) const {
  if (log_) {
    log_(line);
  } else {
    std::cerr << line << '\n';
  }
}

void Stage1Trainer::train_step() {
  const std::size_t n = dataset_.size();
  const std::size_t batch = std::min<std::size_t>(cfg_.train.batch_size, n);
  const bool use_nitc = variant_ != Variant::no_noise_adaptation &&
                        (phase_ == Phase::nitc || phase_ == Phase::post) &&
                        !omega_.empty();
  const std::vector<std::size_t> ids =
      rng_.sample_without_replacement(n, batch);

  GradTape tape;
  std::vector<Tensor> image_queries, text_rows, feats;
  std::vector<std::vector<int>> caps, cons;
  std::vector<double> omega_batch;
  image_queries.reserve(batch);
  text_rows.reserve(batch);
  feats.reserve(batch);
  caps.reserve(batch);
  cons.reserve(batch);
  for (std::size_t id : ids) {
    feats.push_back(patches_[id]);
    caps.push_back(captions_[id]);
    cons.push_back(concepts_[id]);
    image_queries.push_back(bridge_.encode_image(patches_[id]).itc_image);
    std::vector<int> cls_text;
    cls_text.reserve(captions_[id].size() + 1);
    cls_text.push_back(Vocab::kCls);
    cls_text.insert(cls_text.end(), captions_[id].begin(),
                    captions_[id].end());
    text_rows.push_back(bridge_.encode_text(cls_text).itc_text);
    if (use_nitc) omega_batch.push_back(omega_[id]);
  }
  const Tensor texts = concat_rows(text_rows);
  SimilarityMatrix sims = similarity_matrix(image_queries, texts,
                                            cfg_.train.tau,
                                            cfg_.train.pooling);

  const Tensor contrastive =
      use_nitc ? nitc_loss({sims, omega_batch},
                           cfg_.train.strict_itc_denominator)
               : itc_loss(sims);
  const HardNegatives negs = mine_hard_negatives(sims, rng_);
  const Tensor citm = citm_loss(bridge_, feats, cons, caps, negs,
                                cfg_.train.num_concepts);
  std::vector<Tensor> citg_parts;
  citg_parts.reserve(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    // The trailing padding token is the learned stop signal for the
    // greedy caption refresh later on.
    std::vector<int> gen_text = caps[b];
    gen_text.push_back(Vocab::kPad);
    citg_parts.push_back(citg_loss(bridge_, feats[b], cons[b], gen_text));
  }
  const Tensor citg = mean_all(concat_rows(citg_parts));
  const Tensor total = add(add(contrastive, citg), citm);

  tape.backward(total);
  adam_.clip_gradients(cfg_.train.max_grad_norm);
  adam_.step(cosine_lr(global_step_,
                       std::max<std::uint64_t>(total_opt_steps_, 1),
                       cfg_.train.peak_lr));

  last_contrastive_ = contrastive.item();
  last_citg_ = citg.item();
  last_citm_ = citm.item();
  last_total_ = total.item();
  const char* cname = use_nitc ? "nitc" : "itc";
  report_.curve.push_back({global_step_, cname, last_contrastive_});
  report_.curve.push_back({global_step_, "citg", last_citg_});
  report_.curve.push_back({global_step_, "citm", last_citm_});
  report_.curve.push_back({global_step_, "total", last_total_});
  ++global_step_;
  ++since_estimate_;
}

void Stage1Trainer::estimate_noise() {
  // One pass over the full dataset with weights fixed: every pair is
  // scored against the same N-1 negatives, so the per-sample losses carry
  // no batch-composition noise and the pass is batch-size independent.
  const std::size_t n = dataset_.size();
  std::vector<Tensor> image_queries, text_rows;
  image_queries.reserve(n);
  text_rows.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    image_queries.push_back(bridge_.encode_image(patches_[i]).itc_image);
    std::vector<int> cls_text;
    cls_text.reserve(captions_[i].size() + 1);
    cls_text.push_back(Vocab::kCls);
    cls_text.insert(cls_text.end(), captions_[i].begin(), captions_[i].end());
    text_rows.push_back(bridge_.encode_text(cls_text).itc_text);
  }
  const SimilarityMatrix sims =
      similarity_matrix(image_queries, concat_rows(text_rows), cfg_.train.tau,
                        cfg_.train.pooling);
  losses_ = per_sample_itc(sims);

  const Gmm2 gmm = fit_gmm2(losses_);
  eps_ = noise_posterior(gmm, losses_);
  omega_ = smoothing_rates(eps_, cfg_.train.lambda, cfg_.train.omega_max);
  since_estimate_ = 0;

  // Detection quality against the planted flags, when both classes exist.
  std::vector<std::uint8_t> labels;
  labels.reserve(n);
  bool has0 = false, has1 = false;
  for (const PairedSample& smp : dataset_) {
    labels.push_back(smp.is_noisy ? 1 : 0);
    (smp.is_noisy ? has1 : has0) = true;
  }
  if (has0 && has1) report_.auc = roc_auc(eps_, labels);
}

std::vector<int> Stage1Trainer::greedy_decode(std::size_t sample,
                                              bool* truncated) const {
  const std::size_t budget = cfg_.train.max_caption_len;
  std::vector<int> block{Vocab::kDec};
  *truncated = false;
  for (;;) {
    if (block.size() - 1 >= budget) {
      *truncated = true;
      break;
    }
    const ForwardOutput out = bridge_.forward_multimodal(
        patches_[sample], concepts_[sample], block,
        MaskKind::multimodal_causal);
    const Tensor last = slice_rows(out.text_states, block.size() - 1, 1);
    const Tensor logits = bridge_.lm_logits(last);
    const auto& row = logits.data();
    int best = -1;
    double best_value = -std::numeric_limits<double>::infinity();
    for (std::size_t v = 0; v < row.size(); ++v) {
      // Padding ends the caption, so a leading one would make it empty;
      // force at least one content token.
      if (block.size() == 1 && static_cast<int>(v) == Vocab::kPad) continue;
      if (row[v] > best_value) {
        best_value = row[v];
        best = static_cast<int>(v);
      }
    }
    if (best == Vocab::kPad) break;
    block.push_back(best);
  }
  return std::vector<int>(block.begin() + 1, block.end());
}

void Stage1Trainer::refresh_captions() {
  if (eps_.empty()) return;
  for (std::size_t i = 0; i < dataset_.size(); ++i) {
    if (eps_[i] <= 0.5) continue;
    bool truncated = false;
    std::vector<int> fresh = greedy_decode(i, &truncated);
    archived_[i] = captions_[i];
    captions_[i] = std::move(fresh);
    ++report_.refresh_replaced;
    if (truncated) {
      ++report_.refresh_truncated;
      log("warn=caption_truncated id=" + std::to_string(dataset_[i].id));
    }
  }
}

bool Stage1Trainer::step() {
  const TrainConfig& tc = cfg_.train;
  const auto maybe_reestimate = [&] {
    if (tc.reestimate_every == 0 || variant_ == Variant::no_noise_adaptation)
      return;
    if (eps_.empty() || since_estimate_ < tc.reestimate_every) return;
    estimate_noise();
    log("event=reestimate step=" + std::to_string(global_step_));
  };
  for (;;) {
    switch (phase_) {
      case Phase::warmup:
        if (steps_in_phase_ < tc.warmup_steps) {
          train_step();
          ++steps_in_phase_;
          return true;
        }
        phase_ = Phase::estimate;
        steps_in_phase_ = 0;
        break;
      case Phase::estimate:
        if (variant_ == Variant::no_noise_adaptation) {
          phase_ = Phase::nitc;
          break;
        }
        estimate_noise();
        phase_ = Phase::nitc;
        return true;
      case Phase::nitc:
        if (steps_in_phase_ < tc.nitc_steps) {
          train_step();
          ++steps_in_phase_;
          maybe_reestimate();
          return true;
        }
        phase_ = Phase::refresh;
        steps_in_phase_ = 0;
        break;
      case Phase::refresh:
        if (variant_ == Variant::no_noise_adaptation) {
          phase_ = Phase::post;
          break;
        }
        refresh_captions();
        phase_ = Phase::post;
        return true;
      case Phase::post:
        if (steps_in_phase_ < tc.post_refresh_steps) {
          train_step();
          ++steps_in_phase_;
          maybe_reestimate();
          return true;
        }
        phase_ = Phase::done;
        steps_in_phase_ = 0;
        break;
      case Phase::done:
        return false;
    }
  }
}

void Stage1Trainer::run() {
  const auto t0 = std::chrono::steady_clock::now();
  while (step()) {
  }
  report_.wall_clock_seconds +=
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
}

std::vector<PairedSample> Stage1Trainer::revised_dataset() const {
  std::vector<PairedSample> out = dataset_;
  for (std::size_t i = 0; i < out.size(); ++i) out[i].caption = captions_[i];
  return out;
}

void Stage1Trainer::save_checkpoint(const std::string& path) const {
  CheckpointWriter w(path);
  write_checkpoint_header(w, kCheckpointStage1);
  w.u64(encoder_.hash());
  w.u32(static_cast<std::uint32_t>(variant_));
  w.u32(static_cast<std::uint32_t>(phase_));
  w.u64(steps_in_phase_);
  w.u64(global_step_);
  w.u64(since_estimate_);
  w.str(rng_.save_state());
  write_named_params(w, bridge_.named_params());
  adam_.save(w);
  w.doubles(losses_);
  w.doubles(eps_);
  w.doubles(omega_);
  w.u64(dataset_.size());
  for (std::size_t i = 0; i < dataset_.size(); ++i) {
    w.ints(captions_[i]);
    w.u8(archived_[i] ? 1 : 0);
    if (archived_[i]) w.ints(*archived_[i]);
  }
  report_.save(w);
  w.close();
}

void Stage1Trainer::load_checkpoint(const std::string& path) {
  CheckpointReader r(path);
  read_checkpoint_header(r, kCheckpointStage1);
  if (r.u64() != encoder_.hash()) {
    throw std::runtime_error("checkpoint: frozen encoder mismatch");
  }
  if (r.u32() != static_cast<std::uint32_t>(variant_)) {
    throw std::runtime_error("checkpoint: variant mismatch");
  }
  phase_ = static_cast<Phase>(r.u32());
  steps_in_phase_ = r.u64();
  global_step_ = r.u64();
  since_estimate_ = r.u64();
  rng_.load_state(r.str());
  read_named_params(r, bridge_.named_params());
  adam_.load(r);
  losses_ = r.doubles();
  eps_ = r.doubles();
  omega_ = r.doubles();
  if (r.u64() != dataset_.size()) {
    throw std::runtime_error("checkpoint: dataset size mismatch");
  }
  for (std::size_t i = 0; i < dataset_.size(); ++i) {
    captions_[i] = r.ints();
    if (r.u8() != 0) {
      archived_[i] = r.ints();
    } else {
      archived_[i].reset();
    }
  }
  report_.load(r);
}

// ---- decoder pre-training ----

void pretrain_decoder(FrozenDecoderLM& lm,
                      const std::vector<std::vector<int>>& captions,
                      std::size_t steps, std::size_t batch_size, double lr,
                      std::uint64_t seed) {
  if (lm.frozen()) {
    throw std::invalid_argument("pretrain: decoder already frozen");
  }
  if (captions.empty()) throw std::invalid_argument("pretrain: no captions");
  for (const auto& c : captions) {
    if (c.empty()) throw std::invalid_argument("pretrain: empty caption");
    if (c.size() + 1 > lm.max_len()) {
      throw std::invalid_argument("pretrain: caption exceeds decoder length");
    }
  }
  AdamW adam(lm.params(), 0.9, 0.999, 1e-8, 0.0);
  Rng rng(seed);
  const std::size_t batch = std::min(batch_size, captions.size());
  const Tensor no_prefix;
  for (std::size_t t = 0; t < steps; ++t) {
    const std::vector<std::size_t> ids =
        rng.sample_without_replacement(captions.size(), batch);
    GradTape tape;
    std::vector<Tensor> parts;
    parts.reserve(batch);
    for (std::size_t id : ids) {
      parts.push_back(decoder_lm_loss(lm, no_prefix, captions[id]));
    }
    const Tensor loss = mean_all(concat_rows(parts));
    tape.backward(loss);
    adam.step(cosine_lr(t, std::max<std::size_t>(steps, 1), lr));
  }
}

// ---- stage 2 ----

Stage2Trainer::Stage2Trainer(const PipelineConfig& cfg, BridgeModel bridge,
                             FrozenDecoderLM lm,
                             std::vector<PairedSample> train_set,
                             std::vector<PairedSample> heldout_set)
    : cfg_(cfg),
      bridge_(std::move(bridge)),
      lm_(std::move(lm)),
      fc_(LlmProjection::init(bridge_.config().d_model, lm_.d_llm(),
                              cfg.train.seed)),
      adam_(
          [&] {
            std::vector<Tensor> p = bridge_.params();
            const std::vector<Tensor> q = fc_.params();
            p.insert(p.end(), q.begin(), q.end());
            return p;
          }(),
          cfg.train),
      rng_(cfg.train.seed),
      encoder_(cfg.world.raw_dim(), cfg.encoder.num_patches,
               cfg.encoder.enc_dim, cfg.encoder.seed),
      train_set_(std::move(train_set)),
      heldout_(std::move(heldout_set)) {
  if (!lm_.frozen()) {
    throw std::invalid_argument("stage2: decoder must be frozen");
  }
  if (train_set_.empty()) {
    throw std::invalid_argument("stage2: empty training set");
  }
  if (heldout_.empty()) {
    throw std::invalid_argument("stage2: empty held-out set");
  }
  const auto prepare = [&](const std::vector<PairedSample>& set,
                           std::vector<Tensor>& patches) {
    patches.reserve(set.size());
    for (const PairedSample& s : set) {
      if (s.caption.empty()) {
        throw std::invalid_argument("stage2: empty caption");
      }
      if (s.caption.size() + 1 > lm_.max_len()) {
        throw std::invalid_argument("stage2: caption exceeds decoder length");
      }
      patches.push_back(encoder_.encode(Tensor::row_vector(s.features)));
    }
  };
  prepare(train_set_, train_patches_);
  prepare(heldout_, heldout_patches_);
  lm_hash_ = lm_.hash();
}

void Stage2Trainer::verify_frozen() const {
  if (lm_.hash() != lm_hash_) {
    throw std::runtime_error("stage2: frozen decoder hash mismatch");
  }
}

double Stage2Trainer::heldout_loss() const {
  double sum = 0.0;
  for (std::size_t i = 0; i < heldout_.size(); ++i) {
    sum += generative_loss(bridge_, fc_, lm_, heldout_patches_[i],
                           heldout_[i].caption)
               .item();
  }
  return sum / static_cast<double>(heldout_.size());
}

bool Stage2Trainer::step() {
  if (step_ >= cfg_.train.stage2_steps) return false;
  const std::size_t batch =
      std::min<std::size_t>(cfg_.train.stage2_batch_size, train_set_.size());
  const std::vector<std::size_t> ids =
      rng_.sample_without_replacement(train_set_.size(), batch);
  GradTape tape;
  std::vector<Tensor> parts;
  parts.reserve(batch);
  for (std::size_t id : ids) {
    parts.push_back(generative_loss(bridge_, fc_, lm_, train_patches_[id],
                                    train_set_[id].caption));
  }
  const Tensor loss = mean_all(concat_rows(parts));
  tape.backward(loss);
  adam_.clip_gradients(cfg_.train.max_grad_norm);
  adam_.step(cosine_lr(step_, std::max<std::size_t>(cfg_.train.stage2_steps, 1),
                       cfg_.train.peak_lr));
  report_.curve.push_back({step_, "generative", loss.item()});
  ++step_;
  return true;
}

void Stage2Trainer::run() {
  const auto t0 = std::chrono::steady_clock::now();
  if (!report_.stage2_initial_lm) report_.stage2_initial_lm = heldout_loss();
  while (step()) {
  }
  verify_frozen();
  report_.stage2_final_lm = heldout_loss();
  report_.wall_clock_seconds +=
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
}

void Stage2Trainer::save_checkpoint(const std::string& path) const {
  CheckpointWriter w(path);
  write_checkpoint_header(w, kCheckpointStage2);
  w.u64(encoder_.hash());
  w.u64(lm_hash_);
  w.u64(step_);
  w.str(rng_.save_state());
  write_named_params(w, bridge_.named_params());
  write_named_params(w, {{"fc.w", fc_.w}, {"fc.b", fc_.b}});
  adam_.save(w);
  report_.save(w);
  w.close();
}

void Stage2Trainer::load_checkpoint(const std::string& path) {
  CheckpointReader r(path);
  read_checkpoint_header(r, kCheckpointStage2);
  if (r.u64() != encoder_.hash()) {
    throw std::runtime_error("checkpoint: frozen encoder mismatch");
  }
  if (r.u64() != lm_hash_) {
    throw std::runtime_error("checkpoint: frozen decoder mismatch");
  }
  step_ = r.u64();
  rng_.load_state(r.str());
  read_named_params(r, bridge_.named_params());
  read_named_params(r, {{"fc.w", fc_.w}, {"fc.b", fc_.b}});
  adam_.load(r);
  report_.load(r);
}

// ---- evaluation ----

namespace {

// Indices of the k best candidates by score, ties resolved toward the
// lower index (stable order from the iota base).
std::vector<std::size_t> top_k(
    std::size_t n, std::size_t k,
    const std::function<double(std::size_t)>& score) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) {
                     return score(a) > score(b);
                   });
  order.resize(k);
  return order;
}

// Position of `truth` after reranking `shortlist` by match score
// (descending, stable); n when the truth is not in the shortlist.
std::size_t reranked_position(
    std::vector<std::size_t> shortlist, std::size_t truth, std::size_t n,
    const std::function<double(std::size_t)>& match) {
  std::stable_sort(shortlist.begin(), shortlist.end(),
                   [&](std::size_t a, std::size_t b) {
                     return match(a) > match(b);
                   });
  for (std::size_t pos = 0; pos < shortlist.size(); ++pos) {
    if (shortlist[pos] == truth) return pos;
  }
  return n;
}

std::size_t eval_thread_count() {
  const char* env = std::getenv("NEVLAB_THREADS");
  if (env == nullptr) return 1;
  const long v = std::strtol(env, nullptr, 10);
  return v > 1 ? static_cast<std::size_t>(v) : 1;
}

}  // namespace

RetrievalResult eval_retrieval_from_scores(
    const std::vector<std::vector<double>>& sims, std::size_t k_candidates,
    const std::function<double(std::size_t, std::size_t)>& match_score) {
  const std::size_t n = sims.size();
  if (n < 2) throw std::invalid_argument("eval: need at least 2 pairs");
  for (const auto& row : sims) {
    if (row.size() != n) {
      throw std::invalid_argument("eval: similarity matrix must be square");
    }
  }
  const std::size_t k =
      std::min(k_candidates == 0 ? n : k_candidates, n);

  RetrievalResult res;
  double hit1_i2t = 0, hit5_i2t = 0, hit1_t2i = 0, hit5_t2i = 0;
  for (std::size_t i = 0; i < n; ++i) {
    auto shortlist =
        top_k(n, k, [&](std::size_t j) { return sims[i][j]; });
    const std::size_t pos = reranked_position(
        std::move(shortlist), i, n,
        [&](std::size_t j) { return match_score(i, j); });
    hit1_i2t += pos == 0 ? 1.0 : 0.0;
    hit5_i2t += pos < 5 ? 1.0 : 0.0;
  }
  for (std::size_t j = 0; j < n; ++j) {
    auto shortlist =
        top_k(n, k, [&](std::size_t i) { return sims[i][j]; });
    const std::size_t pos = reranked_position(
        std::move(shortlist), j, n,
        [&](std::size_t i) { return match_score(i, j); });
    hit1_t2i += pos == 0 ? 1.0 : 0.0;
    hit5_t2i += pos < 5 ? 1.0 : 0.0;
  }
  const double dn = static_cast<double>(n);
  res.r1_i2t = hit1_i2t / dn;
  res.r5_i2t = hit5_i2t / dn;
  res.r1_t2i = hit1_t2i / dn;
  res.r5_t2i = hit5_t2i / dn;
  return res;
}

RetrievalResult eval_retrieval(const BridgeModel& bridge,
                               const FrozenImageEncoder& encoder,
                               const std::vector<PairedSample>& samples,
                               const std::vector<std::vector<int>>& concept_ids,
                               const TrainConfig& cfg) {
  const std::size_t n = samples.size();
  if (n < 2) throw std::invalid_argument("eval: need at least 2 pairs");
  if (concept_ids.size() != n) {
    throw std::invalid_argument("eval: concept list size mismatch");
  }
  for (const PairedSample& s : samples) {
    if (s.is_noisy) {
      throw std::invalid_argument("eval: eval set must be clean");
    }
  }

  std::vector<Tensor> patches, image_queries, text_rows;
  patches.reserve(n);
  image_queries.reserve(n);
  text_rows.reserve(n);
  for (const PairedSample& s : samples) {
    patches.push_back(encoder.encode(Tensor::row_vector(s.features)));
    image_queries.push_back(bridge.encode_image(patches.back()).itc_image);
    std::vector<int> cls_text;
    cls_text.reserve(s.caption.size() + 1);
    cls_text.push_back(Vocab::kCls);
    cls_text.insert(cls_text.end(), s.caption.begin(), s.caption.end());
    text_rows.push_back(bridge.encode_text(cls_text).itc_text);
  }
  const SimilarityMatrix sm = similarity_matrix(
      image_queries, concat_rows(text_rows), cfg.tau, cfg.pooling);
  std::vector<std::vector<double>> sims(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) sims[i][j] = sm.s.data()[i * n + j];
  }

  // Collect the (image, text) pairs the reranker will score: both
  // shortlists, deduplicated, in deterministic order.
  const std::size_t k =
      std::min(cfg.eval_candidates == 0 ? n : cfg.eval_candidates, n);
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  std::unordered_map<std::size_t, std::size_t> index;  // i*n+j -> pos
  const auto add_pair = [&](std::size_t i, std::size_t j) {
    const std::size_t key = i * n + j;
    if (index.emplace(key, pairs.size()).second) pairs.emplace_back(i, j);
  };
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j :
         top_k(n, k, [&](std::size_t c) { return sims[i][c]; })) {
      add_pair(i, j);
    }
  }
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t i :
         top_k(n, k, [&](std::size_t c) { return sims[c][j]; })) {
      add_pair(i, j);
    }
  }

  // Match log-odds, mirroring the matching loss: two-class logits
  // averaged over the query rows, positive minus negative.
  const auto score_pair = [&](std::size_t i, std::size_t j) {
    const ForwardOutput out = bridge.forward_multimodal(
        patches[i], concept_ids[i], samples[j].caption,
        MaskKind::bidirectional);
    const Tensor pooled = colwise_mean(bridge.itm_logits(out.query_states));
    return pooled.data()[1] - pooled.data()[0];
  };

  std::vector<double> scores(pairs.size(), 0.0);
  const std::size_t threads = std::min(eval_thread_count(), pairs.size());
  if (threads <= 1) {
    for (std::size_t p = 0; p < pairs.size(); ++p) {
      scores[p] = score_pair(pairs[p].first, pairs[p].second);
    }
  } else {
    // Fixed contiguous shards into a preallocated buffer keep the result
    // independent of the thread count.
    std::vector<std::thread> pool;
    pool.reserve(threads);
    const std::size_t chunk = (pairs.size() + threads - 1) / threads;
    for (std::size_t t = 0; t < threads; ++t) {
      const std::size_t lo = t * chunk;
      const std::size_t hi = std::min(lo + chunk, pairs.size());
      if (lo >= hi) break;
      pool.emplace_back([&, lo, hi] {
        for (std::size_t p = lo; p < hi; ++p) {
          scores[p] = score_pair(pairs[p].first, pairs[p].second);
        }
      });
    }
    for (auto& th : pool) th.join();
  }

  const auto lookup = [&](std::size_t i, std::size_t j) {
    return scores[index.at(i * n + j)];
  };
  return eval_retrieval_from_scores(sims, k, lookup);
}

// ---- ablation ----

std::vector<AblationRow> ablate(
    const PipelineConfig& cfg, const std::vector<PairedSample>& train_set,
    const std::vector<std::vector<int>>& train_concepts,
    const std::vector<PairedSample>& eval_set,
    const std::vector<std::vector<int>>& eval_concepts) {
  const std::vector<Variant> variants = {
      Variant::full, Variant::no_noise_adaptation, Variant::no_concepts};
  const std::vector<std::vector<int>> empty_concepts(eval_set.size());
  std::vector<AblationRow> rows;
  rows.reserve(variants.size());
  for (Variant v : variants) {
    Stage1Trainer trainer(cfg, train_set, train_concepts, v);
    trainer.run();
    const auto& cons =
        v == Variant::no_concepts ? empty_concepts : eval_concepts;
    AblationRow row;
    row.name = variant_name(v);
    row.retrieval = eval_retrieval(trainer.model(), trainer.encoder(),
                                   eval_set, cons, cfg.train);
    row.auc = trainer.report().auc;
    rows.push_back(std::move(row));
  }
  return rows;
}

// ---- artifact writers ----

void save_revised_dataset(
    const std::vector<PairedSample>& samples,
    const std::vector<std::vector<int>>& captions,
    const std::vector<std::optional<std::vector<int>>>& archived,
    const std::string& path) {
  if (captions.size() != samples.size() || archived.size() != samples.size()) {
    throw std::invalid_argument("revised dataset: size mismatch");
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("revised dataset: cannot open " + path);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const PairedSample& s = samples[i];
    nlohmann::ordered_json j;
    j["id"] = s.id;
    j["features"] = s.features;
    j["caption"] = captions[i];
    if (archived[i]) j["original_caption"] = *archived[i];
    j["true_objects"] = s.true_objects;
    j["is_noisy"] = s.is_noisy;
    j["dropped"] = s.dropped;
    out << j.dump() << '\n';
  }
  if (!out) {
    throw std::runtime_error("revised dataset: write failed for " + path);
  }
}

void save_noise_estimates(const std::vector<PairedSample>& samples,
                          const std::vector<double>& losses,
                          const std::vector<double>& epsilon,
                          const std::vector<double>& omega,
                          const std::string& path) {
  if (losses.size() != samples.size() || epsilon.size() != samples.size() ||
      omega.size() != samples.size()) {
    throw std::invalid_argument("noise estimates: size mismatch");
  }
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    arr.push_back({{"id", samples[i].id},
                   {"loss", losses[i]},
                   {"epsilon", epsilon[i]},
                   {"omega", omega[i]}});
  }
  nlohmann::ordered_json j;
  j["samples"] = std::move(arr);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("noise estimates: cannot open " + path);
  out << j.dump(2) << '\n';
  if (!out) {
    throw std::runtime_error("noise estimates: write failed for " + path);
  }
}

// ---- gradient-check harness ----

namespace {

Tensor random_matrix(Rng& rng, std::size_t rows, std::size_t cols,
                     double scale, bool requires_grad) {
  std::vector<double> data(rows * cols);
  for (double& x : data) x = scale * rng.normal();
  return Tensor::from_data(rows, cols, std::move(data), requires_grad);
}

void fold_in(GradCheckResult& r, double err) {
  r.max_rel_error = std::max(r.max_rel_error, err);
  ++r.instances;
}

}  // namespace

std::vector<GradCheckResult> run_gradient_checks(std::size_t instances,
                                                 std::uint64_t seed,
                                                 double h) {
  std::vector<GradCheckResult> out = {
      {"itc", 0.0, 0}, {"nitc", 0.0, 0}, {"citg", 0.0, 0},
      {"citm", 0.0, 0}, {"generative", 0.0, 0}};
  Rng rng(seed);
  for (std::size_t inst = 0; inst < instances; ++inst) {
    // Contrastive losses: leaves are raw embeddings, normalized inside
    // the closure so the normalization gradient is exercised too.
    const std::size_t b = 2 + rng.uniform_index(4);
    const std::size_t d = 3 + rng.uniform_index(3);
    const double tau = 0.5 + rng.uniform();
    Tensor v = random_matrix(rng, b, d, 1.0, true);
    Tensor t = random_matrix(rng, b, d, 1.0, true);
    const std::vector<Tensor> vt = {v, t};
    fold_in(out[0],
            grad_check_many(
                [&] {
                  return itc_loss(similarity_matrix(
                      l2_normalize_rows(v), l2_normalize_rows(t), tau));
                },
                vt, h));

    std::vector<double> omega(b, 0.0);
    if (inst % 3 == 1) {
      std::fill(omega.begin(), omega.end(), 0.9);
    } else if (inst % 3 == 2) {
      for (double& w : omega) w = rng.uniform(0.0, 0.9);
    }
    const bool strict = inst % 2 == 1;
    fold_in(out[1],
            grad_check_many(
                [&] {
                  return nitc_loss(
                      {similarity_matrix(l2_normalize_rows(v),
                                         l2_normalize_rows(t), tau),
                       omega},
                      strict);
                },
                vt, h));

    // Bridge-based losses: every parameter block, a couple of
    // coordinates each.
    BridgeConfig bc;
    bc.num_queries = 2;
    bc.d_model = 8;
    bc.num_layers = 1 + inst % 2;
    bc.num_heads = 2;
    bc.d_itc = 4;
    bc.enc_dim = 5;
    bc.vocab_size = 12;
    bc.max_positions = 16;
    bc.seed = seed * 1000 + inst * 7 + 1;
    const BridgeModel model(bc);
    const std::vector<Tensor> leaves = model.params();
    const Tensor feats = random_matrix(rng, 3, 5, 1.0, false);
    std::vector<int> concepts;
    for (std::size_t c = 0; c < inst % 3; ++c) {
      concepts.push_back(7 + static_cast<int>(rng.uniform_index(5)));
    }
    std::vector<int> text;
    const std::size_t tlen = 1 + rng.uniform_index(3);
    for (std::size_t c = 0; c < tlen; ++c) {
      text.push_back(static_cast<int>(rng.uniform_index(12)));
    }
    fold_in(out[2],
            grad_check_many(
                [&] { return citg_loss(model, feats, concepts, text); },
                leaves, h, 2));

    const Tensor feats2 = random_matrix(rng, 2, 5, 1.0, false);
    std::vector<int> text2;
    for (std::size_t c = 0; c < 1 + rng.uniform_index(2); ++c) {
      text2.push_back(static_cast<int>(rng.uniform_index(12)));
    }
    const std::vector<Tensor> pair_feats = {feats, feats2};
    const std::vector<std::vector<int>> pair_cons = {concepts, {}};
    const std::vector<std::vector<int>> pair_texts = {text, text2};
    const HardNegatives negs{{1, 0}, {1, 0}};
    fold_in(out[3],
            grad_check_many(
                [&] {
                  return citm_loss(model, pair_feats, pair_cons, pair_texts,
                                   negs, 3);
                },
                leaves, h, 2));

    FrozenDecoderLM lm(12, 6, 1, 2, 8, seed + inst);
    lm.freeze();
    const LlmProjection fc = LlmProjection::init(8, 6, inst + 3);
    std::vector<Tensor> gen_leaves = leaves;
    gen_leaves.push_back(fc.w);
    gen_leaves.push_back(fc.b);
    fold_in(out[4],
            grad_check_many(
                [&] { return generative_loss(model, fc, lm, feats, text); },
                gen_leaves, h, 2));
  }
  return out;
}

}  // namespace nevlab
