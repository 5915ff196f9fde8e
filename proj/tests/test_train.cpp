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
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "nevlab/checkpoint.hpp"

using namespace nevlab;

namespace {

std::string temp_path(const std::string& stem) {
  return (std::filesystem::temp_directory_path() / stem).string();
}

// Small enough that a full stage-1 run takes well under a second.
PipelineConfig micro_config() {
  PipelineConfig cfg;
  cfg.world.num_objects = 10;
  cfg.world.objects_per_image = 2;
  cfg.world.noise_rate = 0.3;
  cfg.world.drop_rate = 0.2;
  cfg.world.dataset_size = 24;
  cfg.world.seed = 3;
  cfg.bridge.num_queries = 2;
  cfg.bridge.d_model = 16;
  cfg.bridge.num_layers = 1;
  cfg.bridge.num_heads = 2;
  cfg.bridge.d_itc = 8;
  cfg.bridge.max_positions = 32;
  cfg.bridge.seed = 5;
  cfg.train.batch_size = 6;
  cfg.train.stage2_batch_size = 4;
  cfg.train.warmup_steps = 3;
  cfg.train.nitc_steps = 4;
  cfg.train.post_refresh_steps = 2;
  cfg.train.stage2_steps = 4;
  cfg.train.num_concepts = 2;
  cfg.train.max_caption_len = 4;
  cfg.train.eval_candidates = 5;
  cfg.train.seed = 11;
  cfg.encoder.num_patches = 3;
  cfg.encoder.enc_dim = 12;
  cfg.encoder.seed = 7;
  cfg.decoder.d_llm = 12;
  cfg.decoder.layers = 1;
  cfg.decoder.heads = 2;
  cfg.decoder.max_len = 12;
  cfg.decoder.seed = 9;
  return cfg;
}

// The stub embeds raw features of width num_objects, so it always gets
// the full noun list even when the corpus kept only a subset.
RetrievalVlmStub world_stub(std::size_t num_objects) {
  std::vector<std::string> nouns;
  nouns.reserve(num_objects);
  for (std::size_t o = 0; o < num_objects; ++o) {
    nouns.push_back(Vocab::object_noun(o));
  }
  return RetrievalVlmStub(nouns);
}

struct MicroFixture {
  PipelineConfig cfg = micro_config();
  std::vector<PairedSample> data;
  std::vector<std::vector<int>> concepts;
  Vocab vocab = Vocab::build(10);

  MicroFixture() {
    data = generate_dataset(cfg.world);
    const ConceptCorpus corpus =
        corpus_from_dataset(data, cfg.world.num_objects, 1);
    const RetrievalVlmStub stub = world_stub(cfg.world.num_objects);
    concepts =
        assign_concepts(data, corpus, stub, vocab, cfg.train.num_concepts);
  }
};

void swallow_logs(Stage1Trainer& t) {
  t.set_log([](const std::string&) {});
}

}  // namespace

// ---- schedule ----

TEST_CASE("cosine schedule hits its endpoints exactly") {
  CHECK(cosine_lr(0, 10, 3.0) == 3.0);
  CHECK(cosine_lr(10, 10, 3.0) == 0.0);
  CHECK(cosine_lr(5, 10, 3.0) == doctest::Approx(1.5).epsilon(1e-12));
}

TEST_CASE("cosine schedule is monotone non-increasing") {
  double prev = cosine_lr(0, 100, 1.0);
  for (std::size_t t = 1; t <= 100; ++t) {
    const double lr = cosine_lr(t, 100, 1.0);
    CHECK(lr <= prev);
    prev = lr;
  }
}

TEST_CASE("cosine schedule rejects out-of-range steps") {
  CHECK_THROWS_WITH_AS(cosine_lr(11, 10, 1.0),
                       "cosine_lr: step beyond schedule",
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(cosine_lr(0, 0, 1.0), "cosine_lr: total must be >= 1",
                       std::invalid_argument);
}

// ---- optimizer ----

TEST_CASE("adamw leaves parameters alone with zero gradient and no decay") {
  Tensor p = Tensor::from_data(1, 2, {1.5, -2.5}, true);
  AdamW opt({p}, 0.9, 0.999, 1e-8, 0.0);
  opt.step(0.1);
  CHECK(p.data()[0] == 1.5);
  CHECK(p.data()[1] == -2.5);
}

TEST_CASE("adamw single-step closed form with unit gradient") {
  Tensor p = Tensor::from_data(1, 1, {2.0}, true);
  p.grad().assign(1, 1.0);
  AdamW opt({p}, 0.9, 0.999, 1e-8, 0.0);
  opt.step(0.1);
  // Bias correction makes both moment estimates exactly one on the first
  // step, so the update is lr / (1 + eps).
  const double expected = 2.0 - 0.1 * 1.0 / (std::sqrt(1.0) + 1e-8);
  CHECK(p.data()[0] == expected);
  CHECK(!p.has_grad());  // consumed
}

TEST_CASE("adamw decoupled decay acts alone when the gradient is zero") {
  Tensor p = Tensor::from_data(1, 1, {3.0}, true);
  AdamW opt({p}, 0.9, 0.999, 1e-8, 0.05);
  opt.step(0.1);
  CHECK(p.data()[0] == 3.0 - 0.1 * 0.05 * 3.0);
}

TEST_CASE("adamw aborts on a non-finite gradient without touching state") {
  Tensor p = Tensor::from_data(1, 1, {2.0}, true);
  p.grad().assign(1, std::nan(""));
  AdamW opt({p}, 0.9, 0.999, 1e-8, 0.0);
  CHECK_THROWS_WITH_AS(opt.step(0.1), "diverged", std::runtime_error);
  CHECK(p.data()[0] == 2.0);
  CHECK(opt.steps_taken() == 0);
}

TEST_CASE("adamw skips frozen parameters") {
  Tensor trainable = Tensor::from_data(1, 1, {1.0}, true);
  Tensor frozen = Tensor::from_data(1, 1, {1.0}, false);
  AdamW opt({trainable, frozen}, 0.9, 0.999, 1e-8, 0.5);
  opt.step(0.1);
  CHECK(trainable.data()[0] != 1.0);
  CHECK(frozen.data()[0] == 1.0);
}

TEST_CASE("gradient clipping rescales to the requested global norm") {
  Tensor a = Tensor::from_data(1, 2, {0.0, 0.0}, true);
  Tensor b = Tensor::from_data(1, 1, {0.0}, true);
  a.grad() = {3.0, 0.0};
  b.grad() = {4.0};  // global norm 5
  AdamW opt({a, b}, 0.9, 0.999, 1e-8, 0.0);
  opt.clip_gradients(1.0);
  const double norm = std::sqrt(a.grad()[0] * a.grad()[0] +
                                a.grad()[1] * a.grad()[1] +
                                b.grad()[0] * b.grad()[0]);
  CHECK(norm == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(a.grad()[0] == doctest::Approx(0.6).epsilon(1e-12));

  a.grad() = {0.1, 0.0};
  b.grad() = {0.0};
  opt.clip_gradients(1.0);  // already inside the ball: untouched
  CHECK(a.grad()[0] == 0.1);
  opt.clip_gradients(0.0);  // disabled knob
  CHECK(a.grad()[0] == 0.1);
}

// ---- checkpoint primitives ----

TEST_CASE("checkpoint scalars and vectors round-trip bitwise") {
  const std::string path = temp_path("nevlab_ckpt_prim.bin");
  {
    CheckpointWriter w(path);
    write_checkpoint_header(w, kCheckpointStage1);
    w.u64(0xdeadbeefcafe1234ull);
    w.f64(-0.1);
    w.str("hello world");
    w.doubles({1.0, -2.5, 1e-300});
    w.ints({-7, 0, 1 << 20});
    w.close();
  }
  CheckpointReader r(path);
  read_checkpoint_header(r, kCheckpointStage1);
  CHECK(r.u64() == 0xdeadbeefcafe1234ull);
  CHECK(r.f64() == -0.1);
  CHECK(r.str() == "hello world");
  CHECK(r.doubles() == std::vector<double>{1.0, -2.5, 1e-300});
  CHECK(r.ints() == std::vector<int>{-7, 0, 1 << 20});
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint header rejects corruption") {
  const std::string bad_magic = temp_path("nevlab_ckpt_badmagic.bin");
  {
    std::ofstream out(bad_magic, std::ios::binary);
    out << "XXXXjunkjunk";
  }
  {
    CheckpointReader r(bad_magic);
    CHECK_THROWS_WITH_AS(read_checkpoint_header(r, kCheckpointStage1),
                         "checkpoint: bad magic", std::runtime_error);
  }
  std::filesystem::remove(bad_magic);

  const std::string bad_version = temp_path("nevlab_ckpt_badver.bin");
  {
    std::ofstream out(bad_version, std::ios::binary);
    out << "NVLP";
    const std::uint32_t v = 999;
    out.write(reinterpret_cast<const char*>(&v), 4);
    out.put('\1');
  }
  {
    CheckpointReader r(bad_version);
    CHECK_THROWS_WITH_AS(read_checkpoint_header(r, kCheckpointStage1),
                         "checkpoint: unsupported version", std::runtime_error);
  }
  std::filesystem::remove(bad_version);

  const std::string truncated = temp_path("nevlab_ckpt_trunc.bin");
  {
    std::ofstream out(truncated, std::ios::binary);
    out << "NVLP";  // stops before the version field
  }
  {
    CheckpointReader r(truncated);
    CHECK_THROWS_WITH_AS(read_checkpoint_header(r, kCheckpointStage1),
                         "checkpoint: truncated file", std::runtime_error);
  }
  std::filesystem::remove(truncated);

  const std::string wrong_kind = temp_path("nevlab_ckpt_kind.bin");
  {
    CheckpointWriter w(wrong_kind);
    write_checkpoint_header(w, kCheckpointStage1);
    w.close();
  }
  {
    CheckpointReader r(wrong_kind);
    CHECK_THROWS_WITH_AS(read_checkpoint_header(r, kCheckpointStage2),
                         "checkpoint: wrong checkpoint kind",
                         std::runtime_error);
  }
  std::filesystem::remove(wrong_kind);
}

TEST_CASE("named parameter blocks verify identity on load") {
  const std::string path = temp_path("nevlab_ckpt_params.bin");
  Tensor a = Tensor::from_data(2, 2, {1, 2, 3, 4}, true);
  {
    CheckpointWriter w(path);
    write_named_params(w, {{"a", a}});
    w.close();
  }
  Tensor same = Tensor::zeros(2, 2, true);
  CheckpointReader r1(path);
  read_named_params(r1, {{"a", same}});
  CHECK(same.data() == a.data());

  Tensor renamed = Tensor::zeros(2, 2, true);
  CheckpointReader r2(path);
  CHECK_THROWS_WITH_AS(read_named_params(r2, {{"b", renamed}}),
                       "checkpoint: parameter mismatch", std::runtime_error);

  Tensor reshaped = Tensor::zeros(4, 1, true);
  CheckpointReader r3(path);
  CHECK_THROWS_WITH_AS(read_named_params(r3, {{"a", reshaped}}),
                       "checkpoint: parameter mismatch", std::runtime_error);
  std::filesystem::remove(path);
}

// ---- metrics report ----

TEST_CASE("metrics report serializes deterministically and round-trips") {
  MetricsReport rep;
  rep.curve = {{0, "itc", 1.25}, {0, "total", 3.5}, {1, "nitc", 0.75}};
  rep.auc = 0.875;
  RetrievalResult rr;
  rr.r1_i2t = 0.5;
  rr.r5_i2t = 0.75;
  rr.r1_t2i = 0.25;
  rr.r5_t2i = 1.0;
  rep.retrieval = rr;
  rep.stage2_initial_lm = 2.5;
  rep.refresh_replaced = 3;
  rep.wall_clock_seconds = 123.0;  // must not leak into the canonical form

  const std::string j = rep.to_json();
  MetricsReport copy = rep;
  copy.wall_clock_seconds = 9999.0;
  CHECK(copy.to_json() == j);  // wall clock excluded
  CHECK(j.find("wall_clock") == std::string::npos);
  CHECK(j.find("\"auc\": 0.875") != std::string::npos);
  CHECK(j.find("\"mean_r1\": 0.375") != std::string::npos);

  const std::string path = temp_path("nevlab_metrics_roundtrip.bin");
  {
    CheckpointWriter w(path);
    rep.save(w);
    w.close();
  }
  MetricsReport loaded;
  {
    CheckpointReader r(path);
    loaded.load(r);
  }
  CHECK(loaded.to_json() == j);
  std::filesystem::remove(path);

  const std::string csv_path = temp_path("nevlab_metrics.csv");
  rep.write_csv(csv_path);
  std::ifstream in(csv_path);
  std::stringstream ss;
  ss << in.rdbuf();
  CHECK(ss.str() == "step,component,value\n0,itc,1.25\n0,total,3.5\n"
                    "1,nitc,0.75\n");
  std::filesystem::remove(csv_path);
}

// ---- concept assignment ----

TEST_CASE("concept assignment maps retrievals to vocab ids") {
  const MicroFixture fx;
  CHECK(fx.concepts.size() == fx.data.size());
  const ConceptCorpus corpus =
      corpus_from_dataset(fx.data, fx.cfg.world.num_objects, 1);
  const RetrievalVlmStub stub = world_stub(fx.cfg.world.num_objects);
  for (std::size_t i = 0; i < fx.data.size(); ++i) {
    CHECK(fx.concepts[i].size() ==
          std::min<std::size_t>(2, corpus.size()));
    // Mirror the retrieval by hand for this sample.
    const ConceptRetrieval ret = retrieve_concepts(
        fx.data[i].id, Tensor::row_vector(fx.data[i].features), corpus, stub,
        std::min<std::size_t>(2, corpus.size()));
    for (std::size_t c = 0; c < ret.concepts.size(); ++c) {
      CHECK(fx.concepts[i][c] == fx.vocab.id(ret.concepts[c]));
    }
  }
}

TEST_CASE("concept ids from cached retrievals match direct assignment") {
  const MicroFixture fx;
  const ConceptCorpus corpus =
      corpus_from_dataset(fx.data, fx.cfg.world.num_objects, 1);
  const RetrievalVlmStub stub = world_stub(fx.cfg.world.num_objects);
  std::vector<ConceptRetrieval> cached;
  for (const PairedSample& s : fx.data) {
    cached.push_back(retrieve_concepts(s.id, Tensor::row_vector(s.features),
                                       corpus, stub, 2));
  }
  CHECK(concept_ids_from_retrievals(cached, fx.data, fx.vocab) == fx.concepts);

  cached.pop_back();
  CHECK_THROWS_AS(concept_ids_from_retrievals(cached, fx.data, fx.vocab),
                  std::invalid_argument);
}

// ---- stage 1 ----

TEST_CASE("stage-1 constructor validates its inputs") {
  const MicroFixture fx;
  PipelineConfig cfg = fx.cfg;

  cfg.train.batch_size = 1;
  CHECK_THROWS_WITH_AS(Stage1Trainer(cfg, fx.data, fx.concepts),
                       "train: batch size must be >= 2", std::invalid_argument);

  cfg = fx.cfg;
  std::vector<PairedSample> tiny(fx.data.begin(), fx.data.begin() + 1);
  CHECK_THROWS_WITH_AS(
      Stage1Trainer(cfg, tiny, {fx.concepts.front()}),
      "train: dataset must have at least 2 samples", std::invalid_argument);

  auto short_concepts = fx.concepts;
  short_concepts.pop_back();
  CHECK_THROWS_WITH_AS(Stage1Trainer(cfg, fx.data, short_concepts),
                       "train: concept list size mismatch",
                       std::invalid_argument);

  auto fat_concepts = fx.concepts;
  fat_concepts[0] = {7, 8, 9, 10};
  CHECK_THROWS_WITH_AS(Stage1Trainer(cfg, fx.data, fat_concepts),
                       "train: too many concepts for a sample",
                       std::invalid_argument);

  auto broken = fx.data;
  broken[3].caption.clear();
  CHECK_THROWS_WITH_AS(Stage1Trainer(cfg, broken, fx.concepts),
                       "train: empty caption", std::invalid_argument);
}

TEST_CASE("stage-1 first step matches a hand-assembled batch") {
  const MicroFixture fx;
  Stage1Trainer trainer(fx.cfg, fx.data, fx.concepts);
  swallow_logs(trainer);
  trainer.step();

  // Replay the exact same draw, forward passes, and loss assembly from
  // scratch with an independently constructed (same-seed) model.
  const BridgeModel bridge(resolved_bridge_config(fx.cfg));
  const FrozenImageEncoder enc(fx.cfg.world.raw_dim(),
                               fx.cfg.encoder.num_patches,
                               fx.cfg.encoder.enc_dim, fx.cfg.encoder.seed);
  Rng rng(fx.cfg.train.seed);
  const auto ids =
      rng.sample_without_replacement(fx.data.size(), fx.cfg.train.batch_size);
  std::vector<Tensor> queries, rows, feats;
  std::vector<std::vector<int>> caps, cons;
  for (std::size_t id : ids) {
    const Tensor patch = enc.encode(Tensor::row_vector(fx.data[id].features));
    feats.push_back(patch);
    caps.push_back(fx.data[id].caption);
    cons.push_back(fx.concepts[id]);
    queries.push_back(bridge.encode_image(patch).itc_image);
    std::vector<int> cls = {Vocab::kCls};
    cls.insert(cls.end(), fx.data[id].caption.begin(),
               fx.data[id].caption.end());
    rows.push_back(bridge.encode_text(cls).itc_text);
  }
  const SimilarityMatrix sims =
      similarity_matrix(queries, concat_rows(rows), fx.cfg.train.tau,
                        fx.cfg.train.pooling);
  const double manual_itc = itc_loss(sims).item();
  const HardNegatives negs = mine_hard_negatives(sims, rng);
  const double manual_citm =
      citm_loss(bridge, feats, cons, caps, negs, fx.cfg.train.num_concepts)
          .item();
  std::vector<Tensor> parts;
  for (std::size_t b = 0; b < ids.size(); ++b) {
    std::vector<int> text = caps[b];
    text.push_back(Vocab::kPad);
    parts.push_back(citg_loss(bridge, feats[b], cons[b], text));
  }
  const double manual_citg = mean_all(concat_rows(parts)).item();

  CHECK(trainer.last_contrastive() == manual_itc);
  CHECK(trainer.last_citm() == manual_citm);
  CHECK(trainer.last_citg() == manual_citg);
  CHECK(trainer.last_total() == manual_itc + manual_citg + manual_citm);
}

TEST_CASE("stage-1 total loss is the plain sum of its components") {
  const MicroFixture fx;
  Stage1Trainer trainer(fx.cfg, fx.data, fx.concepts);
  swallow_logs(trainer);
  trainer.run();
  // Group the curve back per optimizer step and re-add the components.
  std::map<std::uint64_t, std::map<std::string, double>> by_step;
  for (const LossPoint& p : trainer.report().curve) {
    by_step[p.step][p.component] = p.value;
  }
  CHECK(by_step.size() == trainer.optimizer_steps());
  for (const auto& [step, comps] : by_step) {
    const double contrastive =
        comps.count("itc") ? comps.at("itc") : comps.at("nitc");
    CHECK(comps.at("total") ==
          contrastive + comps.at("citg") + comps.at("citm"));
  }
}

TEST_CASE("stage-1 full run walks every phase and produces noise artifacts") {
  const MicroFixture fx;
  Stage1Trainer trainer(fx.cfg, fx.data, fx.concepts);
  swallow_logs(trainer);
  CHECK(trainer.phase() == Stage1Trainer::Phase::warmup);
  trainer.run();
  CHECK(trainer.phase() == Stage1Trainer::Phase::done);
  CHECK(!trainer.step());  // idempotent once done
  CHECK(trainer.optimizer_steps() == 3 + 4 + 2);
  CHECK(trainer.report().curve.size() == 9 * 4);

  const std::size_t n = fx.data.size();
  REQUIRE(trainer.epsilon().size() == n);
  REQUIRE(trainer.omega().size() == n);
  REQUIRE(trainer.per_sample_losses().size() == n);
  for (std::size_t i = 0; i < n; ++i) {
    CHECK(trainer.epsilon()[i] >= 0.0);
    CHECK(trainer.epsilon()[i] <= 1.0);
    CHECK(trainer.omega()[i] ==
          std::min(fx.cfg.train.lambda * trainer.epsilon()[i],
                   fx.cfg.train.omega_max));
  }
  CHECK(trainer.report().auc.has_value());
  CHECK(*trainer.report().auc >= 0.0);
  CHECK(*trainer.report().auc <= 1.0);

  // Refresh bookkeeping: a caption was replaced (and the original
  // archived) exactly for the samples flagged past the threshold.
  std::uint64_t replaced = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (trainer.epsilon()[i] > 0.5) {
      CHECK(trainer.archived_captions()[i].has_value());
      CHECK(*trainer.archived_captions()[i] == fx.data[i].caption);
      ++replaced;
    } else {
      CHECK(!trainer.archived_captions()[i].has_value());
      CHECK(trainer.captions()[i] == fx.data[i].caption);
    }
  }
  CHECK(trainer.report().refresh_replaced == replaced);

  // The revised dataset carries the working captions.
  const auto revised = trainer.revised_dataset();
  for (std::size_t i = 0; i < n; ++i) {
    CHECK(revised[i].caption == trainer.captions()[i]);
    CHECK(revised[i].id == fx.data[i].id);
  }

  // Component labels flip from itc to nitc once smoothing is available.
  for (const LossPoint& p : trainer.report().curve) {
    if (p.step < 3) CHECK(p.component != "nitc");
    if (p.step >= 3 && (p.component == "itc" || p.component == "nitc")) {
      CHECK(p.component == "nitc");
    }
  }
}

TEST_CASE("stage-1 seeded runs are bitwise identical") {
  const MicroFixture fx;
  Stage1Trainer a(fx.cfg, fx.data, fx.concepts);
  Stage1Trainer b(fx.cfg, fx.data, fx.concepts);
  swallow_logs(a);
  swallow_logs(b);
  a.run();
  b.run();
  CHECK(a.model().hash() == b.model().hash());
  CHECK(a.report().to_json() == b.report().to_json());
  CHECK(a.epsilon() == b.epsilon());
  for (std::size_t i = 0; i < fx.data.size(); ++i) {
    CHECK(a.captions()[i] == b.captions()[i]);
  }
}

TEST_CASE("stage-1 resume from checkpoint is bitwise equal to straight-through") {
  const MicroFixture fx;
  Stage1Trainer full(fx.cfg, fx.data, fx.concepts);
  swallow_logs(full);
  full.run();

  const std::string path = temp_path("nevlab_stage1_resume.ckpt");
  Stage1Trainer first(fx.cfg, fx.data, fx.concepts);
  swallow_logs(first);
  // Five units land inside the nitc phase, past the noise estimate.
  for (int i = 0; i < 5; ++i) first.step();
  first.save_checkpoint(path);

  Stage1Trainer second(fx.cfg, fx.data, fx.concepts);
  swallow_logs(second);
  second.load_checkpoint(path);
  CHECK(second.model().hash() == first.model().hash());
  second.run();

  CHECK(second.model().hash() == full.model().hash());
  CHECK(second.report().to_json() == full.report().to_json());
  CHECK(second.epsilon() == full.epsilon());
  for (std::size_t i = 0; i < fx.data.size(); ++i) {
    CHECK(second.captions()[i] == full.captions()[i]);
  }
  std::filesystem::remove(path);
}

TEST_CASE("stage-1 checkpoints reject foreign runs") {
  const MicroFixture fx;
  Stage1Trainer trainer(fx.cfg, fx.data, fx.concepts);
  swallow_logs(trainer);
  trainer.step();
  const std::string path = temp_path("nevlab_stage1_guard.ckpt");
  trainer.save_checkpoint(path);

  Stage1Trainer other_variant(fx.cfg, fx.data, fx.concepts,
                              Variant::no_concepts);
  CHECK_THROWS_WITH_AS(other_variant.load_checkpoint(path),
                       "checkpoint: variant mismatch", std::runtime_error);

  PipelineConfig other_enc = fx.cfg;
  other_enc.encoder.seed = 1234;
  Stage1Trainer foreign(other_enc, fx.data, fx.concepts);
  CHECK_THROWS_WITH_AS(foreign.load_checkpoint(path),
                       "checkpoint: frozen encoder mismatch",
                       std::runtime_error);

  std::vector<PairedSample> fewer(fx.data.begin(), fx.data.end() - 1);
  std::vector<std::vector<int>> fewer_cons(fx.concepts.begin(),
                                           fx.concepts.end() - 1);
  Stage1Trainer smaller(fx.cfg, fewer, fewer_cons);
  CHECK_THROWS_WITH_AS(smaller.load_checkpoint(path),
                       "checkpoint: dataset size mismatch",
                       std::runtime_error);
  std::filesystem::remove(path);
}

TEST_CASE("stage-1 without noise adaptation never estimates or refreshes") {
  const MicroFixture fx;
  Stage1Trainer trainer(fx.cfg, fx.data, fx.concepts,
                        Variant::no_noise_adaptation);
  swallow_logs(trainer);
  trainer.run();
  CHECK(trainer.optimizer_steps() == 9);
  CHECK(trainer.epsilon().empty());
  CHECK(trainer.omega().empty());
  CHECK(!trainer.report().auc.has_value());
  CHECK(trainer.report().refresh_replaced == 0);
  for (std::size_t i = 0; i < fx.data.size(); ++i) {
    CHECK(trainer.captions()[i] == fx.data[i].caption);
    CHECK(!trainer.archived_captions()[i].has_value());
  }
  for (const LossPoint& p : trainer.report().curve) {
    CHECK(p.component != "nitc");
  }
}

TEST_CASE("stage-1 without concepts clears every concept list") {
  const MicroFixture fx;
  Stage1Trainer trainer(fx.cfg, fx.data, fx.concepts, Variant::no_concepts);
  swallow_logs(trainer);
  for (const auto& c : trainer.concept_ids()) CHECK(c.empty());
  trainer.run();
  CHECK(trainer.phase() == Stage1Trainer::Phase::done);
  CHECK(trainer.report().auc.has_value());  // noise handling still active
}

TEST_CASE("stage-1 zero-step schedule leaves the model at initialization") {
  const MicroFixture fx;
  PipelineConfig cfg = fx.cfg;
  cfg.train.warmup_steps = 0;
  cfg.train.nitc_steps = 0;
  cfg.train.post_refresh_steps = 0;
  Stage1Trainer trainer(cfg, fx.data, fx.concepts);
  swallow_logs(trainer);
  trainer.run();
  CHECK(trainer.optimizer_steps() == 0);
  CHECK(trainer.model().hash() ==
        BridgeModel(resolved_bridge_config(cfg)).hash());
  CHECK(trainer.epsilon().size() == fx.data.size());
  CHECK(trainer.report().curve.empty());
}

TEST_CASE("noise posteriors are fixed once estimated") {
  // With reestimate_every = 0 the posteriors are computed exactly once,
  // at the warmup/estimate boundary. Stopping a run right after that
  // boundary must leave epsilon and the detection AUC bitwise identical
  // to the completed schedule's.
  const MicroFixture fx;
  Stage1Trainer full(fx.cfg, fx.data, fx.concepts);
  Stage1Trainer cut(fx.cfg, fx.data, fx.concepts);
  swallow_logs(full);
  swallow_logs(cut);
  full.run();
  while (cut.phase() == Stage1Trainer::Phase::warmup ||
         cut.phase() == Stage1Trainer::Phase::estimate) {
    cut.step();
  }
  CHECK(full.epsilon() == cut.epsilon());
  REQUIRE(full.report().auc.has_value());
  REQUIRE(cut.report().auc.has_value());
  CHECK(*full.report().auc == *cut.report().auc);
}

TEST_CASE("stage-1 re-estimation knob refreshes the noise posteriors") {
  const MicroFixture fx;
  PipelineConfig cfg = fx.cfg;
  cfg.train.reestimate_every = 2;
  Stage1Trainer knob(cfg, fx.data, fx.concepts);
  Stage1Trainer fixed(fx.cfg, fx.data, fx.concepts);
  swallow_logs(knob);
  swallow_logs(fixed);
  knob.run();
  fixed.run();
  // Same schedule, but the smoothing rates were recomputed mid-flight;
  // with a changing model the posteriors cannot stay frozen.
  CHECK(knob.optimizer_steps() == fixed.optimizer_steps());
  CHECK(knob.epsilon() != fixed.epsilon());
}

// ---- decoder pre-training and stage 2 ----

namespace {

struct Stage2Fixture {
  MicroFixture fx;
  FrozenDecoderLM lm;
  std::vector<PairedSample> heldout;

  Stage2Fixture()
      : lm(Vocab::build(fx.cfg.world.num_objects).size(), fx.cfg.decoder.d_llm,
           fx.cfg.decoder.layers, fx.cfg.decoder.heads, fx.cfg.decoder.max_len,
           fx.cfg.decoder.seed) {
    std::vector<std::vector<int>> captions;
    for (const PairedSample& s : fx.data) captions.push_back(s.caption);
    pretrain_decoder(lm, captions, 5, 8, 1e-3, 21);
    lm.freeze();
    heldout.assign(fx.data.begin(), fx.data.begin() + 6);
  }
};

}  // namespace

TEST_CASE("decoder pre-training rejects bad inputs and trains otherwise") {
  const MicroFixture fx;
  FrozenDecoderLM lm(17, 12, 1, 2, 12, 9);
  CHECK_THROWS_WITH_AS(pretrain_decoder(lm, {}, 1, 4, 1e-3, 1),
                       "pretrain: no captions", std::invalid_argument);
  CHECK_THROWS_WITH_AS(pretrain_decoder(lm, {{}}, 1, 4, 1e-3, 1),
                       "pretrain: empty caption", std::invalid_argument);
  CHECK_THROWS_WITH_AS(
      pretrain_decoder(lm, {std::vector<int>(12, 7)}, 1, 4, 1e-3, 1),
      "pretrain: caption exceeds decoder length", std::invalid_argument);

  const std::uint64_t before = lm.hash();
  std::vector<std::vector<int>> captions;
  for (const PairedSample& s : fx.data) captions.push_back(s.caption);
  pretrain_decoder(lm, captions, 3, 8, 1e-3, 21);
  CHECK(lm.hash() != before);

  lm.freeze();
  CHECK_THROWS_WITH_AS(pretrain_decoder(lm, captions, 1, 4, 1e-3, 1),
                       "pretrain: decoder already frozen",
                       std::invalid_argument);
}

TEST_CASE("stage-2 requires a frozen decoder and nonempty splits") {
  const MicroFixture fx;
  FrozenDecoderLM thawed(17, 12, 1, 2, 12, 9);
  CHECK_THROWS_WITH_AS(
      Stage2Trainer(fx.cfg, BridgeModel(resolved_bridge_config(fx.cfg)),
                    thawed, fx.data, fx.data),
      "stage2: decoder must be frozen", std::invalid_argument);

  thawed.freeze();
  CHECK_THROWS_WITH_AS(
      Stage2Trainer(fx.cfg, BridgeModel(resolved_bridge_config(fx.cfg)),
                    thawed, {}, fx.data),
      "stage2: empty training set", std::invalid_argument);
  CHECK_THROWS_WITH_AS(
      Stage2Trainer(fx.cfg, BridgeModel(resolved_bridge_config(fx.cfg)),
                    thawed, fx.data, {}),
      "stage2: empty held-out set", std::invalid_argument);
}

TEST_CASE("stage-2 trains the bridge and projection under a fixed decoder") {
  const Stage2Fixture s2;
  Stage2Trainer trainer(s2.fx.cfg,
                        BridgeModel(resolved_bridge_config(s2.fx.cfg)), s2.lm,
                        s2.fx.data, s2.heldout);
  const std::uint64_t bridge_before = trainer.model().hash();
  trainer.run();
  CHECK(trainer.steps_done() == s2.fx.cfg.train.stage2_steps);
  CHECK(trainer.model().hash() != bridge_before);
  CHECK(trainer.decoder().hash() == s2.lm.hash());
  REQUIRE(trainer.report().stage2_initial_lm.has_value());
  REQUIRE(trainer.report().stage2_final_lm.has_value());
  CHECK(std::isfinite(*trainer.report().stage2_initial_lm));
  CHECK(std::isfinite(*trainer.report().stage2_final_lm));
  CHECK(trainer.report().curve.size() == s2.fx.cfg.train.stage2_steps);
}

TEST_CASE("stage-2 zero steps keeps everything at initialization") {
  const Stage2Fixture s2;
  PipelineConfig cfg = s2.fx.cfg;
  cfg.train.stage2_steps = 0;
  Stage2Trainer trainer(cfg, BridgeModel(resolved_bridge_config(cfg)), s2.lm,
                        s2.fx.data, s2.heldout);
  trainer.run();
  CHECK(trainer.steps_done() == 0);
  CHECK(*trainer.report().stage2_initial_lm ==
        *trainer.report().stage2_final_lm);
  const LlmProjection fresh = LlmProjection::init(
      cfg.bridge.d_model, cfg.decoder.d_llm, cfg.train.seed);
  CHECK(trainer.projection().w.data() == fresh.w.data());
  CHECK(trainer.projection().b.data() == fresh.b.data());
}

TEST_CASE("stage-2 detects decoder tampering") {
  const Stage2Fixture s2;
  PipelineConfig cfg = s2.fx.cfg;
  cfg.train.stage2_steps = 0;
  Stage2Trainer trainer(cfg, BridgeModel(resolved_bridge_config(cfg)), s2.lm,
                        s2.fx.data, s2.heldout);
  trainer.decoder().params()[0].data()[0] += 0.25;
  CHECK_THROWS_WITH_AS(trainer.run(), "stage2: frozen decoder hash mismatch",
                       std::runtime_error);
  trainer.decoder().params()[0].data()[0] -= 0.25;  // restore shared state
}

TEST_CASE("stage-2 seeded runs are bitwise identical and resumable") {
  const Stage2Fixture s2;
  const auto make = [&] {
    return Stage2Trainer(s2.fx.cfg,
                         BridgeModel(resolved_bridge_config(s2.fx.cfg)), s2.lm,
                         s2.fx.data, s2.heldout);
  };
  Stage2Trainer a = make();
  Stage2Trainer b = make();
  a.run();
  b.run();
  CHECK(a.model().hash() == b.model().hash());
  CHECK(a.report().to_json() == b.report().to_json());

  const std::string path = temp_path("nevlab_stage2_resume.ckpt");
  Stage2Trainer first = make();
  first.report().stage2_initial_lm = first.heldout_loss();
  first.step();
  first.step();
  first.save_checkpoint(path);

  Stage2Trainer second = make();
  second.load_checkpoint(path);
  second.run();
  CHECK(second.model().hash() == a.model().hash());
  CHECK(second.projection().w.data() == a.projection().w.data());
  CHECK(second.report().to_json() == a.report().to_json());
  std::filesystem::remove(path);
}

// ---- retrieval evaluation ----

TEST_CASE("retrieval scoring on a diagonal similarity matrix is perfect") {
  const std::size_t n = 8;
  std::vector<std::vector<double>> sims(n, std::vector<double>(n, 0.1));
  for (std::size_t i = 0; i < n; ++i) sims[i][i] = 1.0;
  const auto match = [&](std::size_t i, std::size_t j) { return sims[i][j]; };
  const RetrievalResult r = eval_retrieval_from_scores(sims, 4, match);
  CHECK(r.r1_i2t == 1.0);
  CHECK(r.r5_i2t == 1.0);
  CHECK(r.r1_t2i == 1.0);
  CHECK(r.r5_t2i == 1.0);
  CHECK(r.mean_r1() == 1.0);
}

TEST_CASE("reranking can overturn the shortlist order") {
  // Similarity puts the truth second; the matcher flips it to first.
  std::vector<std::vector<double>> sims = {{0.5, 0.9, 0.0},
                                           {0.0, 0.5, 0.9},
                                           {0.9, 0.0, 0.5}};
  const auto match = [](std::size_t i, std::size_t j) {
    return i == j ? 1.0 : 0.0;
  };
  const RetrievalResult r = eval_retrieval_from_scores(sims, 2, match);
  CHECK(r.r1_i2t == 1.0);
  CHECK(r.r1_t2i == 1.0);

  // With a shortlist of one the truth never survives the cut.
  const RetrievalResult tight = eval_retrieval_from_scores(sims, 1, match);
  CHECK(tight.r1_i2t == 0.0);
}

TEST_CASE("retrieval evaluation validates its inputs") {
  std::vector<std::vector<double>> ragged = {{0.0, 1.0}, {0.5}};
  CHECK_THROWS_WITH_AS(
      eval_retrieval_from_scores(ragged, 2,
                                 [](std::size_t, std::size_t) { return 0.0; }),
      "eval: similarity matrix must be square", std::invalid_argument);

  const MicroFixture fx;
  const BridgeModel bridge(resolved_bridge_config(fx.cfg));
  const FrozenImageEncoder enc(fx.cfg.world.raw_dim(),
                               fx.cfg.encoder.num_patches,
                               fx.cfg.encoder.enc_dim, fx.cfg.encoder.seed);
  auto noisy = fx.data;
  noisy[0].is_noisy = true;
  CHECK_THROWS_WITH_AS(
      eval_retrieval(bridge, enc, noisy, fx.concepts, fx.cfg.train),
      "eval: eval set must be clean", std::invalid_argument);

  CHECK_THROWS_WITH_AS(
      eval_retrieval(bridge, enc, {}, {}, fx.cfg.train),
      "eval: need at least 2 pairs", std::invalid_argument);
}

namespace {

// Everything the bridge-backed evaluator needs for a clean subset of the
// micro dataset.
struct EvalFixture {
  MicroFixture fx;
  std::vector<PairedSample> clean;
  std::vector<std::vector<int>> cons;
  BridgeModel bridge;
  FrozenImageEncoder enc;

  EvalFixture()
      : bridge(resolved_bridge_config(fx.cfg)),
        enc(fx.cfg.world.raw_dim(), fx.cfg.encoder.num_patches,
            fx.cfg.encoder.enc_dim, fx.cfg.encoder.seed) {
    for (std::size_t i = 0; i < fx.data.size() && clean.size() < 10; ++i) {
      if (fx.data[i].is_noisy) continue;
      clean.push_back(fx.data[i]);
      cons.push_back(fx.concepts[i]);
    }
  }

  // The match score the evaluator is specified to use, recomputed
  // independently: query-averaged two-class logits, positive minus
  // negative.
  double match(std::size_t i, std::size_t j) const {
    const Tensor patch = enc.encode(Tensor::row_vector(clean[i].features));
    const ForwardOutput out = bridge.forward_multimodal(
        patch, cons[i], clean[j].caption, MaskKind::bidirectional);
    const Tensor pooled = colwise_mean(bridge.itm_logits(out.query_states));
    return pooled.data()[1] - pooled.data()[0];
  }
};

}  // namespace

TEST_CASE("full-shortlist retrieval equals brute-force match ranking") {
  const EvalFixture ef;
  const std::size_t n = ef.clean.size();
  TrainConfig tc = ef.fx.cfg.train;
  tc.eval_candidates = n;  // shortlist covers everything
  const RetrievalResult viaEval =
      eval_retrieval(ef.bridge, ef.enc, ef.clean, ef.cons, tc);

  // Brute force: rank every candidate purely by the match score.
  double h1_i2t = 0, h5_i2t = 0, h1_t2i = 0, h5_t2i = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t better = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (ef.match(i, j) > ef.match(i, i)) ++better;
    }
    h1_i2t += better == 0 ? 1 : 0;
    h5_i2t += better < 5 ? 1 : 0;
  }
  for (std::size_t j = 0; j < n; ++j) {
    std::size_t better = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (ef.match(i, j) > ef.match(j, j)) ++better;
    }
    h1_t2i += better == 0 ? 1 : 0;
    h5_t2i += better < 5 ? 1 : 0;
  }
  const double dn = static_cast<double>(n);
  CHECK(viaEval.r1_i2t == h1_i2t / dn);
  CHECK(viaEval.r5_i2t == h5_i2t / dn);
  CHECK(viaEval.r1_t2i == h1_t2i / dn);
  CHECK(viaEval.r5_t2i == h5_t2i / dn);
}

TEST_CASE("evaluation sharding does not change the result") {
  const EvalFixture ef;
  const RetrievalResult serial =
      eval_retrieval(ef.bridge, ef.enc, ef.clean, ef.cons, ef.fx.cfg.train);
  setenv("NEVLAB_THREADS", "3", 1);
  const RetrievalResult sharded =
      eval_retrieval(ef.bridge, ef.enc, ef.clean, ef.cons, ef.fx.cfg.train);
  unsetenv("NEVLAB_THREADS");
  CHECK(serial.r1_i2t == sharded.r1_i2t);
  CHECK(serial.r5_i2t == sharded.r5_i2t);
  CHECK(serial.r1_t2i == sharded.r1_t2i);
  CHECK(serial.r5_t2i == sharded.r5_t2i);
}

TEST_CASE("untrained retrieval sits at the random baseline") {
  // N pairs scored by a freshly initialized model: R@1 should hover
  // around 1/N. 20 seeds give a tight empirical standard error.
  const std::size_t n = 100;
  std::vector<double> means;
  for (int s = 0; s < 20; ++s) {
    PipelineConfig cfg;
    cfg.world.num_objects = 25;  // vocab of 32 with the reserved ids
    cfg.world.objects_per_image = 3;
    cfg.world.noise_rate = 0.0;
    cfg.world.dataset_size = n;
    cfg.world.seed = 100 + s;
    cfg.bridge.num_queries = 2;
    cfg.bridge.d_model = 16;
    cfg.bridge.num_layers = 1;
    cfg.bridge.num_heads = 2;
    cfg.bridge.d_itc = 8;
    cfg.bridge.max_positions = 32;
    cfg.bridge.seed = 500 + s;
    cfg.encoder.num_patches = 3;
    cfg.encoder.enc_dim = 12;
    cfg.encoder.seed = 900 + s;
    const auto data = generate_dataset(cfg.world);
    const BridgeModel bridge(resolved_bridge_config(cfg));
    const FrozenImageEncoder enc(cfg.world.raw_dim(), cfg.encoder.num_patches,
                                 cfg.encoder.enc_dim, cfg.encoder.seed);
    const std::vector<std::vector<int>> cons(data.size());
    means.push_back(
        eval_retrieval(bridge, enc, data, cons, cfg.train).mean_r1());
  }
  double mean = 0;
  for (double v : means) mean += v;
  mean /= static_cast<double>(means.size());
  double sq = 0;
  for (double v : means) sq += (v - mean) * (v - mean);
  const double se = std::sqrt(sq / (means.size() - 1.0)) /
                    std::sqrt(static_cast<double>(means.size()));
  const double expected = 1.0 / static_cast<double>(n);
  CHECK(std::abs(mean - expected) <= 3.0 * std::max(se, 1e-4));
}

// ---- ablation ----

TEST_CASE("ablation runs all three recipes deterministically") {
  const MicroFixture fx;
  std::vector<PairedSample> eval_set;
  std::vector<std::vector<int>> eval_cons;
  for (std::size_t i = 0; i < fx.data.size(); ++i) {
    if (fx.data[i].is_noisy) continue;
    eval_set.push_back(fx.data[i]);
    eval_cons.push_back(fx.concepts[i]);
  }
  const auto rows =
      ablate(fx.cfg, fx.data, fx.concepts, eval_set, eval_cons);
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].name == "full");
  CHECK(rows[1].name == "no_noise_adaptation");
  CHECK(rows[2].name == "no_concepts");
  CHECK(rows[0].auc.has_value());
  CHECK(!rows[1].auc.has_value());  // no noise estimate in this recipe
  CHECK(rows[2].auc.has_value());

  const auto again =
      ablate(fx.cfg, fx.data, fx.concepts, eval_set, eval_cons);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CHECK(rows[i].retrieval.r1_i2t == again[i].retrieval.r1_i2t);
    CHECK(rows[i].retrieval.r5_i2t == again[i].retrieval.r5_i2t);
    CHECK(rows[i].retrieval.r1_t2i == again[i].retrieval.r1_t2i);
    CHECK(rows[i].retrieval.r5_t2i == again[i].retrieval.r5_t2i);
    CHECK(rows[i].auc == again[i].auc);
  }
}

// ---- artifact writers ----

TEST_CASE("revised dataset keeps originals next to replacements") {
  std::vector<PairedSample> samples(3);
  for (int i = 0; i < 3; ++i) {
    samples[i].id = 10 + i;
    samples[i].features = {0.5, double(i)};
    samples[i].caption = {7, 8};
    samples[i].true_objects = {7, 8};
  }
  const std::vector<std::vector<int>> captions = {{7, 8}, {9}, {7, 8}};
  const std::vector<std::optional<std::vector<int>>> archived = {
      std::nullopt, std::vector<int>{7, 8}, std::nullopt};
  const std::string path = temp_path("nevlab_revised.jsonl");
  save_revised_dataset(samples, captions, archived, path);

  // The file stays loadable by the plain dataset reader, with the
  // working captions in place.
  const auto loaded = load_dataset(path);
  REQUIRE(loaded.size() == 3);
  CHECK(loaded[1].caption == std::vector<int>{9});
  CHECK(loaded[0].caption == std::vector<int>{7, 8});

  // The replaced line carries its original; the untouched ones do not.
  std::ifstream in(path);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    if (line_no == 1) {
      CHECK(j.at("original_caption").get<std::vector<int>>() ==
            std::vector<int>{7, 8});
    } else {
      CHECK(!j.contains("original_caption"));
    }
    ++line_no;
  }
  CHECK(line_no == 3);
  std::filesystem::remove(path);

  CHECK_THROWS_WITH_AS(
      save_revised_dataset(samples, {{7}}, archived, path),
      "revised dataset: size mismatch", std::invalid_argument);
}

TEST_CASE("noise estimate files carry per-sample values") {
  std::vector<PairedSample> samples(2);
  samples[0].id = 4;
  samples[1].id = 9;
  const std::string path = temp_path("nevlab_noise.json");
  save_noise_estimates(samples, {1.5, 2.5}, {0.25, 0.75}, {0.125, 0.375},
                       path);
  std::ifstream in(path);
  const auto j = nlohmann::json::parse(in);
  REQUIRE(j.at("samples").size() == 2);
  CHECK(j.at("samples")[0].at("id") == 4);
  CHECK(j.at("samples")[1].at("epsilon") == 0.75);
  CHECK(j.at("samples")[0].at("omega") == 0.125);
  std::filesystem::remove(path);

  CHECK_THROWS_WITH_AS(
      save_noise_estimates(samples, {1.0}, {0.5, 0.5}, {0.1, 0.1}, path),
      "noise estimates: size mismatch", std::invalid_argument);
}

// ---- gradient-check harness ----

TEST_CASE("gradient-check harness validates every loss family") {
  const auto results = run_gradient_checks(3, 77, 1e-6);
  REQUIRE(results.size() == 5);
  const std::vector<std::string> names = {"itc", "nitc", "citg", "citm",
                                          "generative"};
  for (std::size_t i = 0; i < results.size(); ++i) {
    CHECK(results[i].name == names[i]);
    CHECK(results[i].instances == 3);
    CHECK(results[i].max_rel_error <= 1e-5);
  }
}
