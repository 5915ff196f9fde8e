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

// Python surface of the C++ core: matrix helpers, attention masks, the
// contrastive losses, the noise model, the schedule, config handling, and
// whole-pipeline conveniences that mirror the command-line subcommands.
// Matrices cross the boundary as (rows, cols, row-major data) triples or
// as lists of lists; everything heavy stays in C++.

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "nevlab/config_io.hpp"
#include "nevlab/corpus.hpp"
#include "nevlab/frozen.hpp"
#include "nevlab/gmm.hpp"
#include "nevlab/masks.hpp"
#include "nevlab/objectives.hpp"
#include "nevlab/synth.hpp"
#include "nevlab/tensor.hpp"
#include "nevlab/train.hpp"
#include "nevlab/vocab.hpp"

namespace py = pybind11;
using namespace nevlab;

namespace {

Tensor make_tensor(std::size_t rows, std::size_t cols,
                   const std::vector<double>& data) {
  return Tensor::from_data(rows, cols, data);
}

std::vector<std::vector<double>> to_rows(const Tensor& t) {
  std::vector<std::vector<double>> out(t.rows(),
                                       std::vector<double>(t.cols()));
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) out[i][j] = t(i, j);
  return out;
}

Tensor from_rows(const std::vector<std::vector<double>>& rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows[0].size();
  std::vector<double> flat;
  flat.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) {
      throw std::invalid_argument("matrix rows must have equal length");
    }
    flat.insert(flat.end(), row.begin(), row.end());
  }
  return Tensor::from_data(r, c, flat);
}

std::vector<std::vector<bool>> mask_rows(const AttentionMask& m) {
  std::vector<std::vector<bool>> out(m.total, std::vector<bool>(m.total));
  for (std::size_t i = 0; i < m.total; ++i)
    for (std::size_t j = 0; j < m.total; ++j) out[i][j] = m.at(i, j);
  return out;
}

AttentionMask build_mask(const std::string& kind, std::size_t num_queries,
                         std::size_t num_concepts, std::size_t num_text) {
  const SegmentLayout layout{num_queries, num_concepts, num_text};
  if (kind == "unimodal") return build_unimodal_mask(layout);
  if (kind == "multimodal_causal") return build_multimodal_causal_mask(layout);
  if (kind == "bidirectional") return build_bidirectional_mask(layout);
  throw std::invalid_argument("unknown mask kind: " + kind);
}

// Shared setup for the pipeline conveniences: dataset, corpus over the
// full noun list, and per-sample concept ids.
struct Prepared {
  std::vector<PairedSample> data;
  std::vector<std::vector<int>> concept_ids;
  Vocab vocab;
};

Prepared prepare(const RunConfig& cfg, const WorldConfig& world) {
  Prepared p{generate_dataset(world), {},
             Vocab::build(cfg.pipeline.world.num_objects)};
  const ConceptCorpus corpus = corpus_from_dataset(
      p.data, cfg.pipeline.world.num_objects, cfg.corpus_min_count);
  std::vector<std::string> nouns;
  nouns.reserve(cfg.pipeline.world.num_objects);
  for (std::size_t o = 0; o < cfg.pipeline.world.num_objects; ++o) {
    nouns.push_back(Vocab::object_noun(o));
  }
  const RetrievalVlmStub stub(nouns);
  p.concept_ids = assign_concepts(p.data, corpus, stub, p.vocab,
                                  cfg.pipeline.train.num_concepts);
  return p;
}

std::string run_stage1_json(const std::string& config_json) {
  const RunConfig cfg = run_config_from_json(config_json);
  Prepared p = prepare(cfg, cfg.pipeline.world);
  Stage1Trainer trainer(cfg.pipeline, std::move(p.data),
                        std::move(p.concept_ids), cfg.variant);
  trainer.set_log([](const std::string&) {});
  trainer.run();
  return trainer.report().to_json();
}

std::string run_stage2_json(const std::string& config_json) {
  const RunConfig cfg = run_config_from_json(config_json);
  Prepared p = prepare(cfg, cfg.pipeline.world);

  // Every fifth clean sample is held out for the generative objective.
  std::vector<PairedSample> train_split, heldout;
  std::size_t clean_seen = 0;
  for (const PairedSample& s : p.data) {
    if (!s.is_noisy && clean_seen++ % 5 == 4) {
      heldout.push_back(s);
    } else {
      train_split.push_back(s);
    }
  }

  const auto& dc = cfg.pipeline.decoder;
  FrozenDecoderLM lm(p.vocab.size(), dc.d_llm, dc.layers, dc.heads,
                     dc.max_len, dc.seed);
  std::vector<std::vector<int>> captions;
  captions.reserve(train_split.size());
  for (const PairedSample& s : train_split) captions.push_back(s.caption);
  pretrain_decoder(lm, captions, dc.pretrain_steps, dc.pretrain_batch,
                   dc.pretrain_lr, cfg.pipeline.train.seed);
  lm.freeze();

  BridgeModel bridge(resolved_bridge_config(cfg.pipeline));
  Stage2Trainer trainer(cfg.pipeline, std::move(bridge), std::move(lm),
                        std::move(train_split), std::move(heldout));
  trainer.run();
  return trainer.report().to_json();
}

py::dict gradcheck_dict(std::size_t instances, std::uint64_t seed, double h) {
  py::dict out;
  for (const GradCheckResult& r : run_gradient_checks(instances, seed, h)) {
    out[py::str(r.name)] = r.max_rel_error;
  }
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Noise-robust vision-language bridge training, C++ core";

  // ---- matrix helpers ----
  m.def(
      "softmax_rows",
      [](std::size_t rows, std::size_t cols,
         const std::vector<double>& data) {
        return to_rows(softmax_rows(make_tensor(rows, cols, data)));
      },
      py::arg("rows"), py::arg("cols"), py::arg("data"),
      "Row-wise softmax of a row-major matrix.");

  m.def(
      "l2_normalize_rows",
      [](std::size_t rows, std::size_t cols,
         const std::vector<double>& data) {
        return to_rows(l2_normalize_rows(make_tensor(rows, cols, data)));
      },
      py::arg("rows"), py::arg("cols"), py::arg("data"),
      "Scale every row of a row-major matrix to unit Euclidean norm.");

  // ---- attention masks ----
  m.def(
      "attention_mask",
      [](const std::string& kind, std::size_t num_queries,
         std::size_t num_concepts, std::size_t num_text) {
        return mask_rows(build_mask(kind, num_queries, num_concepts,
                                    num_text));
      },
      py::arg("kind"), py::arg("num_queries"), py::arg("num_concepts"),
      py::arg("num_text"),
      "Boolean self-attention mask for kind in {unimodal, "
      "multimodal_causal, bidirectional}.");

  // ---- contrastive losses ----
  m.def(
      "itc_loss",
      [](const std::vector<std::vector<double>>& s, double tau) {
        return itc_loss(SimilarityMatrix{from_rows(s), tau}).item();
      },
      py::arg("s"), py::arg("tau") = 1.0,
      "Symmetric contrastive loss of a BxB similarity matrix.");

  m.def(
      "nitc_loss",
      [](const std::vector<std::vector<double>>& s,
         const std::vector<double>& omega, double tau, bool strict) {
        return nitc_loss(NitcInputs{SimilarityMatrix{from_rows(s), tau},
                                    omega},
                         strict)
            .item();
      },
      py::arg("s"), py::arg("omega"), py::arg("tau") = 1.0,
      py::arg("strict") = false,
      "Noise-adaptive contrastive loss with per-pair smoothing rates.");

  m.def(
      "per_sample_itc",
      [](const std::vector<std::vector<double>>& s, double tau) {
        return per_sample_itc(SimilarityMatrix{from_rows(s), tau});
      },
      py::arg("s"), py::arg("tau") = 1.0,
      "Per-pair contrastive losses; their mean equals itc_loss.");

  // ---- noise model ----
  m.def(
      "fit_gmm2",
      [](const std::vector<double>& losses) {
        const Gmm2 g = fit_gmm2(losses);
        py::dict out;
        out["weight"] = std::vector<double>{g.weight[0], g.weight[1]};
        out["mean"] = std::vector<double>{g.mean[0], g.mean[1]};
        out["var"] = std::vector<double>{g.var[0], g.var[1]};
        out["degenerate"] = g.degenerate;
        out["log_likelihood_trace"] = g.log_likelihood_trace;
        return out;
      },
      py::arg("losses"),
      "Two-component Gaussian mixture fitted to per-sample losses.");

  m.def(
      "noise_posterior",
      [](const std::vector<double>& losses) {
        return noise_posterior(fit_gmm2(losses), losses);
      },
      py::arg("losses"),
      "Posterior of the higher-mean mixture component per sample.");

  m.def("smoothing_rates", &smoothing_rates, py::arg("epsilon"),
        py::arg("lambda_"), py::arg("omega_max"),
        "Per-pair smoothing rates min(lambda * epsilon, omega_max).");

  m.def("roc_auc", &roc_auc, py::arg("scores"), py::arg("labels"),
        "Mann-Whitney area under the ROC curve; ties count half.");

  // ---- schedule ----
  m.def("cosine_lr", &cosine_lr, py::arg("step"), py::arg("total"),
        py::arg("peak"), "Cosine-decayed learning rate, exact endpoints.");

  // ---- configuration ----
  m.def(
      "default_config", [] { return run_config_to_json(RunConfig{}); },
      "Default configuration as canonical JSON.");

  m.def(
      "resolve_config",
      [](const std::string& text,
         const std::map<std::string, std::string>& overrides) {
        RunConfig cfg = run_config_from_json(text);
        for (const auto& [k, v] : overrides) apply_override(cfg, k, v);
        return run_config_to_json(cfg);
      },
      py::arg("config_json"),
      py::arg("overrides") = std::map<std::string, std::string>{},
      "Parse a config, apply dotted-key overrides, return canonical JSON. "
      "Unknown keys raise ValueError.");

  // ---- data ----
  m.def(
      "gen_data",
      [](const std::string& config_json, const std::string& path) {
        const RunConfig cfg = run_config_from_json(config_json);
        const auto data = generate_dataset(cfg.pipeline.world);
        save_dataset(data, path);
        return data.size();
      },
      py::arg("config_json"), py::arg("path"),
      "Generate the paired dataset and write it as JSONL; returns the "
      "sample count.");

  // ---- pipelines ----
  m.def("run_stage1", &run_stage1_json, py::arg("config_json"),
        "Full stage-1 schedule on a freshly generated dataset; returns "
        "the metrics report as canonical JSON.");

  m.def("run_stage2", &run_stage2_json, py::arg("config_json"),
        "Decoder pre-training plus stage-2 generative training; returns "
        "the metrics report as canonical JSON.");

  m.def("gradcheck", &gradcheck_dict, py::arg("instances") = 5,
        py::arg("seed") = 1, py::arg("h") = 1e-6,
        "Max relative finite-difference error per loss family.");
}
