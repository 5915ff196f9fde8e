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

#include <cstddef>
#include <vector>

#include "nevlab/bridge.hpp"
#include "nevlab/frozen.hpp"
#include "nevlab/rng.hpp"
#include "nevlab/tensor.hpp"

namespace nevlab {

// Pairwise image-text similarities for one batch, already divided by the
// temperature: s[i][j] = v_i . t_j / tau. Entries lie in [-1/tau, 1/tau]
// when the embeddings have unit rows.
struct SimilarityMatrix {
  Tensor s;
  double tau = 1.0;

  std::size_t batch() const { return s.rows(); }
};

// How per-query image embeddings collapse into one similarity per pair.
enum class QueryPooling {
  max_query,   // s_ij = max over queries of (query . t_j)
  mean_query,  // pool queries to one renormalized vector first
};

// v and t are B x D with unit rows (within 1e-6).
SimilarityMatrix similarity_matrix(const Tensor& v, const Tensor& t,
                                   double tau = 1.0);

// image_queries[i] holds image i's per-query unit embeddings (nq x D).
SimilarityMatrix similarity_matrix(const std::vector<Tensor>& image_queries,
                                   const Tensor& t, double tau,
                                   QueryPooling pooling);

struct NitcInputs {
  SimilarityMatrix s;
  std::vector<double> omega;  // per-pair noise probability, each in [0, 1)
};

// Noise-adaptive contrastive loss. Each pair's positive term is weighted
// by (1 - omega_i) and its batch negatives by omega_i / (B - 1), in both
// the image->text and text->image directions; a clean pair (omega = 0)
// contributes exactly zero loss and zero gradient. When
// strict_denominator is set, the denominator is the plain full softmax
// instead (the positive keeps its (1 - omega) weight), which restores a
// nonzero gradient at omega = 0.
Tensor nitc_loss(const NitcInputs& in, bool strict_denominator = false);

// Standard bidirectional InfoNCE over the batch.
Tensor itc_loss(const SimilarityMatrix& s);

// Per-pair contrastive loss: the average of the row-wise and column-wise
// cross-entropies for pair i. Values only (no gradients); their mean
// equals itc_loss.
std::vector<double> per_sample_itc(const SimilarityMatrix& s);

// Indices of in-batch hard negatives: for image i a text j != i drawn
// with probability proportional to softmax over row i (diagonal
// excluded), and symmetrically for each text.
struct HardNegatives {
  std::vector<std::size_t> text_for_image;
  std::vector<std::size_t> image_for_text;
};

HardNegatives mine_hard_negatives(const SimilarityMatrix& s, Rng& rng);

// Image-text matching loss over 3B examples (each positive pair plus its
// two mined negatives), run through the bridge with the bidirectional
// mask. The two-class logits are averaged across the query rows before
// the cross-entropy. Concepts ride along with their image.
Tensor citm_loss(const BridgeModel& model, const std::vector<Tensor>& image_feats,
                 const std::vector<std::vector<int>>& concepts,
                 const std::vector<std::vector<int>>& texts,
                 const HardNegatives& negatives, std::size_t max_concepts = 3);

// Per-token next-token cross-entropies for generating `text` after the
// concept block; the sequence starts the text segment with the reserved
// generation token. Conditioning positions (concepts and the start
// token) are never scored.
Tensor citg_token_losses(const BridgeModel& model, const Tensor& image_feats,
                         const std::vector<int>& concepts,
                         const std::vector<int>& text);

// Mean of citg_token_losses over the scored positions.
Tensor citg_loss(const BridgeModel& model, const Tensor& image_feats,
                 const std::vector<int>& concepts,
                 const std::vector<int>& text);

// Linear map from bridge query states into the decoder's embedding
// space; trained alongside the bridge during the generative stage.
struct LlmProjection {
  Tensor w;  // d_model x d_llm
  Tensor b;  // 1 x d_llm

  static LlmProjection init(std::size_t d_model, std::size_t d_llm,
                            std::uint64_t seed);
  std::vector<Tensor> params() const { return {w, b}; }
};

// Mean next-token cross-entropy of `text` under the decoder, generation
// token prepended, optionally conditioned on a prefix (undefined tensor
// means unconditional).
Tensor decoder_lm_loss(const FrozenDecoderLM& lm, const Tensor& prefix,
                       const std::vector<int>& text);

// Stage-two loss: project the bridge's query states into the decoder's
// space and score `text` under the frozen decoder. Gradients reach the
// bridge and the projection only.
Tensor generative_loss(const BridgeModel& bridge, const LlmProjection& fc,
                       const FrozenDecoderLM& lm, const Tensor& image_feats,
                       const std::vector<int>& text);

}  // namespace nevlab
