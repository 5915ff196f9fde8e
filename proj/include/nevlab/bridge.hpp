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
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "nevlab/frozen.hpp"
#include "nevlab/masks.hpp"
#include "nevlab/tensor.hpp"

namespace nevlab {

struct BridgeConfig {
  std::size_t num_queries = 8;
  std::size_t d_model = 32;
  std::size_t num_layers = 2;
  std::size_t num_heads = 4;
  std::size_t d_itc = 16;
  std::size_t enc_dim = 32;        // width of the frozen image patch rows
  std::size_t vocab_size = 71;     // 64 content tokens plus the reserved ids
  std::size_t max_positions = 64;  // longest concepts-plus-text block
  std::uint64_t seed = 1;
};

// States and contrastive embeddings produced by one bridge forward pass.
// Fields not computed by the particular pass stay default (undefined).
struct ForwardOutput {
  Tensor query_states;  // num_queries x d_model
  Tensor text_states;   // T x d_model
  Tensor itc_image;     // num_queries x d_itc, unit rows
  Tensor itc_text;      // 1 x d_itc, unit row
};

// Bridging transformer between the frozen encoders and the text side:
// learnable query rows, one self-attention stack shared by the image and
// text branches, cross-attention from the query rows to the frozen image
// patches in every layer, and small projection heads on top.
class BridgeModel {
 public:
  explicit BridgeModel(const BridgeConfig& cfg);

  // Query rows attend among themselves and cross-attend to image_feats
  // (num_patches x enc_dim). Fills query_states and itc_image.
  ForwardOutput encode_image(const Tensor& image_feats) const;

  // Text-only pass, bidirectional within the text. Fills text_states and
  // itc_text (projection of the first token's state).
  ForwardOutput encode_text(const std::vector<int>& tokens) const;

  // Joint [queries | concepts | text] pass under the requested mask;
  // query rows still cross-attend to image_feats every layer. Fills
  // query_states and text_states.
  ForwardOutput forward_multimodal(const Tensor& image_feats,
                                   const std::vector<int>& concepts,
                                   const std::vector<int>& text,
                                   MaskKind kind) const;

  // Two-class match scores, one row per input state row.
  Tensor itm_logits(const Tensor& states) const;
  // Next-token vocabulary logits, one row per input state row.
  Tensor lm_logits(const Tensor& states) const;

  // Every learnable parameter, in a fixed order shared with
  // named_params(). The frozen components live outside this model, so
  // the partition is simply: everything here trains, nothing here is
  // frozen.
  std::vector<Tensor> params() const;
  std::vector<std::pair<std::string, Tensor>> named_params() const;

  const BridgeConfig& config() const { return cfg_; }
  std::uint64_t hash() const { return content_hash(params()); }

 private:
  struct Layer {
    Tensor ln1_g, ln1_b;    // pre-self-attention norm, 1 x d
    Tensor wq, wk, wv, wo;  // shared self-attention, d x d
    Tensor lnc_g, lnc_b;    // pre-cross-attention norm (query rows), 1 x d
    Tensor cq, co;          // cross-attention, d x d
    Tensor ck, cv;          // cross-attention, enc_dim x d
    Tensor ln2_g, ln2_b;    // pre-feed-forward norm, 1 x d
    Tensor w1, b1, w2, b2;  // d x 4d, 1 x 4d, 4d x d, 1 x d
  };

  // Token embeddings plus learned absolute positions for the block.
  Tensor embed_tokens(const std::vector<int>& tokens) const;
  void check_tokens(const std::vector<int>& tokens) const;

  // The full stack: pre-norm self-attention over the whole sequence,
  // then (when image_feats is non-null) pre-norm cross-attention applied
  // to the first num_queries rows only, then a pre-norm feed-forward.
  Tensor run_layers(Tensor x, std::size_t num_queries,
                    const AttentionMask& mask, const Tensor* image_feats) const;

  BridgeConfig cfg_;
  Tensor query_embeddings_;  // num_queries x d
  Tensor token_embedding_;   // vocab x d
  Tensor pos_embedding_;     // max_positions x d
  std::vector<Layer> layers_;
  Tensor proj_image_w_, proj_image_b_;  // d x d_itc, 1 x d_itc
  Tensor proj_text_w_, proj_text_b_;    // d x d_itc, 1 x d_itc
  Tensor itm_w_, itm_b_;                // d x 2, 1 x 2
  Tensor lm_w_, lm_b_;                  // d x vocab, 1 x vocab
};

}  // namespace nevlab
