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
#include <string>
#include <vector>

#include "nevlab/tensor.hpp"

namespace nevlab {

// 64-bit FNV-1a over the raw bytes of each tensor's values, folded in
// order. Used to prove that frozen parameters never move.
std::uint64_t content_hash(const std::vector<Tensor>& params);

// Fixed seeded linear map from raw image features to a patch sequence.
// Stands in for a pre-trained image backbone: deterministic, immutable,
// never part of any optimizer.
class FrozenImageEncoder {
 public:
  FrozenImageEncoder(std::size_t raw_dim, std::size_t num_patches,
                     std::size_t enc_dim, std::uint64_t seed);

  // raw is 1 x raw_dim; result is num_patches x enc_dim.
  Tensor encode(const Tensor& raw) const;

  std::size_t raw_dim() const { return raw_dim_; }
  std::size_t num_patches() const { return num_patches_; }
  std::size_t enc_dim() const { return enc_dim_; }
  std::uint64_t seed() const { return seed_; }

  std::uint64_t hash() const;
  const Tensor& projection() const { return projection_; }

 private:
  std::size_t raw_dim_, num_patches_, enc_dim_;
  std::uint64_t seed_;
  Tensor projection_;  // raw_dim x (num_patches * enc_dim)
};

// Small causal transformer language model. Trainable while thawed (its
// own brief pre-training on clean captions), then frozen for good:
// afterwards gradients still flow into the conditioning prefix, but the
// decoder's parameters take none.
class FrozenDecoderLM {
 public:
  FrozenDecoderLM(std::size_t vocab_size, std::size_t d_llm,
                  std::size_t layers, std::size_t heads, std::size_t max_len,
                  std::uint64_t seed);

  // Logits for every position of `tokens` (causal; position t sees
  // tokens 0..t). The prefix conditions generation additively: the mean
  // of its rows is added to every token embedding, so an absent or
  // all-zero prefix reproduces the unconditional model exactly.
  // prefix is P x d_llm with P >= 0 (an undefined tensor means P == 0).
  Tensor logits(const Tensor& prefix, const std::vector<int>& tokens) const;

  std::vector<Tensor> params() const;
  void freeze();
  bool frozen() const { return frozen_; }
  std::uint64_t hash() const { return content_hash(params()); }

  std::size_t vocab_size() const { return vocab_size_; }
  std::size_t d_llm() const { return d_llm_; }
  std::size_t max_len() const { return max_len_; }

 private:
  struct Block {
    Tensor wq, wk, wv, wo;        // d x d
    Tensor ln1_g, ln1_b;          // 1 x d
    Tensor w1, b1, w2, b2;        // d x 4d, 1 x 4d, 4d x d, 1 x d
    Tensor ln2_g, ln2_b;          // 1 x d
  };

  std::size_t vocab_size_, d_llm_, layers_, heads_, max_len_;
  bool frozen_ = false;
  Tensor embed_;      // vocab x d
  Tensor pos_;        // max_len x d
  std::vector<Block> blocks_;
  Tensor final_g_, final_b_;  // 1 x d
  Tensor head_w_;             // d x vocab
  Tensor head_b_;             // 1 x vocab
};

// Stand-in for the pre-trained retrieval encoders V_p / T_p. Object
// nouns map to an orthonormal basis, so image-to-noun similarity has
// exact ground truth. Embeddings live in R^{M+1}: coordinate M carries
// a tiny fixed prompt offset shared by every text embedding.
class RetrievalVlmStub {
 public:
  explicit RetrievalVlmStub(std::vector<std::string> nouns);

  // raw image features (1 x M) -> unit vector (1 x M+1).
  Tensor vp_embed(const Tensor& raw) const;

  // Prompt plus noun -> unit vector (1 x M+1). The stub ignores the
  // prompt text beyond adding its fixed offset coordinate.
  Tensor tp_embed(const std::string& prompt, const std::string& noun) const;

  // <vp_embed(raw) . tp_embed(prompt_for(noun), noun)>
  double similarity(const Tensor& raw, const std::string& noun) const;

  std::string prompt_for(const std::string& noun) const {
    return "a photo of a " + noun;
  }

  std::size_t num_nouns() const { return nouns_.size(); }
  const std::vector<std::string>& nouns() const { return nouns_; }

 private:
  std::vector<std::string> nouns_;
  int index_of(const std::string& noun) const;
};

}  // namespace nevlab
