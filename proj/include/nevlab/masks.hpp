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
#include <vector>

#include "nevlab/tensor.hpp"

namespace nevlab {

// Position layout of one attention sequence: learnable query slots first,
// then retrieved concept tokens, then caption text tokens.
struct SegmentLayout {
  std::size_t num_queries = 0;
  std::size_t num_concepts = 0;
  std::size_t num_text = 0;

  std::size_t total() const { return num_queries + num_concepts + num_text; }
};

enum class MaskKind { unimodal, multimodal_causal, bidirectional };

// Boolean self-attention mask: row i may attend to column j iff
// allow[i * total + j] is nonzero.
struct AttentionMask {
  std::size_t total = 0;
  MaskKind kind = MaskKind::bidirectional;
  std::vector<std::uint8_t> allow;  // row-major total x total

  bool at(std::size_t i, std::size_t j) const {
    return allow[i * total + j] != 0;
  }
};

// Queries and text see only their own segment; no cross-block entries.
// Throws "unimodal mask takes no concepts" when layout.num_concepts > 0.
AttentionMask build_unimodal_mask(const SegmentLayout& layout);

// Query rows see only queries; concept rows see queries and concepts;
// text row at position t sees queries, concepts, and text up to t.
AttentionMask build_multimodal_causal_mask(const SegmentLayout& layout);

// Every position sees every position.
AttentionMask build_bidirectional_mask(const SegmentLayout& layout);

// Scaled dot-product attention over the allowed columns, split into
// `heads` equal slices of the feature dimension. q, k, v are LxD with
// D divisible by heads; the mask must be LxL.
Tensor masked_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        const AttentionMask& mask, std::size_t heads);

// Rectangular form: q is LqxD, k and v are LkxD, allow is row-major
// LqxLk. Used for cross-attention, where queries and keys come from
// different sequences.
Tensor masked_cross_attention(const Tensor& q, const Tensor& k,
                              const Tensor& v,
                              const std::vector<std::uint8_t>& allow,
                              std::size_t heads);

}  // namespace nevlab
