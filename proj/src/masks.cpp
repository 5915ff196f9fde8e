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

#include "nevlab/masks.hpp"

#include <cmath>
#include <stdexcept>

namespace nevlab {

namespace {

void check_layout(const SegmentLayout& layout) {
  if (layout.total() == 0) {
    throw std::invalid_argument("attention layout is empty");
  }
}

AttentionMask blank(const SegmentLayout& layout, MaskKind kind) {
  AttentionMask m;
  m.total = layout.total();
  m.kind = kind;
  m.allow.assign(m.total * m.total, 0);
  return m;
}

}  // namespace

AttentionMask build_unimodal_mask(const SegmentLayout& layout) {
  check_layout(layout);
  if (layout.num_concepts != 0) {
    throw std::invalid_argument("unimodal mask takes no concepts");
  }
  AttentionMask m = blank(layout, MaskKind::unimodal);
  const std::size_t q = layout.num_queries;
  const std::size_t n = m.total;
  for (std::size_t i = 0; i < n; ++i) {
    const bool i_query = i < q;
    for (std::size_t j = 0; j < n; ++j) {
      const bool j_query = j < q;
      if (i_query == j_query) m.allow[i * n + j] = 1;
    }
  }
  return m;
}

AttentionMask build_multimodal_causal_mask(const SegmentLayout& layout) {
  check_layout(layout);
  AttentionMask m = blank(layout, MaskKind::multimodal_causal);
  const std::size_t q = layout.num_queries;
  const std::size_t qc = q + layout.num_concepts;
  const std::size_t n = m.total;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t limit;
    if (i < q) {
      limit = q;  // queries see queries only
    } else if (i < qc) {
      limit = qc;  // concepts see queries and concepts
    } else {
      limit = i + 1;  // text sees queries, concepts, and text up to itself
    }
    for (std::size_t j = 0; j < limit; ++j) m.allow[i * n + j] = 1;
  }
  return m;
}

AttentionMask build_bidirectional_mask(const SegmentLayout& layout) {
  check_layout(layout);
  AttentionMask m = blank(layout, MaskKind::bidirectional);
  for (std::uint8_t& b : m.allow) b = 1;
  return m;
}

Tensor masked_cross_attention(const Tensor& q, const Tensor& k,
                              const Tensor& v,
                              const std::vector<std::uint8_t>& allow,
                              std::size_t heads) {
  const std::size_t lq = q.rows(), lk = k.rows(), d = q.cols();
  if (k.cols() != d || v.cols() != d || v.rows() != lk) {
    throw std::invalid_argument("masked attention: shape mismatch");
  }
  if (heads == 0 || d % heads != 0) {
    throw std::invalid_argument("masked attention: heads must divide dim");
  }
  if (allow.size() != lq * lk) {
    throw std::invalid_argument("masked attention: mask size mismatch");
  }
  const std::size_t dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Tensor qh = slice_cols(q, h * dh, dh);
    Tensor kh = slice_cols(k, h * dh, dh);
    Tensor vh = slice_cols(v, h * dh, dh);
    Tensor scores = mul_scalar(matmul(qh, transpose(kh)), scale);
    Tensor weights = masked_softmax_rows(scores, allow);
    outs.push_back(matmul(weights, vh));
  }
  return concat_cols(std::span<const Tensor>(outs.data(), outs.size()));
}

Tensor masked_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        const AttentionMask& mask, std::size_t heads) {
  if (q.rows() != mask.total || k.rows() != mask.total ||
      v.rows() != mask.total) {
    throw std::invalid_argument("masked attention: mask size mismatch");
  }
  return masked_cross_attention(q, k, v, mask.allow, heads);
}

}  // namespace nevlab
