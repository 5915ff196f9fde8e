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

#include "nevlab/frozen.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

#include "nevlab/masks.hpp"
#include "nevlab/rng.hpp"

namespace nevlab {

namespace {

constexpr std::uint64_t kFnvOffset = 14695981039346656037ULL;
constexpr std::uint64_t kFnvPrime = 1099511628211ULL;

std::uint64_t fnv1a(const double* data, std::size_t n, std::uint64_t h) {
  for (std::size_t i = 0; i < n; ++i) {
    unsigned char bytes[sizeof(double)];
    std::memcpy(bytes, &data[i], sizeof(double));
    for (unsigned char b : bytes) {
      h ^= b;
      h *= kFnvPrime;
    }
  }
  return h;
}

Tensor init_normal(std::size_t rows, std::size_t cols, double scale, Rng& rng,
                   bool requires_grad) {
  std::vector<double> v(rows * cols);
  for (double& x : v) x = scale * rng.normal();
  return Tensor::from_data(rows, cols, std::move(v), requires_grad);
}

// Tiny magnitude for the shared text-prompt coordinate: small enough
// that unit-norm text embeddings still dot to 1 with their matching
// image direction within 1e-9, large enough to be a real offset.
constexpr double kPromptOffset = 3e-5;

}  // namespace

std::uint64_t content_hash(const std::vector<Tensor>& params) {
  std::uint64_t h = kFnvOffset;
  for (const Tensor& p : params) {
    h = fnv1a(p.data().data(), p.size(), h);
  }
  return h;
}

// ---------------------------------------------------------------------------
// FrozenImageEncoder

FrozenImageEncoder::FrozenImageEncoder(std::size_t raw_dim,
                                       std::size_t num_patches,
                                       std::size_t enc_dim,
                                       std::uint64_t seed)
    : raw_dim_(raw_dim), num_patches_(num_patches), enc_dim_(enc_dim),
      seed_(seed) {
  Rng rng(seed);
  const double scale = 1.0 / std::sqrt(static_cast<double>(raw_dim));
  projection_ = init_normal(raw_dim, num_patches * enc_dim, scale, rng,
                            /*requires_grad=*/false);
}

Tensor FrozenImageEncoder::encode(const Tensor& raw) const {
  if (raw.rows() != 1 || raw.cols() != raw_dim_) {
    throw std::invalid_argument("image encoder: raw feature dim mismatch");
  }
  // No gradient ever flows into raw features or the projection, so the
  // product can be computed outside the op layer and reshaped freely.
  std::vector<double> out(num_patches_ * enc_dim_, 0.0);
  const std::size_t w = num_patches_ * enc_dim_;
  for (std::size_t i = 0; i < raw_dim_; ++i) {
    const double x = raw.data()[i];
    if (x == 0.0) continue;
    const double* prow = projection_.data().data() + i * w;
    for (std::size_t j = 0; j < w; ++j) out[j] += x * prow[j];
  }
  return Tensor::from_data(num_patches_, enc_dim_, std::move(out));
}

std::uint64_t FrozenImageEncoder::hash() const {
  return content_hash({projection_});
}

// ---------------------------------------------------------------------------
// FrozenDecoderLM

FrozenDecoderLM::FrozenDecoderLM(std::size_t vocab_size, std::size_t d_llm,
                                 std::size_t layers, std::size_t heads,
                                 std::size_t max_len, std::uint64_t seed)
    : vocab_size_(vocab_size), d_llm_(d_llm), layers_(layers), heads_(heads),
      max_len_(max_len) {
  if (d_llm % heads != 0) {
    throw std::invalid_argument("decoder: heads must divide d_llm");
  }
  Rng rng(seed);
  const double s = 0.02;
  auto w = [&](std::size_t r, std::size_t c) {
    return init_normal(r, c, s, rng, /*requires_grad=*/true);
  };
  embed_ = w(vocab_size, d_llm);
  pos_ = w(max_len, d_llm);
  for (std::size_t l = 0; l < layers; ++l) {
    Block b;
    b.wq = w(d_llm, d_llm);
    b.wk = w(d_llm, d_llm);
    b.wv = w(d_llm, d_llm);
    b.wo = w(d_llm, d_llm);
    b.ln1_g = Tensor::full(1, d_llm, 1.0, true);
    b.ln1_b = Tensor::zeros(1, d_llm, true);
    b.w1 = w(d_llm, 4 * d_llm);
    b.b1 = Tensor::zeros(1, 4 * d_llm, true);
    b.w2 = w(4 * d_llm, d_llm);
    b.b2 = Tensor::zeros(1, d_llm, true);
    b.ln2_g = Tensor::full(1, d_llm, 1.0, true);
    b.ln2_b = Tensor::zeros(1, d_llm, true);
    blocks_.push_back(std::move(b));
  }
  final_g_ = Tensor::full(1, d_llm, 1.0, true);
  final_b_ = Tensor::zeros(1, d_llm, true);
  head_w_ = w(d_llm, vocab_size);
  head_b_ = Tensor::zeros(1, vocab_size, true);
}

std::vector<Tensor> FrozenDecoderLM::params() const {
  std::vector<Tensor> out = {embed_, pos_};
  for (const Block& b : blocks_) {
    out.insert(out.end(), {b.wq, b.wk, b.wv, b.wo, b.ln1_g, b.ln1_b, b.w1,
                           b.b1, b.w2, b.b2, b.ln2_g, b.ln2_b});
  }
  out.insert(out.end(), {final_g_, final_b_, head_w_, head_b_});
  return out;
}

void FrozenDecoderLM::freeze() {
  for (Tensor& p : params()) p.set_requires_grad(false);
  frozen_ = true;
}

Tensor FrozenDecoderLM::logits(const Tensor& prefix,
                               const std::vector<int>& tokens) const {
  const std::size_t t = tokens.size();
  if (t == 0) throw std::invalid_argument("decoder: empty token sequence");
  if (t > max_len_) throw std::invalid_argument("decoder: sequence too long");
  for (int id : tokens) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab_size_) {
      throw std::invalid_argument("decoder: token id out of range");
    }
  }
  const bool has_prefix = prefix.defined() && prefix.rows() > 0;
  if (has_prefix && prefix.cols() != d_llm_) {
    throw std::invalid_argument("decoder: prefix width mismatch");
  }

  Tensor x = add(embedding_rows(embed_, tokens), slice_rows(pos_, 0, t));
  if (has_prefix) {
    x = add_rowvec(x, colwise_mean(prefix));
  }
  AttentionMask causal = build_multimodal_causal_mask({0, 0, t});
  for (const Block& b : blocks_) {
    Tensor h = layer_norm(x, b.ln1_g, b.ln1_b);
    Tensor att = masked_attention(matmul(h, b.wq), matmul(h, b.wk),
                                  matmul(h, b.wv), causal, heads_);
    x = add(x, matmul(att, b.wo));
    Tensor f = layer_norm(x, b.ln2_g, b.ln2_b);
    x = add(x, linear(gelu(linear(f, b.w1, b.b1)), b.w2, b.b2));
  }
  x = layer_norm(x, final_g_, final_b_);
  return linear(x, head_w_, head_b_);
}

// ---------------------------------------------------------------------------
// RetrievalVlmStub

RetrievalVlmStub::RetrievalVlmStub(std::vector<std::string> nouns)
    : nouns_(std::move(nouns)) {
  if (nouns_.empty()) {
    throw std::invalid_argument("retrieval stub: no nouns");
  }
}

int RetrievalVlmStub::index_of(const std::string& noun) const {
  for (std::size_t i = 0; i < nouns_.size(); ++i) {
    if (nouns_[i] == noun) return static_cast<int>(i);
  }
  throw std::invalid_argument("unknown noun");
}

Tensor RetrievalVlmStub::vp_embed(const Tensor& raw) const {
  const std::size_t m = nouns_.size();
  if (raw.rows() != 1 || raw.cols() != m) {
    throw std::invalid_argument("retrieval stub: raw feature dim mismatch");
  }
  std::vector<double> padded(m + 1, 0.0);
  for (std::size_t i = 0; i < m; ++i) padded[i] = raw.data()[i];
  return l2_normalize_rows(Tensor::from_data(1, m + 1, std::move(padded)));
}

Tensor RetrievalVlmStub::tp_embed(const std::string& /*prompt*/,
                                  const std::string& noun) const {
  const std::size_t m = nouns_.size();
  const int idx = index_of(noun);
  std::vector<double> v(m + 1, 0.0);
  v[static_cast<std::size_t>(idx)] = 1.0;
  v[m] = kPromptOffset;  // shared prompt coordinate
  return l2_normalize_rows(Tensor::from_data(1, m + 1, std::move(v)));
}

double RetrievalVlmStub::similarity(const Tensor& raw,
                                    const std::string& noun) const {
  Tensor v = vp_embed(raw);
  Tensor t = tp_embed(prompt_for(noun), noun);
  double acc = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i)
    acc += v.data()[i] * t.data()[i];
  return acc;
}

}  // namespace nevlab
