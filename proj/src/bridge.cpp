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

#include "nevlab/bridge.hpp"

#include <cmath>
#include <stdexcept>

#include "nevlab/rng.hpp"

namespace nevlab {

namespace {

// Seeded uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
Tensor init_matrix(Rng& rng, std::size_t rows, std::size_t cols,
                   std::size_t fan_in) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> data(rows * cols);
  for (double& x : data) x = rng.uniform(-bound, bound);
  return Tensor::from_data(rows, cols, std::move(data), /*requires_grad=*/true);
}

Tensor init_ones(std::size_t cols) {
  return Tensor::full(1, cols, 1.0, /*requires_grad=*/true);
}

Tensor init_zeros(std::size_t rows, std::size_t cols) {
  return Tensor::zeros(rows, cols, /*requires_grad=*/true);
}

void check_image_feats(const Tensor& image_feats, std::size_t enc_dim) {
  if (!image_feats.defined() || image_feats.rows() == 0) {
    throw std::invalid_argument("bridge: empty image features");
  }
  if (image_feats.cols() != enc_dim) {
    throw std::invalid_argument("bridge: image feature dim mismatch");
  }
}

}  // namespace

BridgeModel::BridgeModel(const BridgeConfig& cfg) : cfg_(cfg) {
  if (cfg.num_queries == 0) {
    throw std::invalid_argument("bridge: num_queries must be >= 1");
  }
  if (cfg.num_heads == 0 || cfg.d_model % cfg.num_heads != 0) {
    throw std::invalid_argument("bridge: heads must divide d_model");
  }
  if (cfg.num_layers == 0) {
    throw std::invalid_argument("bridge: num_layers must be >= 1");
  }
  if (cfg.d_itc == 0) {
    throw std::invalid_argument("bridge: d_itc must be >= 1");
  }
  if (cfg.enc_dim == 0) {
    throw std::invalid_argument("bridge: enc_dim must be >= 1");
  }
  if (cfg.vocab_size <= 3) {
    throw std::invalid_argument("bridge: vocab_size must cover reserved ids");
  }
  if (cfg.max_positions == 0) {
    throw std::invalid_argument("bridge: max_positions must be >= 1");
  }

  Rng rng(cfg.seed);
  const std::size_t d = cfg.d_model;
  query_embeddings_ = init_matrix(rng, cfg.num_queries, d, d);
  token_embedding_ = init_matrix(rng, cfg.vocab_size, d, d);
  pos_embedding_ = init_matrix(rng, cfg.max_positions, d, d);
  layers_.resize(cfg.num_layers);
  for (Layer& L : layers_) {
    L.ln1_g = init_ones(d);
    L.ln1_b = init_zeros(1, d);
    L.wq = init_matrix(rng, d, d, d);
    L.wk = init_matrix(rng, d, d, d);
    L.wv = init_matrix(rng, d, d, d);
    L.wo = init_matrix(rng, d, d, d);
    L.lnc_g = init_ones(d);
    L.lnc_b = init_zeros(1, d);
    L.cq = init_matrix(rng, d, d, d);
    L.ck = init_matrix(rng, cfg.enc_dim, d, cfg.enc_dim);
    L.cv = init_matrix(rng, cfg.enc_dim, d, cfg.enc_dim);
    L.co = init_matrix(rng, d, d, d);
    L.ln2_g = init_ones(d);
    L.ln2_b = init_zeros(1, d);
    L.w1 = init_matrix(rng, d, 4 * d, d);
    L.b1 = init_zeros(1, 4 * d);
    L.w2 = init_matrix(rng, 4 * d, d, 4 * d);
    L.b2 = init_zeros(1, d);
  }
  proj_image_w_ = init_matrix(rng, d, cfg.d_itc, d);
  proj_image_b_ = init_zeros(1, cfg.d_itc);
  proj_text_w_ = init_matrix(rng, d, cfg.d_itc, d);
  proj_text_b_ = init_zeros(1, cfg.d_itc);
  itm_w_ = init_matrix(rng, d, 2, d);
  itm_b_ = init_zeros(1, 2);
  lm_w_ = init_matrix(rng, d, cfg.vocab_size, d);
  lm_b_ = init_zeros(1, cfg.vocab_size);
}

void BridgeModel::check_tokens(const std::vector<int>& tokens) const {
  for (int id : tokens) {
    if (id < 0 || static_cast<std::size_t>(id) >= cfg_.vocab_size) {
      throw std::invalid_argument("bridge: token id out of range");
    }
  }
}

Tensor BridgeModel::embed_tokens(const std::vector<int>& tokens) const {
  if (tokens.size() > cfg_.max_positions) {
    throw std::invalid_argument("bridge: sequence too long");
  }
  check_tokens(tokens);
  const Tensor emb = embedding_rows(token_embedding_, tokens);
  const Tensor pos = slice_rows(pos_embedding_, 0, tokens.size());
  return add(emb, pos);
}

Tensor BridgeModel::run_layers(Tensor x, std::size_t num_queries,
                               const AttentionMask& mask,
                               const Tensor* image_feats) const {
  const std::size_t heads = cfg_.num_heads;
  for (const Layer& L : layers_) {
    {
      const Tensor xn = layer_norm(x, L.ln1_g, L.ln1_b);
      const Tensor a =
          masked_attention(matmul(xn, L.wq), matmul(xn, L.wk),
                           matmul(xn, L.wv), mask, heads);
      x = add(x, matmul(a, L.wo));
    }
    if (image_feats != nullptr) {
      const Tensor qs = slice_rows(x, 0, num_queries);
      const Tensor qn = layer_norm(qs, L.lnc_g, L.lnc_b);
      const std::vector<std::uint8_t> allow(
          num_queries * image_feats->rows(), 1);
      const Tensor a = masked_cross_attention(
          matmul(qn, L.cq), matmul(*image_feats, L.ck),
          matmul(*image_feats, L.cv), allow, heads);
      const Tensor updated = add(qs, matmul(a, L.co));
      if (num_queries < x.rows()) {
        const Tensor rest = slice_rows(x, num_queries, x.rows() - num_queries);
        const Tensor parts[] = {updated, rest};
        x = concat_rows(parts);
      } else {
        x = updated;
      }
    }
    {
      const Tensor xn = layer_norm(x, L.ln2_g, L.ln2_b);
      const Tensor h = gelu(add_rowvec(matmul(xn, L.w1), L.b1));
      x = add(x, add_rowvec(matmul(h, L.w2), L.b2));
    }
  }
  return x;
}

ForwardOutput BridgeModel::encode_image(const Tensor& image_feats) const {
  check_image_feats(image_feats, cfg_.enc_dim);
  const AttentionMask mask =
      build_unimodal_mask({cfg_.num_queries, 0, 0});
  ForwardOutput out;
  out.query_states =
      run_layers(query_embeddings_, cfg_.num_queries, mask, &image_feats);
  out.itc_image = l2_normalize_rows(
      linear(out.query_states, proj_image_w_, proj_image_b_));
  return out;
}

ForwardOutput BridgeModel::encode_text(const std::vector<int>& tokens) const {
  if (tokens.empty()) {
    throw std::invalid_argument("bridge: empty token sequence");
  }
  const AttentionMask mask = build_unimodal_mask({0, 0, tokens.size()});
  ForwardOutput out;
  out.text_states = run_layers(embed_tokens(tokens), 0, mask, nullptr);
  const Tensor first = slice_rows(out.text_states, 0, 1);
  out.itc_text =
      l2_normalize_rows(linear(first, proj_text_w_, proj_text_b_));
  return out;
}

ForwardOutput BridgeModel::forward_multimodal(const Tensor& image_feats,
                                              const std::vector<int>& concepts,
                                              const std::vector<int>& text,
                                              MaskKind kind) const {
  check_image_feats(image_feats, cfg_.enc_dim);
  if (text.empty()) {
    throw std::invalid_argument("bridge: empty token sequence");
  }
  const SegmentLayout layout{cfg_.num_queries, concepts.size(), text.size()};
  AttentionMask mask;
  switch (kind) {
    case MaskKind::multimodal_causal:
      mask = build_multimodal_causal_mask(layout);
      break;
    case MaskKind::bidirectional:
      mask = build_bidirectional_mask(layout);
      break;
    default:
      throw std::invalid_argument(
          "bridge: multimodal forward requires a multimodal mask");
  }
  std::vector<int> tokens = concepts;
  tokens.insert(tokens.end(), text.begin(), text.end());
  const Tensor parts[] = {query_embeddings_, embed_tokens(tokens)};
  const Tensor x =
      run_layers(concat_rows(parts), cfg_.num_queries, mask, &image_feats);
  ForwardOutput out;
  out.query_states = slice_rows(x, 0, cfg_.num_queries);
  out.text_states =
      slice_rows(x, cfg_.num_queries + concepts.size(), text.size());
  return out;
}

Tensor BridgeModel::itm_logits(const Tensor& states) const {
  return linear(states, itm_w_, itm_b_);
}

Tensor BridgeModel::lm_logits(const Tensor& states) const {
  return linear(states, lm_w_, lm_b_);
}

std::vector<Tensor> BridgeModel::params() const {
  std::vector<Tensor> out;
  for (const auto& [name, t] : named_params()) out.push_back(t);
  return out;
}

std::vector<std::pair<std::string, Tensor>> BridgeModel::named_params() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("query_embeddings", query_embeddings_);
  out.emplace_back("token_embedding", token_embedding_);
  out.emplace_back("pos_embedding", pos_embedding_);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const Layer& L = layers_[i];
    const std::string p = "layers." + std::to_string(i) + ".";
    out.emplace_back(p + "ln1.gain", L.ln1_g);
    out.emplace_back(p + "ln1.bias", L.ln1_b);
    out.emplace_back(p + "self_attn.wq", L.wq);
    out.emplace_back(p + "self_attn.wk", L.wk);
    out.emplace_back(p + "self_attn.wv", L.wv);
    out.emplace_back(p + "self_attn.wo", L.wo);
    out.emplace_back(p + "lnc.gain", L.lnc_g);
    out.emplace_back(p + "lnc.bias", L.lnc_b);
    out.emplace_back(p + "cross_attn.cq", L.cq);
    out.emplace_back(p + "cross_attn.ck", L.ck);
    out.emplace_back(p + "cross_attn.cv", L.cv);
    out.emplace_back(p + "cross_attn.co", L.co);
    out.emplace_back(p + "ln2.gain", L.ln2_g);
    out.emplace_back(p + "ln2.bias", L.ln2_b);
    out.emplace_back(p + "ffn.w1", L.w1);
    out.emplace_back(p + "ffn.b1", L.b1);
    out.emplace_back(p + "ffn.w2", L.w2);
    out.emplace_back(p + "ffn.b2", L.b2);
  }
  out.emplace_back("proj_image.w", proj_image_w_);
  out.emplace_back("proj_image.b", proj_image_b_);
  out.emplace_back("proj_text.w", proj_text_w_);
  out.emplace_back("proj_text.b", proj_text_b_);
  out.emplace_back("itm.w", itm_w_);
  out.emplace_back("itm.b", itm_b_);
  out.emplace_back("lm.w", lm_w_);
  out.emplace_back("lm.b", lm_b_);
  return out;
}

}  // namespace nevlab
