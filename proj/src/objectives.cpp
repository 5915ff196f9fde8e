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

#include "nevlab/objectives.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "nevlab/vocab.hpp"

namespace nevlab {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void check_unit_rows(const Tensor& m, const char* what) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    double norm = 0.0;
    for (std::size_t j = 0; j < m.cols(); ++j) norm += m(i, j) * m(i, j);
    if (std::abs(std::sqrt(norm) - 1.0) > 1e-6) {
      throw std::invalid_argument(what);
    }
  }
}

void check_square_batch(const SimilarityMatrix& s, const char* prefix) {
  if (!s.s.defined() || s.s.rows() != s.s.cols()) {
    throw std::invalid_argument(std::string(prefix) +
                                ": similarity matrix must be square");
  }
  if (s.s.rows() < 2) {
    throw std::invalid_argument(std::string(prefix) +
                                ": batch must have at least 2 samples");
  }
}

// log(1 - omega) on the diagonal of row i, log(omega / (B - 1)) off it;
// omega = 0 sends the negatives to -infinity (zero mass).
std::vector<double> nitc_row_shifts(const std::vector<double>& omega,
                                    std::size_t b) {
  std::vector<double> w(b * b);
  for (std::size_t i = 0; i < b; ++i) {
    const double neg = omega[i] > 0.0
                           ? std::log(omega[i] / static_cast<double>(b - 1))
                           : -kInf;
    for (std::size_t j = 0; j < b; ++j) {
      w[i * b + j] = i == j ? std::log1p(-omega[i]) : neg;
    }
  }
  return w;
}

// Softmax draw over row values with one index excluded.
std::size_t sample_excluding(const std::vector<double>& vals, std::size_t skip,
                             Rng& rng) {
  double best = -kInf;
  for (std::size_t j = 0; j < vals.size(); ++j) {
    if (j != skip && vals[j] > best) best = vals[j];
  }
  std::vector<double> p(vals.size(), 0.0);
  double total = 0.0;
  for (std::size_t j = 0; j < vals.size(); ++j) {
    if (j == skip) continue;
    p[j] = std::exp(vals[j] - best);
    total += p[j];
  }
  const double u = rng.uniform() * total;
  double acc = 0.0;
  std::size_t last = skip == vals.size() - 1 ? vals.size() - 2
                                             : vals.size() - 1;
  for (std::size_t j = 0; j < vals.size(); ++j) {
    if (j == skip) continue;
    acc += p[j];
    if (u < acc) return j;
    last = j;
  }
  return last;  // numeric residue lands on the final candidate
}

// Cross-entropy of one two-class logit row against `label`.
Tensor binary_ce(const Tensor& logits, int label) {
  return sub(row_logsumexp(logits), gather_cols(logits, {label}));
}

}  // namespace

SimilarityMatrix similarity_matrix(const Tensor& v, const Tensor& t,
                                   double tau) {
  if (tau <= 0.0) {
    throw std::invalid_argument("similarity: tau must be positive");
  }
  if (!v.defined() || !t.defined() || v.rows() != t.rows() ||
      v.cols() != t.cols()) {
    throw std::invalid_argument("similarity: shape mismatch");
  }
  check_unit_rows(v, "similarity: embeddings must be unit rows");
  check_unit_rows(t, "similarity: embeddings must be unit rows");
  return {mul_scalar(matmul(v, transpose(t)), 1.0 / tau), tau};
}

SimilarityMatrix similarity_matrix(const std::vector<Tensor>& image_queries,
                                   const Tensor& t, double tau,
                                   QueryPooling pooling) {
  if (tau <= 0.0) {
    throw std::invalid_argument("similarity: tau must be positive");
  }
  if (!t.defined() || image_queries.size() != t.rows()) {
    throw std::invalid_argument("similarity: shape mismatch");
  }
  check_unit_rows(t, "similarity: embeddings must be unit rows");
  const Tensor tt = transpose(t);
  std::vector<Tensor> rows;
  rows.reserve(image_queries.size());
  for (const Tensor& q : image_queries) {
    if (q.cols() != t.cols()) {
      throw std::invalid_argument("similarity: shape mismatch");
    }
    check_unit_rows(q, "similarity: embeddings must be unit rows");
    if (pooling == QueryPooling::max_query) {
      rows.push_back(colwise_max(matmul(q, tt)));
    } else {
      rows.push_back(matmul(l2_normalize_rows(colwise_mean(q)), tt));
    }
  }
  const Tensor s = concat_rows(std::span<const Tensor>(rows.data(),
                                                       rows.size()));
  return {mul_scalar(s, 1.0 / tau), tau};
}

Tensor nitc_loss(const NitcInputs& in, bool strict_denominator) {
  check_square_batch(in.s, "nitc");
  const std::size_t b = in.s.batch();
  if (in.omega.size() != b) {
    throw std::invalid_argument("nitc: omega size mismatch");
  }
  for (double om : in.omega) {
    if (!(om >= 0.0 && om < 1.0)) {
      throw std::invalid_argument("nitc: omega out of range [0,1)");
    }
  }
  std::vector<double> pos_shift(b);
  for (std::size_t i = 0; i < b; ++i) pos_shift[i] = std::log1p(-in.omega[i]);

  const Tensor& s = in.s.s;
  const Tensor positives = add_const(diag(s), pos_shift);
  Tensor lse_rows, lse_cols;
  if (strict_denominator) {
    lse_rows = row_logsumexp(s);
    lse_cols = row_logsumexp(transpose(s));
  } else {
    const std::vector<double> shifts = nitc_row_shifts(in.omega, b);
    lse_rows = row_logsumexp(add_const(s, shifts));
    lse_cols = row_logsumexp(add_const(transpose(s), shifts));
  }
  const Tensor total =
      sum_all(add(sub(lse_rows, positives), sub(lse_cols, positives)));
  return mul_scalar(total, 1.0 / (2.0 * static_cast<double>(b)));
}

Tensor itc_loss(const SimilarityMatrix& s) {
  check_square_batch(s, "itc");
  const std::size_t b = s.batch();
  const Tensor d = diag(s.s);
  const Tensor total = sum_all(add(sub(row_logsumexp(s.s), d),
                                   sub(row_logsumexp(transpose(s.s)), d)));
  return mul_scalar(total, 1.0 / (2.0 * static_cast<double>(b)));
}

std::vector<double> per_sample_itc(const SimilarityMatrix& s) {
  const std::size_t b = s.s.rows();
  std::vector<double> out(b);
  for (std::size_t i = 0; i < b; ++i) {
    double row_max = -kInf, col_max = -kInf;
    for (std::size_t j = 0; j < b; ++j) {
      row_max = std::max(row_max, s.s(i, j));
      col_max = std::max(col_max, s.s(j, i));
    }
    double row_sum = 0.0, col_sum = 0.0;
    for (std::size_t j = 0; j < b; ++j) {
      row_sum += std::exp(s.s(i, j) - row_max);
      col_sum += std::exp(s.s(j, i) - col_max);
    }
    const double row_ce = row_max + std::log(row_sum) - s.s(i, i);
    const double col_ce = col_max + std::log(col_sum) - s.s(i, i);
    out[i] = 0.5 * (row_ce + col_ce);
  }
  return out;
}

HardNegatives mine_hard_negatives(const SimilarityMatrix& s, Rng& rng) {
  check_square_batch(s, "hard negatives");
  const std::size_t b = s.batch();
  HardNegatives out;
  out.text_for_image.resize(b);
  out.image_for_text.resize(b);
  std::vector<double> vals(b);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < b; ++j) vals[j] = s.s(i, j);
    out.text_for_image[i] = sample_excluding(vals, i, rng);
  }
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < b; ++j) vals[j] = s.s(j, i);
    out.image_for_text[i] = sample_excluding(vals, i, rng);
  }
  return out;
}

Tensor citm_loss(const BridgeModel& model,
                 const std::vector<Tensor>& image_feats,
                 const std::vector<std::vector<int>>& concepts,
                 const std::vector<std::vector<int>>& texts,
                 const HardNegatives& negatives, std::size_t max_concepts) {
  const std::size_t b = image_feats.size();
  if (b < 2 || concepts.size() != b || texts.size() != b ||
      negatives.text_for_image.size() != b ||
      negatives.image_for_text.size() != b) {
    throw std::invalid_argument("citm: batch size mismatch");
  }
  for (const std::vector<int>& c : concepts) {
    if (c.size() > max_concepts) {
      throw std::invalid_argument("citm: too many concept tokens");
    }
  }

  const auto example = [&](std::size_t img, std::size_t txt, int label) {
    const ForwardOutput out = model.forward_multimodal(
        image_feats[img], concepts[img], texts[txt], MaskKind::bidirectional);
    const Tensor pooled = colwise_mean(model.itm_logits(out.query_states));
    return binary_ce(pooled, label);
  };

  std::vector<Tensor> losses;
  losses.reserve(3 * b);
  for (std::size_t i = 0; i < b; ++i) losses.push_back(example(i, i, 1));
  for (std::size_t i = 0; i < b; ++i) {
    losses.push_back(example(i, negatives.text_for_image[i], 0));
  }
  for (std::size_t i = 0; i < b; ++i) {
    losses.push_back(example(negatives.image_for_text[i], i, 0));
  }
  return mean_all(concat_rows(std::span<const Tensor>(losses.data(),
                                                      losses.size())));
}

Tensor citg_token_losses(const BridgeModel& model, const Tensor& image_feats,
                         const std::vector<int>& concepts,
                         const std::vector<int>& text) {
  if (text.empty()) {
    throw std::invalid_argument("citg: empty text");
  }
  std::vector<int> block;
  block.reserve(text.size() + 1);
  block.push_back(Vocab::kDec);
  block.insert(block.end(), text.begin(), text.end());
  const ForwardOutput out = model.forward_multimodal(
      image_feats, concepts, block, MaskKind::multimodal_causal);
  const Tensor logits =
      model.lm_logits(slice_rows(out.text_states, 0, text.size()));
  return sub(row_logsumexp(logits), gather_cols(logits, text));
}

Tensor citg_loss(const BridgeModel& model, const Tensor& image_feats,
                 const std::vector<int>& concepts,
                 const std::vector<int>& text) {
  return mean_all(citg_token_losses(model, image_feats, concepts, text));
}

LlmProjection LlmProjection::init(std::size_t d_model, std::size_t d_llm,
                                  std::uint64_t seed) {
  Rng rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(d_model));
  std::vector<double> data(d_model * d_llm);
  for (double& x : data) x = rng.uniform(-bound, bound);
  LlmProjection fc;
  fc.w = Tensor::from_data(d_model, d_llm, std::move(data),
                           /*requires_grad=*/true);
  fc.b = Tensor::zeros(1, d_llm, /*requires_grad=*/true);
  return fc;
}

Tensor decoder_lm_loss(const FrozenDecoderLM& lm, const Tensor& prefix,
                       const std::vector<int>& text) {
  if (text.empty()) {
    throw std::invalid_argument("generative: empty text");
  }
  std::vector<int> seq;
  seq.reserve(text.size() + 1);
  seq.push_back(Vocab::kDec);
  seq.insert(seq.end(), text.begin(), text.end());
  const Tensor logits = lm.logits(prefix, seq);
  const Tensor scored = slice_rows(logits, 0, text.size());
  return mean_all(sub(row_logsumexp(scored), gather_cols(scored, text)));
}

Tensor generative_loss(const BridgeModel& bridge, const LlmProjection& fc,
                       const FrozenDecoderLM& lm, const Tensor& image_feats,
                       const std::vector<int>& text) {
  if (!fc.w.defined() || fc.w.rows() != bridge.config().d_model) {
    throw std::invalid_argument("generative: projection input dim mismatch");
  }
  if (fc.w.cols() != lm.d_llm() || fc.b.cols() != lm.d_llm()) {
    throw std::invalid_argument("generative: projection width mismatch");
  }
  const ForwardOutput out = bridge.encode_image(image_feats);
  const Tensor prefix = linear(out.query_states, fc.w, fc.b);
  return decoder_lm_loss(lm, prefix, text);
}

}  // namespace nevlab
