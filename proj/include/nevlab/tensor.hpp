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
#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace nevlab {

namespace detail {

struct TensorImpl {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> value;
  std::vector<double> grad;    // empty means zero
  bool requires_grad = false;  // leaf wants gradients
  bool tracked = false;        // produced while a tape was recording
};

}  // namespace detail

// Dense row-major matrix of doubles. Scalars are 1x1, row vectors 1xN,
// column vectors Nx1. Handles share storage; clone() makes a deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::size_t rows, std::size_t cols,
                      bool requires_grad = false);
  static Tensor full(std::size_t rows, std::size_t cols, double v,
                     bool requires_grad = false);
  static Tensor from_data(std::size_t rows, std::size_t cols,
                          std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);
  static Tensor row_vector(std::vector<double> data,
                           bool requires_grad = false);
  static Tensor col_vector(std::vector<double> data,
                           bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  std::size_t rows() const { return impl_->rows; }
  std::size_t cols() const { return impl_->cols; }
  std::size_t size() const { return impl_->value.size(); }

  double operator()(std::size_t i, std::size_t j) const {
    return impl_->value[i * impl_->cols + j];
  }
  double& at(std::size_t i, std::size_t j) {
    return impl_->value[i * impl_->cols + j];
  }

  std::vector<double>& data() { return impl_->value; }
  const std::vector<double>& data() const { return impl_->value; }

  // Value of a 1x1 tensor; throws otherwise.
  double item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool b) { impl_->requires_grad = b; }

  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  // Gradient buffer, zero-filled on first access.
  std::vector<double>& grad();
  const std::vector<double>& grad() const;
  void zero_grad() { impl_->grad.clear(); }

  Tensor clone() const;

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl)
      : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;

  friend Tensor make_tensor(std::size_t, std::size_t);
};

// Record of the primitive operations of one forward pass. Constructing a
// tape makes it the active tape for the current thread; destruction
// restores the previous one. Ops append their local-gradient rule while a
// tape is active and an input is tracked; backward() replays the records
// in reverse, which is a valid reverse-topological order because every op
// creates a fresh output tensor.
class GradTape {
 public:
  GradTape();
  ~GradTape();
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  // Seeds d(loss)/d(loss) = 1 and accumulates gradients into every
  // reachable tracked tensor. loss must be 1x1.
  void backward(const Tensor& loss);

  std::size_t num_recorded() const { return entries_.size(); }

  void record(std::function<void()> pull) {
    entries_.push_back(std::move(pull));
  }

  static GradTape* active();

 private:
  std::vector<std::function<void()>> entries_;
  GradTape* prev_ = nullptr;
};

// ---- structural ops ----
Tensor transpose(const Tensor& a);
Tensor slice_rows(const Tensor& a, std::size_t r0, std::size_t nrows);
Tensor slice_cols(const Tensor& a, std::size_t c0, std::size_t ncols);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor diag(const Tensor& a);  // NxN -> Nx1
// table is VxD; out row t = table row ids[t]. Throws if an id >= V.
Tensor embedding_rows(const Tensor& table, const std::vector<int>& ids);

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);
// a + w with w a constant array (may contain -inf); gradient passes
// through to a untouched.
Tensor add_const(const Tensor& a, const std::vector<double>& w);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor gelu(const Tensor& a);  // exact erf form

// ---- broadcast (2-D) ----
Tensor add_rowvec(const Tensor& a, const Tensor& r);   // MxN + 1xN
Tensor mul_rowvec(const Tensor& a, const Tensor& r);   // MxN * 1xN
Tensor sub_colvec(const Tensor& a, const Tensor& c);   // MxN - Mx1
Tensor mul_colvec(const Tensor& a, const Tensor& c);   // MxN * Mx1
Tensor div_colvec(const Tensor& a, const Tensor& c);   // MxN / Mx1

// ---- reductions ----
Tensor sum_all(const Tensor& a);   // 1x1
Tensor mean_all(const Tensor& a);  // 1x1
Tensor row_sum(const Tensor& a);   // Mx1
Tensor row_mean(const Tensor& a);  // Mx1
Tensor colwise_mean(const Tensor& a);  // 1xN
// Column maxima; gradient routes to the first maximal row per column.
Tensor colwise_max(const Tensor& a);  // 1xN
// Stable log(sum(exp(row))) with max-subtraction; -inf entries are
// legitimate and contribute zero mass.
Tensor row_logsumexp(const Tensor& a);  // Mx1
// out[i] = a[i, ids[i]].
Tensor gather_cols(const Tensor& a, const std::vector<int>& ids);  // Mx1

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);

// ---- normalization ----
// Row-wise softmax with max-subtraction. Throws "non-finite input" on
// NaN/Inf entries.
Tensor softmax_rows(const Tensor& a);
// Row-wise softmax over allowed columns only; disallowed columns get
// exactly zero weight. allow is row-major MxN. Throws "empty attention
// row" if a row allows nothing.
Tensor masked_softmax_rows(const Tensor& a, const std::vector<std::uint8_t>& allow);
// Rows scaled to unit Euclidean norm. Throws "degenerate embedding" on a
// zero row.
Tensor l2_normalize_rows(const Tensor& a);

// ---- composite layers ----
// Per-row standardization followed by a learned affine map: gain and
// bias are 1xD.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);
// x*w + b with b a 1xN row vector.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// Max over coordinates of |analytic - central difference| / max(1, |analytic|)
// for scalar-valued f at x, with step h.
double grad_check(const std::function<Tensor(const Tensor&)>& f,
                  const Tensor& x, double h);

// Same error measure for a scalar-valued closure over several leaves.
// f() must be pure given the leaf values. Checks at most max_coords
// coordinates per leaf (all when max_coords == 0), chosen evenly.
double grad_check_many(const std::function<Tensor()>& f,
                       std::span<const Tensor> leaves, double h,
                       std::size_t max_coords = 0);

}  // namespace nevlab
