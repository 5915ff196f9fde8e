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

#include "nevlab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace nevlab {

namespace {

thread_local GradTape* g_active_tape = nullptr;

using detail::TensorImpl;
using ImplPtr = std::shared_ptr<TensorImpl>;

void ensure_grad(const ImplPtr& t) {
  if (t->grad.empty()) t->grad.assign(t->value.size(), 0.0);
}

bool wants_grad(const ImplPtr& t) { return t->requires_grad || t->tracked; }

Tensor make_out(std::size_t rows, std::size_t cols) {
  return Tensor::zeros(rows, cols);
}

// Marks the output tracked and appends the pull rule when a tape is
// active and some input participates in it.
template <typename Fn>
void maybe_record(std::initializer_list<const Tensor*> ins, const Tensor& out,
                  Fn&& pull) {
  GradTape* tape = GradTape::active();
  if (!tape) return;
  bool any = false;
  for (const Tensor* t : ins) any = any || wants_grad((*t).impl());
  if (!any) return;
  out.impl()->tracked = true;
  tape->record(std::forward<Fn>(pull));
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }
}

const double* out_grad(const ImplPtr& o) {
  return o->grad.empty() ? nullptr : o->grad.data();
}

}  // namespace

Tensor Tensor::zeros(std::size_t rows, std::size_t cols, bool requires_grad) {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->rows = rows;
  impl->cols = cols;
  impl->value.assign(rows * cols, 0.0);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::full(std::size_t rows, std::size_t cols, double v,
                    bool requires_grad) {
  Tensor t = zeros(rows, cols, requires_grad);
  std::fill(t.data().begin(), t.data().end(), v);
  return t;
}

Tensor Tensor::from_data(std::size_t rows, std::size_t cols,
                         std::vector<double> data, bool requires_grad) {
  if (data.size() != rows * cols) {
    throw std::invalid_argument("Tensor::from_data: size mismatch");
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->rows = rows;
  impl->cols = cols;
  impl->value = std::move(data);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return from_data(1, 1, {v}, requires_grad);
}

Tensor Tensor::row_vector(std::vector<double> data, bool requires_grad) {
  const std::size_t n = data.size();
  return from_data(1, n, std::move(data), requires_grad);
}

Tensor Tensor::col_vector(std::vector<double> data, bool requires_grad) {
  const std::size_t n = data.size();
  return from_data(n, 1, std::move(data), requires_grad);
}

double Tensor::item() const {
  if (size() != 1) throw std::invalid_argument("item: tensor is not scalar");
  return impl_->value[0];
}

std::vector<double>& Tensor::grad() {
  ensure_grad(impl_);
  return impl_->grad;
}

const std::vector<double>& Tensor::grad() const {
  ensure_grad(impl_);
  return impl_->grad;
}

Tensor Tensor::clone() const {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->rows = impl_->rows;
  impl->cols = impl_->cols;
  impl->value = impl_->value;
  impl->requires_grad = impl_->requires_grad;
  return Tensor(std::move(impl));
}

GradTape::GradTape() {
  prev_ = g_active_tape;
  g_active_tape = this;
}

GradTape::~GradTape() { g_active_tape = prev_; }

GradTape* GradTape::active() { return g_active_tape; }

void GradTape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw std::invalid_argument("backward: loss must be a scalar tensor");
  }
  ensure_grad(loss.impl());
  loss.impl()->grad[0] = 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
}

// ---------------------------------------------------------------------------
// structural ops

Tensor transpose(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  Tensor out = make_out(n, m);
  const double* av = a.data().data();
  double* ov = out.data().data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) ov[j * m + i] = av[i * n + j];
  maybe_record({&a}, out, [ai = a.impl(), oi = out.impl(), m, n]() {
    const double* g = out_grad(oi);
    if (!g || !wants_grad(ai)) return;
    ensure_grad(ai);
    double* da = ai->grad.data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) da[i * n + j] += g[j * m + i];
  });
  return out;
}

Tensor slice_rows(const Tensor& a, std::size_t r0, std::size_t nrows) {
  if (r0 + nrows > a.rows()) {
    throw std::invalid_argument("slice_rows: out of range");
  }
  const std::size_t n = a.cols();
  Tensor out = make_out(nrows, n);
  std::copy_n(a.data().data() + r0 * n, nrows * n, out.data().data());
  maybe_record({&a}, out, [ai = a.impl(), oi = out.impl(), r0, nrows, n]() {
    const double* g = out_grad(oi);
    if (!g || !wants_grad(ai)) return;
    ensure_grad(ai);
    double* da = ai->grad.data() + r0 * n;
    for (std::size_t k = 0; k < nrows * n; ++k) da[k] += g[k];
  });
  return out;
}

Tensor slice_cols(const Tensor& a, std::size_t c0, std::size_t ncols) {
  if (c0 + ncols > a.cols()) {
    throw std::invalid_argument("slice_cols: out of range");
  }
  const std::size_t m = a.rows(), n = a.cols();
  Tensor out = make_out(m, ncols);
  const double* av = a.data().data();
  double* ov = out.data().data();
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(av + i * n + c0, ncols, ov + i * ncols);
  maybe_record({&a}, out, [ai = a.impl(), oi = out.impl(), c0, m, n,
                           ncols]() {
    const double* g = out_grad(oi);
    if (!g || !wants_grad(ai)) return;
    ensure_grad(ai);
    double* da = ai->grad.data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < ncols; ++j)
        da[i * n + c0 + j] += g[i * ncols + j];
  });
  return out;
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
  const std::size_t n = parts[0].cols();
  std::size_t m = 0;
  for (const Tensor& p : parts) {
    if (p.cols() != n) {
      throw std::invalid_argument("concat_rows: column mismatch");
    }
    m += p.rows();
  }
  Tensor out = make_out(m, n);
  std::size_t r = 0;
  std::vector<ImplPtr> impls;
  std::vector<std::size_t> offsets;
  impls.reserve(parts.size());
  for (const Tensor& p : parts) {
    std::copy_n(p.data().data(), p.size(), out.data().data() + r * n);
    impls.push_back(p.impl());
    offsets.push_back(r);
    r += p.rows();
  }
  GradTape* tape = GradTape::active();
  if (tape) {
    bool any = false;
    for (const auto& ip : impls) any = any || wants_grad(ip);
    if (any) {
      out.impl()->tracked = true;
      tape->record([impls, offsets, oi = out.impl(), n]() {
        const double* g = out_grad(oi);
        if (!g) return;
        for (std::size_t k = 0; k < impls.size(); ++k) {
          const auto& ip = impls[k];
          if (!wants_grad(ip)) continue;
          ensure_grad(ip);
          const double* gk = g + offsets[k] * n;
          for (std::size_t t = 0; t < ip->value.size(); ++t)
            ip->grad[t] += gk[t];
        }
      });
    }
  }
  return out;
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
  const std::size_t m = parts[0].rows();
  std::size_t n = 0;
  for (const Tensor& p : parts) {
    if (p.rows() != m) throw std::invalid_argument("concat_cols: row mismatch");
    n += p.cols();
  }
  Tensor out = make_out(m, n);
  std::size_t c = 0;
  std::vector<ImplPtr> impls;
  std::vector<std::size_t> offsets;
  std::vector<std::size_t> widths;
  for (const Tensor& p : parts) {
    const std::size_t w = p.cols();
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(p.data().data() + i * w, w, out.data().data() + i * n + c);
    impls.push_back(p.impl());
    offsets.push_back(c);
    widths.push_back(w);
    c += w;
  }
  GradTape* tape = GradTape::active();
  if (tape) {
    bool any = false;
    for (const auto& ip : impls) any = any || wants_grad(ip);
    if (any) {
      out.impl()->tracked = true;
      tape->record([impls, offsets, widths, oi = out.impl(), m, n]() {
        const double* g = out_grad(oi);
        if (!g) return;
        for (std::size_t k = 0; k < impls.size(); ++k) {
          const auto& ip = impls[k];
          if (!wants_grad(ip)) continue;
          ensure_grad(ip);
          const std::size_t w = widths[k];
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j)
              ip->grad[i * w + j] += g[i * n + offsets[k] + j];
        }
      });
    }
  }
  return out;
}

Tensor diag(const Tensor& a) {
  if (a.rows() != a.cols()) throw std::invalid_argument("diag: not square");
  const std::size_t n = a.rows();
  Tensor out = make_out(n, 1);
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a(i, i);
  maybe_record({&a}, out, [ai = a.impl(), oi = out.impl(), n]() {
    const double* g = out_grad(oi);
    if (!g || !wants_grad(ai)) return;
    ensure_grad(ai);
    for (std::size_t i = 0; i < n; ++i) ai->grad[i * n + i] += g[i];
  });
  return out;
}

Tensor embedding_rows(const Tensor& table, const std::vector<int>& ids) {
  const std::size_t v = table.rows(), d = table.cols();
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= v) {
      throw std::invalid_argument("embedding_rows: token id out of range");
    }
  }
  Tensor out = make_out(ids.size(), d);
  for (std::size_t t = 0; t < ids.size(); ++t)
    std::copy_n(table.data().data() + static_cast<std::size_t>(ids[t]) * d, d,
                out.data().data() + t * d);
  maybe_record({&table}, out, [ti = table.impl(), oi = out.impl(), ids, d]() {
    const double* g = out_grad(oi);
    if (!g || !wants_grad(ti)) return;
    ensure_grad(ti);
    for (std::size_t t = 0; t < ids.size(); ++t) {
      double* dst = ti->grad.data() + static_cast<std::size_t>(ids[t]) * d;
      const double* src = g + t * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// elementwise

namespace {

template <typename Fwd, typename Pull>
Tensor binary_elementwise(const Tensor& a, const Tensor& b, const char* name,
                          Fwd fwd, Pull pull) {
  check_same_shape(a, b, name);
  Tensor out = make_out(a.rows(), a.cols());
  const std::size_t n = a.size();
  const double* av = a.data().data();
  const double* bv = b.data().data();
  double* ov = out.data().data();
  for (std::size_t k = 0; k < n; ++k) ov[k] = fwd(av[k], bv[k]);
  maybe_record({&a, &b}, out,
               [ai = a.impl(), bi = b.impl(), oi = out.impl(), pull, n]() {
                 const double* g = out_grad(oi);
                 if (!g) return;
                 pull(ai, bi, oi, g, n);
               });
  return out;
}

template <typename Fwd, typename Dv>
Tensor unary_elementwise(const Tensor& a, Fwd fwd, Dv dfda) {
  Tensor out = make_out(a.rows(), a.cols());
  const std::size_t n = a.size();
  const double* av = a.data().data();
  double* ov = out.data().data();
  for (std::size_t k = 0; k < n; ++k) ov[k] = fwd(av[k]);
  maybe_record({&a}, out, [ai = a.impl(), oi = out.impl(), dfda, n]() {
    const double* g = out_grad(oi);
    if (!g || !wants_grad(ai)) return;
    ensure_grad(ai);
    for (std::size_t k = 0; k < n; ++k)
      ai->grad[k] += g[k] * dfda(ai->value[k], oi->value[k]);
  });
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      a, b, "add", [](double x, double y) { return x + y; },
      [](const ImplPtr& ai, const ImplPtr& bi, const ImplPtr&, const double* g,
         std::size_t n) {
        if (wants_grad(ai)) {
          ensure_grad(ai);
          for (std::size_t k = 0; k < n; ++k) ai->grad[k] += g[k];
        }
        if (wants_grad(bi)) {
          ensure_grad(bi);
          for (std::size_t k = 0; k < n; ++k) bi->grad[k] += g[k];
        }
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](const ImplPtr& ai, const ImplPtr& bi, const ImplPtr&, const double* g,
         std::size_t n) {
        if (wants_grad(ai)) {
          ensure_grad(ai);
          for (std::size_t k = 0; k < n; ++k) ai->grad[k] += g[k];
        }
        if (wants_grad(bi)) {
          ensure_grad(bi);
          for (std::size_t k = 0; k < n; ++k) bi->grad[k] -= g[k];
        }
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](const ImplPtr& ai, const ImplPtr& bi, const ImplPtr&, const double* g,
         std::size_t n) {
        if (wants_grad(ai)) {
          ensure_grad(ai);
          for (std::size_t k = 0; k < n; ++k)
            ai->grad[k] += g[k] * bi->value[k];
        }
        if (wants_grad(bi)) {
          ensure_grad(bi);
          for (std::size_t k = 0; k < n; ++k)
            bi->grad[k] += g[k] * ai->value[k];
        }
      });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      a, b, "div", [](double x, double y) { return x / y; },
      [](const ImplPtr& ai, const ImplPtr& bi, const ImplPtr& oi,
         const double* g, std::size_t n) {
        if (wants_grad(ai)) {
          ensure_grad(ai);
          for (std::size_t k = 0; k < n; ++k)
            ai->grad[k] += g[k] / bi->value[k];
        }
        if (wants_grad(bi)) {
          ensure_grad(bi);
          for (std::size_t k = 0; k < n; ++k)
            bi->grad[k] -= g[k] * oi->value[k] / bi->value[k];
        }
      });
}

Tensor neg(const Tensor& a) {
  return unary_elementwise(
      a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Tensor add_scalar(const Tensor& a, double c) {
  return unary_elementwise(
      a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double c) {
  return unary_elementwise(
      a, [c](double x) { return x * c; }, [c](double, double) { return c; });
}

Tensor add_const(const Tensor& a, const std::vector<double>& w) {
  if (w.size() != a.size()) {
    throw std::invalid_argument("add_const: size mismatch");
  }
  Tensor out = make_out(a.rows(), a.cols());
  for (std::size_t k = 0; k < a.size(); ++k)
    out.data()[k] = a.data()[k] + w[k];
  maybe_record({&a}, out, [ai = a.impl(), oi = out.impl()]() {
    const double* g = out_grad(oi);
    if (!g || !wants_grad(ai)) return;
    ensure_grad(ai);
    for (std::size_t k = 0; k < ai->value.size(); ++k) ai->grad[k] += g[k];
  });
  return out;
}

Tensor exp(const Tensor& a) {
  return unary_elementwise(
      a, [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary_elementwise(
      a, [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
  return unary_elementwise(
      a, [](double x) { return std::sqrt(x); },
      [](double, double y) { return 0.5 / y; });
}

Tensor abs(const Tensor& a) {
  return unary_elementwise(
      a, [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor gelu(const Tensor& a) {
  static constexpr double kInvSqrt2 = 0.7071067811865475244;
  static constexpr double kInvSqrt2Pi = 0.3989422804014326779;
  return unary_elementwise(
      a,
      [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
      [](double x, double) {
        return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) +
               x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
      });
}

// ---------------------------------------------------------------------------
// broadcast

Tensor add_rowvec(const Tensor& a, const Tensor& r) {
  const std::size_t m = a.rows(), n = a.cols();
  if (r.rows() != 1 || r.cols() != n) {
    throw std::invalid_argument("add_rowvec: expected 1xN row vector");
  }
  Tensor out = make_out(m, n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      out.data()[i * n + j] = a.data()[i * n + j] + r.data()[j];
  maybe_record({&a, &r}, out,
               [ai = a.impl(), ri = r.impl(), oi = out.impl(), m, n]() {
                 const double* g = out_grad(oi);
                 if (!g) return;
                 if (wants_grad(ai)) {
                   ensure_grad(ai);
                   for (std::size_t k = 0; k < m * n; ++k) ai->grad[k] += g[k];
                 }
                 if (wants_grad(ri)) {
                   ensure_grad(ri);
                   for (std::size_t i = 0; i < m; ++i)
                     for (std::size_t j = 0; j < n; ++j)
                       ri->grad[j] += g[i * n + j];
                 }
               });
  return out;
}

Tensor mul_rowvec(const Tensor& a, const Tensor& r) {
  const std::size_t m = a.rows(), n = a.cols();
  if (r.rows() != 1 || r.cols() != n) {
    throw std::invalid_argument("mul_rowvec: expected 1xN row vector");
  }
  Tensor out = make_out(m, n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      out.data()[i * n + j] = a.data()[i * n + j] * r.data()[j];
  maybe_record({&a, &r}, out,
               [ai = a.impl(), ri = r.impl(), oi = out.impl(), m, n]() {
                 const double* g = out_grad(oi);
                 if (!g) return;
                 if (wants_grad(ai)) {
                   ensure_grad(ai);
                   for (std::size_t i = 0; i < m; ++i)
                     for (std::size_t j = 0; j < n; ++j)
                       ai->grad[i * n + j] += g[i * n + j] * ri->value[j];
                 }
                 if (wants_grad(ri)) {
                   ensure_grad(ri);
                   for (std::size_t i = 0; i < m; ++i)
                     for (std::size_t j = 0; j < n; ++j)
                       ri->grad[j] += g[i * n + j] * ai->value[i * n + j];
                 }
               });
  return out;
}

namespace {

template <typename Fwd, typename PullA, typename PullC>
Tensor colvec_broadcast(const Tensor& a, const Tensor& c, const char* name,
                        Fwd fwd, PullA pull_a, PullC pull_c) {
  const std::size_t m = a.rows(), n = a.cols();
  if (c.rows() != m || c.cols() != 1) {
    throw std::invalid_argument(std::string(name) +
                                ": expected Mx1 column vector");
  }
  Tensor out = make_out(m, n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      out.data()[i * n + j] = fwd(a.data()[i * n + j], c.data()[i]);
  maybe_record({&a, &c}, out,
               [ai = a.impl(), ci = c.impl(), oi = out.impl(), pull_a, pull_c,
                m, n]() {
                 const double* g = out_grad(oi);
                 if (!g) return;
                 if (wants_grad(ai)) {
                   ensure_grad(ai);
                   for (std::size_t i = 0; i < m; ++i)
                     for (std::size_t j = 0; j < n; ++j)
                       ai->grad[i * n + j] +=
                           g[i * n + j] *
                           pull_a(ai->value[i * n + j], ci->value[i]);
                 }
                 if (wants_grad(ci)) {
                   ensure_grad(ci);
                   for (std::size_t i = 0; i < m; ++i) {
                     double acc = 0.0;
                     for (std::size_t j = 0; j < n; ++j)
                       acc += g[i * n + j] *
                              pull_c(ai->value[i * n + j], ci->value[i]);
                     ci->grad[i] += acc;
                   }
                 }
               });
  return out;
}

}  // namespace

Tensor sub_colvec(const Tensor& a, const Tensor& c) {
  return colvec_broadcast(
      a, c, "sub_colvec", [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul_colvec(const Tensor& a, const Tensor& c) {
  return colvec_broadcast(
      a, c, "mul_colvec", [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor div_colvec(const Tensor& a, const Tensor& c) {
  return colvec_broadcast(
      a, c, "div_colvec", [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

// ---------------------------------------------------------------------------
// reductions

Tensor sum_all(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  Tensor out = Tensor::scalar(acc);
  maybe_record({&a}, out, [ai = a.impl(), oi = out.impl()]() {
    const double* g = out_grad(oi);
    if (!g || !wants_grad(ai)) return;
    ensure_grad(ai);
    for (double& d : ai->grad) d += g[0];
  });
  return out;
}

Tensor mean_all(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  const double inv = 1.0 / static_cast<double>(a.size());
  Tensor out = Tensor::scalar(acc * inv);
  maybe_record({&a}, out, [ai = a.impl(), oi = out.impl(), inv]() {
    const double* g = out_grad(oi);
    if (!g || !wants_grad(ai)) return;
    ensure_grad(ai);
    for (double& d : ai->grad) d += g[0] * inv;
  });
  return out;
}

Tensor row_sum(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  Tensor out = make_out(m, 1);
  for (std::size_t i = 0; i < m; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) acc += a.data()[i * n + j];
    out.data()[i] = acc;
  }
  maybe_record({&a}, out, [ai = a.impl(), oi = out.impl(), m, n]() {
    const double* g = out_grad(oi);
    if (!g || !wants_grad(ai)) return;
    ensure_grad(ai);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ai->grad[i * n + j] += g[i];
  });
  return out;
}

Tensor row_mean(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  const double inv = 1.0 / static_cast<double>(n);
  Tensor out = make_out(m, 1);
  for (std::size_t i = 0; i < m; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) acc += a.data()[i * n + j];
    out.data()[i] = acc * inv;
  }
  maybe_record({&a}, out, [ai = a.impl(), oi = out.impl(), m, n, inv]() {
    const double* g = out_grad(oi);
    if (!g || !wants_grad(ai)) return;
    ensure_grad(ai);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ai->grad[i * n + j] += g[i] * inv;
  });
  return out;
}

Tensor colwise_mean(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  const double inv = 1.0 / static_cast<double>(m);
  Tensor out = make_out(1, n);
  for (std::size_t j = 0; j < n; ++j) {
    double acc = 0.0;
    for (std::size_t i = 0; i < m; ++i) acc += a.data()[i * n + j];
    out.data()[j] = acc * inv;
  }
  maybe_record({&a}, out, [ai = a.impl(), oi = out.impl(), m, n, inv]() {
    const double* g = out_grad(oi);
    if (!g || !wants_grad(ai)) return;
    ensure_grad(ai);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ai->grad[i * n + j] += g[j] * inv;
  });
  return out;
}

Tensor colwise_max(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  if (m == 0) throw std::invalid_argument("colwise_max: empty");
  Tensor out = make_out(1, n);
  std::vector<std::size_t> argmax(n, 0);
  for (std::size_t j = 0; j < n; ++j) {
    double best = a.data()[j];
    std::size_t arg = 0;
    for (std::size_t i = 1; i < m; ++i) {
      const double v = a.data()[i * n + j];
      if (v > best) {
        best = v;
        arg = i;
      }
    }
    out.data()[j] = best;
    argmax[j] = arg;
  }
  maybe_record({&a}, out,
               [ai = a.impl(), oi = out.impl(), argmax, n]() {
                 const double* g = out_grad(oi);
                 if (!g || !wants_grad(ai)) return;
                 ensure_grad(ai);
                 for (std::size_t j = 0; j < n; ++j)
                   ai->grad[argmax[j] * n + j] += g[j];
               });
  return out;
}

Tensor row_logsumexp(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  Tensor out = make_out(m, 1);
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      mx = std::max(mx, a.data()[i * n + j]);
    if (!(mx > -std::numeric_limits<double>::infinity())) {
      throw std::invalid_argument("row_logsumexp: row has no finite entry");
    }
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j)
      acc += std::exp(a.data()[i * n + j] - mx);
    out.data()[i] = mx + std::log(acc);
  }
  maybe_record({&a}, out, [ai = a.impl(), oi = out.impl(), m, n]() {
    const double* g = out_grad(oi);
    if (!g || !wants_grad(ai)) return;
    ensure_grad(ai);
    for (std::size_t i = 0; i < m; ++i) {
      if (g[i] == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) {
        const double p = std::exp(ai->value[i * n + j] - oi->value[i]);
        if (p != 0.0) ai->grad[i * n + j] += g[i] * p;
      }
    }
  });
  return out;
}

Tensor gather_cols(const Tensor& a, const std::vector<int>& ids) {
  const std::size_t m = a.rows(), n = a.cols();
  if (ids.size() != m) throw std::invalid_argument("gather_cols: bad ids");
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= n) {
      throw std::invalid_argument("gather_cols: index out of range");
    }
  }
  Tensor out = make_out(m, 1);
  for (std::size_t i = 0; i < m; ++i)
    out.data()[i] = a.data()[i * n + static_cast<std::size_t>(ids[i])];
  maybe_record({&a}, out, [ai = a.impl(), oi = out.impl(), ids, n]() {
    const double* g = out_grad(oi);
    if (!g || !wants_grad(ai)) return;
    ensure_grad(ai);
    for (std::size_t i = 0; i < ids.size(); ++i)
      ai->grad[i * n + static_cast<std::size_t>(ids[i])] += g[i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) throw std::invalid_argument("matmul: inner dim mismatch");
  Tensor out = make_out(m, n);
  const double* av = a.data().data();
  const double* bv = b.data().data();
  double* ov = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = ov + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = bv + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  maybe_record({&a, &b}, out,
               [ai = a.impl(), bi = b.impl(), oi = out.impl(), m, k, n]() {
                 const double* g = out_grad(oi);
                 if (!g) return;
                 if (wants_grad(ai)) {
                   ensure_grad(ai);
                   // dA = G * B^T
                   for (std::size_t i = 0; i < m; ++i) {
                     const double* grow = g + i * n;
                     double* darow = ai->grad.data() + i * k;
                     for (std::size_t p = 0; p < k; ++p) {
                       const double* brow = bi->value.data() + p * n;
                       double acc = 0.0;
                       for (std::size_t j = 0; j < n; ++j)
                         acc += grow[j] * brow[j];
                       darow[p] += acc;
                     }
                   }
                 }
                 if (wants_grad(bi)) {
                   ensure_grad(bi);
                   // dB = A^T * G
                   for (std::size_t i = 0; i < m; ++i) {
                     const double* grow = g + i * n;
                     const double* arow = ai->value.data() + i * k;
                     for (std::size_t p = 0; p < k; ++p) {
                       const double aip = arow[p];
                       if (aip == 0.0) continue;
                       double* dbrow = bi->grad.data() + p * n;
                       for (std::size_t j = 0; j < n; ++j)
                         dbrow[j] += aip * grow[j];
                     }
                   }
                 }
               });
  return out;
}

// ---------------------------------------------------------------------------
// normalization

Tensor softmax_rows(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  for (double v : a.data()) {
    if (!std::isfinite(v)) throw std::invalid_argument("non-finite input");
  }
  Tensor out = make_out(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = a.data().data() + i * n;
    double mx = row[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double acc = 0.0;
    double* orow = out.data().data() + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      orow[j] = std::exp(row[j] - mx);
      acc += orow[j];
    }
    const double inv = 1.0 / acc;
    for (std::size_t j = 0; j < n; ++j) orow[j] *= inv;
  }
  maybe_record({&a}, out, [ai = a.impl(), oi = out.impl(), m, n]() {
    const double* g = out_grad(oi);
    if (!g || !wants_grad(ai)) return;
    ensure_grad(ai);
    for (std::size_t i = 0; i < m; ++i) {
      const double* p = oi->value.data() + i * n;
      const double* gi = g + i * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += gi[j] * p[j];
      double* da = ai->grad.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) da[j] += p[j] * (gi[j] - dot);
    }
  });
  return out;
}

Tensor masked_softmax_rows(const Tensor& a,
                           const std::vector<std::uint8_t>& allow) {
  const std::size_t m = a.rows(), n = a.cols();
  if (allow.size() != m * n) {
    throw std::invalid_argument("masked_softmax_rows: mask size mismatch");
  }
  Tensor out = make_out(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = a.data().data() + i * n;
    const std::uint8_t* mrow = allow.data() + i * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (mrow[j]) mx = std::max(mx, row[j]);
    if (!(mx > -std::numeric_limits<double>::infinity())) {
      throw std::invalid_argument("empty attention row");
    }
    double acc = 0.0;
    double* orow = out.data().data() + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      orow[j] = mrow[j] ? std::exp(row[j] - mx) : 0.0;
      acc += orow[j];
    }
    const double inv = 1.0 / acc;
    for (std::size_t j = 0; j < n; ++j) orow[j] *= inv;
  }
  // Masked entries carry weight exactly zero, so the plain softmax pull
  // rule already sends them zero gradient.
  maybe_record({&a}, out, [ai = a.impl(), oi = out.impl(), m, n]() {
    const double* g = out_grad(oi);
    if (!g || !wants_grad(ai)) return;
    ensure_grad(ai);
    for (std::size_t i = 0; i < m; ++i) {
      const double* p = oi->value.data() + i * n;
      const double* gi = g + i * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += gi[j] * p[j];
      double* da = ai->grad.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) {
        if (p[j] != 0.0) da[j] += p[j] * (gi[j] - dot);
      }
    }
  });
  return out;
}

Tensor l2_normalize_rows(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  Tensor out = make_out(m, n);
  std::vector<double> norms(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = a.data().data() + i * n;
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) acc += row[j] * row[j];
    if (acc == 0.0) throw std::invalid_argument("degenerate embedding");
    const double norm = std::sqrt(acc);
    norms[i] = norm;
    double* orow = out.data().data() + i * n;
    for (std::size_t j = 0; j < n; ++j) orow[j] = row[j] / norm;
  }
  maybe_record({&a}, out,
               [ai = a.impl(), oi = out.impl(), norms, m, n]() {
                 const double* g = out_grad(oi);
                 if (!g || !wants_grad(ai)) return;
                 ensure_grad(ai);
                 for (std::size_t i = 0; i < m; ++i) {
                   const double* y = oi->value.data() + i * n;
                   const double* gi = g + i * n;
                   double dot = 0.0;
                   for (std::size_t j = 0; j < n; ++j) dot += gi[j] * y[j];
                   double* da = ai->grad.data() + i * n;
                   const double inv = 1.0 / norms[i];
                   for (std::size_t j = 0; j < n; ++j)
                     da[j] += (gi[j] - dot * y[j]) * inv;
                 }
               });
  return out;
}

// ---------------------------------------------------------------------------
// composite layers

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
  Tensor centered = sub_colvec(x, row_mean(x));
  Tensor variance = row_mean(mul(centered, centered));
  Tensor scaled = div_colvec(centered, sqrt(add_scalar(variance, eps)));
  return add_rowvec(mul_rowvec(scaled, gain), bias);
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add_rowvec(matmul(x, w), b);
}

// ---------------------------------------------------------------------------
// gradient checking

double grad_check_many(const std::function<Tensor()>& f,
                       std::span<const Tensor> leaves, double h,
                       std::size_t max_coords) {
  for (const Tensor& leaf : leaves) {
    Tensor handle = leaf;  // shares storage
    handle.zero_grad();
  }
  std::vector<std::vector<double>> analytic;
  {
    GradTape tape;
    Tensor loss = f();
    if (loss.size() != 1) {
      throw std::invalid_argument("grad_check: f must be scalar-valued");
    }
    tape.backward(loss);
  }
  analytic.reserve(leaves.size());
  for (const Tensor& leaf : leaves) {
    analytic.push_back(leaf.has_grad()
                           ? leaf.grad()
                           : std::vector<double>(leaf.size(), 0.0));
  }

  double max_err = 0.0;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    Tensor leaf = leaves[li];
    const std::size_t sz = leaf.size();
    const std::size_t count =
        (max_coords == 0 || max_coords >= sz) ? sz : max_coords;
    for (std::size_t c = 0; c < count; ++c) {
      const std::size_t k = (count == sz) ? c : (c * sz) / count;
      const double orig = leaf.data()[k];
      leaf.data()[k] = orig + h;
      const double lp = f().item();
      leaf.data()[k] = orig - h;
      const double lm = f().item();
      leaf.data()[k] = orig;
      const double fd = (lp - lm) / (2.0 * h);
      const double an = analytic[li][k];
      double err = std::abs(an - fd) / std::max(1.0, std::abs(an));
      if (!std::isfinite(err)) {
        err = std::numeric_limits<double>::infinity();
      }
      max_err = std::max(max_err, err);
    }
  }
  return max_err;
}

double grad_check(const std::function<Tensor(const Tensor&)>& f,
                  const Tensor& x, double h) {
  Tensor leaf = x.clone();
  leaf.set_requires_grad(true);
  return grad_check_many([&f, &leaf]() { return f(leaf); },
                         std::span<const Tensor>(&leaf, 1), h);
}

}  // namespace nevlab
