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

#include "nevlab/gmm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace nevlab {

namespace {

constexpr double kVarFloor = 1e-8;
constexpr double kLog2Pi = 1.8378770664093454836;

double log_pdf(double x, double mean, double var) {
  const double d = x - mean;
  return -0.5 * (kLog2Pi + std::log(var)) - d * d / (2.0 * var);
}

struct MeanVar {
  double mean;
  double var;
};

MeanVar mean_var(const double* xs, std::size_t n) {
  double m = 0.0;
  for (std::size_t i = 0; i < n; ++i) m += xs[i];
  m /= static_cast<double>(n);
  double v = 0.0;
  for (std::size_t i = 0; i < n; ++i) v += (xs[i] - m) * (xs[i] - m);
  v /= static_cast<double>(n);
  return {m, std::max(v, kVarFloor)};
}

}  // namespace

Gmm2 fit_gmm2(const std::vector<double>& losses, double tol,
              std::size_t max_iter) {
  const std::size_t n = losses.size();
  if (n < 4) throw std::invalid_argument("too few samples");
  for (double x : losses) {
    if (!std::isfinite(x)) throw std::invalid_argument("non-finite input");
  }

  Gmm2 g;
  {
    std::vector<double> sorted = losses;
    std::sort(sorted.begin(), sorted.end());
    const std::size_t half = n / 2;  // upper half takes the odd element
    const MeanVar lo = mean_var(sorted.data(), half);
    const MeanVar hi = mean_var(sorted.data() + half, n - half);
    g.weight[0] = 0.5;
    g.weight[1] = 0.5;
    g.mean[0] = lo.mean;
    g.mean[1] = hi.mean;
    g.var[0] = lo.var;
    g.var[1] = hi.var;
  }

  std::vector<double> resp(n);  // responsibility of component 1
  for (std::size_t iter = 0; iter < max_iter; ++iter) {
    // E step, in log space.
    double loglik = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double a = std::log(g.weight[0]) +
                       log_pdf(losses[i], g.mean[0], g.var[0]);
      const double b = std::log(g.weight[1]) +
                       log_pdf(losses[i], g.mean[1], g.var[1]);
      const double m = std::max(a, b);
      const double z = std::exp(a - m) + std::exp(b - m);
      loglik += m + std::log(z);
      resp[i] = std::exp(b - m) / z;
    }
    g.log_likelihood_trace.push_back(loglik);
    const std::size_t steps = g.log_likelihood_trace.size();
    if (steps >= 2 &&
        loglik - g.log_likelihood_trace[steps - 2] < tol) {
      break;
    }

    // M step; the variance floor is the constrained maximizer, so the
    // likelihood stays monotone.
    double n1 = 0.0;
    for (double r : resp) n1 += r;
    const double n0 = static_cast<double>(n) - n1;
    const double safe0 = std::max(n0, 1e-300);
    const double safe1 = std::max(n1, 1e-300);

    double mu0 = 0.0, mu1 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      mu0 += (1.0 - resp[i]) * losses[i];
      mu1 += resp[i] * losses[i];
    }
    mu0 /= safe0;
    mu1 /= safe1;
    double v0 = 0.0, v1 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      v0 += (1.0 - resp[i]) * (losses[i] - mu0) * (losses[i] - mu0);
      v1 += resp[i] * (losses[i] - mu1) * (losses[i] - mu1);
    }
    g.weight[0] = n0 / static_cast<double>(n);
    g.weight[1] = n1 / static_cast<double>(n);
    g.mean[0] = mu0;
    g.mean[1] = mu1;
    g.var[0] = std::max(v0 / safe0, kVarFloor);
    g.var[1] = std::max(v1 / safe1, kVarFloor);
  }

  g.degenerate = std::abs(g.mean[0] - g.mean[1]) < 1e-6;
  return g;
}

std::vector<double> noise_posterior(const Gmm2& gmm,
                                    const std::vector<double>& losses) {
  std::vector<double> eps(losses.size(), 0.0);
  if (gmm.degenerate) return eps;
  const int hi = gmm.higher_mean_component();
  const int lo = 1 - hi;
  for (std::size_t i = 0; i < losses.size(); ++i) {
    const double a = std::log(gmm.weight[lo]) +
                     log_pdf(losses[i], gmm.mean[lo], gmm.var[lo]);
    const double b = std::log(gmm.weight[hi]) +
                     log_pdf(losses[i], gmm.mean[hi], gmm.var[hi]);
    const double m = std::max(a, b);
    eps[i] = std::exp(b - m) / (std::exp(a - m) + std::exp(b - m));
  }
  return eps;
}

std::vector<double> smoothing_rates(const std::vector<double>& epsilon,
                                    double lambda, double omega_max) {
  if (!(omega_max > 0.0 && omega_max < 1.0)) {
    throw std::invalid_argument("omega_max must lie in (0, 1)");
  }
  if (lambda < 0.0) {
    throw std::invalid_argument("lambda must be non-negative");
  }
  std::vector<double> omega(epsilon.size());
  for (std::size_t i = 0; i < epsilon.size(); ++i) {
    omega[i] = std::min(lambda * epsilon[i], omega_max);
  }
  return omega;
}

double roc_auc(const std::vector<double>& scores,
               const std::vector<std::uint8_t>& labels) {
  if (scores.size() != labels.size()) {
    throw std::invalid_argument("roc_auc: size mismatch");
  }
  std::size_t n_pos = 0;
  for (std::uint8_t l : labels) n_pos += l ? 1 : 0;
  const std::size_t n_neg = labels.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) {
    throw std::invalid_argument("roc_auc: both classes required");
  }

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) {
                     return scores[a] < scores[b];
                   });

  // Average ranks over tie groups, then the rank-sum statistic.
  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank =
        0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]]) rank_sum_pos += avg_rank;
    }
    i = j;
  }
  const double np = static_cast<double>(n_pos);
  const double nn = static_cast<double>(n_neg);
  return (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn);
}

}  // namespace nevlab
