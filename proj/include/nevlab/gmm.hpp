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
#include <vector>

namespace nevlab {

// Two-component 1-D Gaussian mixture fitted by EM. Component order is
// internal; consumers should use higher_mean_component().
struct Gmm2 {
  double weight[2] = {0.5, 0.5};
  double mean[2] = {0.0, 0.0};
  double var[2] = {1.0, 1.0};
  std::vector<double> log_likelihood_trace;
  // Means closer than 1e-6: the loss distribution is effectively
  // unimodal and no sample is called noisy.
  bool degenerate = false;

  int higher_mean_component() const { return mean[1] >= mean[0] ? 1 : 0; }
};

// EM fit with deterministic initialization: component 1 from the lower
// half of the sorted values, component 2 from the upper half, equal
// weights. Variances are floored at 1e-8. Iterates until the
// log-likelihood gain drops below tol or max_iter is hit.
// Throws "too few samples" for fewer than 4 values and rejects
// non-finite input.
Gmm2 fit_gmm2(const std::vector<double>& losses, double tol = 1e-8,
              std::size_t max_iter = 200);

// Posterior responsibility of the higher-mean component at each loss;
// all zeros when the fit is degenerate.
std::vector<double> noise_posterior(const Gmm2& gmm,
                                    const std::vector<double>& losses);

// omega[i] = min(lambda * epsilon[i], omega_max); omega_max must lie in
// (0, 1).
std::vector<double> smoothing_rates(const std::vector<double>& epsilon,
                                    double lambda, double omega_max);

// Area under the ROC curve via the rank-sum (Mann-Whitney) statistic;
// tied scores contribute half. labels hold 0/1; both classes must be
// present.
double roc_auc(const std::vector<double>& scores,
               const std::vector<std::uint8_t>& labels);

}  // namespace nevlab
