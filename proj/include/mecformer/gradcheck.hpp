#pragma once

// Central finite-difference verification of reverse-mode gradients.
// The numeric side re-evaluates the loss at perturbed parameter values and
// never touches the tape, so it stays independent of the backward rules it
// is checking.

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "mecformer/tensor.hpp"

namespace mecformer {

struct GradCheckReport {
  std::string group;
  double worst_rel = 0.0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  long long entries = 0;
  bool pass = true;
};

// |a - n| / max(|a|, |n|, floor). The floor keeps finite-difference noise on
// near-zero gradients from registering as relative error.
inline double relative_error(double a, double n, double floor_val) {
  double denom = std::max(std::max(std::abs(a), std::abs(n)), floor_val);
  return std::abs(a - n) / denom;
}

// loss_fn must rebuild the scalar loss from the tensors' current values on
// every call. Returns one report per named parameter group.
inline std::vector<GradCheckReport> finite_difference_check(
    const std::function<Tensor()>& loss_fn,
    const std::vector<std::pair<std::string, Tensor>>& groups, double step = 1e-5,
    double tol = 1e-4, double floor_val = 1e-3) {
  for (auto g : groups) g.second.zero_grad();
  GradTape::active().clear();
  Tensor loss = loss_fn();
  backward(loss);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(groups.size());
  for (const auto& g : groups) analytic.push_back(g.second.grad());

  std::vector<GradCheckReport> reports;
  NoGradGuard ng;
  for (size_t gi = 0; gi < groups.size(); ++gi) {
    GradCheckReport rep;
    rep.group = groups[gi].first;
    Tensor t = groups[gi].second;
    rep.entries = t.size();
    for (long long i = 0; i < t.size(); ++i) {
      double orig = t.data()[i];
      t.data()[i] = orig + step;
      double f_plus = loss_fn().value();
      t.data()[i] = orig - step;
      double f_minus = loss_fn().value();
      t.data()[i] = orig;
      double numeric = (f_plus - f_minus) / (2.0 * step);
      double err = relative_error(analytic[gi][i], numeric, floor_val);
      if (err > rep.worst_rel) {
        rep.worst_rel = err;
        rep.analytic_at_worst = analytic[gi][i];
        rep.numeric_at_worst = numeric;
      }
    }
    rep.pass = rep.worst_rel <= tol;
    reports.push_back(std::move(rep));
  }
  return reports;
}

}  // namespace mecformer
