#pragma once

// Expert consultation projection layer. A two-layer router scores every
// patch for every task; the target task's scores are temperature-boosted
// (scaling), per-task means are shifted toward the target (shifting), and
// the resulting scalar weights blend T expert projection matrices on top of
// a shared common-knowledge matrix. Also provides the two baseline
// projections used for ablation: a single shared linear map (P1) and one
// independent linear map per task (PT).

#include <vector>

#include "mecformer/tensor.hpp"

namespace mecformer {

enum class ProjectionKind { kEcn, kP1, kPT };
enum class ScaleNorm {
  kSoftmax,      // exponentiate the boosted target logit in the denominator too
  kUnexpTarget,  // denominator keeps the target term unexponentiated
};

struct TaskIndicator {
  int t = 0;  // 0-based
  int count = 1;

  TaskIndicator(int task, int num_tasks) : t(task), count(num_tasks) {
    if (num_tasks < 1) throw ConfigError("TaskIndicator: num_tasks must be >= 1");
    if (task < 0 || task >= num_tasks)
      throw ConfigError("TaskIndicator: task " + std::to_string(task) + " outside [0, " +
                        std::to_string(num_tasks) + ")");
  }

  std::vector<double> onehot() const {
    std::vector<double> v(count, 0.0);
    v[t] = 1.0;
    return v;
  }
};

struct EcnParams {
  std::vector<Tensor> experts;  // T matrices [d_f x d_model]
  Tensor common;                // [d_f x d_model]
  Tensor fc1_w, fc1_b;          // router layer 1: d_f -> d_model
  Tensor fc2_w, fc2_b;          // router layer 2: d_model -> T
  double gamma = 5.0;
  double beta = 5.0;
  bool router_bias = true;
  ScaleNorm scale_norm = ScaleNorm::kSoftmax;

  int num_tasks() const { return static_cast<int>(experts.size()); }

  static EcnParams init(int num_tasks, int d_f, int d_model, Rng& rng, double gamma = 5.0,
                        double beta = 5.0, bool router_bias = true) {
    if (num_tasks < 1) throw ConfigError("EcnParams: num_tasks must be >= 1");
    if (!(gamma > 0.0) || !std::isfinite(gamma))
      throw ConfigError("EcnParams: gamma must be finite and > 0");
    if (!(beta > 0.0) || !std::isfinite(beta))
      throw ConfigError("EcnParams: beta must be finite and > 0");
    double bf = 1.0 / std::sqrt(static_cast<double>(d_f));
    double bm = 1.0 / std::sqrt(static_cast<double>(d_model));
    EcnParams p;
    for (int i = 0; i < num_tasks; ++i)
      p.experts.push_back(Tensor::uniform({d_f, d_model}, rng, -bf, bf).set_requires_grad());
    p.common = Tensor::uniform({d_f, d_model}, rng, -bf, bf).set_requires_grad();
    p.fc1_w = Tensor::uniform({d_f, d_model}, rng, -bf, bf).set_requires_grad();
    p.fc1_b = Tensor::zeros({d_model}).set_requires_grad();
    p.fc2_w = Tensor::uniform({d_model, num_tasks}, rng, -bm, bm).set_requires_grad();
    p.fc2_b = Tensor::zeros({num_tasks}).set_requires_grad();
    p.gamma = gamma;
    p.beta = beta;
    p.router_bias = router_bias;
    return p;
  }
};

// Preliminary consultation: raw per-patch weights, one row per expert.
// Returns the [T x N] transpose of FC2(ReLU(FC1(x))).
inline Tensor route(const Tensor& x, const EcnParams& p) {
  detail::require_2d(x, "route");
  if (x.dim(1) != p.fc1_w.dim(0))
    throw ShapeError("route: input width " + std::to_string(x.dim(1)) +
                     " vs router fan-in " + std::to_string(p.fc1_w.dim(0)));
  Tensor h = matmul(x, p.fc1_w);
  if (p.router_bias) h = add_rowwise(h, p.fc1_b);
  h = relu(h);
  Tensor w = matmul(h, p.fc2_w);
  if (p.router_bias) w = add_rowwise(w, p.fc2_b);
  return transpose(w);
}

// Expert assignment, scaling step. Boosts the target task's row by gamma,
// then normalizes across tasks per patch.
inline Tensor scale_weights(const Tensor& w, int t, double gamma,
                            ScaleNorm norm = ScaleNorm::kSoftmax) {
  detail::require_2d(w, "scale_weights");
  int tasks = w.dim(0), n = w.dim(1);
  if (t < 0 || t >= tasks)
    throw ConfigError("scale_weights: task " + std::to_string(t) + " outside [0, " +
                      std::to_string(tasks) + ")");
  std::vector<Tensor> rows;
  rows.reserve(tasks);
  for (int i = 0; i < tasks; ++i) {
    Tensor r = slice_rows(w, i, 1);
    rows.push_back(i == t ? scale(r, gamma) : r);
  }
  Tensor logits = concat(rows, 0);
  if (norm == ScaleNorm::kSoftmax) return softmax(logits, 0);
  // kUnexpTarget: numerator exp(logits), denominator per patch is
  // sum_{i != t} exp(w_i) + gamma * w_t. Can be non-positive; kept only for
  // side-by-side comparison with the normalized form.
  Tensor ew = mecformer::exp(w);
  Tensor denom = sub(sum_axis(ew, 0), reshape(slice_rows(ew, t, 1), {n}));
  denom = add(denom, reshape(scale(slice_rows(w, t, 1), gamma), {n}));
  Tensor denom_rows = matmul(Tensor::full({tasks, 1}, 1.0), reshape(denom, {1, n}));
  return mul(mecformer::exp(logits), reciprocal(denom_rows));
}

// Expert assignment, shifting step: per-task mean over patches, plus beta on
// the target task.
inline Tensor shift_weights(const Tensor& w_scaled, int t, double beta) {
  detail::require_2d(w_scaled, "shift_weights");
  int tasks = w_scaled.dim(0);
  if (t < 0 || t >= tasks)
    throw ConfigError("shift_weights: task " + std::to_string(t) + " outside [0, " +
                      std::to_string(tasks) + ")");
  Tensor shift({tasks});
  shift.ref(t) = beta;
  return add(mean_axis(w_scaled, 1), shift);
}

// Expert consultation: blend experts with the shifted weights on top of the
// common knowledge, then project the bag.
inline Tensor consult(const Tensor& x, const Tensor& w_bar, const EcnParams& p) {
  if (w_bar.rank() != 1 || w_bar.dim(0) != p.num_tasks())
    throw ShapeError("consult: weight shape " + shape_str(w_bar.shape()) + " for " +
                     std::to_string(p.num_tasks()) + " experts");
  Tensor blended = add(p.common, scalar_weighted_sum(p.experts, w_bar));
  return matmul(x, blended);
}

// Full projection: route -> scale -> shift -> consult.
inline Tensor ecn_project(const Tensor& x, int t, const EcnParams& p) {
  Tensor w = route(x, p);
  Tensor w_scaled = scale_weights(w, t, p.gamma, p.scale_norm);
  Tensor w_bar = shift_weights(w_scaled, t, p.beta);
  return consult(x, w_bar, p);
}

// Baseline projections for the ablation grid.
struct BaselineProjection {
  Tensor p1_w, p1_b;                  // P1: one shared map
  std::vector<Tensor> pt_w, pt_b;     // PT: one map per task

  static BaselineProjection init_p1(int d_f, int d_model, Rng& rng) {
    double bf = 1.0 / std::sqrt(static_cast<double>(d_f));
    BaselineProjection p;
    p.p1_w = Tensor::uniform({d_f, d_model}, rng, -bf, bf).set_requires_grad();
    p.p1_b = Tensor::zeros({d_model}).set_requires_grad();
    return p;
  }

  static BaselineProjection init_pt(int num_tasks, int d_f, int d_model, Rng& rng) {
    double bf = 1.0 / std::sqrt(static_cast<double>(d_f));
    BaselineProjection p;
    for (int i = 0; i < num_tasks; ++i) {
      p.pt_w.push_back(Tensor::uniform({d_f, d_model}, rng, -bf, bf).set_requires_grad());
      p.pt_b.push_back(Tensor::zeros({d_model}).set_requires_grad());
    }
    return p;
  }
};

inline Tensor project_baseline(const Tensor& x, const BaselineProjection& p,
                               ProjectionKind kind, int t = -1) {
  if (kind == ProjectionKind::kP1) {
    return add_rowwise(matmul(x, p.p1_w), p.p1_b);
  }
  if (kind == ProjectionKind::kPT) {
    if (t < 0 || t >= static_cast<int>(p.pt_w.size()))
      throw ContractError("project_baseline: PT needs a task index in [0, " +
                          std::to_string(p.pt_w.size()) + "), got " + std::to_string(t));
    return add_rowwise(matmul(x, p.pt_w[t]), p.pt_b[t]);
  }
  throw ContractError("project_baseline: use ecn_project for the ECN kind");
}

}  // namespace mecformer
