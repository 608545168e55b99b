#pragma once

// Dense 64-bit tensor with a dynamic reverse-mode gradient tape.
// Ops record their backward rule on a thread-local tape as they execute;
// backward() replays the tape in reverse and clears it. Shapes must match
// exactly everywhere except the documented bias-add-over-rows broadcast.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <vector>

#include "mecformer/common.hpp"

namespace mecformer {

namespace detail {
struct TensorNode {
  std::vector<int> shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;

  long long numel() const {
    long long n = 1;
    for (int d : shape) n *= d;
    return n;
  }
  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};
}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape) {
    check_shape(shape);
    n_ = std::make_shared<detail::TensorNode>();
    n_->shape = std::move(shape);
    n_->data.assign(static_cast<size_t>(n_->numel()), 0.0);
  }

  Tensor(std::vector<int> shape, std::vector<double> data) {
    check_shape(shape);
    n_ = std::make_shared<detail::TensorNode>();
    n_->shape = std::move(shape);
    long long want = n_->numel();
    if (static_cast<long long>(data.size()) != want)
      throw ShapeError("data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(n_->shape));
    n_->data = std::move(data);
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int> shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.n_->data.begin(), t.n_->data.end(), v);
    return t;
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  static Tensor uniform(std::vector<int> shape, Rng& rng, double lo, double hi) {
    Tensor t(std::move(shape));
    for (double& v : t.n_->data) v = rng.uniform(lo, hi);
    return t;
  }

  static Tensor randn(std::vector<int> shape, Rng& rng, double mean = 0.0,
                      double stddev = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.n_->data) v = rng.normal(mean, stddev);
    return t;
  }

  static Tensor from(const std::vector<std::vector<double>>& rows) {
    if (rows.empty()) throw ShapeError("from: empty matrix");
    int m = static_cast<int>(rows.size());
    int n = static_cast<int>(rows[0].size());
    Tensor t({m, n});
    for (int i = 0; i < m; ++i) {
      if (static_cast<int>(rows[i].size()) != n)
        throw ShapeError("from: ragged rows");
      std::copy(rows[i].begin(), rows[i].end(), t.n_->data.begin() + i * n);
    }
    return t;
  }

  static Tensor identity(int n) {
    Tensor t({n, n});
    for (int i = 0; i < n; ++i) t.n_->data[i * n + i] = 1.0;
    return t;
  }

  bool defined() const { return static_cast<bool>(n_); }
  const std::vector<int>& shape() const { return n_->shape; }
  int rank() const { return static_cast<int>(n_->shape.size()); }
  int dim(int i) const { return n_->shape[i]; }
  long long size() const { return n_->numel(); }
  int rows() const { return rank() == 2 ? dim(0) : (rank() == 1 ? 1 : -1); }
  int cols() const { return rank() == 2 ? dim(1) : (rank() == 1 ? dim(0) : -1); }

  double* data() { return n_->data.data(); }
  const double* data() const { return n_->data.data(); }
  std::vector<double>& vec() { return n_->data; }
  const std::vector<double>& vec() const { return n_->data; }

  double operator()(int i) const { return n_->data[i]; }
  double operator()(int i, int j) const { return n_->data[i * dim(1) + j]; }
  double& ref(int i) { return n_->data[i]; }
  double& ref(int i, int j) { return n_->data[i * dim(1) + j]; }

  double value() const {
    if (size() != 1) throw ContractError("value(): tensor is not scalar, shape " + shape_str(shape()));
    return n_->data[0];
  }

  bool requires_grad() const { return n_ && n_->requires_grad; }
  Tensor& set_requires_grad(bool rg = true) {
    n_->requires_grad = rg;
    return *this;
  }

  const std::vector<double>& grad() const {
    n_->ensure_grad();
    return n_->grad;
  }
  void zero_grad() {
    if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), 0.0);
  }

  // Deep copy that drops any grad state; used for checkpoints and slow weights.
  Tensor clone() const {
    Tensor t;
    t.n_ = std::make_shared<detail::TensorNode>();
    t.n_->shape = n_->shape;
    t.n_->data = n_->data;
    t.n_->requires_grad = n_->requires_grad;
    return t;
  }

  std::shared_ptr<detail::TensorNode> node() const { return n_; }

 private:
  static void check_shape(const std::vector<int>& shape) {
    if (shape.empty()) throw ShapeError("empty shape");
    for (int d : shape)
      if (d <= 0) throw ShapeError("non-positive dim in shape " + shape_str(shape));
  }

  std::shared_ptr<detail::TensorNode> n_;
};

// ---------------------------------------------------------------------------
// Gradient tape

class GradTape {
 public:
  static GradTape& active() {
    thread_local GradTape tape;
    return tape;
  }

  bool recording() const { return disable_depth_ == 0; }
  size_t size() const { return ops_.size(); }
  void clear() { ops_.clear(); }

  void record(std::function<void()> backward_rule) {
    ops_.push_back(std::move(backward_rule));
  }

  void push_disable() { ++disable_depth_; }
  void pop_disable() { --disable_depth_; }

  // Seeds d(loss)/d(loss)=1, replays recorded rules newest-first, then clears.
  void backward(const Tensor& loss) {
    if (loss.size() != 1)
      throw ContractError("backward: loss must be scalar, got shape " +
                          shape_str(loss.shape()));
    loss.node()->ensure_grad();
    loss.node()->grad[0] = 1.0;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    clear();
  }

 private:
  std::vector<std::function<void()>> ops_;
  int disable_depth_ = 0;
};

inline void backward(const Tensor& loss) { GradTape::active().backward(loss); }

struct NoGradGuard {
  NoGradGuard() { GradTape::active().push_disable(); }
  ~NoGradGuard() { GradTape::active().pop_disable(); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

namespace detail {

inline bool tape_on() { return GradTape::active().recording(); }

using NodePtr = std::shared_ptr<TensorNode>;

inline bool out_has_grad(const NodePtr& out) { return !out->grad.empty(); }

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const EMat>;
using MMap = Eigen::Map<EMat>;

inline CMap cmap(const NodePtr& n, int r, int c) { return CMap(n->data.data(), r, c); }
inline CMap gmap(const NodePtr& n, int r, int c) { return CMap(n->grad.data(), r, c); }
inline MMap mmap(NodePtr& n, int r, int c) { return MMap(n->data.data(), r, c); }

inline void require_2d(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + ": want 2-D, got " + shape_str(t.shape()));
}
inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Ops

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_2d(a, "matmul");
  detail::require_2d(b, "matmul");
  int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2)
    throw ShapeError("matmul: inner dims differ, " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  Tensor out({m, n});
  {
    auto on = out.node();
    detail::mmap(on, m, n).noalias() =
        detail::cmap(a.node(), m, k) * detail::cmap(b.node(), k, n);
  }
  bool rg = detail::tape_on() && (a.requires_grad() || b.requires_grad());
  if (rg) {
    out.set_requires_grad(true);
    auto an = a.node(), bn = b.node(), on = out.node();
    GradTape::active().record([an, bn, on, m, k, n]() {
      if (!detail::out_has_grad(on)) return;
      auto g = detail::gmap(on, m, n);
      if (an->requires_grad) {
        an->ensure_grad();
        detail::MMap(an->grad.data(), m, k).noalias() +=
            g * detail::cmap(bn, k, n).transpose();
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        detail::MMap(bn->grad.data(), k, n).noalias() +=
            detail::cmap(an, m, k).transpose() * g;
      }
    });
  }
  return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  Tensor out(a.shape());
  const long long n = a.size();
  for (long long i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
  bool rg = detail::tape_on() && (a.requires_grad() || b.requires_grad());
  if (rg) {
    out.set_requires_grad(true);
    auto an = a.node(), bn = b.node(), on = out.node();
    GradTape::active().record([an, bn, on, n]() {
      if (!detail::out_has_grad(on)) return;
      if (an->requires_grad) {
        an->ensure_grad();
        for (long long i = 0; i < n; ++i) an->grad[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (long long i = 0; i < n; ++i) bn->grad[i] += on->grad[i];
      }
    });
  }
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor out(a.shape());
  const long long n = a.size();
  for (long long i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
  bool rg = detail::tape_on() && (a.requires_grad() || b.requires_grad());
  if (rg) {
    out.set_requires_grad(true);
    auto an = a.node(), bn = b.node(), on = out.node();
    GradTape::active().record([an, bn, on, n]() {
      if (!detail::out_has_grad(on)) return;
      if (an->requires_grad) {
        an->ensure_grad();
        for (long long i = 0; i < n; ++i) an->grad[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (long long i = 0; i < n; ++i) bn->grad[i] -= on->grad[i];
      }
    });
  }
  return out;
}

// The one permitted broadcast: a [m x n] plus a bias vector [n], added per row.
inline Tensor add_rowwise(const Tensor& a, const Tensor& bias) {
  detail::require_2d(a, "add_rowwise");
  if (bias.rank() != 1 || bias.dim(0) != a.dim(1))
    throw ShapeError("add_rowwise: bias " + shape_str(bias.shape()) +
                     " does not match row width of " + shape_str(a.shape()));
  int m = a.dim(0), n = a.dim(1);
  Tensor out({m, n});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.ref(i, j) = a(i, j) + bias(j);
  bool rg = detail::tape_on() && (a.requires_grad() || bias.requires_grad());
  if (rg) {
    out.set_requires_grad(true);
    auto an = a.node(), bn = bias.node(), on = out.node();
    GradTape::active().record([an, bn, on, m, n]() {
      if (!detail::out_has_grad(on)) return;
      if (an->requires_grad) {
        an->ensure_grad();
        for (int i = 0; i < m * n; ++i) an->grad[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) bn->grad[j] += on->grad[i * n + j];
      }
    });
  }
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor out(a.shape());
  const long long n = a.size();
  for (long long i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
  bool rg = detail::tape_on() && (a.requires_grad() || b.requires_grad());
  if (rg) {
    out.set_requires_grad(true);
    auto an = a.node(), bn = b.node(), on = out.node();
    GradTape::active().record([an, bn, on, n]() {
      if (!detail::out_has_grad(on)) return;
      if (an->requires_grad) {
        an->ensure_grad();
        for (long long i = 0; i < n; ++i) an->grad[i] += on->grad[i] * bn->data[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (long long i = 0; i < n; ++i) bn->grad[i] += on->grad[i] * an->data[i];
      }
    });
  }
  return out;
}

inline Tensor scale(const Tensor& a, double c) {
  Tensor out(a.shape());
  const long long n = a.size();
  for (long long i = 0; i < n; ++i) out.data()[i] = a.data()[i] * c;
  if (detail::tape_on() && a.requires_grad()) {
    out.set_requires_grad(true);
    auto an = a.node(), on = out.node();
    GradTape::active().record([an, on, n, c]() {
      if (!detail::out_has_grad(on)) return;
      an->ensure_grad();
      for (long long i = 0; i < n; ++i) an->grad[i] += on->grad[i] * c;
    });
  }
  return out;
}

// matrix times scalar-valued tensor; gradient flows into both
inline Tensor scalar_mul(const Tensor& a, const Tensor& s) {
  if (s.size() != 1) throw ShapeError("scalar_mul: scalar operand has shape " + shape_str(s.shape()));
  double c = s.data()[0];
  Tensor out(a.shape());
  const long long n = a.size();
  for (long long i = 0; i < n; ++i) out.data()[i] = a.data()[i] * c;
  bool rg = detail::tape_on() && (a.requires_grad() || s.requires_grad());
  if (rg) {
    out.set_requires_grad(true);
    auto an = a.node(), sn = s.node(), on = out.node();
    GradTape::active().record([an, sn, on, n, c]() {
      if (!detail::out_has_grad(on)) return;
      if (an->requires_grad) {
        an->ensure_grad();
        for (long long i = 0; i < n; ++i) an->grad[i] += on->grad[i] * c;
      }
      if (sn->requires_grad) {
        sn->ensure_grad();
        double acc = 0.0;
        for (long long i = 0; i < n; ++i) acc += on->grad[i] * an->data[i];
        sn->grad[0] += acc;
      }
    });
  }
  return out;
}

// sum_i w[i] * mats[i]; all matrices share a shape, w is a length-T vector
inline Tensor scalar_weighted_sum(const std::vector<Tensor>& mats, const Tensor& w) {
  if (mats.empty()) throw ContractError("scalar_weighted_sum: no matrices");
  if (w.rank() != 1 || w.dim(0) != static_cast<int>(mats.size()))
    throw ShapeError("scalar_weighted_sum: weight shape " + shape_str(w.shape()) +
                     " for " + std::to_string(mats.size()) + " matrices");
  for (const auto& m : mats) detail::require_same_shape(mats[0], m, "scalar_weighted_sum");
  const long long n = mats[0].size();
  Tensor out(mats[0].shape());
  for (size_t t = 0; t < mats.size(); ++t) {
    double c = w(static_cast<int>(t));
    const double* src = mats[t].data();
    for (long long i = 0; i < n; ++i) out.data()[i] += c * src[i];
  }
  bool rg = detail::tape_on() && (w.requires_grad() ||
                                  std::any_of(mats.begin(), mats.end(),
                                              [](const Tensor& t) { return t.requires_grad(); }));
  if (rg) {
    out.set_requires_grad(true);
    std::vector<detail::NodePtr> mn;
    for (const auto& m : mats) mn.push_back(m.node());
    auto wn = w.node(), on = out.node();
    GradTape::active().record([mn, wn, on, n]() {
      if (!detail::out_has_grad(on)) return;
      for (size_t t = 0; t < mn.size(); ++t) {
        if (mn[t]->requires_grad) {
          mn[t]->ensure_grad();
          double c = wn->data[t];
          for (long long i = 0; i < n; ++i) mn[t]->grad[i] += c * on->grad[i];
        }
        if (wn->requires_grad) {
          wn->ensure_grad();
          double acc = 0.0;
          for (long long i = 0; i < n; ++i) acc += on->grad[i] * mn[t]->data[i];
          wn->grad[t] += acc;
        }
      }
    });
  }
  return out;
}

inline Tensor relu(const Tensor& a) {
  Tensor out(a.shape());
  const long long n = a.size();
  for (long long i = 0; i < n; ++i) out.data()[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
  if (detail::tape_on() && a.requires_grad()) {
    out.set_requires_grad(true);
    auto an = a.node(), on = out.node();
    GradTape::active().record([an, on, n]() {
      if (!detail::out_has_grad(on)) return;
      an->ensure_grad();
      for (long long i = 0; i < n; ++i)
        if (an->data[i] > 0.0) an->grad[i] += on->grad[i];
    });
  }
  return out;
}

inline Tensor gelu(const Tensor& a) {
  Tensor out(a.shape());
  const long long n = a.size();
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  for (long long i = 0; i < n; ++i) {
    double x = a.data()[i];
    out.data()[i] = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
  }
  if (detail::tape_on() && a.requires_grad()) {
    out.set_requires_grad(true);
    auto an = a.node(), on = out.node();
    GradTape::active().record([an, on, n]() {
      if (!detail::out_has_grad(on)) return;
      an->ensure_grad();
      constexpr double inv_sqrt2pi = 0.39894228040143267794;
      for (long long i = 0; i < n; ++i) {
        double x = an->data[i];
        double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
        double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
        an->grad[i] += on->grad[i] * (cdf + x * pdf);
      }
    });
  }
  return out;
}

inline Tensor reciprocal(const Tensor& a) {
  Tensor out(a.shape());
  const long long n = a.size();
  for (long long i = 0; i < n; ++i) out.data()[i] = 1.0 / a.data()[i];
  if (detail::tape_on() && a.requires_grad()) {
    out.set_requires_grad(true);
    auto an = a.node(), on = out.node();
    GradTape::active().record([an, on, n]() {
      if (!detail::out_has_grad(on)) return;
      an->ensure_grad();
      for (long long i = 0; i < n; ++i)
        an->grad[i] -= on->grad[i] * on->data[i] * on->data[i];
    });
  }
  return out;
}

inline Tensor exp(const Tensor& a) {
  Tensor out(a.shape());
  const long long n = a.size();
  for (long long i = 0; i < n; ++i) out.data()[i] = std::exp(a.data()[i]);
  if (detail::tape_on() && a.requires_grad()) {
    out.set_requires_grad(true);
    auto an = a.node(), on = out.node();
    GradTape::active().record([an, on, n]() {
      if (!detail::out_has_grad(on)) return;
      an->ensure_grad();
      for (long long i = 0; i < n; ++i) an->grad[i] += on->grad[i] * on->data[i];
    });
  }
  return out;
}

namespace detail {
// shared softmax core over a strided lane; p must already hold exp(x - max)/Z
inline void softmax_lane(const double* x, double* p, int len, long long stride) {
  double mx = x[0];
  for (int i = 1; i < len; ++i) mx = std::max(mx, x[i * stride]);
  double z = 0.0;
  for (int i = 0; i < len; ++i) {
    double e = std::exp(x[i * stride] - mx);
    p[i * stride] = e;
    z += e;
  }
  for (int i = 0; i < len; ++i) p[i * stride] /= z;
}
inline void softmax_lane_backward(const double* p, const double* g, double* dx, int len,
                                  long long stride) {
  double dot = 0.0;
  for (int i = 0; i < len; ++i) dot += p[i * stride] * g[i * stride];
  for (int i = 0; i < len; ++i) dx[i * stride] += p[i * stride] * (g[i * stride] - dot);
}
}  // namespace detail

// Stable softmax along `axis`. 1-D tensors use axis 0; 2-D supports axis 0
// (per column) and 1 / -1 (per row).
inline Tensor softmax(const Tensor& a, int axis = -1) {
  for (long long i = 0; i < a.size(); ++i)
    if (!std::isfinite(a.data()[i]))
      throw NumericError("softmax: non-finite input at flat index " + std::to_string(i));
  int lanes, len;
  long long stride, lane_step;
  if (a.rank() == 1) {
    if (axis != 0 && axis != -1) throw ShapeError("softmax: bad axis for 1-D input");
    lanes = 1, len = a.dim(0), stride = 1, lane_step = 0;
  } else if (a.rank() == 2) {
    if (axis == 1 || axis == -1) {
      lanes = a.dim(0), len = a.dim(1), stride = 1, lane_step = a.dim(1);
    } else if (axis == 0) {
      lanes = a.dim(1), len = a.dim(0), stride = a.dim(1), lane_step = 1;
    } else {
      throw ShapeError("softmax: bad axis " + std::to_string(axis));
    }
  } else {
    throw ShapeError("softmax: want 1-D or 2-D, got " + shape_str(a.shape()));
  }
  Tensor out(a.shape());
  for (int l = 0; l < lanes; ++l)
    detail::softmax_lane(a.data() + l * lane_step, out.data() + l * lane_step, len, stride);
  if (detail::tape_on() && a.requires_grad()) {
    out.set_requires_grad(true);
    auto an = a.node(), on = out.node();
    GradTape::active().record([an, on, lanes, len, stride, lane_step]() {
      if (!detail::out_has_grad(on)) return;
      an->ensure_grad();
      for (int l = 0; l < lanes; ++l)
        detail::softmax_lane_backward(on->data.data() + l * lane_step,
                                      on->grad.data() + l * lane_step,
                                      an->grad.data() + l * lane_step, len, stride);
    });
  }
  return out;
}

// Row-wise softmax where row i only sees columns [0, i]; columns beyond the
// diagonal come out exactly zero. Used for causal self-attention so that
// future positions cannot perturb earlier rows even at the bit level.
inline Tensor causal_softmax(const Tensor& a) {
  detail::require_2d(a, "causal_softmax");
  if (a.dim(0) != a.dim(1))
    throw ShapeError("causal_softmax: want square logits, got " + shape_str(a.shape()));
  int s = a.dim(0);
  Tensor out({s, s});
  for (int i = 0; i < s; ++i)
    detail::softmax_lane(a.data() + i * s, out.data() + i * s, i + 1, 1);
  if (detail::tape_on() && a.requires_grad()) {
    out.set_requires_grad(true);
    auto an = a.node(), on = out.node();
    GradTape::active().record([an, on, s]() {
      if (!detail::out_has_grad(on)) return;
      an->ensure_grad();
      for (int i = 0; i < s; ++i)
        detail::softmax_lane_backward(on->data.data() + i * s, on->grad.data() + i * s,
                                      an->grad.data() + i * s, i + 1, 1);
    });
  }
  return out;
}

// log softmax over rows of a 2-D tensor
inline Tensor log_softmax(const Tensor& a) {
  detail::require_2d(a, "log_softmax");
  int m = a.dim(0), n = a.dim(1);
  Tensor out({m, n});
  for (int i = 0; i < m; ++i) {
    const double* x = a.data() + i * n;
    double mx = *std::max_element(x, x + n);
    double z = 0.0;
    for (int j = 0; j < n; ++j) z += std::exp(x[j] - mx);
    double lz = mx + std::log(z);
    for (int j = 0; j < n; ++j) out.ref(i, j) = x[j] - lz;
  }
  if (detail::tape_on() && a.requires_grad()) {
    out.set_requires_grad(true);
    auto an = a.node(), on = out.node();
    GradTape::active().record([an, on, m, n]() {
      if (!detail::out_has_grad(on)) return;
      an->ensure_grad();
      for (int i = 0; i < m; ++i) {
        double gsum = 0.0;
        for (int j = 0; j < n; ++j) gsum += on->grad[i * n + j];
        for (int j = 0; j < n; ++j) {
          double p = std::exp(on->data[i * n + j]);
          an->grad[i * n + j] += on->grad[i * n + j] - p * gsum;
        }
      }
    });
  }
  return out;
}

// mean over rows of -logp[i, ids[i]]
inline Tensor nll_mean(const Tensor& logp, const std::vector<int>& ids) {
  detail::require_2d(logp, "nll_mean");
  int m = logp.dim(0), n = logp.dim(1);
  if (static_cast<int>(ids.size()) != m)
    throw ShapeError("nll_mean: " + std::to_string(ids.size()) + " targets for " +
                     std::to_string(m) + " rows");
  double acc = 0.0;
  for (int i = 0; i < m; ++i) {
    if (ids[i] < 0 || ids[i] >= n)
      throw VocabError("nll_mean: target id " + std::to_string(ids[i]) + " out of range " +
                       std::to_string(n));
    acc -= logp(i, ids[i]);
  }
  Tensor out = Tensor::scalar(acc / m);
  if (detail::tape_on() && logp.requires_grad()) {
    out.set_requires_grad(true);
    auto ln = logp.node(), on = out.node();
    GradTape::active().record([ln, on, ids, m, n]() {
      if (!detail::out_has_grad(on)) return;
      ln->ensure_grad();
      double g = on->grad[0] / m;
      for (int i = 0; i < m; ++i) ln->grad[i * n + ids[i]] -= g;
    });
  }
  return out;
}

// mean cross-entropy of row logits against integer targets
inline Tensor cross_entropy_mean(const Tensor& logits, const std::vector<int>& ids) {
  return nll_mean(log_softmax(logits), ids);
}

inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
  detail::require_2d(x, "layer_norm");
  int m = x.dim(0), n = x.dim(1);
  if (gain.rank() != 1 || gain.dim(0) != n || bias.rank() != 1 || bias.dim(0) != n)
    throw ShapeError("layer_norm: gain/bias must be [" + std::to_string(n) + "], got " +
                     shape_str(gain.shape()) + " and " + shape_str(bias.shape()));
  Tensor out({m, n});
  std::vector<double> inv_std(m), mean(m);
  for (int i = 0; i < m; ++i) {
    const double* r = x.data() + i * n;
    double mu = 0.0;
    for (int j = 0; j < n; ++j) mu += r[j];
    mu /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) var += (r[j] - mu) * (r[j] - mu);
    var /= n;
    double is = 1.0 / std::sqrt(var + eps);
    mean[i] = mu;
    inv_std[i] = is;
    for (int j = 0; j < n; ++j) out.ref(i, j) = gain(j) * (r[j] - mu) * is + bias(j);
  }
  bool rg = detail::tape_on() &&
            (x.requires_grad() || gain.requires_grad() || bias.requires_grad());
  if (rg) {
    out.set_requires_grad(true);
    auto xn = x.node(), gn = gain.node(), bn = bias.node(), on = out.node();
    GradTape::active().record([xn, gn, bn, on, m, n, mean, inv_std]() {
      if (!detail::out_has_grad(on)) return;
      for (int i = 0; i < m; ++i) {
        const double* r = xn->data.data() + i * n;
        const double* g = on->grad.data() + i * n;
        double mu = mean[i], is = inv_std[i];
        if (gn->requires_grad || bn->requires_grad) {
          if (gn->requires_grad) gn->ensure_grad();
          if (bn->requires_grad) bn->ensure_grad();
          for (int j = 0; j < n; ++j) {
            if (gn->requires_grad) gn->grad[j] += g[j] * (r[j] - mu) * is;
            if (bn->requires_grad) bn->grad[j] += g[j];
          }
        }
        if (xn->requires_grad) {
          xn->ensure_grad();
          double sum_dxh = 0.0, sum_dxh_xh = 0.0;
          for (int j = 0; j < n; ++j) {
            double xh = (r[j] - mu) * is;
            double dxh = g[j] * gn->data[j];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh;
          }
          for (int j = 0; j < n; ++j) {
            double xh = (r[j] - mu) * is;
            double dxh = g[j] * gn->data[j];
            xn->grad[i * n + j] += is * (dxh - sum_dxh / n - xh * sum_dxh_xh / n);
          }
        }
      }
    });
  }
  return out;
}

inline Tensor sum(const Tensor& a) {
  double acc = std::accumulate(a.data(), a.data() + a.size(), 0.0);
  Tensor out = Tensor::scalar(acc);
  if (detail::tape_on() && a.requires_grad()) {
    out.set_requires_grad(true);
    auto an = a.node(), on = out.node();
    long long n = a.size();
    GradTape::active().record([an, on, n]() {
      if (!detail::out_has_grad(on)) return;
      an->ensure_grad();
      for (long long i = 0; i < n; ++i) an->grad[i] += on->grad[0];
    });
  }
  return out;
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / a.size()); }

// axis 0 collapses rows (result [cols]); axis 1 collapses columns (result [rows])
inline Tensor sum_axis(const Tensor& a, int axis) {
  detail::require_2d(a, "sum_axis");
  int m = a.dim(0), n = a.dim(1);
  if (axis != 0 && axis != 1) throw ShapeError("sum_axis: bad axis " + std::to_string(axis));
  Tensor out({axis == 0 ? n : m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.ref(axis == 0 ? j : i) += a(i, j);
  if (detail::tape_on() && a.requires_grad()) {
    out.set_requires_grad(true);
    auto an = a.node(), on = out.node();
    GradTape::active().record([an, on, m, n, axis]() {
      if (!detail::out_has_grad(on)) return;
      an->ensure_grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) an->grad[i * n + j] += on->grad[axis == 0 ? j : i];
    });
  }
  return out;
}

inline Tensor mean_axis(const Tensor& a, int axis) {
  detail::require_2d(a, "mean_axis");
  return scale(sum_axis(a, axis), 1.0 / (axis == 0 ? a.dim(0) : a.dim(1)));
}

inline Tensor transpose(const Tensor& a) {
  detail::require_2d(a, "transpose");
  int m = a.dim(0), n = a.dim(1);
  Tensor out({n, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.ref(j, i) = a(i, j);
  if (detail::tape_on() && a.requires_grad()) {
    out.set_requires_grad(true);
    auto an = a.node(), on = out.node();
    GradTape::active().record([an, on, m, n]() {
      if (!detail::out_has_grad(on)) return;
      an->ensure_grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) an->grad[i * n + j] += on->grad[j * m + i];
    });
  }
  return out;
}

inline Tensor reshape(const Tensor& a, std::vector<int> new_shape) {
  Tensor out(std::move(new_shape), std::vector<double>(a.data(), a.data() + a.size()));
  if (out.size() != a.size())
    throw ShapeError("reshape: " + shape_str(a.shape()) + " to " + shape_str(out.shape()));
  if (detail::tape_on() && a.requires_grad()) {
    out.set_requires_grad(true);
    auto an = a.node(), on = out.node();
    long long n = a.size();
    GradTape::active().record([an, on, n]() {
      if (!detail::out_has_grad(on)) return;
      an->ensure_grad();
      for (long long i = 0; i < n; ++i) an->grad[i] += on->grad[i];
    });
  }
  return out;
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ContractError("concat: no parts");
  for (const auto& p : parts) detail::require_2d(p, "concat");
  if (axis != 0 && axis != 1) throw ShapeError("concat: bad axis " + std::to_string(axis));
  int m = 0, n = 0;
  if (axis == 0) {
    n = parts[0].dim(1);
    for (const auto& p : parts) {
      if (p.dim(1) != n)
        throw ShapeError("concat: column mismatch " + shape_str(p.shape()));
      m += p.dim(0);
    }
  } else {
    m = parts[0].dim(0);
    for (const auto& p : parts) {
      if (p.dim(0) != m) throw ShapeError("concat: row mismatch " + shape_str(p.shape()));
      n += p.dim(1);
    }
  }
  Tensor out({m, n});
  int off = 0;
  for (const auto& p : parts) {
    int pm = p.dim(0), pn = p.dim(1);
    if (axis == 0) {
      std::memcpy(out.data() + off * n, p.data(), sizeof(double) * pm * pn);
      off += pm;
    } else {
      for (int i = 0; i < pm; ++i)
        std::memcpy(out.data() + i * n + off, p.data() + i * pn, sizeof(double) * pn);
      off += pn;
    }
  }
  bool rg = detail::tape_on() && std::any_of(parts.begin(), parts.end(),
                                             [](const Tensor& t) { return t.requires_grad(); });
  if (rg) {
    out.set_requires_grad(true);
    std::vector<detail::NodePtr> pn_;
    std::vector<int> pm(parts.size()), pw(parts.size());
    for (size_t i = 0; i < parts.size(); ++i) {
      pn_.push_back(parts[i].node());
      pm[i] = parts[i].dim(0);
      pw[i] = parts[i].dim(1);
    }
    auto on = out.node();
    GradTape::active().record([pn_, pm, pw, on, n, axis]() {
      if (!detail::out_has_grad(on)) return;
      int off = 0;
      for (size_t k = 0; k < pn_.size(); ++k) {
        if (pn_[k]->requires_grad) {
          pn_[k]->ensure_grad();
          if (axis == 0) {
            for (int i = 0; i < pm[k] * pw[k]; ++i)
              pn_[k]->grad[i] += on->grad[off * n + i];
          } else {
            for (int i = 0; i < pm[k]; ++i)
              for (int j = 0; j < pw[k]; ++j)
                pn_[k]->grad[i * pw[k] + j] += on->grad[i * n + off + j];
          }
        }
        off += (axis == 0 ? pm[k] : pw[k]);
      }
    });
  }
  return out;
}

inline Tensor slice_rows(const Tensor& a, int r0, int nr) {
  detail::require_2d(a, "slice_rows");
  int m = a.dim(0), n = a.dim(1);
  if (r0 < 0 || nr <= 0 || r0 + nr > m)
    throw ShapeError("slice_rows: [" + std::to_string(r0) + "," + std::to_string(r0 + nr) +
                     ") out of " + std::to_string(m) + " rows");
  Tensor out({nr, n});
  std::memcpy(out.data(), a.data() + r0 * n, sizeof(double) * nr * n);
  if (detail::tape_on() && a.requires_grad()) {
    out.set_requires_grad(true);
    auto an = a.node(), on = out.node();
    GradTape::active().record([an, on, r0, nr, n]() {
      if (!detail::out_has_grad(on)) return;
      an->ensure_grad();
      for (int i = 0; i < nr * n; ++i) an->grad[r0 * n + i] += on->grad[i];
    });
  }
  return out;
}

inline Tensor slice_cols(const Tensor& a, int c0, int nc) {
  detail::require_2d(a, "slice_cols");
  int m = a.dim(0), n = a.dim(1);
  if (c0 < 0 || nc <= 0 || c0 + nc > n)
    throw ShapeError("slice_cols: [" + std::to_string(c0) + "," + std::to_string(c0 + nc) +
                     ") out of " + std::to_string(n) + " cols");
  Tensor out({m, nc});
  for (int i = 0; i < m; ++i)
    std::memcpy(out.data() + i * nc, a.data() + i * n + c0, sizeof(double) * nc);
  if (detail::tape_on() && a.requires_grad()) {
    out.set_requires_grad(true);
    auto an = a.node(), on = out.node();
    GradTape::active().record([an, on, c0, nc, m, n]() {
      if (!detail::out_has_grad(on)) return;
      an->ensure_grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < nc; ++j) an->grad[i * n + c0 + j] += on->grad[i * nc + j];
    });
  }
  return out;
}

// single element of a 1-D tensor, as a scalar tensor
inline Tensor element(const Tensor& a, int i) {
  if (a.rank() != 1) throw ShapeError("element: want 1-D, got " + shape_str(a.shape()));
  if (i < 0 || i >= a.dim(0)) throw ShapeError("element: index out of range");
  Tensor out = Tensor::scalar(a(i));
  if (detail::tape_on() && a.requires_grad()) {
    out.set_requires_grad(true);
    auto an = a.node(), on = out.node();
    GradTape::active().record([an, on, i]() {
      if (!detail::out_has_grad(on)) return;
      an->ensure_grad();
      an->grad[i] += on->grad[0];
    });
  }
  return out;
}

// row gather: out[i] = table[ids[i]]
inline Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
  detail::require_2d(table, "embedding");
  int v = table.dim(0), d = table.dim(1);
  int s = static_cast<int>(ids.size());
  if (s == 0) throw ContractError("embedding: empty id sequence");
  for (int id : ids)
    if (id < 0 || id >= v)
      throw VocabError("embedding: token id " + std::to_string(id) + " outside vocabulary of " +
                       std::to_string(v));
  Tensor out({s, d});
  for (int i = 0; i < s; ++i)
    std::memcpy(out.data() + i * d, table.data() + ids[i] * d, sizeof(double) * d);
  if (detail::tape_on() && table.requires_grad()) {
    out.set_requires_grad(true);
    auto tn = table.node(), on = out.node();
    GradTape::active().record([tn, on, ids, s, d]() {
      if (!detail::out_has_grad(on)) return;
      tn->ensure_grad();
      for (int i = 0; i < s; ++i)
        for (int j = 0; j < d; ++j) tn->grad[ids[i] * d + j] += on->grad[i * d + j];
    });
  }
  return out;
}

}  // namespace mecformer
