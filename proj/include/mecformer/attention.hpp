#pragma once

// Attention building blocks: Nystrom-approximated self-attention for long
// patch sequences, exact multi-head self/cross attention for short token
// sequences, and sinusoidal positional encoding.

#include <cmath>
#include <vector>

#include "mecformer/tensor.hpp"

namespace mecformer {

struct NystromConfig {
  int num_landmarks = 64;
  int pinv_iterations = 6;
  int head_count = 8;

  void validate(int d_model) const {
    if (num_landmarks < 1) throw ConfigError("num_landmarks must be >= 1");
    if (pinv_iterations < 1) throw ConfigError("pinv_iterations must be >= 1");
    if (head_count < 1) throw ConfigError("head_count must be >= 1");
    if (d_model % head_count != 0)
      throw ConfigError("head_count " + std::to_string(head_count) +
                        " does not divide d_model " + std::to_string(d_model));
  }
};

struct AttentionParams {
  Tensor wq, wk, wv, wo;  // all [d_model x d_model]
  int heads = 1;

  static AttentionParams init(int d_model, int heads, Rng& rng) {
    if (heads < 1 || d_model % heads != 0)
      throw ConfigError("heads " + std::to_string(heads) + " must divide d_model " +
                        std::to_string(d_model));
    double bound = 1.0 / std::sqrt(static_cast<double>(d_model));
    AttentionParams p;
    p.wq = Tensor::uniform({d_model, d_model}, rng, -bound, bound).set_requires_grad();
    p.wk = Tensor::uniform({d_model, d_model}, rng, -bound, bound).set_requires_grad();
    p.wv = Tensor::uniform({d_model, d_model}, rng, -bound, bound).set_requires_grad();
    p.wo = Tensor::uniform({d_model, d_model}, rng, -bound, bound).set_requires_grad();
    p.heads = heads;
    return p;
  }
};

namespace detail {
// 1-D max as a scalar tensor; subgradient goes to the first argmax
inline Tensor vmax(const Tensor& a) {
  if (a.rank() != 1) throw ShapeError("vmax: want 1-D, got " + shape_str(a.shape()));
  int n = a.dim(0), arg = 0;
  for (int i = 1; i < n; ++i)
    if (a(i) > a(arg)) arg = i;
  Tensor out = Tensor::scalar(a(arg));
  if (tape_on() && a.requires_grad()) {
    out.set_requires_grad(true);
    auto an = a.node(), on = out.node();
    GradTape::active().record([an, on, arg]() {
      if (!out_has_grad(on)) return;
      an->ensure_grad();
      an->grad[arg] += on->grad[0];
    });
  }
  return out;
}

inline Tensor reciprocal_scalar(const Tensor& s) {
  double v = s.value();
  Tensor out = Tensor::scalar(1.0 / v);
  if (tape_on() && s.requires_grad()) {
    out.set_requires_grad(true);
    auto sn = s.node(), on = out.node();
    GradTape::active().record([sn, on, v]() {
      if (!out_has_grad(on)) return;
      sn->ensure_grad();
      sn->grad[0] -= on->grad[0] / (v * v);
    });
  }
  return out;
}
}  // namespace detail

// Moore-Penrose pseudo-inverse by Newton-Schulz iteration,
//   Z <- Z (13 I - A Z (15 I - A Z (7 I - A Z))) / 4,
// initialized with Z0 = A^T / (max row sum * max col sum). Intended for
// row-stochastic attention kernels; fully differentiable.
inline Tensor iterative_pinv(const Tensor& a, int iters) {
  detail::require_2d(a, "iterative_pinv");
  if (a.dim(0) != a.dim(1))
    throw ShapeError("iterative_pinv: want square, got " + shape_str(a.shape()));
  int m = a.dim(0);
  Tensor eye = Tensor::identity(m);
  Tensor row_max = detail::vmax(sum_axis(a, 1));
  Tensor col_max = detail::vmax(sum_axis(a, 0));
  Tensor z = scalar_mul(transpose(a), detail::reciprocal_scalar(mul(row_max, col_max)));
  for (int it = 0; it < iters; ++it) {
    Tensor az = matmul(a, z);
    Tensor t = sub(scale(eye, 7.0), az);
    t = sub(scale(eye, 15.0), matmul(az, t));
    t = sub(scale(eye, 13.0), matmul(az, t));
    z = scale(matmul(z, t), 0.25);
  }
  return z;
}

// residual ||A Z A - A||_F / ||A||_F after each iteration; diagnostic only
inline std::vector<double> pinv_residual_trace(const Tensor& a, int iters) {
  NoGradGuard ng;
  std::vector<double> res;
  auto fro = [](const Tensor& t) {
    double s = 0.0;
    for (long long i = 0; i < t.size(); ++i) s += t.data()[i] * t.data()[i];
    return std::sqrt(s);
  };
  double na = fro(a);
  for (int k = 1; k <= iters; ++k) {
    Tensor z = iterative_pinv(a, k);
    Tensor r = sub(matmul(matmul(a, z), a), a);
    res.push_back(fro(r) / na);
  }
  return res;
}

namespace detail {
inline void check_attn_input(const Tensor& x, const AttentionParams& p, const char* op) {
  require_2d(x, op);
  if (p.wq.dim(0) != x.dim(1))
    throw ShapeError(std::string(op) + ": input width " + std::to_string(x.dim(1)) +
                     " vs projection side " + std::to_string(p.wq.dim(0)));
}
}  // namespace detail

// Exact scaled dot-product multi-head self-attention. With causal_mask,
// position i only attends to positions <= i.
inline Tensor exact_mhsa(const Tensor& x, const AttentionParams& p, bool causal_mask) {
  detail::check_attn_input(x, p, "exact_mhsa");
  int d_model = x.dim(1);
  int dh = d_model / p.heads;
  double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  Tensor q = matmul(x, p.wq), k = matmul(x, p.wk), v = matmul(x, p.wv);
  std::vector<Tensor> head_out;
  head_out.reserve(p.heads);
  for (int h = 0; h < p.heads; ++h) {
    Tensor qh = slice_cols(q, h * dh, dh);
    Tensor kh = slice_cols(k, h * dh, dh);
    Tensor vh = slice_cols(v, h * dh, dh);
    Tensor logits = scale(matmul(qh, transpose(kh)), inv_sqrt_dh);
    Tensor attn = causal_mask ? causal_softmax(logits) : softmax(logits, -1);
    head_out.push_back(matmul(attn, vh));
  }
  return matmul(concat(head_out, 1), p.wo);
}

// Multi-head cross-attention: queries from h, keys/values from v, no mask.
inline Tensor mhca(const Tensor& h, const Tensor& v, const AttentionParams& p) {
  detail::check_attn_input(h, p, "mhca");
  detail::check_attn_input(v, p, "mhca");
  int d_model = h.dim(1);
  int dh = d_model / p.heads;
  double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  Tensor q = matmul(h, p.wq), k = matmul(v, p.wk), val = matmul(v, p.wv);
  std::vector<Tensor> head_out;
  head_out.reserve(p.heads);
  for (int hd = 0; hd < p.heads; ++hd) {
    Tensor qh = slice_cols(q, hd * dh, dh);
    Tensor kh = slice_cols(k, hd * dh, dh);
    Tensor vh = slice_cols(val, hd * dh, dh);
    Tensor attn = softmax(scale(matmul(qh, transpose(kh)), inv_sqrt_dh), -1);
    head_out.push_back(matmul(attn, vh));
  }
  return matmul(concat(head_out, 1), p.wo);
}

namespace detail {
// constant [m x padded] matrix averaging contiguous segments of equal length
inline Tensor segment_mean_matrix(int landmarks, int padded) {
  int seg = padded / landmarks;
  Tensor avg({landmarks, padded});
  for (int i = 0; i < landmarks; ++i)
    for (int j = 0; j < seg; ++j) avg.ref(i, i * seg + j) = 1.0 / seg;
  return avg;
}
}  // namespace detail

// Nystrom-approximated self-attention. The sequence is padded on the front
// with zero rows until its length is a multiple of num_landmarks; landmarks
// are contiguous-segment means of the padded per-head Q and K. Padding rows
// are dropped from the output.
inline Tensor nystrom_attention(const Tensor& x, const NystromConfig& cfg,
                                const AttentionParams& p) {
  detail::check_attn_input(x, p, "nystrom_attention");
  int n = x.dim(0), d_model = x.dim(1);
  cfg.validate(d_model);
  if (cfg.head_count != p.heads)
    throw ConfigError("nystrom_attention: config heads " + std::to_string(cfg.head_count) +
                      " vs params heads " + std::to_string(p.heads));
  int m = cfg.num_landmarks;
  int padded = ((n + m - 1) / m) * m;
  if (m > padded)
    throw ConfigError("num_landmarks " + std::to_string(m) + " exceeds padded length " +
                      std::to_string(padded));
  Tensor xp = padded == n ? x : concat({Tensor::zeros({padded - n, d_model}), x}, 0);

  int dh = d_model / p.heads;
  double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  Tensor q = matmul(xp, p.wq), k = matmul(xp, p.wk), v = matmul(xp, p.wv);
  Tensor avg = detail::segment_mean_matrix(m, padded);

  std::vector<Tensor> head_out;
  head_out.reserve(p.heads);
  for (int h = 0; h < p.heads; ++h) {
    Tensor qh = slice_cols(q, h * dh, dh);
    Tensor kh = slice_cols(k, h * dh, dh);
    Tensor vh = slice_cols(v, h * dh, dh);
    Tensor q_lm = matmul(avg, qh);  // [m x dh]
    Tensor k_lm = matmul(avg, kh);
    Tensor f1 = softmax(scale(matmul(qh, transpose(k_lm)), inv_sqrt_dh), -1);   // [P x m]
    Tensor kernel = softmax(scale(matmul(q_lm, transpose(k_lm)), inv_sqrt_dh), -1);  // [m x m]
    Tensor f3 = softmax(scale(matmul(q_lm, transpose(kh)), inv_sqrt_dh), -1);   // [m x P]
    Tensor z = iterative_pinv(kernel, cfg.pinv_iterations);
    head_out.push_back(matmul(matmul(f1, z), matmul(f3, vh)));
  }
  Tensor out = concat(head_out, 1);
  if (padded != n) out = slice_rows(out, padded - n, n);
  return matmul(out, p.wo);
}

// PE[pos, 2i] = sin(pos / 10000^(2i/d)), PE[pos, 2i+1] = cos(same)
inline Tensor sinusoidal_pe(int length, int d_model) {
  if (d_model % 2 != 0)
    throw ConfigError("sinusoidal_pe: d_model must be even, got " + std::to_string(d_model));
  if (length < 1) throw ConfigError("sinusoidal_pe: length must be >= 1");
  Tensor pe({length, d_model});
  for (int pos = 0; pos < length; ++pos) {
    for (int i = 0; i < d_model / 2; ++i) {
      double freq = std::pow(10000.0, -2.0 * i / d_model);
      pe.ref(pos, 2 * i) = std::sin(pos * freq);
      pe.ref(pos, 2 * i + 1) = std::cos(pos * freq);
    }
  }
  return pe;
}

}  // namespace mecformer
