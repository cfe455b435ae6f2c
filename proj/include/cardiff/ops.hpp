#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "cardiff/autograd.hpp"

// Differentiable kernels. Every op computes its forward value eagerly and
// records an analytic backward closure on the graph. Layouts are 2-D row-major:
// sequences are [batch * length, features].

namespace cardiff::nn {

namespace detail {

template <class T>
Tensor<T>* grad_or_null(Graph<T>* g, Var v) {
  return v.valid() && g->requires_grad(v) ? &g->grad(v) : nullptr;
}

template <class T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  require(a.shape() == b.shape(), Errc::shape_mismatch,
          std::string(op) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// y = a b
template <class T>
Var matmul(Graph<T>& g, Var a, Var b) {
  const auto& A = g.value(a);
  const auto& B = g.value(b);
  require(A.cols() == B.rows(), Errc::shape_mismatch,
          "matmul: " + shape_str(A.shape()) + " x " + shape_str(B.shape()));
  Tensor<T> y = Tensor<T>::zeros(A.rows(), B.cols());
  mat(y).noalias() = mat(A) * mat(B);
  Graph<T>* gp = &g;
  return g.record(std::move(y), {a, b}, [gp, a, b](const Tensor<T>& gy) {
    if (auto* ga = detail::grad_or_null(gp, a)) mat(*ga).noalias() += mat(gy) * mat(gp->value(b)).transpose();
    if (auto* gb = detail::grad_or_null(gp, b)) mat(*gb).noalias() += mat(gp->value(a)).transpose() * mat(gy);
  });
}

/// y = x W + b, with x [M, in], W [in, out], b [1, out] (optional).
template <class T>
Var affine(Graph<T>& g, Var x, Var w, Var b = {}) {
  const auto& X = g.value(x);
  const auto& W = g.value(w);
  require(X.cols() == W.rows(), Errc::shape_mismatch,
          "affine: input " + shape_str(X.shape()) + " weight " + shape_str(W.shape()));
  if (b.valid())
    require(g.value(b).size() == W.cols(), Errc::shape_mismatch, "affine: bias " + shape_str(g.value(b).shape()));
  Tensor<T> y = Tensor<T>::zeros(X.rows(), W.cols());
  mat(y).noalias() = mat(X) * mat(W);
  if (b.valid()) mat(y).rowwise() += mat(g.value(b)).row(0);
  Graph<T>* gp = &g;
  return g.record(std::move(y), {x, w, b.valid() ? b : x}, [gp, x, w, b](const Tensor<T>& gy) {
    if (auto* gx = detail::grad_or_null(gp, x)) mat(*gx).noalias() += mat(gy) * mat(gp->value(w)).transpose();
    if (auto* gw = detail::grad_or_null(gp, w)) mat(*gw).noalias() += mat(gp->value(x)).transpose() * mat(gy);
    if (auto* gb = detail::grad_or_null(gp, b)) mat(*gb).row(0) += mat(gy).colwise().sum();
  });
}

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Var add(Graph<T>& g, Var a, Var b) {
  detail::check_same_shape(g.value(a), g.value(b), "add");
  Tensor<T> y = g.value(a);
  mat(y) += mat(g.value(b));
  Graph<T>* gp = &g;
  return g.record(std::move(y), {a, b}, [gp, a, b](const Tensor<T>& gy) {
    if (auto* ga = detail::grad_or_null(gp, a)) mat(*ga) += mat(gy);
    if (auto* gb = detail::grad_or_null(gp, b)) mat(*gb) += mat(gy);
  });
}

template <class T>
Var sub(Graph<T>& g, Var a, Var b) {
  detail::check_same_shape(g.value(a), g.value(b), "sub");
  Tensor<T> y = g.value(a);
  mat(y) -= mat(g.value(b));
  Graph<T>* gp = &g;
  return g.record(std::move(y), {a, b}, [gp, a, b](const Tensor<T>& gy) {
    if (auto* ga = detail::grad_or_null(gp, a)) mat(*ga) += mat(gy);
    if (auto* gb = detail::grad_or_null(gp, b)) mat(*gb) -= mat(gy);
  });
}

/// Hadamard product.
template <class T>
Var mul(Graph<T>& g, Var a, Var b) {
  detail::check_same_shape(g.value(a), g.value(b), "mul");
  Tensor<T> y = g.value(a);
  mat(y).array() *= mat(g.value(b)).array();
  Graph<T>* gp = &g;
  return g.record(std::move(y), {a, b}, [gp, a, b](const Tensor<T>& gy) {
    if (auto* ga = detail::grad_or_null(gp, a)) mat(*ga).array() += mat(gy).array() * mat(gp->value(b)).array();
    if (auto* gb = detail::grad_or_null(gp, b)) mat(*gb).array() += mat(gy).array() * mat(gp->value(a)).array();
  });
}

/// y = s x + c
template <class T>
Var scale(Graph<T>& g, Var x, T s, T c = T(0)) {
  Tensor<T> y = g.value(x);
  for (auto& v : y.values()) v = s * v + c;
  Graph<T>* gp = &g;
  return g.record(std::move(y), {x}, [gp, x, s](const Tensor<T>& gy) {
    mat(gp->grad(x)) += s * mat(gy);
  });
}

template <class T>
Var silu(Graph<T>& g, Var x) {
  const auto& X = g.value(x);
  Tensor<T> y(X.shape());
  for (std::size_t i = 0; i < X.size(); ++i) y[i] = X[i] / (T(1) + std::exp(-X[i]));
  Graph<T>* gp = &g;
  return g.record(std::move(y), {x}, [gp, x](const Tensor<T>& gy) {
    const auto& X = gp->value(x);
    auto& gx = gp->grad(x);
    for (std::size_t i = 0; i < X.size(); ++i) {
      T s = T(1) / (T(1) + std::exp(-X[i]));
      gx[i] += gy[i] * s * (T(1) + X[i] * (T(1) - s));
    }
  });
}

/// GELU, tanh approximation.
template <class T>
Var gelu(Graph<T>& g, Var x) {
  constexpr double kA = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kB = 0.044715;
  const auto& X = g.value(x);
  Tensor<T> y(X.shape());
  for (std::size_t i = 0; i < X.size(); ++i) {
    T v = X[i];
    y[i] = T(0.5) * v * (T(1) + std::tanh(T(kA) * (v + T(kB) * v * v * v)));
  }
  Graph<T>* gp = &g;
  return g.record(std::move(y), {x}, [gp, x](const Tensor<T>& gy) {
    const auto& X = gp->value(x);
    auto& gx = gp->grad(x);
    for (std::size_t i = 0; i < X.size(); ++i) {
      T v = X[i];
      T th = std::tanh(T(kA) * (v + T(kB) * v * v * v));
      T d = T(0.5) * (T(1) + th) + T(0.5) * v * (T(1) - th * th) * T(kA) * (T(1) + T(3 * kB) * v * v);
      gx[i] += gy[i] * d;
    }
  });
}

// ---------------------------------------------------------------------------
// Broadcasting. "tiled": row r of x pairs with row (r % P) of p.
// "grouped": row r of x pairs with row (r / (R / S)) of s.

template <class T>
Var add_tiled(Graph<T>& g, Var x, Var p) {
  const auto& X = g.value(x);
  const auto& P = g.value(p);
  require(P.cols() == X.cols() && P.rows() > 0 && X.rows() % P.rows() == 0, Errc::shape_mismatch,
          "add_tiled: " + shape_str(X.shape()) + " by " + shape_str(P.shape()));
  Tensor<T> y = X;
  const std::size_t pr = P.rows(), c = X.cols();
  for (std::size_t r = 0; r < X.rows(); ++r)
    for (std::size_t j = 0; j < c; ++j) y[r * c + j] += P[(r % pr) * c + j];
  Graph<T>* gp = &g;
  return g.record(std::move(y), {x, p}, [gp, x, p, pr, c](const Tensor<T>& gy) {
    if (auto* gx = detail::grad_or_null(gp, x)) mat(*gx) += mat(gy);
    if (auto* gpp = detail::grad_or_null(gp, p))
      for (std::size_t r = 0; r < gy.rows(); ++r)
        for (std::size_t j = 0; j < c; ++j) (*gpp)[(r % pr) * c + j] += gy[r * c + j];
  });
}

template <class T>
Var mul_tiled(Graph<T>& g, Var x, Var p) {
  const auto& X = g.value(x);
  const auto& P = g.value(p);
  require(P.cols() == X.cols() && P.rows() > 0 && X.rows() % P.rows() == 0, Errc::shape_mismatch,
          "mul_tiled: " + shape_str(X.shape()) + " by " + shape_str(P.shape()));
  Tensor<T> y = X;
  const std::size_t pr = P.rows(), c = X.cols();
  for (std::size_t r = 0; r < X.rows(); ++r)
    for (std::size_t j = 0; j < c; ++j) y[r * c + j] *= P[(r % pr) * c + j];
  Graph<T>* gp = &g;
  return g.record(std::move(y), {x, p}, [gp, x, p, pr, c](const Tensor<T>& gy) {
    const auto& X = gp->value(x);
    const auto& P = gp->value(p);
    auto* gx = detail::grad_or_null(gp, x);
    auto* gpp = detail::grad_or_null(gp, p);
    for (std::size_t r = 0; r < gy.rows(); ++r)
      for (std::size_t j = 0; j < c; ++j) {
        const std::size_t i = r * c + j, k = (r % pr) * c + j;
        if (gx) (*gx)[i] += gy[i] * P[k];
        if (gpp) (*gpp)[k] += gy[i] * X[i];
      }
  });
}

template <class T>
Var add_grouped(Graph<T>& g, Var x, Var s) {
  const auto& X = g.value(x);
  const auto& S = g.value(s);
  require(S.cols() == X.cols() && S.rows() > 0 && X.rows() % S.rows() == 0, Errc::shape_mismatch,
          "add_grouped: " + shape_str(X.shape()) + " by " + shape_str(S.shape()));
  const std::size_t per = X.rows() / S.rows(), c = X.cols();
  Tensor<T> y = X;
  for (std::size_t r = 0; r < X.rows(); ++r)
    for (std::size_t j = 0; j < c; ++j) y[r * c + j] += S[(r / per) * c + j];
  Graph<T>* gp = &g;
  return g.record(std::move(y), {x, s}, [gp, x, s, per, c](const Tensor<T>& gy) {
    if (auto* gx = detail::grad_or_null(gp, x)) mat(*gx) += mat(gy);
    if (auto* gs = detail::grad_or_null(gp, s))
      for (std::size_t r = 0; r < gy.rows(); ++r)
        for (std::size_t j = 0; j < c; ++j) (*gs)[(r / per) * c + j] += gy[r * c + j];
  });
}

template <class T>
Var mul_grouped(Graph<T>& g, Var x, Var s) {
  const auto& X = g.value(x);
  const auto& S = g.value(s);
  require(S.cols() == X.cols() && S.rows() > 0 && X.rows() % S.rows() == 0, Errc::shape_mismatch,
          "mul_grouped: " + shape_str(X.shape()) + " by " + shape_str(S.shape()));
  const std::size_t per = X.rows() / S.rows(), c = X.cols();
  Tensor<T> y = X;
  for (std::size_t r = 0; r < X.rows(); ++r)
    for (std::size_t j = 0; j < c; ++j) y[r * c + j] *= S[(r / per) * c + j];
  Graph<T>* gp = &g;
  return g.record(std::move(y), {x, s}, [gp, x, s, per, c](const Tensor<T>& gy) {
    const auto& X = gp->value(x);
    const auto& S = gp->value(s);
    auto* gx = detail::grad_or_null(gp, x);
    auto* gs = detail::grad_or_null(gp, s);
    for (std::size_t r = 0; r < gy.rows(); ++r)
      for (std::size_t j = 0; j < c; ++j) {
        const std::size_t i = r * c + j, k = (r / per) * c + j;
        if (gx) (*gx)[i] += gy[i] * S[k];
        if (gs) (*gs)[k] += gy[i] * X[i];
      }
  });
}

// ---------------------------------------------------------------------------
// Normalisation

template <class T>
Tensor<T> layer_norm_value(const Tensor<T>& X, T eps, std::vector<T>* inv_std = nullptr) {
  const std::size_t R = X.rows(), C = X.cols();
  Tensor<T> y(X.shape());
  if (inv_std) inv_std->resize(R);
  for (std::size_t r = 0; r < R; ++r) {
    const T* x = X.data() + r * C;
    double mean = 0;
    for (std::size_t j = 0; j < C; ++j) mean += x[j];
    mean /= double(C);
    double var = 0;
    for (std::size_t j = 0; j < C; ++j) var += (x[j] - mean) * (x[j] - mean);
    var /= double(C);
    const T is = T(1.0 / std::sqrt(var + double(eps)));
    if (inv_std) (*inv_std)[r] = is;
    for (std::size_t j = 0; j < C; ++j) y[r * C + j] = (x[j] - T(mean)) * is;
  }
  return y;
}

/// Per-row normalisation over the feature axis, no affine.
template <class T>
Var layer_norm(Graph<T>& g, Var x, T eps = T(1e-5)) {
  std::vector<T> inv;
  Tensor<T> y = layer_norm_value(g.value(x), eps, &inv);
  Tensor<T> xhat = y;
  Graph<T>* gp = &g;
  return g.record(std::move(y), {x}, [gp, x, xhat = std::move(xhat), inv = std::move(inv)](const Tensor<T>& gy) {
    auto& gx = gp->grad(x);
    const std::size_t R = gy.rows(), C = gy.cols();
    for (std::size_t r = 0; r < R; ++r) {
      double mg = 0, mgx = 0;
      for (std::size_t j = 0; j < C; ++j) {
        mg += gy[r * C + j];
        mgx += double(gy[r * C + j]) * xhat[r * C + j];
      }
      mg /= double(C);
      mgx /= double(C);
      for (std::size_t j = 0; j < C; ++j)
        gx[r * C + j] += inv[r] * (gy[r * C + j] - T(mg) - xhat[r * C + j] * T(mgx));
    }
  });
}

/// y = scale * LN(h) + shift. scale/shift are [d] rows broadcast to every row
/// of h, or [B, d] with one row per group of h.rows()/B rows.
template <class T>
Var ada_layer_norm(Graph<T>& g, Var h, Var scale_v, Var shift_v, T eps = T(1e-5)) {
  Var n = layer_norm(g, h, eps);
  if (g.value(scale_v).rows() == 1) return add_tiled(g, mul_tiled(g, n, scale_v), shift_v);
  return add_grouped(g, mul_grouped(g, n, scale_v), shift_v);
}

/// Group normalisation over [batch * N, C]: each (sample, channel group)
/// block is normalised jointly. No affine.
template <class T>
Var group_norm(Graph<T>& g, Var x, std::size_t batch, std::size_t groups, T eps = T(1e-5)) {
  const auto& X = g.value(x);
  const std::size_t R = X.rows(), C = X.cols();
  require(batch > 0 && R % batch == 0 && groups > 0 && C % groups == 0, Errc::shape_mismatch,
          "group_norm: " + shape_str(X.shape()));
  const std::size_t N = R / batch, cg = C / groups;
  Tensor<T> y(X.shape());
  std::vector<T> inv(batch * groups);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t k = 0; k < groups; ++k) {
      double mean = 0, var = 0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t j = k * cg; j < (k + 1) * cg; ++j) mean += X[(b * N + n) * C + j];
      mean /= double(N * cg);
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t j = k * cg; j < (k + 1) * cg; ++j) {
          double d = X[(b * N + n) * C + j] - mean;
          var += d * d;
        }
      var /= double(N * cg);
      const T is = T(1.0 / std::sqrt(var + double(eps)));
      inv[b * groups + k] = is;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t j = k * cg; j < (k + 1) * cg; ++j) {
          const std::size_t i = (b * N + n) * C + j;
          y[i] = (X[i] - T(mean)) * is;
        }
    }
  Tensor<T> xhat = y;
  Graph<T>* gp = &g;
  return g.record(std::move(y), {x}, [gp, x, xhat = std::move(xhat), inv = std::move(inv), batch, groups, N, C, cg](const Tensor<T>& gy) {
    auto& gx = gp->grad(x);
    const double cnt = double(N * cg);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t k = 0; k < groups; ++k) {
        double mg = 0, mgx = 0;
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t j = k * cg; j < (k + 1) * cg; ++j) {
            const std::size_t i = (b * N + n) * C + j;
            mg += gy[i];
            mgx += double(gy[i]) * xhat[i];
          }
        mg /= cnt;
        mgx /= cnt;
        const T is = inv[b * groups + k];
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t j = k * cg; j < (k + 1) * cg; ++j) {
            const std::size_t i = (b * N + n) * C + j;
            gx[i] += is * (gy[i] - T(mg) - xhat[i] * T(mgx));
          }
      }
  });
}

// ---------------------------------------------------------------------------
// Softmax / attention

template <class T>
void softmax_row_inplace(T* row, std::size_t n) {
  T mx = -std::numeric_limits<T>::infinity();
  for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, row[j]);
  if (!std::isfinite(mx)) {
    std::fill(row, row + n, T(0));
    return;
  }
  double s = 0;
  for (std::size_t j = 0; j < n; ++j) {
    row[j] = std::exp(row[j] - mx);
    s += row[j];
  }
  const T inv = T(1.0 / s);
  for (std::size_t j = 0; j < n; ++j) row[j] *= inv;
}

template <class T>
Var softmax_rows(Graph<T>& g, Var x) {
  Tensor<T> y = g.value(x);
  for (std::size_t r = 0; r < y.rows(); ++r) softmax_row_inplace(y.data() + r * y.cols(), y.cols());
  Tensor<T> p = y;
  Graph<T>* gp = &g;
  return g.record(std::move(y), {x}, [gp, x, p = std::move(p)](const Tensor<T>& gy) {
    auto& gx = gp->grad(x);
    const std::size_t C = p.cols();
    for (std::size_t r = 0; r < p.rows(); ++r) {
      double dot = 0;
      for (std::size_t j = 0; j < C; ++j) dot += double(gy[r * C + j]) * p[r * C + j];
      for (std::size_t j = 0; j < C; ++j) gx[r * C + j] += p[r * C + j] * (gy[r * C + j] - T(dot));
    }
  });
}

struct AttentionSpec {
  std::size_t batch = 1;
  std::size_t heads = 1;
  bool causal = false;
  /// Optional [batch * kv_len] flags, nonzero = key may be attended.
  std::vector<std::uint8_t> key_mask;
};

/// Multi-head scaled dot-product attention on already projected inputs:
/// q [B*Lq, d], k/v [B*Lk, d] -> [B*Lq, d], scale 1/sqrt(d / heads).
template <class T>
Var attention(Graph<T>& g, Var q, Var k, Var v, AttentionSpec spec) {
  const auto& Q = g.value(q);
  const auto& K = g.value(k);
  const auto& V = g.value(v);
  const std::size_t B = spec.batch, H = spec.heads, d = Q.cols();
  require(B > 0 && H > 0 && d % H == 0, Errc::shape_mismatch, "attention: model dim not divisible by heads");
  require(K.cols() == d && V.cols() == d && K.rows() == V.rows() && Q.rows() % B == 0 && K.rows() % B == 0,
          Errc::shape_mismatch,
          "attention: q " + shape_str(Q.shape()) + " k " + shape_str(K.shape()) + " v " + shape_str(V.shape()));
  const std::size_t Lq = Q.rows() / B, Lk = K.rows() / B, dh = d / H;
  require(spec.key_mask.empty() || spec.key_mask.size() == B * Lk, Errc::shape_mismatch, "attention: key mask");
  require(!spec.causal || Lq == Lk, Errc::shape_mismatch, "attention: causal needs equal lengths");
  const T sc = T(1.0 / std::sqrt(double(dh)));

  using Strided = Eigen::Map<const MatR<T>, 0, Eigen::OuterStride<>>;
  using StridedM = Eigen::Map<MatR<T>, 0, Eigen::OuterStride<>>;
  Tensor<T> P(Shape{B * H * Lq, Lk});
  Tensor<T> y = Tensor<T>::zeros(B * Lq, d);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < H; ++h) {
      Strided Qh(Q.data() + b * Lq * d + h * dh, Lq, dh, Eigen::OuterStride<>(d));
      Strided Kh(K.data() + b * Lk * d + h * dh, Lk, dh, Eigen::OuterStride<>(d));
      Strided Vh(V.data() + b * Lk * d + h * dh, Lk, dh, Eigen::OuterStride<>(d));
      Eigen::Map<MatR<T>> Ph(P.data() + (b * H + h) * Lq * Lk, Lq, Lk);
      Ph.noalias() = (Qh * Kh.transpose()) * sc;
      for (std::size_t i = 0; i < Lq; ++i) {
        T* row = P.data() + ((b * H + h) * Lq + i) * Lk;
        for (std::size_t j = 0; j < Lk; ++j) {
          const bool masked = (!spec.key_mask.empty() && !spec.key_mask[b * Lk + j]) || (spec.causal && j > i);
          if (masked) row[j] = -std::numeric_limits<T>::infinity();
        }
        softmax_row_inplace(row, Lk);
      }
      StridedM Yh(y.data() + b * Lq * d + h * dh, Lq, dh, Eigen::OuterStride<>(d));
      Yh.noalias() = Ph * Vh;
    }

  Graph<T>* gp = &g;
  return g.record(std::move(y), {q, k, v}, [gp, q, k, v, P = std::move(P), B, H, Lq, Lk, d, dh, sc](const Tensor<T>& gy) {
    const auto& Q = gp->value(q);
    const auto& K = gp->value(k);
    const auto& V = gp->value(v);
    auto* gq = detail::grad_or_null(gp, q);
    auto* gk = detail::grad_or_null(gp, k);
    auto* gv = detail::grad_or_null(gp, v);
    MatR<T> dP(Lq, Lk), dS(Lq, Lk);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t h = 0; h < H; ++h) {
        Strided Qh(Q.data() + b * Lq * d + h * dh, Lq, dh, Eigen::OuterStride<>(d));
        Strided Kh(K.data() + b * Lk * d + h * dh, Lk, dh, Eigen::OuterStride<>(d));
        Strided Vh(V.data() + b * Lk * d + h * dh, Lk, dh, Eigen::OuterStride<>(d));
        Strided dY(gy.data() + b * Lq * d + h * dh, Lq, dh, Eigen::OuterStride<>(d));
        Eigen::Map<const MatR<T>> Ph(P.data() + (b * H + h) * Lq * Lk, Lq, Lk);
        if (gv) {
          StridedM dV(gv->data() + b * Lk * d + h * dh, Lk, dh, Eigen::OuterStride<>(d));
          dV.noalias() += Ph.transpose() * dY;
        }
        if (!gq && !gk) continue;
        dP.noalias() = dY * Vh.transpose();
        for (std::size_t i = 0; i < Lq; ++i) {
          double dot = 0;
          for (std::size_t j = 0; j < Lk; ++j) dot += double(dP(i, j)) * Ph(i, j);
          for (std::size_t j = 0; j < Lk; ++j) dS(i, j) = Ph(i, j) * (dP(i, j) - T(dot)) * sc;
        }
        if (gq) {
          StridedM dQ(gq->data() + b * Lq * d + h * dh, Lq, dh, Eigen::OuterStride<>(d));
          dQ.noalias() += dS * Kh;
        }
        if (gk) {
          StridedM dK(gk->data() + b * Lk * d + h * dh, Lk, dh, Eigen::OuterStride<>(d));
          dK.noalias() += dS.transpose() * Qh;
        }
      }
  });
}

// ---------------------------------------------------------------------------
// Indexing and reshaping

/// Rows of `table` selected by ids (embedding lookup).
template <class T>
Var gather_rows(Graph<T>& g, Var table, std::vector<int> ids) {
  const auto& W = g.value(table);
  const std::size_t C = W.cols();
  Tensor<T> y = Tensor<T>::zeros(ids.size(), C);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    require(ids[r] >= 0 && std::size_t(ids[r]) < W.rows(), Errc::out_of_range,
            "gather_rows: index " + std::to_string(ids[r]));
    std::copy_n(W.data() + std::size_t(ids[r]) * C, C, y.data() + r * C);
  }
  Graph<T>* gp = &g;
  return g.record(std::move(y), {table}, [gp, table, ids = std::move(ids), C](const Tensor<T>& gy) {
    auto& gw = gp->grad(table);
    for (std::size_t r = 0; r < ids.size(); ++r)
      for (std::size_t j = 0; j < C; ++j) gw[std::size_t(ids[r]) * C + j] += gy[r * C + j];
  });
}

template <class T>
Var slice_rows(Graph<T>& g, Var x, std::size_t r0, std::size_t r1) {
  const auto& X = g.value(x);
  require(r0 <= r1 && r1 <= X.rows(), Errc::out_of_range, "slice_rows");
  const std::size_t C = X.cols();
  Tensor<T> y = Tensor<T>::zeros(r1 - r0, C);
  std::copy(X.data() + r0 * C, X.data() + r1 * C, y.data());
  Graph<T>* gp = &g;
  return g.record(std::move(y), {x}, [gp, x, r0, C](const Tensor<T>& gy) {
    auto& gx = gp->grad(x);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[r0 * C + i] += gy[i];
  });
}

template <class T>
Var slice_cols(Graph<T>& g, Var x, std::size_t c0, std::size_t c1) {
  const auto& X = g.value(x);
  require(c0 <= c1 && c1 <= X.cols(), Errc::out_of_range, "slice_cols");
  const std::size_t C = X.cols(), W = c1 - c0;
  Tensor<T> y = Tensor<T>::zeros(X.rows(), W);
  for (std::size_t r = 0; r < X.rows(); ++r) std::copy_n(X.data() + r * C + c0, W, y.data() + r * W);
  Graph<T>* gp = &g;
  return g.record(std::move(y), {x}, [gp, x, c0, C, W](const Tensor<T>& gy) {
    auto& gx = gp->grad(x);
    for (std::size_t r = 0; r < gy.rows(); ++r)
      for (std::size_t j = 0; j < W; ++j) gx[r * C + c0 + j] += gy[r * W + j];
  });
}

template <class T>
Var concat_cols(Graph<T>& g, Var a, Var b) {
  const auto& A = g.value(a);
  const auto& B = g.value(b);
  require(A.rows() == B.rows(), Errc::shape_mismatch, "concat_cols: row mismatch");
  const std::size_t ca = A.cols(), cb = B.cols(), C = ca + cb;
  Tensor<T> y = Tensor<T>::zeros(A.rows(), C);
  for (std::size_t r = 0; r < A.rows(); ++r) {
    std::copy_n(A.data() + r * ca, ca, y.data() + r * C);
    std::copy_n(B.data() + r * cb, cb, y.data() + r * C + ca);
  }
  Graph<T>* gp = &g;
  return g.record(std::move(y), {a, b}, [gp, a, b, ca, cb, C](const Tensor<T>& gy) {
    auto* ga = detail::grad_or_null(gp, a);
    auto* gb = detail::grad_or_null(gp, b);
    for (std::size_t r = 0; r < gy.rows(); ++r) {
      if (ga)
        for (std::size_t j = 0; j < ca; ++j) (*ga)[r * ca + j] += gy[r * C + j];
      if (gb)
        for (std::size_t j = 0; j < cb; ++j) (*gb)[r * cb + j] += gy[r * C + ca + j];
    }
  });
}

template <class T>
Var reshape(Graph<T>& g, Var x, Shape s) {
  Tensor<T> y = g.value(x).reshaped(std::move(s));
  Graph<T>* gp = &g;
  return g.record(std::move(y), {x}, [gp, x](const Tensor<T>& gy) {
    auto& gx = gp->grad(x);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
  });
}

// ---------------------------------------------------------------------------
// 1-D convolution over [batch * N, C] (position-major, channels last)

struct ConvSpec {
  std::size_t batch = 1;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 1;
};

inline std::size_t conv_out_len(std::size_t n, const ConvSpec& s) {
  const long num = long(n) + 2 * long(s.padding) - long(s.kernel);
  require(s.stride > 0 && num >= 0 && num % long(s.stride) == 0, Errc::shape_mismatch,
          "conv1d: output length (" + std::to_string(n) + " + 2*" + std::to_string(s.padding) + " - " +
              std::to_string(s.kernel) + ")/" + std::to_string(s.stride) + " + 1 is not integral");
  return std::size_t(num / long(s.stride)) + 1;
}

/// Cross-correlation. w is [kernel * C_in, C_out] with row (tap * C_in + c).
template <class T>
Var conv1d(Graph<T>& g, Var x, Var w, Var b, ConvSpec spec) {
  const auto& X = g.value(x);
  const auto& W = g.value(w);
  const std::size_t B = spec.batch, cin = X.cols();
  require(B > 0 && X.rows() % B == 0, Errc::shape_mismatch, "conv1d: batch");
  require(W.rows() == spec.kernel * cin, Errc::shape_mismatch,
          "conv1d: weight " + shape_str(W.shape()) + " for " + std::to_string(cin) + " input channels");
  const std::size_t N = X.rows() / B, No = conv_out_len(N, spec), K = spec.kernel;
  Tensor<T> cols = Tensor<T>::zeros(B * No, K * cin);
  for (std::size_t bb = 0; bb < B; ++bb)
    for (std::size_t o = 0; o < No; ++o)
      for (std::size_t t = 0; t < K; ++t) {
        const long src = long(o * spec.stride + t) - long(spec.padding);
        if (src < 0 || src >= long(N)) continue;
        std::copy_n(X.data() + (bb * N + std::size_t(src)) * cin, cin, cols.data() + (bb * No + o) * K * cin + t * cin);
      }
  Tensor<T> y = Tensor<T>::zeros(B * No, W.cols());
  mat(y).noalias() = mat(cols) * mat(W);
  if (b.valid()) mat(y).rowwise() += mat(g.value(b)).row(0);
  Graph<T>* gp = &g;
  return g.record(std::move(y), {x, w, b.valid() ? b : x},
                  [gp, x, w, b, cols = std::move(cols), spec, B, N, No, K, cin](const Tensor<T>& gy) {
                    if (auto* gw = detail::grad_or_null(gp, w)) mat(*gw).noalias() += mat(cols).transpose() * mat(gy);
                    if (auto* gb = detail::grad_or_null(gp, b)) mat(*gb).row(0) += mat(gy).colwise().sum();
                    if (auto* gx = detail::grad_or_null(gp, x)) {
                      MatR<T> dcols = mat(gy) * mat(gp->value(w)).transpose();
                      for (std::size_t bb = 0; bb < B; ++bb)
                        for (std::size_t o = 0; o < No; ++o)
                          for (std::size_t t = 0; t < K; ++t) {
                            const long src = long(o * spec.stride + t) - long(spec.padding);
                            if (src < 0 || src >= long(N)) continue;
                            T* dst = gx->data() + (bb * N + std::size_t(src)) * cin;
                            const T* s = dcols.data() + (bb * No + o) * K * cin + t * cin;
                            for (std::size_t c = 0; c < cin; ++c) dst[c] += s[c];
                          }
                    }
                  });
}

template <class T>
Var upsample_nearest(Graph<T>& g, Var x, std::size_t batch, std::size_t factor) {
  const auto& X = g.value(x);
  require(batch > 0 && X.rows() % batch == 0 && factor > 0, Errc::shape_mismatch, "upsample_nearest");
  const std::size_t N = X.rows() / batch, C = X.cols();
  Tensor<T> y = Tensor<T>::zeros(batch * N * factor, C);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t n = 0; n < N * factor; ++n)
      std::copy_n(X.data() + (b * N + n / factor) * C, C, y.data() + (b * N * factor + n) * C);
  Graph<T>* gp = &g;
  return g.record(std::move(y), {x}, [gp, x, batch, factor, N, C](const Tensor<T>& gy) {
    auto& gx = gp->grad(x);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t n = 0; n < N * factor; ++n)
        for (std::size_t c = 0; c < C; ++c) gx[(b * N + n / factor) * C + c] += gy[(b * N * factor + n) * C + c];
  });
}

/// Keeps every `stride`-th position.
template <class T>
Var downsample_strided(Graph<T>& g, Var x, std::size_t batch, std::size_t stride) {
  const auto& X = g.value(x);
  require(batch > 0 && X.rows() % batch == 0 && stride > 0 && (X.rows() / batch) % stride == 0, Errc::shape_mismatch,
          "downsample_strided: length not divisible by stride");
  const std::size_t N = X.rows() / batch, No = N / stride, C = X.cols();
  Tensor<T> y = Tensor<T>::zeros(batch * No, C);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t n = 0; n < No; ++n) std::copy_n(X.data() + (b * N + n * stride) * C, C, y.data() + (b * No + n) * C);
  Graph<T>* gp = &g;
  return g.record(std::move(y), {x}, [gp, x, batch, stride, N, No, C](const Tensor<T>& gy) {
    auto& gx = gp->grad(x);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t n = 0; n < No; ++n)
        for (std::size_t c = 0; c < C; ++c) gx[(b * N + n * stride) * C + c] += gy[(b * No + n) * C + c];
  });
}

// ---------------------------------------------------------------------------
// Reductions and losses (accumulated in double)

template <class T>
Var sum_all(Graph<T>& g, Var x) {
  double s = 0;
  for (T v : g.value(x).values()) s += v;
  Graph<T>* gp = &g;
  return g.record(Tensor<T>(Shape{1, 1}, {T(s)}), {x}, [gp, x](const Tensor<T>& gy) {
    auto& gx = gp->grad(x);
    for (auto& v : gx.values()) v += gy[0];
  });
}

template <class T>
Var mean_all(Graph<T>& g, Var x) {
  const double n = double(g.value(x).size());
  return scale(g, sum_all(g, x), T(1.0 / n));
}

/// Mean squared error against a constant target.
template <class T>
Var mse(Graph<T>& g, Var pred, const Tensor<T>& target) {
  const auto& P = g.value(pred);
  detail::check_same_shape(P, target, "mse");
  double s = 0;
  for (std::size_t i = 0; i < P.size(); ++i) s += double(P[i] - target[i]) * double(P[i] - target[i]);
  const double n = double(P.size());
  Graph<T>* gp = &g;
  return g.record(Tensor<T>(Shape{1, 1}, {T(s / n)}), {pred}, [gp, pred, target, n](const Tensor<T>& gy) {
    const auto& P = gp->value(pred);
    auto& gx = gp->grad(pred);
    for (std::size_t i = 0; i < P.size(); ++i) gx[i] += gy[0] * T(2.0 / n) * (P[i] - target[i]);
  });
}

/// Mean over rows with weight != 0 of -log softmax(logits)[target].
template <class T>
Var cross_entropy(Graph<T>& g, Var logits, const std::vector<int>& targets, const std::vector<std::uint8_t>& use) {
  const auto& L = g.value(logits);
  const std::size_t R = L.rows(), V = L.cols();
  require(targets.size() == R && use.size() == R, Errc::shape_mismatch, "cross_entropy: target count");
  Tensor<T> p = L;
  double loss = 0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < R; ++r) {
    if (!use[r]) continue;
    require(targets[r] >= 0 && std::size_t(targets[r]) < V, Errc::out_of_range, "cross_entropy: target id");
    T* row = p.data() + r * V;
    softmax_row_inplace(row, V);
    loss -= std::log(std::max<double>(row[targets[r]], 1e-300));
    ++count;
  }
  const double denom = count ? double(count) : 1.0;
  Graph<T>* gp = &g;
  return g.record(Tensor<T>(Shape{1, 1}, {T(loss / denom)}), {logits},
                  [gp, logits, p = std::move(p), targets, use, denom, V](const Tensor<T>& gy) {
                    auto& gl = gp->grad(logits);
                    const T s = T(gy[0] / denom);
                    for (std::size_t r = 0; r < use.size(); ++r) {
                      if (!use[r]) continue;
                      for (std::size_t j = 0; j < V; ++j) gl[r * V + j] += s * p[r * V + j];
                      gl[r * V + std::size_t(targets[r])] -= s;
                    }
                  });
}

/// For consecutive rows (l, l+1) of a probability matrix P [L, V] returns
/// sum_{a,b} P[l, a+offset] P[l+1, b+offset] A[a, b] as a [1, L-1] row, where
/// `succ[a]` lists the b with A[a, b] = 1.
template <class T>
Var adjacency_agreement(Graph<T>& g, Var probs, const std::vector<std::vector<int>>* succ, std::size_t offset) {
  const auto& P = g.value(probs);
  const std::size_t L = P.rows(), V = P.cols();
  require(L >= 2, Errc::shape_mismatch, "adjacency_agreement: need at least two rows");
  require(offset + succ->size() <= V, Errc::shape_mismatch, "adjacency_agreement: vocabulary too small");
  Tensor<T> y = Tensor<T>::zeros(1, L - 1);
  for (std::size_t l = 0; l + 1 < L; ++l) {
    double s = 0;
    for (std::size_t a = 0; a < succ->size(); ++a) {
      const double pa = P(l, a + offset);
      if (pa == 0) continue;
      double inner = 0;
      for (int b : (*succ)[a]) inner += P(l + 1, std::size_t(b) + offset);
      s += pa * inner;
    }
    y[l] = T(s);
  }
  Graph<T>* gp = &g;
  return g.record(std::move(y), {probs}, [gp, probs, succ, offset, L](const Tensor<T>& gy) {
    const auto& P = gp->value(probs);
    auto& gpr = gp->grad(probs);
    for (std::size_t l = 0; l + 1 < L; ++l) {
      const T go = gy[l];
      for (std::size_t a = 0; a < succ->size(); ++a) {
        double inner = 0;
        for (int b : (*succ)[a]) {
          inner += P(l + 1, std::size_t(b) + offset);
          gpr(l + 1, std::size_t(b) + offset) += go * P(l, a + offset);
        }
        gpr(l, a + offset) += go * T(inner);
      }
    }
  });
}

}  // namespace cardiff::nn
