#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>

#include "ntq/tensor.hpp"

// Dense kernels shared by the inference path and the autodiff layer. Every
// reduction runs in a fixed ascending order per output element, so results are
// bit-stable across runs.

namespace ntq {

namespace detail {

template <class S>
void mm_nn_kernel(const S* a, const S* b, S* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    S* crow = c + static_cast<size_t>(i) * n;
    std::fill(crow, crow + n, S(0));
    const S* arow = a + static_cast<size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const S av = arow[p];
      const S* brow = b + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <class S>
void mm_nt_kernel(const S* a, const S* b, S* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const S* arow = a + static_cast<size_t>(i) * k;
    S* crow = c + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const S* brow = b + static_cast<size_t>(j) * k;
      S acc = 0;
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] = acc;
    }
  }
}

// c[m,n] += or = sum_p a[p,m] * b[p,n]
template <class S>
void mm_tn_kernel(const S* a, const S* b, S* c, int p_dim, int m, int n) {
  std::fill(c, c + static_cast<size_t>(m) * n, S(0));
  for (int p = 0; p < p_dim; ++p) {
    const S* arow = a + static_cast<size_t>(p) * m;
    const S* brow = b + static_cast<size_t>(p) * n;
    for (int i = 0; i < m; ++i) {
      const S av = arow[i];
      S* crow = c + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

template <class S>
void check_rank(const TensorT<S>& t, int r, const char* op) {
  if (t.rank() != r) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " + shape_str(t.shape()));
  }
}

// a[m,k] * b[k,n]
template <class S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
  check_rank(a, 2, "matmul");
  check_rank(b, 2, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  TensorT<S> c({a.dim(0), b.dim(1)});
  detail::mm_nn_kernel(a.data(), b.data(), c.data(), a.dim(0), a.dim(1), b.dim(1));
  return c;
}

// a[m,k] * b[n,k]^T
template <class S>
TensorT<S> matmul_nt(const TensorT<S>& a, const TensorT<S>& b) {
  check_rank(a, 2, "matmul_nt");
  check_rank(b, 2, "matmul_nt");
  if (a.dim(1) != b.dim(1)) {
    throw ShapeError("matmul_nt: inner dimensions disagree, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  TensorT<S> c({a.dim(0), b.dim(0)});
  detail::mm_nt_kernel(a.data(), b.data(), c.data(), a.dim(0), a.dim(1), b.dim(0));
  return c;
}

// a[p,m]^T * b[p,n]
template <class S>
TensorT<S> matmul_tn(const TensorT<S>& a, const TensorT<S>& b) {
  check_rank(a, 2, "matmul_tn");
  check_rank(b, 2, "matmul_tn");
  if (a.dim(0) != b.dim(0)) {
    throw ShapeError("matmul_tn: leading dimensions disagree, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  TensorT<S> c({a.dim(1), b.dim(1)});
  detail::mm_tn_kernel(a.data(), b.data(), c.data(), a.dim(0), a.dim(1), b.dim(1));
  return c;
}

template <class S>
void check_batched3(const TensorT<S>& a, const TensorT<S>& b, const char* op) {
  check_rank(a, 3, op);
  check_rank(b, 3, op);
  if (a.dim(0) != b.dim(0)) {
    throw ShapeError(std::string(op) + ": batch dimensions disagree, " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
}

// a[N,p,q] * b[N,q,r]
template <class S>
TensorT<S> bmm_nn(const TensorT<S>& a, const TensorT<S>& b) {
  check_batched3(a, b, "bmm_nn");
  if (a.dim(2) != b.dim(1)) {
    throw ShapeError("bmm_nn: inner dimensions disagree, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const int N = a.dim(0), p = a.dim(1), q = a.dim(2), r = b.dim(2);
  TensorT<S> c({N, p, r});
  for (int i = 0; i < N; ++i) {
    detail::mm_nn_kernel(a.data() + static_cast<size_t>(i) * p * q, b.data() + static_cast<size_t>(i) * q * r,
                         c.data() + static_cast<size_t>(i) * p * r, p, q, r);
  }
  return c;
}

// a[N,p,q] * b[N,r,q]^T
template <class S>
TensorT<S> bmm_nt(const TensorT<S>& a, const TensorT<S>& b) {
  check_batched3(a, b, "bmm_nt");
  if (a.dim(2) != b.dim(2)) {
    throw ShapeError("bmm_nt: inner dimensions disagree, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const int N = a.dim(0), p = a.dim(1), q = a.dim(2), r = b.dim(1);
  TensorT<S> c({N, p, r});
  for (int i = 0; i < N; ++i) {
    detail::mm_nt_kernel(a.data() + static_cast<size_t>(i) * p * q, b.data() + static_cast<size_t>(i) * r * q,
                         c.data() + static_cast<size_t>(i) * p * r, p, q, r);
  }
  return c;
}

// a[N,p,q]^T * b[N,p,r] batch-wise
template <class S>
TensorT<S> bmm_tn(const TensorT<S>& a, const TensorT<S>& b) {
  check_batched3(a, b, "bmm_tn");
  if (a.dim(1) != b.dim(1)) {
    throw ShapeError("bmm_tn: leading dimensions disagree, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const int N = a.dim(0), p = a.dim(1), q = a.dim(2), r = b.dim(2);
  TensorT<S> c({N, q, r});
  for (int i = 0; i < N; ++i) {
    detail::mm_tn_kernel(a.data() + static_cast<size_t>(i) * p * q, b.data() + static_cast<size_t>(i) * p * r,
                         c.data() + static_cast<size_t>(i) * q * r, p, q, r);
  }
  return c;
}

template <class S>
void check_same_shape(const TensorT<S>& a, const TensorT<S>& b, const char* op) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(op) + ": shape mismatch, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

template <class S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  check_same_shape(a, b, "add");
  TensorT<S> c(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i) c[i] = a[i] + b[i];
  return c;
}

template <class S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
  check_same_shape(a, b, "sub");
  TensorT<S> c(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i) c[i] = a[i] - b[i];
  return c;
}

template <class S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
  check_same_shape(a, b, "mul");
  TensorT<S> c(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i) c[i] = a[i] * b[i];
  return c;
}

template <class S>
TensorT<S> scale(const TensorT<S>& a, S s) {
  TensorT<S> c(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i) c[i] = a[i] * s;
  return c;
}

template <class S>
TensorT<S> transpose(const TensorT<S>& a) {
  check_rank(a, 2, "transpose");
  const int m = a.dim(0), n = a.dim(1);
  TensorT<S> c({n, m});
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) c.at(j, i) = a.at(i, j);
  }
  return c;
}

namespace detail {

template <class S>
void check_axis(const TensorT<S>& t, int axis, const char* op) {
  if (axis < 0 || axis >= t.rank()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
                     shape_str(t.shape()));
  }
}

// Iterate a tensor as [outer, axis_len, inner] around `axis`.
template <class S>
struct AxisView {
  int64_t outer, len, inner;
  explicit AxisView(const TensorT<S>& t, int axis) {
    outer = 1;
    for (int i = 0; i < axis; ++i) outer *= t.dim(i);
    len = t.dim(axis);
    inner = 1;
    for (int i = axis + 1; i < t.rank(); ++i) inner *= t.dim(i);
  }
};

}  // namespace detail

// Softmax along `axis`; subtracts the axis max before exponentiation.
template <class S>
TensorT<S> softmax(const TensorT<S>& x, int axis) {
  detail::check_axis(x, axis, "softmax");
  const detail::AxisView<S> v(x, axis);
  TensorT<S> y(x.shape());
  for (int64_t o = 0; o < v.outer; ++o) {
    for (int64_t in = 0; in < v.inner; ++in) {
      const int64_t base = o * v.len * v.inner + in;
      S mx = x[base];
      for (int64_t l = 1; l < v.len; ++l) mx = std::max(mx, x[base + l * v.inner]);
      S sum = 0;
      for (int64_t l = 0; l < v.len; ++l) {
        const S e = std::exp(x[base + l * v.inner] - mx);
        y[base + l * v.inner] = e;
        sum += e;
      }
      for (int64_t l = 0; l < v.len; ++l) y[base + l * v.inner] /= sum;
    }
  }
  return y;
}

template <class S>
TensorT<S> reduce_mean(const TensorT<S>& x, int axis) {
  detail::check_axis(x, axis, "reduce_mean");
  const detail::AxisView<S> v(x, axis);
  Shape out_shape;
  for (int i = 0; i < x.rank(); ++i) {
    if (i != axis) out_shape.push_back(x.dim(i));
  }
  if (out_shape.empty()) out_shape = {1};
  TensorT<S> y(out_shape);
  int64_t idx = 0;
  for (int64_t o = 0; o < v.outer; ++o) {
    for (int64_t in = 0; in < v.inner; ++in) {
      const int64_t base = o * v.len * v.inner + in;
      S acc = 0;
      for (int64_t l = 0; l < v.len; ++l) acc += x[base + l * v.inner];
      y[o * v.inner + in] = acc / static_cast<S>(v.len);
      ++idx;
    }
  }
  (void)idx;
  return y;
}

// Population variance along `axis`.
template <class S>
TensorT<S> reduce_var(const TensorT<S>& x, int axis) {
  detail::check_axis(x, axis, "reduce_var");
  const detail::AxisView<S> v(x, axis);
  TensorT<S> mean = reduce_mean(x, axis);
  TensorT<S> y(mean.shape());
  for (int64_t o = 0; o < v.outer; ++o) {
    for (int64_t in = 0; in < v.inner; ++in) {
      const int64_t base = o * v.len * v.inner + in;
      const S mu = mean[o * v.inner + in];
      S acc = 0;
      for (int64_t l = 0; l < v.len; ++l) {
        const S d = x[base + l * v.inner] - mu;
        acc += d * d;
      }
      y[o * v.inner + in] = acc / static_cast<S>(v.len);
    }
  }
  return y;
}

namespace detail {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

template <class S>
S gelu_scalar(S x) {
  const S u = static_cast<S>(kGeluC) * (x + S(0.044715) * x * x * x);
  return S(0.5) * x * (S(1) + std::tanh(u));
}

template <class S>
S gelu_grad_scalar(S x) {
  const S c = static_cast<S>(kGeluC);
  const S u = c * (x + S(0.044715) * x * x * x);
  const S t = std::tanh(u);
  const S du = c * (S(1) + S(3) * S(0.044715) * x * x);
  return S(0.5) * (S(1) + t) + S(0.5) * x * (S(1) - t * t) * du;
}

}  // namespace detail

// GELU, tanh approximation.
template <class S>
TensorT<S> gelu(const TensorT<S>& x) {
  TensorT<S> y(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) y[i] = detail::gelu_scalar(x[i]);
  return y;
}

// Dynamic per-tensor symmetric quantize-dequantize. Rounding is
// half-away-from-zero; the symmetric grid spans [-(2^(b-1)-1), 2^(b-1)-1].
template <class S>
TensorT<S> fake_quant_symmetric(const TensorT<S>& x, int bits) {
  if (bits < 2 || bits > 8) throw ContractError("fake_quant_symmetric: bits must be in [2,8]");
  const S maxq = static_cast<S>((1 << (bits - 1)) - 1);
  const S amax = x.abs_max();
  if (amax == S(0)) return x;
  const S s = amax / maxq;
  TensorT<S> y(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) {
    S q = std::round(x[i] / s);
    q = std::min(maxq, std::max(-maxq, q));
    y[i] = q * s;
  }
  return y;
}

// Normalizes over the last dimension with population variance.
template <class S>
TensorT<S> layernorm_forward(const TensorT<S>& x, const TensorT<S>& gamma, const TensorT<S>& beta, S eps) {
  if (x.rank() < 1) throw ShapeError("layernorm_forward: rank-0 input");
  const int h = x.dim(x.rank() - 1);
  if (gamma.numel() != h || beta.numel() != h) {
    throw ShapeError("layernorm_forward: gamma/beta length must equal last dim " + std::to_string(h));
  }
  const int64_t rows = x.numel() / h;
  TensorT<S> y(x.shape());
  for (int64_t r = 0; r < rows; ++r) {
    const S* xr = x.data() + r * h;
    S* yr = y.data() + r * h;
    S mu = 0;
    for (int j = 0; j < h; ++j) mu += xr[j];
    mu /= static_cast<S>(h);
    S var = 0;
    for (int j = 0; j < h; ++j) {
      const S d = xr[j] - mu;
      var += d * d;
    }
    var /= static_cast<S>(h);
    const S inv = S(1) / std::sqrt(var + eps);
    for (int j = 0; j < h; ++j) yr[j] = (xr[j] - mu) * inv * gamma[j] + beta[j];
  }
  return y;
}

// x / sqrt(mean(x^2)+eps) * gamma; no mean subtraction, no shift.
template <class S>
TensorT<S> rmsnorm_forward(const TensorT<S>& x, const TensorT<S>& gamma, S eps) {
  if (x.rank() < 1) throw ShapeError("rmsnorm_forward: rank-0 input");
  const int h = x.dim(x.rank() - 1);
  if (gamma.numel() != h) {
    throw ShapeError("rmsnorm_forward: gamma length must equal last dim " + std::to_string(h));
  }
  const int64_t rows = x.numel() / h;
  TensorT<S> y(x.shape());
  for (int64_t r = 0; r < rows; ++r) {
    const S* xr = x.data() + r * h;
    S* yr = y.data() + r * h;
    S ms = 0;
    for (int j = 0; j < h; ++j) ms += xr[j] * xr[j];
    ms /= static_cast<S>(h);
    const S inv = S(1) / std::sqrt(ms + eps);
    for (int j = 0; j < h; ++j) yr[j] = xr[j] * inv * gamma[j];
  }
  return y;
}

}  // namespace ntq
