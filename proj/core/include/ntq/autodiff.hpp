#pragma once

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "ntq/tensor_ops.hpp"
#include "ntq/tokens.hpp"

// Restricted reverse-mode differentiation: a tape records primitive
// operations in execution order; backward() replays them in exact reverse
// order, accumulating gradients additively into per-value slots. Only what a
// transformer block needs is implemented — no higher-order gradients, no
// control-flow capture.

namespace ntq {

template <class S>
struct VarT {
  TensorT<S> value;
  int id = -1;  // slot on the tape; -1 marks a constant

  bool traced() const { return id >= 0; }
};

using Var = VarT<float>;
using DVar = VarT<double>;

template <class S>
class TapeT {
 public:
  using T = TensorT<S>;
  using GradMap = std::map<std::string, T>;

  TapeT() = default;
  TapeT(const TapeT&) = delete;
  TapeT& operator=(const TapeT&) = delete;

  int alloc_slot(const Shape& shape) {
    shapes_.push_back(shape);
    grads_.emplace_back();
    return static_cast<int>(shapes_.size()) - 1;
  }

  bool grad_ready(int id) const { return id >= 0 && !grads_[static_cast<size_t>(id)].empty(); }

  // Gradient buffer for a slot, zero-initialized on first touch.
  T& grad(int id) {
    T& g = grads_[static_cast<size_t>(id)];
    if (g.empty()) g = T(shapes_[static_cast<size_t>(id)]);
    return g;
  }

  void record(int out_id, std::function<void(TapeT&)> fn) { ops_.push_back({out_id, std::move(fn)}); }

  // Registers a parameter whose gradient backward() must report.
  VarT<S> watch(const T& value, const std::string& name) {
    VarT<S> v{value, alloc_slot(value.shape())};
    watched_.emplace_back(name, v.id);
    return v;
  }

  size_t num_ops() const { return ops_.size(); }
  bool watch_set_empty() const { return watched_.empty(); }

  // d(loss)/d(p) for every watched parameter p; parameters the loss does not
  // depend on get exact zeros.
  GradMap backward(const VarT<S>& loss) {
    if (loss.value.numel() != 1) {
      throw ContractError("backward: loss must be scalar, got " + shape_str(loss.value.shape()));
    }
    if (ops_.empty()) throw ContractError("backward: tape is empty");
    if (watched_.empty()) throw ContractError("backward: watch set is empty");
    if (!loss.traced()) throw ContractError("backward: loss was not produced under this tape");
    grad(loss.id)[0] = S(1);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
      if (grad_ready(it->out_id)) it->fn(*this);
    }
    GradMap out;
    for (const auto& [name, id] : watched_) {
      T g = grad_ready(id) ? grads_[static_cast<size_t>(id)] : T(shapes_[static_cast<size_t>(id)]);
      auto [pos, inserted] = out.emplace(name, std::move(g));
      if (!inserted) throw ContractError("backward: duplicate watched name '" + name + "'");
      (void)pos;
    }
    return out;
  }

 private:
  struct Op {
    int out_id;
    std::function<void(TapeT&)> fn;
  };
  std::vector<Shape> shapes_;
  std::vector<T> grads_;
  std::vector<Op> ops_;
  std::vector<std::pair<std::string, int>> watched_;
};

using Tape = TapeT<float>;
using DTape = TapeT<double>;

template <class S>
VarT<S> constant(TensorT<S> value) {
  return VarT<S>{std::move(value), -1};
}

namespace ag_detail {

template <class S>
void acc(TensorT<S>& g, const TensorT<S>& d) {
  for (int64_t i = 0; i < g.numel(); ++i) g[i] += d[i];
}

template <class S>
int maybe_slot(TapeT<S>* tape, const TensorT<S>& value, bool any_traced) {
  return (tape && any_traced) ? tape->alloc_slot(value.shape()) : -1;
}

}  // namespace ag_detail

template <class S>
VarT<S> matmul(TapeT<S>* tape, const VarT<S>& a, const VarT<S>& b) {
  VarT<S> out{matmul(a.value, b.value), -1};
  if (tape && (a.traced() || b.traced())) {
    out.id = tape->alloc_slot(out.value.shape());
    const int aid = a.id, bid = b.id, oid = out.id;
    TensorT<S> av = a.value, bv = b.value;
    tape->record(oid, [aid, bid, oid, av, bv](TapeT<S>& t) {
      const TensorT<S>& dy = t.grad(oid);
      if (aid >= 0) ag_detail::acc(t.grad(aid), matmul_nt(dy, bv));
      if (bid >= 0) ag_detail::acc(t.grad(bid), matmul_tn(av, dy));
    });
  }
  return out;
}

// a[m,k] x b[n,k]^T; used for the weight-tied output head.
template <class S>
VarT<S> matmul_nt(TapeT<S>* tape, const VarT<S>& a, const VarT<S>& b) {
  VarT<S> out{matmul_nt(a.value, b.value), -1};
  if (tape && (a.traced() || b.traced())) {
    out.id = tape->alloc_slot(out.value.shape());
    const int aid = a.id, bid = b.id, oid = out.id;
    TensorT<S> av = a.value, bv = b.value;
    tape->record(oid, [aid, bid, oid, av, bv](TapeT<S>& t) {
      const TensorT<S>& dy = t.grad(oid);
      if (aid >= 0) ag_detail::acc(t.grad(aid), matmul(dy, bv));
      if (bid >= 0) ag_detail::acc(t.grad(bid), matmul_tn(dy, av));
    });
  }
  return out;
}

// a[N,p,q] x b[N,q,r]
template <class S>
VarT<S> bmm_nn(TapeT<S>* tape, const VarT<S>& a, const VarT<S>& b) {
  VarT<S> out{bmm_nn(a.value, b.value), -1};
  if (tape && (a.traced() || b.traced())) {
    out.id = tape->alloc_slot(out.value.shape());
    const int aid = a.id, bid = b.id, oid = out.id;
    TensorT<S> av = a.value, bv = b.value;
    tape->record(oid, [aid, bid, oid, av, bv](TapeT<S>& t) {
      const TensorT<S>& dy = t.grad(oid);
      if (aid >= 0) ag_detail::acc(t.grad(aid), bmm_nt(dy, bv));
      if (bid >= 0) ag_detail::acc(t.grad(bid), bmm_tn(av, dy));
    });
  }
  return out;
}

// a[N,p,q] x b[N,r,q]^T
template <class S>
VarT<S> bmm_nt(TapeT<S>* tape, const VarT<S>& a, const VarT<S>& b) {
  VarT<S> out{bmm_nt(a.value, b.value), -1};
  if (tape && (a.traced() || b.traced())) {
    out.id = tape->alloc_slot(out.value.shape());
    const int aid = a.id, bid = b.id, oid = out.id;
    TensorT<S> av = a.value, bv = b.value;
    tape->record(oid, [aid, bid, oid, av, bv](TapeT<S>& t) {
      const TensorT<S>& dy = t.grad(oid);
      if (aid >= 0) ag_detail::acc(t.grad(aid), bmm_nn(dy, bv));
      if (bid >= 0) ag_detail::acc(t.grad(bid), bmm_tn(dy, av));
    });
  }
  return out;
}

template <class S>
VarT<S> add(TapeT<S>* tape, const VarT<S>& a, const VarT<S>& b) {
  VarT<S> out{add(a.value, b.value), -1};
  if (tape && (a.traced() || b.traced())) {
    out.id = tape->alloc_slot(out.value.shape());
    const int aid = a.id, bid = b.id, oid = out.id;
    tape->record(oid, [aid, bid, oid](TapeT<S>& t) {
      const TensorT<S>& dy = t.grad(oid);
      if (aid >= 0) ag_detail::acc(t.grad(aid), dy);
      if (bid >= 0) ag_detail::acc(t.grad(bid), dy);
    });
  }
  return out;
}

template <class S>
VarT<S> sub(TapeT<S>* tape, const VarT<S>& a, const VarT<S>& b) {
  VarT<S> out{sub(a.value, b.value), -1};
  if (tape && (a.traced() || b.traced())) {
    out.id = tape->alloc_slot(out.value.shape());
    const int aid = a.id, bid = b.id, oid = out.id;
    tape->record(oid, [aid, bid, oid](TapeT<S>& t) {
      const TensorT<S>& dy = t.grad(oid);
      if (aid >= 0) ag_detail::acc(t.grad(aid), dy);
      if (bid >= 0) {
        TensorT<S>& g = t.grad(bid);
        for (int64_t i = 0; i < g.numel(); ++i) g[i] -= dy[i];
      }
    });
  }
  return out;
}

template <class S>
VarT<S> mul(TapeT<S>* tape, const VarT<S>& a, const VarT<S>& b) {
  VarT<S> out{mul(a.value, b.value), -1};
  if (tape && (a.traced() || b.traced())) {
    out.id = tape->alloc_slot(out.value.shape());
    const int aid = a.id, bid = b.id, oid = out.id;
    TensorT<S> av = a.value, bv = b.value;
    tape->record(oid, [aid, bid, oid, av, bv](TapeT<S>& t) {
      const TensorT<S>& dy = t.grad(oid);
      if (aid >= 0) {
        TensorT<S>& g = t.grad(aid);
        for (int64_t i = 0; i < g.numel(); ++i) g[i] += dy[i] * bv[i];
      }
      if (bid >= 0) {
        TensorT<S>& g = t.grad(bid);
        for (int64_t i = 0; i < g.numel(); ++i) g[i] += dy[i] * av[i];
      }
    });
  }
  return out;
}

template <class S>
VarT<S> scale(TapeT<S>* tape, const VarT<S>& a, S s) {
  VarT<S> out{scale(a.value, s), -1};
  if (tape && a.traced()) {
    out.id = tape->alloc_slot(out.value.shape());
    const int aid = a.id, oid = out.id;
    tape->record(oid, [aid, oid, s](TapeT<S>& t) {
      const TensorT<S>& dy = t.grad(oid);
      TensorT<S>& g = t.grad(aid);
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += dy[i] * s;
    });
  }
  return out;
}

template <class S>
VarT<S> reshape(TapeT<S>* tape, const VarT<S>& a, Shape shape) {
  VarT<S> out{a.value.reshaped(std::move(shape)), -1};
  if (tape && a.traced()) {
    out.id = tape->alloc_slot(out.value.shape());
    const int aid = a.id, oid = out.id;
    tape->record(oid, [aid, oid](TapeT<S>& t) {
      const TensorT<S>& dy = t.grad(oid);
      TensorT<S>& g = t.grad(aid);
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += dy[i];
    });
  }
  return out;
}

template <class S>
VarT<S> abs(TapeT<S>* tape, const VarT<S>& a) {
  VarT<S> out{TensorT<S>(a.value.shape()), -1};
  for (int64_t i = 0; i < a.value.numel(); ++i) out.value[i] = std::abs(a.value[i]);
  if (tape && a.traced()) {
    out.id = tape->alloc_slot(out.value.shape());
    const int aid = a.id, oid = out.id;
    TensorT<S> av = a.value;
    tape->record(oid, [aid, oid, av](TapeT<S>& t) {
      const TensorT<S>& dy = t.grad(oid);
      TensorT<S>& g = t.grad(aid);
      for (int64_t i = 0; i < g.numel(); ++i) {
        const S sg = av[i] > S(0) ? S(1) : (av[i] < S(0) ? S(-1) : S(0));
        g[i] += dy[i] * sg;
      }
    });
  }
  return out;
}

template <class S>
VarT<S> mean_all(TapeT<S>* tape, const VarT<S>& a) {
  S acc = 0;
  for (int64_t i = 0; i < a.value.numel(); ++i) acc += a.value[i];
  const S inv = S(1) / static_cast<S>(a.value.numel());
  VarT<S> out{TensorT<S>::scalar(acc * inv), -1};
  if (tape && a.traced()) {
    out.id = tape->alloc_slot(out.value.shape());
    const int aid = a.id, oid = out.id;
    tape->record(oid, [aid, oid, inv](TapeT<S>& t) {
      const S d = t.grad(oid)[0] * inv;
      TensorT<S>& g = t.grad(aid);
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += d;
    });
  }
  return out;
}

template <class S>
VarT<S> gelu(TapeT<S>* tape, const VarT<S>& a) {
  VarT<S> out{gelu(a.value), -1};
  if (tape && a.traced()) {
    out.id = tape->alloc_slot(out.value.shape());
    const int aid = a.id, oid = out.id;
    TensorT<S> av = a.value;
    tape->record(oid, [aid, oid, av](TapeT<S>& t) {
      const TensorT<S>& dy = t.grad(oid);
      TensorT<S>& g = t.grad(aid);
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += dy[i] * detail::gelu_grad_scalar(av[i]);
    });
  }
  return out;
}

template <class S>
VarT<S> layernorm(TapeT<S>* tape, const VarT<S>& x, const VarT<S>& gamma, const VarT<S>& beta, S eps) {
  VarT<S> out{layernorm_forward(x.value, gamma.value, beta.value, eps), -1};
  if (tape && (x.traced() || gamma.traced() || beta.traced())) {
    out.id = tape->alloc_slot(out.value.shape());
    const int xid = x.id, gid = gamma.id, bid = beta.id, oid = out.id;
    TensorT<S> xv = x.value, gv = gamma.value;
    tape->record(oid, [xid, gid, bid, oid, xv, gv, eps](TapeT<S>& t) {
      const TensorT<S>& dy = t.grad(oid);
      const int h = xv.dim(xv.rank() - 1);
      const int64_t rows = xv.numel() / h;
      std::vector<S> xhat(static_cast<size_t>(h));
      for (int64_t r = 0; r < rows; ++r) {
        const S* xr = xv.data() + r * h;
        const S* dr = dy.data() + r * h;
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
        for (int j = 0; j < h; ++j) xhat[static_cast<size_t>(j)] = (xr[j] - mu) * inv;
        if (bid >= 0) {
          TensorT<S>& gb = t.grad(bid);
          for (int j = 0; j < h; ++j) gb[j] += dr[j];
        }
        if (gid >= 0) {
          TensorT<S>& gg = t.grad(gid);
          for (int j = 0; j < h; ++j) gg[j] += dr[j] * xhat[static_cast<size_t>(j)];
        }
        if (xid >= 0) {
          S m1 = 0, m2 = 0;  // mean(g*dy), mean(g*dy*xhat)
          for (int j = 0; j < h; ++j) {
            const S gd = gv[j] * dr[j];
            m1 += gd;
            m2 += gd * xhat[static_cast<size_t>(j)];
          }
          m1 /= static_cast<S>(h);
          m2 /= static_cast<S>(h);
          TensorT<S>& gx = t.grad(xid);
          S* gxr = gx.data() + r * h;
          for (int j = 0; j < h; ++j) {
            gxr[j] += (gv[j] * dr[j] - m1 - xhat[static_cast<size_t>(j)] * m2) * inv;
          }
        }
      }
    });
  }
  return out;
}

template <class S>
VarT<S> rmsnorm(TapeT<S>* tape, const VarT<S>& x, const VarT<S>& gamma, S eps) {
  VarT<S> out{rmsnorm_forward(x.value, gamma.value, eps), -1};
  if (tape && (x.traced() || gamma.traced())) {
    out.id = tape->alloc_slot(out.value.shape());
    const int xid = x.id, gid = gamma.id, oid = out.id;
    TensorT<S> xv = x.value, gv = gamma.value;
    tape->record(oid, [xid, gid, oid, xv, gv, eps](TapeT<S>& t) {
      const TensorT<S>& dy = t.grad(oid);
      const int h = xv.dim(xv.rank() - 1);
      const int64_t rows = xv.numel() / h;
      for (int64_t r = 0; r < rows; ++r) {
        const S* xr = xv.data() + r * h;
        const S* dr = dy.data() + r * h;
        S ms = 0;
        for (int j = 0; j < h; ++j) ms += xr[j] * xr[j];
        ms /= static_cast<S>(h);
        const S rm = std::sqrt(ms + eps);
        const S inv = S(1) / rm;
        if (gid >= 0) {
          TensorT<S>& gg = t.grad(gid);
          for (int j = 0; j < h; ++j) gg[j] += dr[j] * xr[j] * inv;
        }
        if (xid >= 0) {
          S dot = 0;  // sum(gamma*dy*x)
          for (int j = 0; j < h; ++j) dot += gv[j] * dr[j] * xr[j];
          const S c = dot / (static_cast<S>(h) * rm * rm * rm);
          TensorT<S>& gx = t.grad(xid);
          S* gxr = gx.data() + r * h;
          for (int j = 0; j < h; ++j) gxr[j] += gv[j] * dr[j] * inv - xr[j] * c;
        }
      }
    });
  }
  return out;
}

// Row-causal softmax over scores[N,T,T]: query t attends to keys 0..t.
template <class S>
VarT<S> softmax_causal(TapeT<S>* tape, const VarT<S>& scores) {
  check_rank(scores.value, 3, "softmax_causal");
  if (scores.value.dim(1) != scores.value.dim(2)) {
    throw ShapeError("softmax_causal: expected square score matrices, got " + shape_str(scores.value.shape()));
  }
  const int N = scores.value.dim(0), T = scores.value.dim(1);
  VarT<S> out{TensorT<S>(scores.value.shape()), -1};
  for (int nb = 0; nb < N; ++nb) {
    for (int q = 0; q < T; ++q) {
      const S* row = scores.value.data() + (static_cast<size_t>(nb) * T + q) * T;
      S* yrow = out.value.data() + (static_cast<size_t>(nb) * T + q) * T;
      S mx = row[0];
      for (int j = 1; j <= q; ++j) mx = std::max(mx, row[j]);
      S sum = 0;
      for (int j = 0; j <= q; ++j) {
        yrow[j] = std::exp(row[j] - mx);
        sum += yrow[j];
      }
      for (int j = 0; j <= q; ++j) yrow[j] /= sum;
      for (int j = q + 1; j < T; ++j) yrow[j] = S(0);
    }
  }
  if (tape && scores.traced()) {
    out.id = tape->alloc_slot(out.value.shape());
    const int sid = scores.id, oid = out.id;
    TensorT<S> yv = out.value;
    tape->record(oid, [sid, oid, yv, N, T](TapeT<S>& t) {
      const TensorT<S>& dy = t.grad(oid);
      TensorT<S>& g = t.grad(sid);
      for (int nb = 0; nb < N; ++nb) {
        for (int q = 0; q < T; ++q) {
          const size_t base = (static_cast<size_t>(nb) * T + q) * T;
          S dot = 0;
          for (int j = 0; j <= q; ++j) dot += dy[base + j] * yv[base + j];
          for (int j = 0; j <= q; ++j) g[base + j] += yv[base + j] * (dy[base + j] - dot);
        }
      }
    });
  }
  return out;
}

// Log-softmax over the last dimension.
template <class S>
VarT<S> log_softmax_lastdim(TapeT<S>* tape, const VarT<S>& x) {
  const int C = x.value.dim(x.value.rank() - 1);
  const int64_t rows = x.value.numel() / C;
  VarT<S> out{TensorT<S>(x.value.shape()), -1};
  for (int64_t r = 0; r < rows; ++r) {
    const S* xr = x.value.data() + r * C;
    S* yr = out.value.data() + r * C;
    S mx = xr[0];
    for (int j = 1; j < C; ++j) mx = std::max(mx, xr[j]);
    S sum = 0;
    for (int j = 0; j < C; ++j) sum += std::exp(xr[j] - mx);
    const S lse = mx + std::log(sum);
    for (int j = 0; j < C; ++j) yr[j] = xr[j] - lse;
  }
  if (tape && x.traced()) {
    out.id = tape->alloc_slot(out.value.shape());
    const int xid = x.id, oid = out.id;
    TensorT<S> yv = out.value;
    tape->record(oid, [xid, oid, yv, C, rows](TapeT<S>& t) {
      const TensorT<S>& dy = t.grad(oid);
      TensorT<S>& g = t.grad(xid);
      for (int64_t r = 0; r < rows; ++r) {
        const size_t base = static_cast<size_t>(r) * C;
        S dsum = 0;
        for (int j = 0; j < C; ++j) dsum += dy[base + j];
        for (int j = 0; j < C; ++j) g[base + j] += dy[base + j] - std::exp(yv[base + j]) * dsum;
      }
    });
  }
  return out;
}

// [B,T,h] -> [B*H,T,h/H]
template <class S>
VarT<S> split_heads(TapeT<S>* tape, const VarT<S>& x, int n_heads) {
  check_rank(x.value, 3, "split_heads");
  const int B = x.value.dim(0), T = x.value.dim(1), h = x.value.dim(2);
  if (h % n_heads != 0) throw ShapeError("split_heads: hidden size not divisible by head count");
  const int d = h / n_heads;
  VarT<S> out{TensorT<S>({B * n_heads, T, d}), -1};
  for (int b = 0; b < B; ++b) {
    for (int hh = 0; hh < n_heads; ++hh) {
      for (int t = 0; t < T; ++t) {
        const S* src = x.value.data() + (static_cast<size_t>(b) * T + t) * h + static_cast<size_t>(hh) * d;
        S* dst = out.value.data() + ((static_cast<size_t>(b) * n_heads + hh) * T + t) * d;
        std::copy(src, src + d, dst);
      }
    }
  }
  if (tape && x.traced()) {
    out.id = tape->alloc_slot(out.value.shape());
    const int xid = x.id, oid = out.id;
    tape->record(oid, [xid, oid, B, T, h, n_heads, d](TapeT<S>& t) {
      const TensorT<S>& dy = t.grad(oid);
      TensorT<S>& g = t.grad(xid);
      for (int b = 0; b < B; ++b) {
        for (int hh = 0; hh < n_heads; ++hh) {
          for (int tt = 0; tt < T; ++tt) {
            const S* src = dy.data() + ((static_cast<size_t>(b) * n_heads + hh) * T + tt) * d;
            S* dst = g.data() + (static_cast<size_t>(b) * T + tt) * h + static_cast<size_t>(hh) * d;
            for (int j = 0; j < d; ++j) dst[j] += src[j];
          }
        }
      }
    });
  }
  return out;
}

// [B*H,T,d] -> [B,T,H*d]
template <class S>
VarT<S> merge_heads(TapeT<S>* tape, const VarT<S>& x, int n_heads) {
  check_rank(x.value, 3, "merge_heads");
  if (x.value.dim(0) % n_heads != 0) throw ShapeError("merge_heads: batch not divisible by head count");
  const int B = x.value.dim(0) / n_heads, T = x.value.dim(1), d = x.value.dim(2);
  const int h = n_heads * d;
  VarT<S> out{TensorT<S>({B, T, h}), -1};
  for (int b = 0; b < B; ++b) {
    for (int hh = 0; hh < n_heads; ++hh) {
      for (int t = 0; t < T; ++t) {
        const S* src = x.value.data() + ((static_cast<size_t>(b) * n_heads + hh) * T + t) * d;
        S* dst = out.value.data() + (static_cast<size_t>(b) * T + t) * h + static_cast<size_t>(hh) * d;
        std::copy(src, src + d, dst);
      }
    }
  }
  if (tape && x.traced()) {
    out.id = tape->alloc_slot(out.value.shape());
    const int xid = x.id, oid = out.id;
    tape->record(oid, [xid, oid, B, T, h, n_heads, d](TapeT<S>& t) {
      const TensorT<S>& dy = t.grad(oid);
      TensorT<S>& g = t.grad(xid);
      for (int b = 0; b < B; ++b) {
        for (int hh = 0; hh < n_heads; ++hh) {
          for (int tt = 0; tt < T; ++tt) {
            const S* src = dy.data() + (static_cast<size_t>(b) * T + tt) * h + static_cast<size_t>(hh) * d;
            S* dst = g.data() + ((static_cast<size_t>(b) * n_heads + hh) * T + tt) * d;
            for (int j = 0; j < d; ++j) dst[j] += src[j];
          }
        }
      }
    });
  }
  return out;
}

// Row lookup: ids[B,T] into table[V,h] -> [B,T,h].
template <class S>
VarT<S> embedding(TapeT<S>* tape, const TokenMatrix& ids, const VarT<S>& table) {
  check_rank(table.value, 2, "embedding");
  const int V = table.value.dim(0), h = table.value.dim(1);
  for (const int id : ids.ids) {
    if (id < 0 || id >= V) {
      throw InputError("embedding: token id " + std::to_string(id) + " out of range [0," + std::to_string(V) + ")");
    }
  }
  VarT<S> out{TensorT<S>({ids.rows, ids.cols, h}), -1};
  for (int r = 0; r < ids.rows; ++r) {
    for (int c = 0; c < ids.cols; ++c) {
      const S* src = table.value.data() + static_cast<size_t>(ids.at(r, c)) * h;
      S* dst = out.value.data() + (static_cast<size_t>(r) * ids.cols + c) * h;
      std::copy(src, src + h, dst);
    }
  }
  if (tape && table.traced()) {
    out.id = tape->alloc_slot(out.value.shape());
    const int tid = table.id, oid = out.id;
    TokenMatrix idc = ids;
    tape->record(oid, [tid, oid, idc, h](TapeT<S>& t) {
      const TensorT<S>& dy = t.grad(oid);
      TensorT<S>& g = t.grad(tid);
      for (int r = 0; r < idc.rows; ++r) {
        for (int c = 0; c < idc.cols; ++c) {
          const S* src = dy.data() + (static_cast<size_t>(r) * idc.cols + c) * h;
          S* dst = g.data() + static_cast<size_t>(idc.at(r, c)) * h;
          for (int j = 0; j < h; ++j) dst[j] += src[j];
        }
      }
    });
  }
  return out;
}

// Mean next-token NLL over all rows of logits[R,V].
template <class S>
VarT<S> cross_entropy(TapeT<S>* tape, const VarT<S>& logits, const std::vector<int>& targets) {
  check_rank(logits.value, 2, "cross_entropy");
  const int R = logits.value.dim(0), V = logits.value.dim(1);
  if (static_cast<int>(targets.size()) != R) {
    throw ShapeError("cross_entropy: target count " + std::to_string(targets.size()) + " != rows " +
                     std::to_string(R));
  }
  S total = 0;
  TensorT<S> probs({R, V});
  for (int r = 0; r < R; ++r) {
    const S* row = logits.value.data() + static_cast<size_t>(r) * V;
    S* prow = probs.data() + static_cast<size_t>(r) * V;
    S mx = row[0];
    for (int j = 1; j < V; ++j) mx = std::max(mx, row[j]);
    S sum = 0;
    for (int j = 0; j < V; ++j) {
      prow[j] = std::exp(row[j] - mx);
      sum += prow[j];
    }
    for (int j = 0; j < V; ++j) prow[j] /= sum;
    const int tgt = targets[static_cast<size_t>(r)];
    if (tgt < 0 || tgt >= V) throw InputError("cross_entropy: target id out of range");
    total += -(row[tgt] - mx - std::log(sum));
  }
  VarT<S> out{TensorT<S>::scalar(total / static_cast<S>(R)), -1};
  if (tape && logits.traced()) {
    out.id = tape->alloc_slot(out.value.shape());
    const int lid = logits.id, oid = out.id;
    std::vector<int> tgts = targets;
    tape->record(oid, [lid, oid, probs, tgts, R, V](TapeT<S>& t) {
      const S d = t.grad(oid)[0] / static_cast<S>(R);
      TensorT<S>& g = t.grad(lid);
      for (int r = 0; r < R; ++r) {
        const S* prow = probs.data() + static_cast<size_t>(r) * V;
        S* grow = g.data() + static_cast<size_t>(r) * V;
        for (int j = 0; j < V; ++j) grow[j] += d * prow[j];
        grow[tgts[static_cast<size_t>(r)]] -= d;
      }
    });
  }
  return out;
}

// Per-channel mean over all leading positions of x[...,C].
template <class S>
VarT<S> channel_mean(TapeT<S>* tape, const VarT<S>& x) {
  const int C = x.value.dim(x.value.rank() - 1);
  const int64_t rows = x.value.numel() / C;
  VarT<S> out{TensorT<S>({C}), -1};
  for (int64_t r = 0; r < rows; ++r) {
    const S* xr = x.value.data() + r * C;
    for (int j = 0; j < C; ++j) out.value[j] += xr[j];
  }
  const S inv = S(1) / static_cast<S>(rows);
  for (int j = 0; j < C; ++j) out.value[j] *= inv;
  if (tape && x.traced()) {
    out.id = tape->alloc_slot(out.value.shape());
    const int xid = x.id, oid = out.id;
    tape->record(oid, [xid, oid, C, rows, inv](TapeT<S>& t) {
      const TensorT<S>& dy = t.grad(oid);
      TensorT<S>& g = t.grad(xid);
      for (int64_t r = 0; r < rows; ++r) {
        S* gr = g.data() + r * C;
        for (int j = 0; j < C; ++j) gr[j] += dy[j] * inv;
      }
    });
  }
  return out;
}

// Per-channel population variance over all leading positions of x[...,C].
template <class S>
VarT<S> channel_var(TapeT<S>* tape, const VarT<S>& x) {
  const int C = x.value.dim(x.value.rank() - 1);
  const int64_t rows = x.value.numel() / C;
  TensorT<S> mean({C});
  for (int64_t r = 0; r < rows; ++r) {
    const S* xr = x.value.data() + r * C;
    for (int j = 0; j < C; ++j) mean[j] += xr[j];
  }
  const S inv = S(1) / static_cast<S>(rows);
  for (int j = 0; j < C; ++j) mean[j] *= inv;
  VarT<S> out{TensorT<S>({C}), -1};
  for (int64_t r = 0; r < rows; ++r) {
    const S* xr = x.value.data() + r * C;
    for (int j = 0; j < C; ++j) {
      const S d = xr[j] - mean[j];
      out.value[j] += d * d;
    }
  }
  for (int j = 0; j < C; ++j) out.value[j] *= inv;
  if (tape && x.traced()) {
    out.id = tape->alloc_slot(out.value.shape());
    const int xid = x.id, oid = out.id;
    TensorT<S> xv = x.value, mu = mean;
    tape->record(oid, [xid, oid, xv, mu, C, rows, inv](TapeT<S>& t) {
      const TensorT<S>& dy = t.grad(oid);
      TensorT<S>& g = t.grad(xid);
      for (int64_t r = 0; r < rows; ++r) {
        const S* xr = xv.data() + r * C;
        S* gr = g.data() + r * C;
        for (int j = 0; j < C; ++j) gr[j] += dy[j] * S(2) * (xr[j] - mu[j]) * inv;
      }
    });
  }
  return out;
}

// Dynamic per-tensor symmetric fake quantization with a straight-through
// gradient.
template <class S>
VarT<S> fake_quant(TapeT<S>* tape, const VarT<S>& x, int bits) {
  VarT<S> out{fake_quant_symmetric(x.value, bits), -1};
  if (tape && x.traced()) {
    out.id = tape->alloc_slot(out.value.shape());
    const int xid = x.id, oid = out.id;
    tape->record(oid, [xid, oid](TapeT<S>& t) { ag_detail::acc(t.grad(xid), t.grad(oid)); });
  }
  return out;
}

}  // namespace ntq
