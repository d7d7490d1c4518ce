#pragma once

#include <functional>

#include "ntq/autodiff.hpp"
#include "ntq/model.hpp"

// Single implementation of the pre-norm block forward, shared by the float
// model, the quantized model (dequantized weights), the tweaking pass (norm
// parameters watched on a tape) and the 64-bit gradient-check suites.

namespace ntq {

enum class LinearSite { kQkvInput, kOutProjInput, kUpInput, kDownInput };

template <class S>
struct NormVars {
  VarT<S> gamma;
  VarT<S> beta;  // unused for rmsnorm
  bool has_beta = false;
};

template <class S>
struct BlockVars {
  NormVars<S> ln1, ln2;
  VarT<S> wq, wk, wv, wo, w_up, w_down;
};

template <class S>
using LinearInputHook = std::function<void(LinearSite, const TensorT<S>&)>;

template <class S>
BlockVars<S> block_constants(const TransformerBlock& b) {
  BlockVars<S> v;
  v.ln1.gamma = constant(tensor_cast<S>(b.ln1.gamma));
  if (b.ln1.has_beta()) {
    v.ln1.beta = constant(tensor_cast<S>(b.ln1.beta));
    v.ln1.has_beta = true;
  }
  v.ln2.gamma = constant(tensor_cast<S>(b.ln2.gamma));
  if (b.ln2.has_beta()) {
    v.ln2.beta = constant(tensor_cast<S>(b.ln2.beta));
    v.ln2.has_beta = true;
  }
  v.wq = constant(tensor_cast<S>(b.wq));
  v.wk = constant(tensor_cast<S>(b.wk));
  v.wv = constant(tensor_cast<S>(b.wv));
  v.wo = constant(tensor_cast<S>(b.wo));
  v.w_up = constant(tensor_cast<S>(b.w_up));
  v.w_down = constant(tensor_cast<S>(b.w_down));
  return v;
}

template <class S>
VarT<S> apply_norm(TapeT<S>* tape, const NormVars<S>& n, const VarT<S>& x, NormKind kind, S eps) {
  if (kind == NormKind::kLayerNorm) return layernorm(tape, x, n.gamma, n.beta, eps);
  return rmsnorm(tape, x, n.gamma, eps);
}

// x[B,T,h] -> [B,T,h]. act_bits > 0 inserts dynamic fake quantization at
// every Linear input; hooks observe the float value at each site first.
template <class S>
VarT<S> block_graph(TapeT<S>* tape, const BlockVars<S>& p, const VarT<S>& x, const ModelConfig& cfg, int act_bits,
                    const LinearInputHook<S>* hook = nullptr) {
  check_rank(x.value, 3, "block_graph");
  const int B = x.value.dim(0), T = x.value.dim(1), h = x.value.dim(2);
  if (h != cfg.hidden) throw ShapeError("block_graph: hidden size mismatch");
  if (T > cfg.max_seq_len) {
    throw ContractError("block_graph: sequence length " + std::to_string(T) + " exceeds max_seq_len " +
                        std::to_string(cfg.max_seq_len));
  }
  const int H = cfg.n_heads, d = cfg.head_dim();
  const S eps = static_cast<S>(cfg.eps);

  auto maybe_fq = [&](const VarT<S>& v) { return act_bits > 0 ? fake_quant(tape, v, act_bits) : v; };

  VarT<S> n1 = apply_norm(tape, p.ln1, x, cfg.norm_kind, eps);
  if (hook && *hook) (*hook)(LinearSite::kQkvInput, n1.value.reshaped({B * T, h}));
  VarT<S> n1f = reshape(tape, maybe_fq(n1), {B * T, h});

  VarT<S> q = split_heads(tape, reshape(tape, matmul(tape, n1f, p.wq), {B, T, h}), H);
  VarT<S> k = split_heads(tape, reshape(tape, matmul(tape, n1f, p.wk), {B, T, h}), H);
  VarT<S> v = split_heads(tape, reshape(tape, matmul(tape, n1f, p.wv), {B, T, h}), H);

  VarT<S> scores = scale(tape, bmm_nt(tape, q, k), static_cast<S>(1.0 / std::sqrt(static_cast<double>(d))));
  VarT<S> probs = softmax_causal(tape, scores);
  VarT<S> ctx = merge_heads(tape, bmm_nn(tape, probs, v), H);

  if (hook && *hook) (*hook)(LinearSite::kOutProjInput, ctx.value.reshaped({B * T, h}));
  VarT<S> ctxf = reshape(tape, maybe_fq(ctx), {B * T, h});
  VarT<S> attn = matmul(tape, ctxf, p.wo);
  VarT<S> x1 = add(tape, x, reshape(tape, attn, {B, T, h}));

  VarT<S> n2 = apply_norm(tape, p.ln2, x1, cfg.norm_kind, eps);
  if (hook && *hook) (*hook)(LinearSite::kUpInput, n2.value.reshaped({B * T, h}));
  VarT<S> n2f = reshape(tape, maybe_fq(n2), {B * T, h});
  VarT<S> up = gelu(tape, matmul(tape, n2f, p.w_up));
  if (hook && *hook) (*hook)(LinearSite::kDownInput, up.value);
  VarT<S> down = matmul(tape, maybe_fq(up), p.w_down);
  return add(tape, x1, reshape(tape, down, {B, T, h}));
}

}  // namespace ntq
