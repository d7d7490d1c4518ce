#include "ntq/quant.hpp"

#include <algorithm>
#include <cmath>

#include "ntq/block_graph.hpp"

namespace ntq {

std::string quantizer_name(QuantizerKind k) {
  switch (k) {
    case QuantizerKind::kNone: return "none";
    case QuantizerKind::kRtn: return "rtn";
    case QuantizerKind::kGptq: return "gptq";
    case QuantizerKind::kSmoothQuant: return "smoothquant";
  }
  return "?";
}

QuantizerKind quantizer_from_name(const std::string& name) {
  if (name == "none") return QuantizerKind::kNone;
  if (name == "rtn") return QuantizerKind::kRtn;
  if (name == "gptq") return QuantizerKind::kGptq;
  if (name == "smoothquant") return QuantizerKind::kSmoothQuant;
  throw ConfigError("unknown quantizer '" + name + "' (expected rtn|gptq|smoothquant|none)");
}

void QuantConfig::validate() const {
  std::vector<std::string> bad;
  if (!(bits == 2 || bits == 3 || bits == 4 || bits == 8 || bits >= 16)) {
    bad.push_back("bits must be one of {2,3,4,8} (or >=16 for passthrough)");
  }
  if (granularity == Granularity::kPerGroup && group_size <= 0) {
    bad.push_back("group_size must be positive for per-group quantization");
  }
  if (act_bits != 0 && act_bits != 8) bad.push_back("act_bits must be 0 or 8");
  if (!(smooth_alpha >= 0.0f && smooth_alpha <= 1.0f)) bad.push_back("smooth_alpha must be in [0,1]");
  if (!(damping > 0)) bad.push_back("damping must be positive");
  if (!bad.empty()) {
    std::string msg;
    for (size_t i = 0; i < bad.size(); ++i) msg += (i ? "; " : "") + bad[i];
    throw ConfigError("invalid quant config: " + msg);
  }
}

void QuantConfig::validate_for(int in_dim) const {
  validate();
  if (granularity == Granularity::kPerGroup && in_dim % group_size != 0) {
    throw ConfigError("group_size " + std::to_string(group_size) + " does not divide the quantized axis " +
                      std::to_string(in_dim));
  }
}

Tensor QuantizedLinear::dequant() const {
  const int out = codes.dim(0), in = codes.dim(1);
  Tensor w({out, in});
  for (int r = 0; r < out; ++r) {
    for (int c = 0; c < in; ++c) w.at(r, c) = static_cast<float>(codes.at(r, c)) * scale_at(r, c);
  }
  return w;
}

namespace {

// Shared by RTN and GPTQ so degenerate GPTQ reproduces RTN bitwise. amax is
// accumulated in double; codes use round-half-away-from-zero.
float symmetric_scale(double amax, int maxq) {
  if (amax == 0.0) return 1.0f;
  return static_cast<float>(amax / static_cast<double>(maxq));
}

int8_t quantize_value(double w, double scale, int maxq) {
  double q = std::round(w / scale);
  q = std::min(static_cast<double>(maxq), std::max(static_cast<double>(-maxq), q));
  return static_cast<int8_t>(q);
}

}  // namespace

QuantizedLinear rtn_quantize(const Tensor& w, const QuantConfig& cfg) {
  check_rank(w, 2, "rtn_quantize");
  cfg.validate_for(w.dim(1));
  const int out = w.dim(0), in = w.dim(1);
  const int maxq = cfg.max_code();
  const int gs = cfg.granularity == Granularity::kPerGroup ? cfg.group_size : in;
  const int n_groups = in / gs;

  QuantizedLinear ql;
  ql.bits = cfg.bits;
  ql.granularity = cfg.granularity;
  ql.group_size = cfg.granularity == Granularity::kPerGroup ? cfg.group_size : 0;
  ql.codes = Int8Tensor({out, in});
  ql.scales = cfg.granularity == Granularity::kPerGroup ? Tensor({out, n_groups}) : Tensor({out});

  for (int r = 0; r < out; ++r) {
    for (int g = 0; g < n_groups; ++g) {
      double amax = 0;
      for (int c = g * gs; c < (g + 1) * gs; ++c) amax = std::max(amax, std::abs(static_cast<double>(w.at(r, c))));
      const float scale = symmetric_scale(amax, maxq);
      if (cfg.granularity == Granularity::kPerGroup) {
        ql.scales.at(r, g) = scale;
      } else {
        ql.scales[r] = scale;
      }
      for (int c = g * gs; c < (g + 1) * gs; ++c) {
        ql.codes.at(r, c) = quantize_value(static_cast<double>(w.at(r, c)), static_cast<double>(scale), maxq);
      }
    }
  }
  return ql;
}

HessianAccumulator::HessianAccumulator(int in_dim) : in_(in_dim), h_({in_dim, in_dim}) {
  if (in_dim <= 0) throw ContractError("HessianAccumulator: in_dim must be positive");
}

void HessianAccumulator::add(const Tensor& acts) {
  if (acts.rank() < 1 || acts.dim(acts.rank() - 1) != in_) {
    throw ShapeError("HessianAccumulator: last dimension must be " + std::to_string(in_) + ", got " +
                     shape_str(acts.shape()));
  }
  const int64_t rows = acts.numel() / in_;
  for (int64_t r = 0; r < rows; ++r) {
    const float* x = acts.data() + r * in_;
    for (int i = 0; i < in_; ++i) {
      const double xi = 2.0 * static_cast<double>(x[i]);
      double* hrow = h_.data() + static_cast<size_t>(i) * in_;
      for (int j = i; j < in_; ++j) hrow[j] += xi * static_cast<double>(x[j]);
    }
  }
  rows_ += rows;
}

HessianEstimate HessianAccumulator::finish(double damping_frac) const {
  if (rows_ == 0) throw ContractError("estimate_hessian: empty activation stream");
  HessianEstimate est;
  est.h = h_;
  est.n_rows = rows_;
  // Mirror the accumulated upper triangle.
  for (int i = 0; i < in_; ++i) {
    for (int j = i + 1; j < in_; ++j) est.h.at(j, i) = est.h.at(i, j);
  }
  double mean_diag = 0;
  for (int i = 0; i < in_; ++i) mean_diag += est.h.at(i, i);
  mean_diag /= in_;
  est.damping_added = damping_frac * mean_diag;
  if (est.damping_added <= 0) est.damping_added = damping_frac;  // all-zero activations
  for (int i = 0; i < in_; ++i) est.h.at(i, i) += est.damping_added;
  return est;
}

HessianEstimate estimate_hessian(const std::vector<Tensor>& activations, double damping_frac) {
  if (activations.empty()) throw ContractError("estimate_hessian: empty activation stream");
  HessianAccumulator acc(activations.front().dim(activations.front().rank() - 1));
  for (const Tensor& a : activations) acc.add(a);
  return acc.finish(damping_frac);
}

namespace {

// Lower Cholesky factor of a symmetric positive definite matrix.
DTensor cholesky_lower(const DTensor& a, const char* what) {
  const int n = a.dim(0);
  DTensor l({n, n});
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j <= i; ++j) {
      double s = a.at(i, j);
      for (int k = 0; k < j; ++k) s -= l.at(i, k) * l.at(j, k);
      if (i == j) {
        if (s <= 0 || !std::isfinite(s)) {
          throw NumericError(std::string(what) + ": Cholesky failed at pivot " + std::to_string(i) +
                             "; increase Hessian damping");
        }
        l.at(i, i) = std::sqrt(s);
      } else {
        l.at(i, j) = s / l.at(j, j);
      }
    }
  }
  return l;
}

// Inverse of SPD matrix from its lower Cholesky factor.
DTensor spd_inverse(const DTensor& a, const char* what) {
  const int n = a.dim(0);
  const DTensor l = cholesky_lower(a, what);
  // Invert L (lower triangular), then A^-1 = L^-T L^-1.
  DTensor li({n, n});
  for (int i = 0; i < n; ++i) {
    li.at(i, i) = 1.0 / l.at(i, i);
    for (int j = 0; j < i; ++j) {
      double s = 0;
      for (int k = j; k < i; ++k) s += l.at(i, k) * li.at(k, j);
      li.at(i, j) = -s / l.at(i, i);
    }
  }
  DTensor inv({n, n});
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j <= i; ++j) {
      double s = 0;
      for (int k = i; k < n; ++k) s += li.at(k, i) * li.at(k, j);
      inv.at(i, j) = s;
      inv.at(j, i) = s;
    }
  }
  return inv;
}

// Upper Cholesky factor U of A (A = U^T U).
DTensor cholesky_upper(const DTensor& a, const char* what) {
  const int n = a.dim(0);
  const DTensor l = cholesky_lower(a, what);
  DTensor u({n, n});
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j <= i; ++j) u.at(j, i) = l.at(i, j);
  }
  return u;
}

}  // namespace

QuantizedLinear gptq_quantize(const Tensor& w, const HessianEstimate& hess, const QuantConfig& cfg) {
  check_rank(w, 2, "gptq_quantize");
  cfg.validate_for(w.dim(1));
  const int out = w.dim(0), in = w.dim(1);
  if (hess.h.rank() != 2 || hess.h.dim(0) != in || hess.h.dim(1) != in) {
    throw ShapeError("gptq_quantize: Hessian must be [" + std::to_string(in) + "x" + std::to_string(in) + "], got " +
                     shape_str(hess.h.shape()));
  }
  const int maxq = cfg.max_code();
  const bool per_group = cfg.granularity == Granularity::kPerGroup;
  const int gs = per_group ? cfg.group_size : in;
  const int n_groups = in / gs;

  // Upper Cholesky factor of H^-1 drives the error compensation.
  const DTensor hinv_u = cholesky_upper(spd_inverse(hess.h, "gptq_quantize"), "gptq_quantize");

  DTensor wd = to_double(w);
  QuantizedLinear ql;
  ql.bits = cfg.bits;
  ql.granularity = cfg.granularity;
  ql.group_size = per_group ? cfg.group_size : 0;
  ql.codes = Int8Tensor({out, in});
  ql.scales = per_group ? Tensor({out, n_groups}) : Tensor({out});

  if (!per_group) {
    // Per-channel scales come from the original weights, as in RTN.
    for (int r = 0; r < out; ++r) {
      double amax = 0;
      for (int c = 0; c < in; ++c) amax = std::max(amax, std::abs(static_cast<double>(w.at(r, c))));
      ql.scales[r] = symmetric_scale(amax, maxq);
    }
  }

  constexpr int kBlock = 32;  // lazy batched updates; equivalent to column-at-a-time
  std::vector<double> err(static_cast<size_t>(out) * kBlock);
  for (int i1 = 0; i1 < in; i1 += kBlock) {
    const int i2 = std::min(i1 + kBlock, in);
    for (int j = i1; j < i2; ++j) {
      if (per_group && j % gs == 0) {
        // Group scales are derived from the current, error-compensated values.
        const int g = j / gs;
        for (int r = 0; r < out; ++r) {
          double amax = 0;
          for (int c = j; c < j + gs; ++c) amax = std::max(amax, std::abs(wd.at(r, c)));
          ql.scales.at(r, g) = symmetric_scale(amax, maxq);
        }
      }
      const double d = hinv_u.at(j, j);
      for (int r = 0; r < out; ++r) {
        const double scale = static_cast<double>(per_group ? ql.scales.at(r, j / gs) : ql.scales[r]);
        const int8_t q = quantize_value(wd.at(r, j), scale, maxq);
        ql.codes.at(r, j) = q;
        const double dq = static_cast<double>(q) * static_cast<double>(static_cast<float>(scale));
        err[static_cast<size_t>(r) * kBlock + (j - i1)] = (wd.at(r, j) - dq) / d;
      }
      // Propagate the rounding error to the remaining columns of the block.
      for (int r = 0; r < out; ++r) {
        const double e = err[static_cast<size_t>(r) * kBlock + (j - i1)];
        double* wrow = wd.data() + static_cast<size_t>(r) * in;
        const double* urow = hinv_u.data() + static_cast<size_t>(j) * in;
        for (int k = j; k < i2; ++k) wrow[k] -= e * urow[k];
      }
    }
    // Block exit: update all columns to the right of the block at once.
    for (int r = 0; r < out; ++r) {
      double* wrow = wd.data() + static_cast<size_t>(r) * in;
      for (int j = i1; j < i2; ++j) {
        const double e = err[static_cast<size_t>(r) * kBlock + (j - i1)];
        const double* urow = hinv_u.data() + static_cast<size_t>(j) * in;
        for (int k = i2; k < in; ++k) wrow[k] -= e * urow[k];
      }
    }
  }
  return ql;
}

SmoothResult smooth_migrate(const Tensor& w, const Tensor& act_absmax, float alpha) {
  check_rank(w, 2, "smooth_migrate");
  const int in = w.dim(1);
  if (act_absmax.numel() != in) {
    throw ShapeError("smooth_migrate: act_absmax length " + std::to_string(act_absmax.numel()) +
                     " != input channels " + std::to_string(in));
  }
  std::vector<const Tensor*> ws{&w};
  SmoothResult res;
  res.s = smooth_scales(ws, act_absmax, alpha);
  res.w = w;
  for (int r = 0; r < w.dim(0); ++r) {
    for (int c = 0; c < in; ++c) res.w.at(r, c) = w.at(r, c) * res.s[c];
  }
  return res;
}

Tensor smooth_scales(const std::vector<const Tensor*>& ws, const Tensor& act_absmax, float alpha) {
  if (ws.empty()) throw ContractError("smooth_scales: no weights");
  const int in = ws.front()->dim(1);
  constexpr float kFloor = 1e-5f;
  Tensor s({in});
  for (int c = 0; c < in; ++c) {
    float wmax = 0;
    for (const Tensor* w : ws) {
      if (w->dim(1) != in) throw ShapeError("smooth_scales: inconsistent input dims");
      for (int r = 0; r < w->dim(0); ++r) wmax = std::max(wmax, std::abs(w->at(r, c)));
    }
    const double a = std::max(act_absmax[c], kFloor);
    const double m = std::max(wmax, kFloor);
    s[c] = static_cast<float>(std::pow(a, static_cast<double>(alpha)) /
                              std::pow(m, 1.0 - static_cast<double>(alpha)));
  }
  return s;
}

namespace {

// Block weights are [in, out], so input channel j is row j.
void scale_rows(Tensor& w, const Tensor& s) {
  const int in = w.dim(0), out = w.dim(1);
  for (int j = 0; j < in; ++j) {
    float* row = w.data() + static_cast<size_t>(j) * out;
    for (int c = 0; c < out; ++c) row[c] *= s[j];
  }
}

void divide_columns(Tensor& w, const Tensor& s) {
  const int in = w.dim(0), out = w.dim(1);
  for (int j = 0; j < in; ++j) {
    float* row = w.data() + static_cast<size_t>(j) * out;
    for (int c = 0; c < out; ++c) row[c] /= s[c];
  }
}

void divide_norm(NormParams& n, const Tensor& s) {
  for (int64_t i = 0; i < n.gamma.numel(); ++i) n.gamma[i] /= s[i];
  if (n.has_beta()) {
    for (int64_t i = 0; i < n.beta.numel(); ++i) n.beta[i] /= s[i];
  }
}

Tensor transposed_weight_absmax_input(const Tensor& w_in_out) {
  // abs-max over outputs for each input channel (row of [in, out]).
  const int in = w_in_out.dim(0), out = w_in_out.dim(1);
  Tensor m({in});
  for (int j = 0; j < in; ++j) {
    float wmax = 0;
    const float* row = w_in_out.data() + static_cast<size_t>(j) * out;
    for (int c = 0; c < out; ++c) wmax = std::max(wmax, std::abs(row[c]));
    m[j] = wmax;
  }
  return m;
}

Tensor combined_smooth_divisors(const std::vector<const Tensor*>& ws_in_out, const Tensor& act_absmax, float alpha) {
  const int in = ws_in_out.front()->dim(0);
  constexpr float kFloor = 1e-5f;
  Tensor s({in});
  for (int j = 0; j < in; ++j) {
    float wmax = 0;
    for (const Tensor* w : ws_in_out) {
      const float* row = w->data() + static_cast<size_t>(j) * w->dim(1);
      for (int c = 0; c < w->dim(1); ++c) wmax = std::max(wmax, std::abs(row[c]));
    }
    const double a = std::max(act_absmax[j], kFloor);
    const double m = std::max(wmax, kFloor);
    s[j] = static_cast<float>(std::pow(a, static_cast<double>(alpha)) /
                              std::pow(m, 1.0 - static_cast<double>(alpha)));
  }
  return s;
}

}  // namespace

BlockSmoothScales smooth_migrate_block(TransformerBlock& block, const Tensor& qkv_absmax,
                                       const Tensor& out_proj_absmax, const Tensor& up_absmax, float alpha) {
  BlockSmoothScales scales;
  scales.qkv = combined_smooth_divisors({&block.wq, &block.wk, &block.wv}, qkv_absmax, alpha);
  scale_rows(block.wq, scales.qkv);
  scale_rows(block.wk, scales.qkv);
  scale_rows(block.wv, scales.qkv);
  divide_norm(block.ln1, scales.qkv);

  scales.out_proj = combined_smooth_divisors({&block.wo}, out_proj_absmax, alpha);
  scale_rows(block.wo, scales.out_proj);
  divide_columns(block.wv, scales.out_proj);

  scales.up = combined_smooth_divisors({&block.w_up}, up_absmax, alpha);
  scale_rows(block.w_up, scales.up);
  divide_norm(block.ln2, scales.up);
  return scales;
}

Tensor quantize_activations(const Tensor& x, int act_bits) {
  if (act_bits != 8) throw ContractError("quantize_activations: act_bits must be 8");
  return fake_quant_symmetric(x, act_bits);
}

Tensor qlinear_forward(const QuantizedLinear& ql, const Tensor& x) {
  check_rank(x, 2, "qlinear_forward");
  if (x.dim(1) != ql.codes.dim(1)) {
    throw ShapeError("qlinear_forward: input features " + std::to_string(x.dim(1)) + " != weight in-dim " +
                     std::to_string(ql.codes.dim(1)));
  }
  return matmul(x, transpose(ql.dequant()));
}

QuantizedModel quantize_model_direct(const TransformerModel& model, const QuantConfig& qcfg, QuantizerKind kind) {
  qcfg.validate();
  if (kind != QuantizerKind::kRtn && kind != QuantizerKind::kNone && !qcfg.passthrough()) {
    throw ContractError("quantize_model_direct: " + quantizer_name(kind) + " needs calibration activations");
  }
  QuantizedModel qm;
  qm.config = model.config;
  qm.qcfg = qcfg;
  qm.quantizer = kind;
  qm.tok_emb = model.tok_emb;
  qm.pos_emb = model.pos_emb;
  qm.final_norm = model.final_norm;
  qm.blocks.resize(model.blocks.size());
  for (size_t l = 0; l < model.blocks.size(); ++l) {
    const TransformerBlock& fb = model.blocks[l];
    QuantizedBlock& qb = qm.blocks[l];
    if (qcfg.passthrough()) {
      qb.f = fb;
      continue;
    }
    qb.qwq = rtn_quantize(transpose(fb.wq), qcfg);
    qb.qwk = rtn_quantize(transpose(fb.wk), qcfg);
    qb.qwv = rtn_quantize(transpose(fb.wv), qcfg);
    qb.qwo = rtn_quantize(transpose(fb.wo), qcfg);
    qb.qw_up = rtn_quantize(transpose(fb.w_up), qcfg);
    qb.qw_down = rtn_quantize(transpose(fb.w_down), qcfg);
    qb.f.ln1 = fb.ln1;
    qb.f.ln2 = fb.ln2;
    qb.refresh_dequant();
  }
  return qm;
}

namespace {

void hash_bytes(uint64_t& h, const void* data, size_t len) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
}

void hash_tensor(uint64_t& h, const Tensor& t) {
  hash_bytes(h, t.data(), sizeof(float) * static_cast<size_t>(t.numel()));
}

}  // namespace

uint64_t quantized_block_fingerprint(const QuantizedBlock& block, bool passthrough) {
  uint64_t h = 0xcbf29ce484222325ull;
  const Tensor* weights[6] = {&block.f.wq, &block.f.wk, &block.f.wv, &block.f.wo, &block.f.w_up, &block.f.w_down};
  for (const Tensor* w : weights) hash_tensor(h, *w);
  if (!passthrough) {
    const QuantizedLinear* ls[6] = {&block.qwq, &block.qwk, &block.qwv, &block.qwo, &block.qw_up, &block.qw_down};
    for (const QuantizedLinear* ql : ls) {
      hash_bytes(h, ql->codes.data.data(), ql->codes.data.size());
      hash_tensor(h, ql->scales);
    }
  }
  return h;
}

void QuantizedBlock::refresh_dequant() {
  f.wq = transpose(qwq.dequant());
  f.wk = transpose(qwk.dequant());
  f.wv = transpose(qwv.dequant());
  f.wo = transpose(qwo.dequant());
  f.w_up = transpose(qw_up.dequant());
  f.w_down = transpose(qw_down.dequant());
}

Tensor block_forward(const QuantizedBlock& block, const Tensor& x, const ModelConfig& config, int act_bits) {
  BlockVars<float> p = block_constants<float>(block.f);
  return block_graph<float>(nullptr, p, constant(x), config, act_bits).value;
}

Tensor embed_tokens(const QuantizedModel& model, const TokenMatrix& tokens) {
  TransformerModel shim;
  shim.config = model.config;
  shim.tok_emb = model.tok_emb;
  shim.pos_emb = model.pos_emb;
  return embed_tokens(shim, tokens);
}

std::pair<Tensor, BlockTrace> forward_with_trace(const QuantizedModel& model, const TokenMatrix& tokens) {
  for (const int id : tokens.ids) {
    if (id < 0 || id >= model.config.vocab_size) {
      throw InputError("forward_with_trace: token id " + std::to_string(id) + " out of range");
    }
  }
  BlockTrace trace;
  Tensor x = embed_tokens(model, tokens);
  for (const QuantizedBlock& b : model.blocks) {
    trace.inputs.push_back(x);
    x = block_forward(b, x, model.config, model.qcfg.act_bits);
    trace.outputs.push_back(x);
  }
  const int B = x.dim(0), T = x.dim(1), h = x.dim(2);
  Tensor normed = model.config.norm_kind == NormKind::kLayerNorm
                      ? layernorm_forward(x, model.final_norm.gamma, model.final_norm.beta, model.config.eps)
                      : rmsnorm_forward(x, model.final_norm.gamma, model.config.eps);
  Tensor logits = matmul_nt(normed.reshaped({B * T, h}), model.tok_emb);
  return {logits.reshaped({B, T, model.config.vocab_size}), std::move(trace)};
}

Tensor model_logits(const QuantizedModel& model, const TokenMatrix& tokens) {
  return forward_with_trace(model, tokens).first;
}

}  // namespace ntq
