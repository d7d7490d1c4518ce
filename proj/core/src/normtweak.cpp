#include "ntq/normtweak.hpp"

#include <chrono>
#include <cmath>

#include "ntq/block_graph.hpp"

namespace ntq {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

}  // namespace

void TweakConfig::validate() const {
  std::vector<std::string> bad;
  if (!(lr0 > 0)) bad.push_back("lr0 must be positive");
  if (lr_scale < 0) bad.push_back("lr_scale must be non-negative");
  if (iters < 0) bad.push_back("iters must be >= 0");
  if (!(adam.beta1 >= 0 && adam.beta1 < 1)) bad.push_back("adam.beta1 must be in [0,1)");
  if (!(adam.beta2 >= 0 && adam.beta2 < 1)) bad.push_back("adam.beta2 must be in [0,1)");
  if (!(adam.eps > 0)) bad.push_back("adam.eps must be positive");
  for (const double c : lr_search) {
    if (!(c > 0)) {
      bad.push_back("lr_search candidates must be positive");
      break;
    }
  }
  if (!bad.empty()) {
    std::string msg;
    for (size_t i = 0; i < bad.size(); ++i) msg += (i ? "; " : "") + bad[i];
    throw ConfigError("invalid tweak config: " + msg);
  }
}

std::string loss_kind_name(TweakConfig::Loss k) {
  switch (k) {
    case TweakConfig::Loss::kDist: return "dist";
    case TweakConfig::Loss::kMse: return "mse";
    case TweakConfig::Loss::kKl: return "kl";
  }
  return "?";
}

TweakConfig::Loss loss_kind_from_name(const std::string& name) {
  if (name == "dist") return TweakConfig::Loss::kDist;
  if (name == "mse") return TweakConfig::Loss::kMse;
  if (name == "kl") return TweakConfig::Loss::kKl;
  throw ConfigError("unknown loss kind '" + name + "' (expected dist|mse|kl)");
}

double layer_lr(const TweakConfig& cfg, int layer, int n_layers) {
  if (layer < 0 || layer >= n_layers) throw ContractError("layer_lr: layer index out of range");
  return cfg.lr0 * (1.0 + cfg.lr_scale * (static_cast<double>(layer) / static_cast<double>(n_layers)));
}

TweakSchedule make_schedule(const TweakConfig& cfg, int n_layers) {
  TweakSchedule s;
  s.n_layers = n_layers;
  for (int i = 0; i < n_layers; ++i) s.lr.push_back(layer_lr(cfg, i, n_layers));
  return s;
}

double loss_dist(const ActivationStats& f, const ActivationStats& q) {
  if (f.channels() != q.channels()) {
    throw ContractError("loss_dist: channel counts differ, " + std::to_string(f.channels()) + " vs " +
                        std::to_string(q.channels()));
  }
  const int C = f.channels();
  double acc = 0;
  for (int c = 0; c < C; ++c) {
    acc += std::abs(static_cast<double>(f.mu[c]) - static_cast<double>(q.mu[c]));
    acc += std::abs(static_cast<double>(f.var[c]) - static_cast<double>(q.var[c]));
  }
  return acc / C;
}

double loss_mse(const Tensor& f_out, const Tensor& q_out) {
  if (!f_out.same_shape(q_out)) throw ShapeError("loss_mse: shape mismatch");
  double acc = 0;
  for (int64_t i = 0; i < f_out.numel(); ++i) {
    const double d = static_cast<double>(f_out[i]) - static_cast<double>(q_out[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(f_out.numel());
}

double loss_kl(const Tensor& f_out, const Tensor& q_out) {
  if (!f_out.same_shape(q_out)) throw ShapeError("loss_kl: shape mismatch");
  const int C = f_out.dim(f_out.rank() - 1);
  const int64_t rows = f_out.numel() / C;
  std::vector<double> pf(static_cast<size_t>(C)), lf(static_cast<size_t>(C)), lq(static_cast<size_t>(C));
  double total = 0;
  for (int64_t r = 0; r < rows; ++r) {
    const float* fr = f_out.data() + r * C;
    const float* qr = q_out.data() + r * C;
    double fmax = fr[0], qmax = qr[0];
    for (int j = 1; j < C; ++j) {
      fmax = std::max(fmax, static_cast<double>(fr[j]));
      qmax = std::max(qmax, static_cast<double>(qr[j]));
    }
    double fsum = 0, qsum = 0;
    for (int j = 0; j < C; ++j) {
      pf[static_cast<size_t>(j)] = std::exp(fr[j] - fmax);
      fsum += pf[static_cast<size_t>(j)];
      lq[static_cast<size_t>(j)] = qr[j] - qmax;
      qsum += std::exp(lq[static_cast<size_t>(j)]);
    }
    const double lqs = std::log(qsum), lfs = std::log(fsum);
    for (int j = 0; j < C; ++j) {
      const double p = pf[static_cast<size_t>(j)] / fsum;
      if (p > 0) {
        const double logp = (fr[j] - fmax) - lfs;
        const double logq = lq[static_cast<size_t>(j)] - lqs;
        total += p * (logp - logq);
      }
    }
  }
  return total / static_cast<double>(rows);
}

Tensor calibration_embeddings(const TransformerModel& model, const CalibrationSet& calib) {
  if (calib.is_gaussian()) {
    if (calib.gaussian_batch.dim(2) != model.config.hidden) {
      throw ContractError("calibration_embeddings: gaussian batch hidden size mismatch");
    }
    return calib.gaussian_batch;
  }
  return embed_tokens(model, calib.token_matrix());
}

namespace {

struct SiteCapture {
  HessianAccumulator qkv, out_proj, up, down;
  Tensor qkv_absmax, out_proj_absmax, up_absmax;
  bool want_hessian = false;
  bool want_absmax = false;

  SiteCapture(int h, int inner)
      : qkv(h), out_proj(h), up(h), down(inner), qkv_absmax({h}), out_proj_absmax({h}), up_absmax({h}) {}

  void observe(LinearSite site, const Tensor& v) {
    if (want_hessian) {
      switch (site) {
        case LinearSite::kQkvInput: qkv.add(v); break;
        case LinearSite::kOutProjInput: out_proj.add(v); break;
        case LinearSite::kUpInput: up.add(v); break;
        case LinearSite::kDownInput: down.add(v); break;
      }
    }
    if (want_absmax) {
      Tensor* dst = nullptr;
      switch (site) {
        case LinearSite::kQkvInput: dst = &qkv_absmax; break;
        case LinearSite::kOutProjInput: dst = &out_proj_absmax; break;
        case LinearSite::kUpInput: dst = &up_absmax; break;
        case LinearSite::kDownInput: return;
      }
      const int in = v.dim(v.rank() - 1);
      const int64_t rows = v.numel() / in;
      for (int64_t r = 0; r < rows; ++r) {
        const float* x = v.data() + r * in;
        for (int j = 0; j < in; ++j) (*dst)[j] = std::max((*dst)[j], std::abs(x[j]));
      }
    }
  }
};

double eval_loss(TweakConfig::Loss kind, const Tensor& f_out, const Tensor& q_out) {
  switch (kind) {
    case TweakConfig::Loss::kDist: return loss_dist(channel_stats(f_out), channel_stats(q_out));
    case TweakConfig::Loss::kMse: return loss_mse(f_out, q_out);
    case TweakConfig::Loss::kKl: return loss_kl(f_out, q_out);
  }
  throw ContractError("eval_loss: unknown loss kind");
}

Var build_loss_graph(Tape* tape, TweakConfig::Loss kind, const Tensor& f_out, const Var& q_out) {
  switch (kind) {
    case TweakConfig::Loss::kDist: return loss_dist_graph<float>(tape, f_out, q_out);
    case TweakConfig::Loss::kMse: return loss_mse_graph<float>(tape, f_out, q_out);
    case TweakConfig::Loss::kKl: return loss_kl_graph<float>(tape, f_out, q_out);
  }
  throw ContractError("build_loss_graph: unknown loss kind");
}

struct NormSnapshot {
  NormParams ln1, ln2, fin;
};

CalibrationSet calib_slice(const CalibrationSet& calib, int begin, int end) {
  CalibrationSet out;
  out.source = calib.source;
  out.seed = calib.seed;
  if (calib.is_gaussian()) {
    const int T = calib.gaussian_batch.dim(1), h = calib.gaussian_batch.dim(2);
    out.gaussian_batch = Tensor({end - begin, T, h});
    std::copy(calib.gaussian_batch.data() + static_cast<size_t>(begin) * T * h,
              calib.gaussian_batch.data() + static_cast<size_t>(end) * T * h, out.gaussian_batch.data());
  } else {
    out.sequences.assign(calib.sequences.begin() + begin, calib.sequences.begin() + end);
  }
  return out;
}

// Mean per-layer loss between the float pipeline and the quantized pipeline.
double pipeline_loss(const TransformerModel& fm, const QuantizedModel& qm, const CalibrationSet& calib,
                     TweakConfig::Loss kind) {
  Tensor x0 = calibration_embeddings(fm, calib);
  Tensor fx = x0, qx = x0;
  double total = 0;
  for (int l = 0; l < fm.config.n_layers; ++l) {
    fx = block_forward(fm.blocks[static_cast<size_t>(l)], fx, fm.config);
    qx = block_forward(qm.blocks[static_cast<size_t>(l)], qx, qm.config, qm.qcfg.act_bits);
    total += eval_loss(kind, fx, qx);
  }
  return total / fm.config.n_layers;
}

TweakOutput tweak_model_impl(const TransformerModel& fm, QuantizerKind quantizer, const CalibrationSet& calib,
                             const QuantConfig& qcfg, const TweakConfig& tcfg) {
  const ModelConfig& mc = fm.config;
  const int L = mc.n_layers;
  const int h = mc.hidden;
  const auto t_total = Clock::now();

  QuantizedModel qm;
  qm.config = mc;
  qm.qcfg = qcfg;
  qm.quantizer = quantizer;
  qm.tok_emb = fm.tok_emb;
  qm.pos_emb = fm.pos_emb;
  qm.final_norm = fm.final_norm;
  qm.blocks.resize(static_cast<size_t>(L));

  TweakReport report;
  report.quantizer = quantizer_name(quantizer);
  report.loss_kind = loss_kind_name(tcfg.loss_kind);
  report.iters = tcfg.iters;
  report.lr0 = tcfg.lr0;
  report.lr_scale = tcfg.lr_scale;

  const Tensor x0 = calibration_embeddings(fm, calib);
  Tensor fx = x0, qx = x0;

  for (int l = 0; l < L; ++l) {
    const auto t_layer = Clock::now();
    const TransformerBlock& fblock = fm.blocks[static_cast<size_t>(l)];
    const Tensor& ref_in = tcfg.ref_from_quant_input ? qx : fx;
    const Tensor f_out = block_forward(fblock, ref_in, mc);

    TransformerBlock work = fblock;
    QuantizedBlock& qb = qm.blocks[static_cast<size_t>(l)];

    const bool need_capture =
        !qcfg.passthrough() && (quantizer == QuantizerKind::kGptq || quantizer == QuantizerKind::kSmoothQuant);
    SiteCapture capture(h, 4 * h);
    capture.want_hessian = quantizer == QuantizerKind::kGptq;
    capture.want_absmax = quantizer == QuantizerKind::kSmoothQuant;
    if (need_capture) {
      LinearInputHook<float> hook = [&capture](LinearSite site, const Tensor& v) { capture.observe(site, v); };
      BlockVars<float> cp = block_constants<float>(work);
      block_graph<float>(nullptr, cp, constant(qx), mc, /*act_bits=*/0, &hook);
    }

    if (qcfg.passthrough()) {
      qb.f = work;
    } else {
      if (quantizer == QuantizerKind::kSmoothQuant) {
        smooth_migrate_block(work, capture.qkv_absmax, capture.out_proj_absmax, capture.up_absmax,
                             qcfg.smooth_alpha);
      }
      auto quantize_one = [&](const Tensor& w_in_out, const HessianAccumulator& acc) {
        const Tensor wt = transpose(w_in_out);
        if (quantizer == QuantizerKind::kGptq) {
          try {
            return gptq_quantize(wt, acc.finish(qcfg.damping), qcfg);
          } catch (const Error& e) {
            throw NumericError("layer " + std::to_string(l) + ": " + e.what());
          }
        }
        return rtn_quantize(wt, qcfg);
      };
      qb.qwq = quantize_one(work.wq, capture.qkv);
      qb.qwk = quantize_one(work.wk, capture.qkv);
      qb.qwv = quantize_one(work.wv, capture.qkv);
      qb.qwo = quantize_one(work.wo, capture.out_proj);
      qb.qw_up = quantize_one(work.w_up, capture.up);
      qb.qw_down = quantize_one(work.w_down, capture.down);
      qb.f.ln1 = work.ln1;
      qb.f.ln2 = work.ln2;
      qb.refresh_dequant();
    }

    TweakLayerReport lr_entry;
    lr_entry.layer = l;
    lr_entry.lr = layer_lr(tcfg, l, L);
    lr_entry.quant_fingerprint = quantized_block_fingerprint(qb, qcfg.passthrough());

    if (tcfg.iters > 0) {
      const bool last_layer = l == L - 1;
      NormSnapshot snap{qb.f.ln1, qb.f.ln2, qm.final_norm};
      AdamState adam;
      std::vector<std::pair<std::string, Tensor*>> params;
      params.emplace_back("ln1.gamma", &qb.f.ln1.gamma);
      if (qb.f.ln1.has_beta()) params.emplace_back("ln1.beta", &qb.f.ln1.beta);
      params.emplace_back("ln2.gamma", &qb.f.ln2.gamma);
      if (qb.f.ln2.has_beta()) params.emplace_back("ln2.beta", &qb.f.ln2.beta);
      if (last_layer) {
        params.emplace_back("final_norm.gamma", &qm.final_norm.gamma);
        if (qm.final_norm.has_beta()) params.emplace_back("final_norm.beta", &qm.final_norm.beta);
      }

      bool aborted = false;
      for (int it = 0; it < tcfg.iters && !aborted; ++it) {
        Tape tape;
        BlockVars<float> p = block_constants<float>(qb.f);
        p.ln1.gamma = tape.watch(qb.f.ln1.gamma, "ln1.gamma");
        if (qb.f.ln1.has_beta()) {
          p.ln1.beta = tape.watch(qb.f.ln1.beta, "ln1.beta");
          p.ln1.has_beta = true;
        }
        p.ln2.gamma = tape.watch(qb.f.ln2.gamma, "ln2.gamma");
        if (qb.f.ln2.has_beta()) {
          p.ln2.beta = tape.watch(qb.f.ln2.beta, "ln2.beta");
          p.ln2.has_beta = true;
        }
        // The final norm sits outside the block graph, so its gradient under
        // the block-output loss is identically zero; it is watched with the
        // last layer per the tweak contract and stays put.
        if (last_layer) {
          tape.watch(qm.final_norm.gamma, "final_norm.gamma");
          if (qm.final_norm.has_beta()) tape.watch(qm.final_norm.beta, "final_norm.beta");
        }

        Var q_out = block_graph<float>(&tape, p, constant(qx), mc, qcfg.act_bits);
        if (it == 0) {
          lr_entry.loss_pre = eval_loss(tcfg.loss_kind, f_out, q_out.value);
          lr_entry.dmu_pre = mean_abs_diff(channel_stats(f_out).mu, channel_stats(q_out.value).mu);
        }
        Var loss = build_loss_graph(&tape, tcfg.loss_kind, f_out, q_out);
        if (!std::isfinite(static_cast<double>(loss.value[0]))) {
          lr_entry.warning = "non-finite loss at iteration " + std::to_string(it) + "; layer left untweaked";
          aborted = true;
          break;
        }
        auto grads = tape.backward(loss);
        bool grads_ok = true;
        for (const auto& [name, g] : grads) {
          if (!g.all_finite()) {
            lr_entry.warning = "non-finite gradient for " + name + " at iteration " + std::to_string(it) +
                               "; layer left untweaked";
            grads_ok = false;
            break;
          }
        }
        if (!grads_ok) {
          aborted = true;
          break;
        }
        adam_step(params, grads, adam, lr_entry.lr, tcfg.adam);
        lr_entry.steps_applied += 1;
      }
      if (aborted) {
        qb.f.ln1 = snap.ln1;
        qb.f.ln2 = snap.ln2;
        qm.final_norm = snap.fin;
        lr_entry.steps_applied = 0;
      }
    }

    const Tensor q_out = block_forward(qb, qx, mc, qcfg.act_bits);
    if (tcfg.iters == 0) {
      lr_entry.loss_pre = eval_loss(tcfg.loss_kind, f_out, q_out);
      lr_entry.dmu_pre = mean_abs_diff(channel_stats(f_out).mu, channel_stats(q_out).mu);
    }
    lr_entry.loss_post = eval_loss(tcfg.loss_kind, f_out, q_out);
    lr_entry.dmu_post = mean_abs_diff(channel_stats(f_out).mu, channel_stats(q_out).mu);
    lr_entry.wall_ms = ms_since(t_layer);
    report.layers.push_back(lr_entry);

    if (!tcfg.ref_from_quant_input) fx = f_out;
    qx = q_out;
  }

  report.total_ms = ms_since(t_total);
  return {std::move(qm), std::move(report)};
}

}  // namespace

TweakOutput tweak_model(const TransformerModel& float_model, QuantizerKind quantizer, const CalibrationSet& calib,
                        const QuantConfig& qcfg, const TweakConfig& tcfg) {
  qcfg.validate();
  tcfg.validate();
  if (calib.n_samples() <= 0) throw ContractError("tweak_model: calibration set is empty");

  if (tcfg.lr_search.empty() || tcfg.iters == 0) {
    return tweak_model_impl(float_model, quantizer, calib, qcfg, tcfg);
  }

  // Grid search: tweak on a subset, score each candidate on held-out
  // calibration loss, then run the full set with the winner.
  const int n = calib.n_samples();
  if (n < 2) throw ContractError("tweak_model: lr_search needs at least 2 calibration samples");
  const int n_hold = std::max(1, n / 4);
  const CalibrationSet fit = calib_slice(calib, 0, n - n_hold);
  const CalibrationSet hold = calib_slice(calib, n - n_hold, n);

  double best_score = 0;
  double best_lr = tcfg.lr_search.front();
  bool first = true;
  for (const double cand : tcfg.lr_search) {
    TweakConfig probe = tcfg;
    probe.lr0 = cand;
    probe.lr_search.clear();
    TweakOutput out = tweak_model_impl(float_model, quantizer, fit, qcfg, probe);
    const double score = pipeline_loss(float_model, out.model, hold, tcfg.loss_kind);
    if (first || score < best_score) {
      best_score = score;
      best_lr = cand;
      first = false;
    }
  }
  TweakConfig chosen = tcfg;
  chosen.lr0 = best_lr;
  chosen.lr_search.clear();
  return tweak_model_impl(float_model, quantizer, calib, qcfg, chosen);
}

}  // namespace ntq
