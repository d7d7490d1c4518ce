#pragma once

#include <string>
#include <vector>

#include "ntq/autodiff.hpp"
#include "ntq/calib.hpp"
#include "ntq/optim.hpp"
#include "ntq/quant.hpp"
#include "ntq/stats.hpp"

namespace ntq {

struct TweakConfig {
  double lr0 = 1e-5;
  double lr_scale = 1.0;  // layer-step factor; 0 keeps the rate flat
  int iters = 1;          // 0 disables tweaking (plain quantization)
  enum class Loss { kDist, kMse, kKl };
  Loss loss_kind = Loss::kDist;
  AdamConfig adam;                 // beta1=0.9, beta2=0.999, eps=1e-8
  std::vector<double> lr_search;   // optional lr0 grid, scored on held-out calibration loss
  bool ref_from_quant_input = false;  // float reference consumes the quantized path's input

  void validate() const;
};

std::string loss_kind_name(TweakConfig::Loss k);
TweakConfig::Loss loss_kind_from_name(const std::string& name);

// lr_i = lr0 * (1 + scale * (i / L)), 0-based layer index.
double layer_lr(const TweakConfig& cfg, int layer, int n_layers);

struct TweakSchedule {
  int n_layers = 0;
  std::vector<double> lr;
};
TweakSchedule make_schedule(const TweakConfig& cfg, int n_layers);

// Channel-wise distribution loss: mean over channels of |mu_f - mu_q| plus
// |var_f - var_q|.
double loss_dist(const ActivationStats& f, const ActivationStats& q);
double loss_mse(const Tensor& f_out, const Tensor& q_out);
// Mean over positions of KL(softmax(f) || softmax(q)) across channels.
double loss_kl(const Tensor& f_out, const Tensor& q_out);

// Traced loss builders; the float reference enters as a constant.
template <class S>
VarT<S> loss_dist_graph(TapeT<S>* tape, const TensorT<S>& f_out, const VarT<S>& q_out) {
  VarT<S> fmu = channel_mean<S>(nullptr, constant(f_out));
  VarT<S> fvar = channel_var<S>(nullptr, constant(f_out));
  VarT<S> dmu = abs(tape, sub(tape, channel_mean(tape, q_out), fmu));
  VarT<S> dvar = abs(tape, sub(tape, channel_var(tape, q_out), fvar));
  return add(tape, mean_all(tape, dmu), mean_all(tape, dvar));
}

template <class S>
VarT<S> loss_mse_graph(TapeT<S>* tape, const TensorT<S>& f_out, const VarT<S>& q_out) {
  VarT<S> d = sub(tape, q_out, constant(f_out));
  return mean_all(tape, mul(tape, d, d));
}

template <class S>
VarT<S> loss_kl_graph(TapeT<S>* tape, const TensorT<S>& f_out, const VarT<S>& q_out) {
  const int C = f_out.dim(f_out.rank() - 1);
  const int64_t rows = f_out.numel() / C;
  TensorT<S> pf = softmax(f_out, f_out.rank() - 1);
  // Constant part: mean over positions of sum_c p log p.
  double hconst = 0;
  for (int64_t r = 0; r < rows; ++r) {
    const S* p = pf.data() + r * C;
    for (int j = 0; j < C; ++j) {
      const double pj = static_cast<double>(p[j]);
      if (pj > 0) hconst += pj * std::log(pj);
    }
  }
  hconst /= static_cast<double>(rows);
  VarT<S> lsq = log_softmax_lastdim(tape, q_out);
  VarT<S> cross = scale(tape, mean_all(tape, mul(tape, constant(pf), lsq)), static_cast<S>(-C));
  return add(tape, constant(TensorT<S>::scalar(static_cast<S>(hconst))), cross);
}

struct TweakLayerReport {
  int layer = 0;
  double lr = 0;
  double loss_pre = 0;
  double loss_post = 0;
  double dmu_pre = 0;
  double dmu_post = 0;
  int steps_applied = 0;
  double wall_ms = 0;
  uint64_t quant_fingerprint = 0;  // non-norm tensor hash taken at quantize time
  std::string warning;
};

struct TweakReport {
  std::string quantizer;
  std::string loss_kind;
  int iters = 0;
  double lr0 = 0;
  double lr_scale = 0;
  std::vector<TweakLayerReport> layers;
  double total_ms = 0;
};

// The layer-iterative pipeline: per layer, reference the float output,
// quantize the Linear weights, freeze them, then nudge only that block's norm
// parameters toward the float output distribution. iters=0 degenerates to
// plain quantization.
struct TweakOutput {
  QuantizedModel model;
  TweakReport report;
};

TweakOutput tweak_model(const TransformerModel& float_model, QuantizerKind quantizer, const CalibrationSet& calib,
                        const QuantConfig& qcfg, const TweakConfig& tcfg);

// Block-0 input batch for a calibration set under a given model.
Tensor calibration_embeddings(const TransformerModel& model, const CalibrationSet& calib);

}  // namespace ntq
