#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ntq/model.hpp"
#include "ntq/tensor.hpp"

namespace ntq {

enum class Granularity { kPerChannel, kPerGroup };

enum class QuantizerKind { kNone, kRtn, kGptq, kSmoothQuant };

std::string quantizer_name(QuantizerKind k);
QuantizerKind quantizer_from_name(const std::string& name);

struct QuantConfig {
  int bits = 4;  // {2,3,4,8}; 16 is accepted as an explicit passthrough mode
  Granularity granularity = Granularity::kPerChannel;
  int group_size = 0;      // quantized-axis divisor, required for kPerGroup
  int act_bits = 0;        // 0 = weights only, 8 = W·A8 fake quantization
  float smooth_alpha = 0.5f;
  double damping = 0.01;   // Hessian damping as a fraction of mean diagonal

  int max_code() const { return (1 << (bits - 1)) - 1; }
  bool passthrough() const { return bits >= 16; }
  void validate() const;
  void validate_for(int in_dim) const;
};

struct Int8Tensor {
  Shape shape;
  std::vector<int8_t> data;

  Int8Tensor() = default;
  explicit Int8Tensor(Shape s) : shape(std::move(s)), data(static_cast<size_t>(shape_numel(shape)), 0) {}
  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }
  int8_t& at(int r, int c) { return data[static_cast<size_t>(r) * shape[1] + c]; }
  int8_t at(int r, int c) const { return data[static_cast<size_t>(r) * shape[1] + c]; }
  bool operator==(const Int8Tensor&) const = default;
};

// Symmetric integer weight representation: codes in [-(2^(b-1)-1),
// 2^(b-1)-1], zero-point 0, one scale per output channel or per
// (channel, group) along the input axis.
struct QuantizedLinear {
  Int8Tensor codes;  // [out, in]
  Tensor scales;     // [out] or [out, in/group_size]
  int bits = 4;
  Granularity granularity = Granularity::kPerChannel;
  int group_size = 0;

  float scale_at(int row, int col) const {
    return granularity == Granularity::kPerGroup ? scales.at(row, col / group_size) : scales[row];
  }
  Tensor dequant() const;  // [out, in]
};

struct HessianEstimate {
  DTensor h;               // [in, in], symmetric, damped
  double damping_added = 0;  // value added to every diagonal entry
  int64_t n_rows = 0;
};

// Accumulates H = 2 * sum x x^T over activation rows.
class HessianAccumulator {
 public:
  explicit HessianAccumulator(int in_dim);
  void add(const Tensor& acts);  // [..., in]
  HessianEstimate finish(double damping_frac) const;
  int64_t rows() const { return rows_; }
  int in_dim() const { return in_; }

 private:
  int in_;
  int64_t rows_ = 0;
  DTensor h_;
};

HessianEstimate estimate_hessian(const std::vector<Tensor>& activations, double damping_frac = 0.01);

// Round-to-nearest symmetric quantization of W[out, in].
QuantizedLinear rtn_quantize(const Tensor& w, const QuantConfig& cfg);

// Column-sequential quantization with inverse-Hessian error compensation;
// degenerates to RTN for a diagonal Hessian.
QuantizedLinear gptq_quantize(const Tensor& w, const HessianEstimate& hess, const QuantConfig& cfg);

// Per-input-channel scale migration: returns W with column j multiplied by
// s_j = act_absmax_j^alpha / weight_absmax_j^(1-alpha); the caller divides the
// producing activations by s.
struct SmoothResult {
  Tensor w;  // [out, in]
  Tensor s;  // [in]
};
SmoothResult smooth_migrate(const Tensor& w, const Tensor& act_absmax, float alpha);

// Shared divisor for several linears reading the same input.
Tensor smooth_scales(const std::vector<const Tensor*>& ws, const Tensor& act_absmax, float alpha);

// Folds SmoothQuant divisors into a float block in place: the q/k/v scales
// fold into ln1, the up-projection scales into ln2 and the out-projection
// scales into the V columns that produce its input. The down projection is
// left unsmoothed; its input passes through the GELU, which does not commute
// with per-channel scaling, so no exact fold exists. Model output is
// unchanged. Block weights are stored [in, out].
struct BlockSmoothScales {
  Tensor qkv, out_proj, up;  // each [h], divisors applied to the activations
};
BlockSmoothScales smooth_migrate_block(TransformerBlock& block, const Tensor& qkv_absmax,
                                       const Tensor& out_proj_absmax, const Tensor& up_absmax, float alpha);

// Dynamic per-tensor symmetric fake quantization of Linear inputs.
Tensor quantize_activations(const Tensor& x, int act_bits);

// x[rows, in] * dequant(ql)^T; bit-identical to the explicit
// dequantize-then-matmul route.
Tensor qlinear_forward(const QuantizedLinear& ql, const Tensor& x);

// A quantized transformer: canonical integer codes plus a dequantized float
// image used by the forward path. Norm parameters live in `f` and stay
// float; the tweaking pass mutates only those.
struct QuantizedBlock {
  TransformerBlock f;  // dequantized weights + live norm parameters
  QuantizedLinear qwq, qwk, qwv, qwo, qw_up, qw_down;

  void refresh_dequant();  // rebuild f's weight tensors from codes/scales
};

struct QuantizedModel {
  ModelConfig config;
  QuantConfig qcfg;
  QuantizerKind quantizer = QuantizerKind::kRtn;
  Tensor tok_emb, pos_emb;  // not quantized
  std::vector<QuantizedBlock> blocks;
  NormParams final_norm;
};

// Calibration-free whole-model quantization; only RTN and passthrough make
// sense here (GPTQ and SmoothQuant need activations).
QuantizedModel quantize_model_direct(const TransformerModel& model, const QuantConfig& qcfg, QuantizerKind kind);

// Order-stable hash of every non-norm tensor in the block (codes, scales and
// the dequantized weights; the float weights in passthrough mode). The
// tweaking pass records it at quantize time so the freeze invariant can be
// checked against the finished model.
uint64_t quantized_block_fingerprint(const QuantizedBlock& block, bool passthrough);

Tensor block_forward(const QuantizedBlock& block, const Tensor& x, const ModelConfig& config, int act_bits);
std::pair<Tensor, BlockTrace> forward_with_trace(const QuantizedModel& model, const TokenMatrix& tokens);
Tensor model_logits(const QuantizedModel& model, const TokenMatrix& tokens);
Tensor embed_tokens(const QuantizedModel& model, const TokenMatrix& tokens);

}  // namespace ntq
