#pragma once

#include "ntq/tensor.hpp"

namespace ntq {

// Per-channel mean and population variance of a captured activation tensor,
// taken over every leading (batch x token) position.
struct ActivationStats {
  Tensor mu;   // [C]
  Tensor var;  // [C]

  int channels() const { return static_cast<int>(mu.numel()); }
};

// t[..., C] -> stats over the leading positions; requires at least two
// positions for the variance to be meaningful.
ActivationStats channel_stats(const Tensor& t);

// Mean absolute per-channel mean difference (the divergence measure used by
// the per-layer profiles).
double mean_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace ntq
