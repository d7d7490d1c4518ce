#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "ntq/tensor.hpp"

namespace ntq {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// First/second-moment state keyed by parameter name; one shared step counter.
struct AdamState {
  int64_t step = 0;
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
};

// Standard Adam with bias correction. Moments are kept in the parameter
// precision; the update itself is computed in double.
void adam_step(const std::vector<std::pair<std::string, Tensor*>>& params,
               const std::map<std::string, Tensor>& grads, AdamState& state, double lr,
               const AdamConfig& cfg = {});

}  // namespace ntq
