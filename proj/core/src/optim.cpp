#include "ntq/optim.hpp"

#include <cmath>

#include "ntq/error.hpp"

namespace ntq {

void adam_step(const std::vector<std::pair<std::string, Tensor*>>& params,
               const std::map<std::string, Tensor>& grads, AdamState& state, double lr, const AdamConfig& cfg) {
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (const auto& [name, p] : params) {
    const auto git = grads.find(name);
    if (git == grads.end()) continue;
    const Tensor& g = git->second;
    if (!g.same_shape(*p)) throw ShapeError("adam_step: gradient shape mismatch for '" + name + "'");
    if (!g.all_finite()) throw NumericError("adam_step: non-finite gradient for '" + name + "'");
    Tensor& m = state.m.try_emplace(name, Tensor(p->shape())).first->second;
    Tensor& v = state.v.try_emplace(name, Tensor(p->shape())).first->second;
    for (int64_t i = 0; i < p->numel(); ++i) {
      const double gi = g[i];
      const double mi = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
      const double vi = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      const double mhat = mi / bc1;
      const double vhat = vi / bc2;
      (*p)[i] = static_cast<float>((*p)[i] - lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

}  // namespace ntq
