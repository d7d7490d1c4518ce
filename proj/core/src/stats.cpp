#include "ntq/stats.hpp"

#include <cmath>

#include "ntq/error.hpp"

namespace ntq {

ActivationStats channel_stats(const Tensor& t) {
  if (t.rank() < 2) throw ShapeError("channel_stats: need at least [positions, channels]");
  const int C = t.dim(t.rank() - 1);
  const int64_t rows = t.numel() / C;
  if (rows < 2) throw ContractError("channel_stats: need at least 2 positions per channel");
  ActivationStats s;
  s.mu = Tensor({C});
  s.var = Tensor({C});
  std::vector<double> mu(static_cast<size_t>(C), 0.0), m2(static_cast<size_t>(C), 0.0);
  for (int64_t r = 0; r < rows; ++r) {
    const float* x = t.data() + r * C;
    for (int j = 0; j < C; ++j) mu[static_cast<size_t>(j)] += x[j];
  }
  for (int j = 0; j < C; ++j) mu[static_cast<size_t>(j)] /= static_cast<double>(rows);
  for (int64_t r = 0; r < rows; ++r) {
    const float* x = t.data() + r * C;
    for (int j = 0; j < C; ++j) {
      const double d = x[j] - mu[static_cast<size_t>(j)];
      m2[static_cast<size_t>(j)] += d * d;
    }
  }
  for (int j = 0; j < C; ++j) {
    s.mu[j] = static_cast<float>(mu[static_cast<size_t>(j)]);
    s.var[j] = static_cast<float>(m2[static_cast<size_t>(j)] / static_cast<double>(rows));
  }
  return s;
}

double mean_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw ShapeError("mean_abs_diff: shape mismatch");
  double acc = 0;
  for (int64_t i = 0; i < a.numel(); ++i) acc += std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i]));
  return acc / static_cast<double>(a.numel());
}

}  // namespace ntq
