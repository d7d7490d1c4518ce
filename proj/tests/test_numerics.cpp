#include <doctest.h>

#include <cmath>

#include "ntq/rng.hpp"
#include "ntq/tensor_ops.hpp"

using namespace ntq;

namespace {

// Independent oracle: naive triple loop, accumulation order irrelevant at the
// checked tolerance.
template <class S>
TensorT<S> matmul_oracle(const TensorT<S>& a, const TensorT<S>& b) {
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  TensorT<S> c({m, n});
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      S acc = 0;
      for (int p = 0; p < k; ++p) acc += a.at(i, p) * b.at(p, j);
      c.at(i, j) = acc;
    }
  }
  return c;
}

template <class S>
double max_rel_err(const TensorT<S>& a, const TensorT<S>& b) {
  REQUIRE(a.same_shape(b));
  double worst = 0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    const double d = std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i]));
    worst = std::max(worst, d / std::max({std::abs(static_cast<double>(a[i])),
                                          std::abs(static_cast<double>(b[i])), 1.0}));
  }
  return worst;
}

}  // namespace

TEST_CASE("rng: identical seed gives identical stream") {
  Rng a(1234), b(1234);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng c(1235);
  CHECK(Rng(1234).next_u64() != c.next_u64());
}

TEST_CASE("rng: substreams are independent of parent consumption") {
  Rng a(7);
  a.next_u64();
  a.next_u64();
  Rng b(7);
  CHECK(a.substream("train").next_u64() == b.substream("train").next_u64());
  CHECK(a.substream("train").next_u64() != a.substream("eval").next_u64());
  CHECK(a.substream(0).next_u64() != a.substream(1).next_u64());
}

TEST_CASE("rng: uniform_int range and determinism") {
  Rng r(42);
  for (int i = 0; i < 1000; ++i) {
    const uint64_t v = r.uniform_int(7);
    CHECK(v < 7);
  }
  CHECK_THROWS_AS(r.uniform_int(0), ContractError);
}

TEST_CASE("rng: gaussian moments") {
  Rng r(3);
  double sum = 0, sq = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double g = r.gaussian();
    sum += g;
    sq += g * g;
  }
  CHECK(std::abs(sum / n) < 0.03);
  CHECK(std::abs(sq / n - 1.0) < 0.05);
}

TEST_CASE("tensor: shape/data invariant") {
  CHECK_THROWS_AS(Tensor({2, 2}, {1.f, 2.f, 3.f}), ShapeError);
  Tensor t({2, 3});
  CHECK(t.numel() == 6);
  CHECK_THROWS_AS(t.reshaped({4}), ShapeError);
  CHECK(t.reshaped({3, 2}).dim(0) == 3);
}

TEST_CASE("matmul: identity and dot product") {
  const Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  const Tensor b = Tensor::from({2, 2}, {3, 4, 5, 6});
  CHECK(matmul(eye, b) == b);

  const Tensor r = Tensor::from({1, 2}, {1, 2});
  const Tensor c = Tensor::from({2, 1}, {3, 4});
  const Tensor p = matmul(r, c);
  CHECK(p.numel() == 1);
  CHECK(p[0] == doctest::Approx(11));
}

TEST_CASE("matmul: shape errors name both shapes") {
  const Tensor a({2, 3}), b({4, 2});
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[4x2]") != std::string::npos);
  }
}

TEST_CASE("matmul: matches triple-loop oracle within 1e-6 relative") {
  Rng rng(11);
  for (const int n : {8, 17, 64}) {
    const Tensor a = Tensor::randn({n, n}, rng);
    const Tensor b = Tensor::randn({n, n}, rng);
    CHECK(max_rel_err(matmul(a, b), matmul_oracle(a, b)) < 1e-6);
  }
}

TEST_CASE("matmul variants agree with explicit transposes") {
  Rng rng(12);
  const Tensor a = Tensor::randn({5, 7}, rng);
  const Tensor b = Tensor::randn({7, 4}, rng);
  CHECK(max_rel_err(matmul_nt(a, transpose(b)), matmul(a, b)) < 1e-6);
  CHECK(max_rel_err(matmul_tn(transpose(a), b), matmul(a, b)) < 1e-6);

  const Tensor a3 = Tensor::randn({3, 5, 7}, rng);
  const Tensor b3 = Tensor::randn({3, 7, 4}, rng);
  const Tensor c3 = bmm_nn(a3, b3);
  for (int i = 0; i < 3; ++i) {
    Tensor ai({5, 7}), bi({7, 4});
    std::copy(a3.data() + i * 35, a3.data() + (i + 1) * 35, ai.data());
    std::copy(b3.data() + i * 28, b3.data() + (i + 1) * 28, bi.data());
    const Tensor ci = matmul(ai, bi);
    for (int64_t k = 0; k < ci.numel(); ++k) CHECK(c3[i * 20 + k] == doctest::Approx(ci[k]).epsilon(1e-6));
  }
}

TEST_CASE("softmax: symmetry, normalization, axis errors") {
  const Tensor x = Tensor::from({2}, {0, 0});
  const Tensor y = softmax(x, 0);
  CHECK(y[0] == doctest::Approx(0.5));
  CHECK(y[1] == doctest::Approx(0.5));

  Rng rng(4);
  const Tensor big = Tensor::randn({3, 9}, rng, 30.0);  // max subtraction keeps this finite
  const Tensor sm = softmax(big, 1);
  CHECK(sm.all_finite());
  for (int i = 0; i < 3; ++i) {
    float row = 0;
    for (int j = 0; j < 9; ++j) row += sm.at(i, j);
    CHECK(row == doctest::Approx(1.0).epsilon(1e-5));
  }
  CHECK_THROWS_AS(softmax(big, 2), ShapeError);
}

TEST_CASE("reduce_mean / reduce_var hand values") {
  const Tensor x = Tensor::from({3}, {1, 2, 3});
  CHECK(reduce_mean(x, 0)[0] == doctest::Approx(2.0));
  CHECK(reduce_var(x, 0)[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-4));
  CHECK_THROWS_AS(reduce_mean(x, 1), ShapeError);
}

TEST_CASE("gelu: zero fixed point and monotone tails") {
  const Tensor z = Tensor::from({1}, {0});
  CHECK(gelu(z)[0] == doctest::Approx(0.0));
  const Tensor t = Tensor::from({2}, {10.f, -10.f});
  const Tensor g = gelu(t);
  CHECK(g[0] == doctest::Approx(10.0).epsilon(1e-4));
  CHECK(g[1] == doctest::Approx(0.0).epsilon(1e-4));
}

TEST_CASE("elementwise add/mul/sub/scale") {
  const Tensor a = Tensor::from({2}, {1, 2});
  const Tensor b = Tensor::from({2}, {3, 5});
  CHECK(add(a, b) == Tensor::from({2}, {4, 7}));
  CHECK(mul(a, b) == Tensor::from({2}, {3, 10}));
  CHECK(sub(b, a) == Tensor::from({2}, {2, 3}));
  CHECK(scale(a, 2.0f) == Tensor::from({2}, {2, 4}));
  CHECK_THROWS_AS(add(a, Tensor({3})), ShapeError);
}

TEST_CASE("layernorm: trivial cases and hand value") {
  const Tensor gamma = Tensor::full({3}, 1.0f);
  const Tensor beta = Tensor::zeros({3});

  const Tensor constant_row = Tensor::full({1, 3}, 5.0f);
  const Tensor z = layernorm_forward(constant_row, gamma, beta, 1e-5f);
  for (int j = 0; j < 3; ++j) CHECK(z[j] == doctest::Approx(0.0));

  const Tensor bshift = Tensor::full({3}, 2.5f);
  const Tensor w = layernorm_forward(constant_row, Tensor::zeros({3}), bshift, 1e-5f);
  for (int j = 0; j < 3; ++j) CHECK(w[j] == doctest::Approx(2.5));

  const Tensor x = Tensor::from({1, 3}, {1, 2, 3});
  const Tensor y = layernorm_forward(x, gamma, beta, 0.0f);
  CHECK(y[0] == doctest::Approx(-1.2247).epsilon(1e-3));
  CHECK(y[1] == doctest::Approx(0.0));
  CHECK(y[2] == doctest::Approx(1.2247).epsilon(1e-3));
}

TEST_CASE("layernorm: output is standardized for unit gamma") {
  Rng rng(9);
  const int h = 16;
  const Tensor x = Tensor::randn({8, h}, rng);
  const Tensor y = layernorm_forward(x, Tensor::full({h}, 1.0f), Tensor::zeros({h}), 1e-12f);
  for (int r = 0; r < 8; ++r) {
    double mu = 0, var = 0;
    for (int j = 0; j < h; ++j) mu += y.at(r, j);
    mu /= h;
    for (int j = 0; j < h; ++j) var += (y.at(r, j) - mu) * (y.at(r, j) - mu);
    var /= h;
    CHECK(std::abs(mu) < 1e-6);
    CHECK(std::abs(var - 1.0) < 1e-5);
  }
}

TEST_CASE("rmsnorm: trivial cases and hand value") {
  const Tensor ones = Tensor::full({3}, 1.0f);
  const Tensor x1 = Tensor::from({1, 3}, {1, 1, 1});
  const Tensor y1 = rmsnorm_forward(x1, ones, 0.0f);
  for (int j = 0; j < 3; ++j) CHECK(y1[j] == doctest::Approx(1.0));

  const Tensor y0 = rmsnorm_forward(x1, Tensor::zeros({3}), 0.0f);
  for (int j = 0; j < 3; ++j) CHECK(y0[j] == doctest::Approx(0.0));

  const Tensor x = Tensor::from({1, 2}, {3, 4});
  const Tensor y = rmsnorm_forward(x, Tensor::full({2}, 1.0f), 0.0f);
  CHECK(y[0] == doctest::Approx(0.8485).epsilon(1e-3));
  CHECK(y[1] == doctest::Approx(1.1314).epsilon(1e-3));
}

TEST_CASE("kernels are bit-deterministic across repeat runs") {
  Rng rng(21);
  const Tensor a = Tensor::randn({24, 24}, rng);
  const Tensor b = Tensor::randn({24, 24}, rng);
  const Tensor c1 = matmul(a, b);
  const Tensor c2 = matmul(a, b);
  CHECK(c1 == c2);
  const Tensor g1 = gelu(a);
  CHECK(g1 == gelu(a));
}

TEST_CASE("fake_quant_symmetric: bound, zeros, idempotence") {
  Rng rng(31);
  const Tensor zeros = Tensor::zeros({16});
  CHECK(fake_quant_symmetric(zeros, 8) == zeros);

  const Tensor x = Tensor::randn({4096}, rng, 3.0);
  const Tensor y = fake_quant_symmetric(x, 8);
  const float bound = x.abs_max() / 254.0f + 1e-7f;
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(std::abs(x[i] - y[i]) <= bound);

  const Tensor yy = fake_quant_symmetric(y, 8);
  for (int64_t i = 0; i < y.numel(); ++i) CHECK(std::abs(yy[i] - y[i]) <= 1e-7f * std::max(1.0f, std::abs(y[i])));
}
