#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "ntq/error.hpp"
#include "ntq/rng.hpp"

namespace ntq {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (const int d : s) {
    if (d < 0) throw ShapeError("negative dimension in shape");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

// Dense row-major tensor. Value semantics; the scalar type is float on the
// inference path and double in the gradient-check suites.
template <class S>
class TensorT {
 public:
  TensorT() = default;

  explicit TensorT(Shape shape) : shape_(std::move(shape)), data_(static_cast<size_t>(shape_numel(shape_)), S(0)) {}

  TensorT(Shape shape, std::vector<S> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != static_cast<int64_t>(data_.size())) {
      throw ShapeError("tensor data size " + std::to_string(data_.size()) + " does not match shape " +
                       shape_str(shape_));
    }
  }

  static TensorT zeros(Shape shape) { return TensorT(std::move(shape)); }

  static TensorT full(Shape shape, S value) {
    TensorT t(std::move(shape));
    for (S& x : t.data_) x = value;
    return t;
  }

  static TensorT scalar(S value) { return TensorT({1}, {value}); }

  static TensorT from(Shape shape, std::initializer_list<S> values) {
    return TensorT(std::move(shape), std::vector<S>(values));
  }

  static TensorT randn(Shape shape, Rng& rng, double stddev = 1.0) {
    TensorT t(std::move(shape));
    for (S& x : t.data_) x = static_cast<S>(rng.gaussian() * stddev);
    return t;
  }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }
  std::vector<S>& vec() { return data_; }
  const std::vector<S>& vec() const { return data_; }

  S& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  S operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  S& at(int i, int j) { return data_[static_cast<size_t>(i) * shape_[1] + j]; }
  S at(int i, int j) const { return data_[static_cast<size_t>(i) * shape_[1] + j]; }

  S& at(int i, int j, int k) {
    return data_[(static_cast<size_t>(i) * shape_[1] + j) * shape_[2] + k];
  }
  S at(int i, int j, int k) const {
    return data_[(static_cast<size_t>(i) * shape_[1] + j) * shape_[2] + k];
  }

  const std::string& name() const { return name_; }
  TensorT& set_name(std::string n) {
    name_ = std::move(n);
    return *this;
  }

  // Same data, new shape; element count must agree.
  TensorT reshaped(Shape shape) const {
    if (shape_numel(shape) != numel()) {
      throw ShapeError("reshape " + shape_str(shape_) + " -> " + shape_str(shape) + ": element count mismatch");
    }
    TensorT t;
    t.shape_ = std::move(shape);
    t.data_ = data_;
    return t;
  }

  bool same_shape(const TensorT& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (const S x : data_) {
      if (!std::isfinite(static_cast<double>(x))) return false;
    }
    return true;
  }

  S abs_max() const {
    S m = 0;
    for (const S x : data_) m = std::max(m, static_cast<S>(std::abs(static_cast<double>(x))));
    return m;
  }

  bool operator==(const TensorT& o) const { return shape_ == o.shape_ && data_ == o.data_; }

 private:
  Shape shape_;
  std::vector<S> data_;
  std::string name_;
};

using Tensor = TensorT<float>;
using DTensor = TensorT<double>;

inline DTensor to_double(const Tensor& t) {
  DTensor r(t.shape());
  for (int64_t i = 0; i < t.numel(); ++i) r[i] = static_cast<double>(t[i]);
  return r;
}

inline Tensor to_float(const DTensor& t) {
  Tensor r(t.shape());
  for (int64_t i = 0; i < t.numel(); ++i) r[i] = static_cast<float>(t[i]);
  return r;
}

template <class S>
TensorT<S> tensor_cast(const Tensor& t) {
  if constexpr (std::is_same_v<S, float>) {
    return t;
  } else {
    return to_double(t);
  }
}

}  // namespace ntq
