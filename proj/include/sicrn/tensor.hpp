#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "sicrn/common.hpp"
#include "sicrn/rng.hpp"

namespace sicrn {

using Shape = std::vector<long>;

inline long shape_numel(const Shape& s) {
  long n = 1;
  for (long d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

// Dense row-major tensor. Axis convention throughout the library is
// (batch, channel, time, frequency); lower-rank tensors drop leading axes.
template <class T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;

  explicit Tensor(Shape s) : shape(std::move(s)) {
    validate_shape();
    data.assign(static_cast<std::size_t>(shape_numel(shape)), T(0));
  }

  Tensor(Shape s, T fill) : shape(std::move(s)) {
    validate_shape();
    data.assign(static_cast<std::size_t>(shape_numel(shape)), fill);
  }

  Tensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
    validate_shape();
    require_arg(static_cast<long>(data.size()) == shape_numel(shape),
                "tensor data size does not match shape " + shape_str(shape));
  }

  static Tensor from(std::initializer_list<T> values) {
    Tensor t;
    t.shape = {static_cast<long>(values.size())};
    t.data.assign(values.begin(), values.end());
    t.validate_shape();
    return t;
  }

  long numel() const { return static_cast<long>(data.size()); }
  long rank() const { return static_cast<long>(shape.size()); }
  long dim(long i) const { return shape[static_cast<std::size_t>(i)]; }

  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }

  T& operator[](long i) { return data[static_cast<std::size_t>(i)]; }
  const T& operator[](long i) const { return data[static_cast<std::size_t>(i)]; }

  // Vector (rank-1) access
  T& at(long i) { return data[static_cast<std::size_t>(i)]; }
  const T& at(long i) const { return data[static_cast<std::size_t>(i)]; }

  // Matrix (rank-2) access
  T& at(long i, long j) { return data[static_cast<std::size_t>(i * shape[1] + j)]; }
  const T& at(long i, long j) const { return data[static_cast<std::size_t>(i * shape[1] + j)]; }

  // Rank-4 access (b, c, t, f)
  T& at(long b, long c, long t, long f) {
    return data[static_cast<std::size_t>(((b * shape[1] + c) * shape[2] + t) * shape[3] + f)];
  }
  const T& at(long b, long c, long t, long f) const {
    return data[static_cast<std::size_t>(((b * shape[1] + c) * shape[2] + t) * shape[3] + f)];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  bool all_finite() const {
    for (const T& v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  Tensor reshaped(Shape s) const {
    require_arg(shape_numel(s) == numel(),
                "reshape " + shape_str(shape) + " -> " + shape_str(s) + " changes element count");
    Tensor out;
    out.shape = std::move(s);
    out.data = data;
    return out;
  }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }

 private:
  void validate_shape() const {
    for (long d : shape)
      require_arg(d > 0, "tensor dimensions must be positive, got " + shape_str(shape));
  }
};

template <class T>
Tensor<T> randn(const Shape& s, Rng& rng, double stddev = 1.0) {
  Tensor<T> t(s);
  for (auto& v : t.data) v = static_cast<T>(rng.normal(0.0, stddev));
  return t;
}

template <class T>
Tensor<T> rand_uniform(const Shape& s, Rng& rng, double lo, double hi) {
  Tensor<T> t(s);
  for (auto& v : t.data) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

template <class T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  require_arg(a.same_shape(b), "max_abs_diff: shape mismatch");
  double m = 0.0;
  for (long i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

// Complex tensor as a pair of real tensors (re, im) of identical shape.
template <class T>
struct CTensor {
  Tensor<T> re;
  Tensor<T> im;

  CTensor() = default;
  explicit CTensor(Shape s) : re(s), im(std::move(s)) {}
  CTensor(Tensor<T> r, Tensor<T> i) : re(std::move(r)), im(std::move(i)) {
    require_arg(re.same_shape(im), "complex pair: re/im shapes differ");
  }

  long numel() const { return re.numel(); }
  const Shape& shape() const { return re.shape; }
};

}  // namespace sicrn
