#pragma once

#include <cmath>
#include <complex>
#include <vector>

#include "sicrn/rng.hpp"
#include "sicrn/tensor.hpp"

namespace testutil {

// O(N^2) reference DFT, kept deliberately independent of the FFT module.
inline std::vector<std::complex<double>> naive_dft(const std::vector<std::complex<double>>& x,
                                                   bool inverse = false) {
  const long n = static_cast<long>(x.size());
  std::vector<std::complex<double>> out(x.size());
  const double sign = inverse ? 1.0 : -1.0;
  for (long k = 0; k < n; ++k) {
    std::complex<double> acc{0.0, 0.0};
    for (long j = 0; j < n; ++j) {
      double a = sign * 2.0 * M_PI * static_cast<double>((j * k) % n) / static_cast<double>(n);
      acc += x[static_cast<std::size_t>(j)] * std::complex<double>(std::cos(a), std::sin(a));
    }
    if (inverse) acc /= static_cast<double>(n);
    out[static_cast<std::size_t>(k)] = acc;
  }
  return out;
}

// O(Lk*Ls) causal linear convolution reference.
inline std::vector<double> naive_conv(const std::vector<double>& kernel,
                                      const std::vector<double>& signal) {
  std::vector<double> out(signal.size(), 0.0);
  for (std::size_t t = 0; t < signal.size(); ++t)
    for (std::size_t j = 0; j < kernel.size() && j <= t; ++j)
      out[t] += kernel[j] * signal[t - j];
  return out;
}

inline std::vector<std::complex<double>> random_complex_vec(long n, sicrn::Rng& rng) {
  std::vector<std::complex<double>> v(static_cast<std::size_t>(n));
  for (auto& z : v) z = {rng.normal(), rng.normal()};
  return v;
}

inline std::vector<double> random_real_vec(long n, sicrn::Rng& rng) {
  std::vector<double> v(static_cast<std::size_t>(n));
  for (auto& z : v) z = rng.normal();
  return v;
}

inline double max_err(const std::vector<std::complex<double>>& a,
                      const std::vector<std::complex<double>>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double max_err(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace testutil
