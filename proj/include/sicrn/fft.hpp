#pragma once

#include <complex>
#include <memory>
#include <vector>

#include "sicrn/common.hpp"
#include "sicrn/tensor.hpp"

namespace sicrn {

enum class FftDirection { forward, inverse };
enum class FftMethod { mixed_radix, chirp_z };

namespace detail {

inline std::vector<long> factorize(long n) {
  std::vector<long> f;
  for (long p = 2; p * p <= n; ++p) {
    while (n % p == 0) {
      f.push_back(p);
      n /= p;
    }
  }
  if (n > 1) f.push_back(n);
  return f;
}

inline long next_pow2(long n) {
  long p = 1;
  while (p < n) p <<= 1;
  return p;
}

}  // namespace detail

// Reusable plan for a single transform length and direction. Lengths whose
// prime factors are all small run through recursive mixed-radix decimation;
// anything with a large prime factor falls back to the Bluestein chirp-z
// algorithm (the transform itself is then two power-of-two convolutions).
template <class T>
class FftPlan {
 public:
  using C = std::complex<T>;

  static constexpr long kMaxDirectRadix = 43;

  FftPlan(long length, FftDirection direction)
      : FftPlan(length, direction, pick_method(length)) {}

  FftPlan(long length, FftDirection direction, FftMethod method)
      : n_(length), dir_(direction), method_(method) {
    require_arg(n_ >= 1, "fft length must be >= 1");
    factors_ = detail::factorize(n_);
    if (method_ == FftMethod::mixed_radix) {
      for (long p : factors_)
        require_arg(p <= kMaxDirectRadix,
                    "mixed-radix plan rejects prime factor " + std::to_string(p));
      init_roots();
    } else {
      init_bluestein();
    }
  }

  long length() const { return n_; }
  FftDirection direction() const { return dir_; }
  FftMethod method() const { return method_; }

  // Unnormalized transform in the plan's direction.
  std::vector<C> execute_raw(const std::vector<C>& x) const {
    require_arg(static_cast<long>(x.size()) == n_,
                "fft: input length " + std::to_string(x.size()) + " != plan length " +
                    std::to_string(n_));
    std::vector<C> out(static_cast<std::size_t>(n_));
    if (method_ == FftMethod::mixed_radix) {
      transform_recursive(x.data(), 1, out.data(), n_, 1);
    } else {
      bluestein(x, out);
    }
    return out;
  }

 private:
  static FftMethod pick_method(long n) {
    auto f = detail::factorize(n);
    for (long p : f)
      if (p > kMaxDirectRadix) return FftMethod::chirp_z;
    return FftMethod::mixed_radix;
  }

  void init_roots() {
    roots_.resize(static_cast<std::size_t>(n_));
    const double sign = (dir_ == FftDirection::forward) ? -1.0 : 1.0;
    for (long j = 0; j < n_; ++j) {
      double a = sign * 2.0 * 3.14159265358979323846 * static_cast<double>(j) /
                 static_cast<double>(n_);
      roots_[static_cast<std::size_t>(j)] = C(static_cast<T>(std::cos(a)),
                                              static_cast<T>(std::sin(a)));
    }
  }

  // Decimation in time over the smallest prime factor; `root_step` is N/n of
  // the current sublength so all twiddles index the shared table.
  void transform_recursive(const C* in, long in_stride, C* out, long n, long root_step) const {
    if (n == 1) {
      out[0] = in[0];
      return;
    }
    long radix = n;
    for (long p : factors_) {
      if (n % p == 0) {
        radix = p;
        break;
      }
    }
    if (radix == n) {
      // Prime base case: direct DFT via the root table.
      for (long k = 0; k < n; ++k) {
        C acc(0, 0);
        for (long j = 0; j < n; ++j) {
          long idx = ((j * k) % n) * root_step;
          acc += in[j * in_stride] * roots_[static_cast<std::size_t>(idx)];
        }
        out[k] = acc;
      }
      return;
    }
    const long m = n / radix;
    for (long q = 0; q < radix; ++q)
      transform_recursive(in + q * in_stride, in_stride * radix, out + q * m, m,
                          root_step * radix);
    std::vector<C> tmp(static_cast<std::size_t>(radix));
    for (long k2 = 0; k2 < m; ++k2) {
      for (long q = 0; q < radix; ++q) {
        long tw = ((q * k2) % n) * root_step;
        tmp[static_cast<std::size_t>(q)] =
            out[q * m + k2] * roots_[static_cast<std::size_t>(tw)];
      }
      for (long k1 = 0; k1 < radix; ++k1) {
        C acc(0, 0);
        for (long q = 0; q < radix; ++q) {
          long tw = (((q * k1 * m) % n) * root_step);
          acc += tmp[static_cast<std::size_t>(q)] * roots_[static_cast<std::size_t>(tw)];
        }
        out[k1 * m + k2] = acc;
      }
    }
  }

  void init_bluestein() {
    // Chirp c[j] = exp(sign*i*pi*j^2/n); j^2 is reduced mod 2n to keep the
    // angle argument small and exact.
    const double sign = (dir_ == FftDirection::forward) ? -1.0 : 1.0;
    chirp_.resize(static_cast<std::size_t>(n_));
    for (long j = 0; j < n_; ++j) {
      long j2 = (j * j) % (2 * n_);
      double a = sign * 3.14159265358979323846 * static_cast<double>(j2) /
                 static_cast<double>(n_);
      chirp_[static_cast<std::size_t>(j)] = C(static_cast<T>(std::cos(a)),
                                              static_cast<T>(std::sin(a)));
    }
    m_ = detail::next_pow2(2 * n_ - 1);
    inner_fwd_ = std::make_unique<FftPlan>(m_, FftDirection::forward, FftMethod::mixed_radix);
    inner_inv_ = std::make_unique<FftPlan>(m_, FftDirection::inverse, FftMethod::mixed_radix);
    std::vector<C> b(static_cast<std::size_t>(m_), C(0, 0));
    b[0] = std::conj(chirp_[0]);
    for (long j = 1; j < n_; ++j) {
      C v = std::conj(chirp_[static_cast<std::size_t>(j)]);
      b[static_cast<std::size_t>(j)] = v;
      b[static_cast<std::size_t>(m_ - j)] = v;
    }
    chirp_spectrum_ = inner_fwd_->execute_raw(b);
  }

  void bluestein(const std::vector<C>& x, std::vector<C>& out) const {
    std::vector<C> a(static_cast<std::size_t>(m_), C(0, 0));
    for (long j = 0; j < n_; ++j)
      a[static_cast<std::size_t>(j)] = x[static_cast<std::size_t>(j)] *
                                       chirp_[static_cast<std::size_t>(j)];
    std::vector<C> fa = inner_fwd_->execute_raw(a);
    for (long j = 0; j < m_; ++j)
      fa[static_cast<std::size_t>(j)] *= chirp_spectrum_[static_cast<std::size_t>(j)];
    std::vector<C> conv = inner_inv_->execute_raw(fa);
    const T inv_m = T(1) / static_cast<T>(m_);
    for (long k = 0; k < n_; ++k)
      out[static_cast<std::size_t>(k)] =
          conv[static_cast<std::size_t>(k)] * inv_m * chirp_[static_cast<std::size_t>(k)];
  }

  long n_;
  FftDirection dir_;
  FftMethod method_;
  std::vector<long> factors_;
  std::vector<C> roots_;

  // Bluestein state
  long m_ = 0;
  std::vector<C> chirp_;
  std::vector<C> chirp_spectrum_;
  std::unique_ptr<FftPlan> inner_fwd_;
  std::unique_ptr<FftPlan> inner_inv_;
};

// Unnormalized forward DFT.
template <class T>
std::vector<std::complex<T>> fft(const std::vector<std::complex<T>>& x, const FftPlan<T>& plan) {
  require_usage(plan.direction() == FftDirection::forward, "fft: plan direction is inverse");
  return plan.execute_raw(x);
}

// Inverse DFT with 1/N scaling, so ifft(fft(x)) == x.
template <class T>
std::vector<std::complex<T>> ifft(const std::vector<std::complex<T>>& x, const FftPlan<T>& plan) {
  require_usage(plan.direction() == FftDirection::inverse, "ifft: plan direction is forward");
  auto out = plan.execute_raw(x);
  const T inv_n = T(1) / static_cast<T>(plan.length());
  for (auto& v : out) v *= inv_n;
  return out;
}

// Causal linear convolution y[t] = sum_{j<=t} k[j] u[t-j], t < len(u),
// computed by zero-padding both sequences to a power of two >= Lk+Ls-1.
template <class T>
std::vector<T> linear_conv_fft(const std::vector<T>& kernel, const std::vector<T>& signal) {
  require_arg(!kernel.empty() && !signal.empty(), "linear_conv_fft: empty input");
  require_arg(kernel.size() <= signal.size(),
              "linear_conv_fft: kernel longer than signal (" + std::to_string(kernel.size()) +
                  " > " + std::to_string(signal.size()) + ")");
  const long lk = static_cast<long>(kernel.size());
  const long ls = static_cast<long>(signal.size());
  const long m = detail::next_pow2(lk + ls - 1);
  FftPlan<T> fwd(m, FftDirection::forward);
  FftPlan<T> inv(m, FftDirection::inverse);
  std::vector<std::complex<T>> a(static_cast<std::size_t>(m)), b(static_cast<std::size_t>(m));
  for (long i = 0; i < lk; ++i) a[static_cast<std::size_t>(i)] = kernel[static_cast<std::size_t>(i)];
  for (long i = 0; i < ls; ++i) b[static_cast<std::size_t>(i)] = signal[static_cast<std::size_t>(i)];
  auto fa = fwd.execute_raw(a);
  auto fb = fwd.execute_raw(b);
  for (long i = 0; i < m; ++i) fa[static_cast<std::size_t>(i)] *= fb[static_cast<std::size_t>(i)];
  auto y = ifft(fa, inv);
  std::vector<T> out(static_cast<std::size_t>(ls));
  for (long i = 0; i < ls; ++i) out[static_cast<std::size_t>(i)] = y[static_cast<std::size_t>(i)].real();
  return out;
}

// Non-negative frequency bins (0 .. N/2) of a real frame; N must be even.
template <class T>
std::vector<std::complex<T>> rfft_frame(const std::vector<T>& frame, const FftPlan<T>& plan) {
  require_usage(plan.direction() == FftDirection::forward, "rfft_frame: needs a forward plan");
  const long n = plan.length();
  require_arg(n % 2 == 0, "rfft_frame: window length must be even");
  require_arg(static_cast<long>(frame.size()) == n,
              "rfft_frame: frame length " + std::to_string(frame.size()) +
                  " != window length " + std::to_string(n));
  std::vector<std::complex<T>> x(static_cast<std::size_t>(n));
  for (long i = 0; i < n; ++i) x[static_cast<std::size_t>(i)] = frame[static_cast<std::size_t>(i)];
  auto full = plan.execute_raw(x);
  full.resize(static_cast<std::size_t>(n / 2 + 1));
  return full;
}

}  // namespace sicrn
