#pragma once

#include <array>
#include <vector>

#include "sicrn/ssm.hpp"
#include "sicrn/tensor.hpp"

namespace sicrn {

// One direction pair of a 2-D state-space layer: an independent 1-D SSM per
// axis with a rank-1 readout (each axis holds its own C factor), plus a skip
// gain applied to the raw input. Axis 1 is time, axis 2 frequency.
struct S4nd2d {
  ContinuousSSM axis_time;
  ContinuousSSM axis_freq;
  double d = 0.0;
};

// K2D[i,j] = k_time[i] * k_freq[j], each factor materialized on its axis.
inline Tensor<double> kernel_2d(const S4nd2d& p, long lt, long lf) {
  require_arg(lt >= 1 && lf >= 1, "kernel_2d: lengths must be >= 1");
  SSMKernel kt = materialize_kernel(discretize(p.axis_time), lt);
  SSMKernel kf = materialize_kernel(discretize(p.axis_freq), lf);
  Tensor<double> out({lt, lf});
  for (long i = 0; i < lt; ++i)
    for (long j = 0; j < lf; ++j)
      out.at(i, j) = kt.k[static_cast<std::size_t>(i)] * kf.k[static_cast<std::size_t>(j)];
  return out;
}

// Separable causal 2-D convolution: every column through the time kernel,
// then every row through the frequency kernel, plus the d*u skip.
inline Tensor<double> apply_2d(const S4nd2d& p, const Tensor<double>& u) {
  require_arg(u.rank() == 2, "apply_2d: input must be [T,F]");
  const long t = u.dim(0), f = u.dim(1);
  SSMKernel kt = materialize_kernel(discretize(p.axis_time), t);
  SSMKernel kf = materialize_kernel(discretize(p.axis_freq), f);
  Tensor<double> mid({t, f});
  for (long ti = 0; ti < t; ++ti)
    for (long j = 0; j <= ti; ++j) {
      const double kv = kt.k[static_cast<std::size_t>(j)];
      const double* src = u.ptr() + (ti - j) * f;
      double* dst = mid.ptr() + ti * f;
      for (long fi = 0; fi < f; ++fi) dst[fi] += kv * src[fi];
    }
  Tensor<double> out({t, f});
  for (long ti = 0; ti < t; ++ti) {
    const double* src = mid.ptr() + ti * f;
    double* dst = out.ptr() + ti * f;
    for (long j = 0; j < f; ++j) {
      const double kv = kf.k[static_cast<std::size_t>(j)];
      for (long fi = j; fi < f; ++fi) dst[fi] += kv * src[fi - j];
    }
  }
  for (long i = 0; i < out.numel(); ++i) out[i] += p.d * u[i];
  return out;
}

namespace detail {

// Real-ified complex scalar: a 2x2 rotation-scaling block [[re,-im],[im,re]],
// so products of complex diagonals become products of these blocks.
struct Block2 {
  double a, b, c, d;  // [[a,b],[c,d]]
};

inline Block2 realify(const std::complex<double>& z) {
  return {z.real(), -z.imag(), z.imag(), z.real()};
}

}  // namespace detail

// Brute-force discretized 2-D recurrence over the full state tensor.
// Each axis is discretized by its own bilinear step; the state at a grid
// point is C^{N1 x N2}, stored real-ified, and evolves along both grid
// directions at once:
//   X[i,j] = A1 X[i-1,j] + X[i,j-1] A2^T - A1 X[i-1,j-1] A2^T + B1 B2^T u[i,j]
// with readout y = <C1, X C2> + d u. Intentionally O(T F N1 N2); grids are
// capped so this stays a test oracle.
inline Tensor<double> oracle_pde(const S4nd2d& p, const Tensor<double>& u) {
  require_arg(u.rank() == 2, "oracle_pde: input must be [T,F]");
  const long t = u.dim(0), f = u.dim(1);
  require_usage(t <= 32 && f <= 32, "oracle_pde: grid larger than 32x32");
  DiscreteSSM d1 = discretize(p.axis_time);
  DiscreteSSM d2 = discretize(p.axis_freq);
  const long n1 = d1.state_size(), n2 = d2.state_size();

  std::vector<detail::Block2> a1(static_cast<std::size_t>(n1)), a2(static_cast<std::size_t>(n2));
  for (long i = 0; i < n1; ++i) a1[static_cast<std::size_t>(i)] = detail::realify(d1.a_bar[static_cast<std::size_t>(i)]);
  for (long j = 0; j < n2; ++j) a2[static_cast<std::size_t>(j)] = detail::realify(d2.a_bar[static_cast<std::size_t>(j)]);

  // Per (n1, n2) pair the state is a 2x2 real matrix M; rows live on axis 1,
  // columns on axis 2. Layout: state[((i*f + j)*n1 + m)*n2 + n] -> M (4 doubles).
  const long cell = 4;
  std::vector<double> prev_row(static_cast<std::size_t>(f * n1 * n2 * cell), 0.0);
  std::vector<double> cur_row(prev_row.size(), 0.0);
  Tensor<double> y({t, f});

  auto at = [&](std::vector<double>& buf, long j, long m, long n) -> double* {
    return buf.data() + ((j * n1 + m) * n2 + n) * cell;
  };

  for (long i = 0; i < t; ++i) {
    std::fill(cur_row.begin(), cur_row.end(), 0.0);
    for (long j = 0; j < f; ++j) {
      const double uv = u.at(i, j);
      double acc = 0.0;
      for (long m = 0; m < n1; ++m) {
        const detail::Block2& A1 = a1[static_cast<std::size_t>(m)];
        const std::complex<double> b1 = d1.b_bar[static_cast<std::size_t>(m)];
        const std::complex<double> c1 = d1.c_bar[static_cast<std::size_t>(m)];
        for (long n = 0; n < n2; ++n) {
          const detail::Block2& A2 = a2[static_cast<std::size_t>(n)];
          const std::complex<double> b2 = d2.b_bar[static_cast<std::size_t>(n)];
          const std::complex<double> c2 = d2.c_bar[static_cast<std::size_t>(n)];

          double up[4] = {0, 0, 0, 0}, left[4] = {0, 0, 0, 0}, diag[4] = {0, 0, 0, 0};
          if (i > 0) {
            const double* s = at(prev_row, j, m, n);
            up[0] = s[0]; up[1] = s[1]; up[2] = s[2]; up[3] = s[3];
          }
          if (j > 0) {
            const double* s = at(cur_row, j - 1, m, n);
            left[0] = s[0]; left[1] = s[1]; left[2] = s[2]; left[3] = s[3];
          }
          if (i > 0 && j > 0) {
            const double* s = at(prev_row, j - 1, m, n);
            diag[0] = s[0]; diag[1] = s[1]; diag[2] = s[2]; diag[3] = s[3];
          }

          // A1 * M
          auto lmul = [&](const double* M, double* R) {
            R[0] = A1.a * M[0] + A1.b * M[2];
            R[1] = A1.a * M[1] + A1.b * M[3];
            R[2] = A1.c * M[0] + A1.d * M[2];
            R[3] = A1.c * M[1] + A1.d * M[3];
          };
          // M * A2^T
          auto rmul = [&](const double* M, double* R) {
            R[0] = M[0] * A2.a + M[1] * A2.b;
            R[1] = M[0] * A2.c + M[1] * A2.d;
            R[2] = M[2] * A2.a + M[3] * A2.b;
            R[3] = M[2] * A2.c + M[3] * A2.d;
          };

          double t1[4], t2[4], t3[4], t4[4];
          lmul(up, t1);
          rmul(left, t2);
          lmul(diag, t3);
          rmul(t3, t4);

          double* M = at(cur_row, j, m, n);
          // B1 B2^T as outer product of real-ified input vectors (br, bi).
          const double b1r = b1.real(), b1i = b1.imag(), b2r = b2.real(), b2i = b2.imag();
          M[0] = t1[0] + t2[0] - t4[0] + b1r * b2r * uv;
          M[1] = t1[1] + t2[1] - t4[1] + b1r * b2i * uv;
          M[2] = t1[2] + t2[2] - t4[2] + b1i * b2r * uv;
          M[3] = t1[3] + t2[3] - t4[3] + b1i * b2i * uv;

          // readout <c1, M c2> with real-ified c-hat = (cr, -ci)
          const double c1r = c1.real(), c1i = -c1.imag();
          const double c2r = c2.real(), c2i = -c2.imag();
          acc += c1r * (M[0] * c2r + M[1] * c2i) + c1i * (M[2] * c2r + M[3] * c2i);
        }
      }
      y.at(i, j) = acc + p.d * uv;
    }
    std::swap(prev_row, cur_row);
  }
  return y;
}

}  // namespace sicrn
