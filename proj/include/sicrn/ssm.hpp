#pragma once

#include <complex>
#include <vector>

#include "sicrn/autodiff.hpp"
#include "sicrn/fft.hpp"
#include "sicrn/rng.hpp"
#include "sicrn/tensor.hpp"

namespace sicrn {

// Continuous-time diagonal state-space parameters for one channel:
//   h'(t) = A h(t) + B u(t),  y(t) = C h(t) + D u(t)
// with A a complex diagonal and step size dt = exp(log_dt).
struct ContinuousSSM {
  std::vector<std::complex<double>> a;  // eigenvalues, Re < 0 for stability
  std::vector<std::complex<double>> b;
  std::vector<std::complex<double>> c;
  double d = 0.0;
  double log_dt = 0.0;

  long state_size() const { return static_cast<long>(a.size()); }
  double dt() const { return std::exp(log_dt); }
};

// Bilinear-discretized form: x_k = Abar x_{k-1} + Bbar u_k, y_k = Re<Cbar, x_k>.
struct DiscreteSSM {
  std::vector<std::complex<double>> a_bar;
  std::vector<std::complex<double>> b_bar;
  std::vector<std::complex<double>> c_bar;

  long state_size() const { return static_cast<long>(a_bar.size()); }
};

struct SSMKernel {
  std::vector<double> k;
  long length() const { return static_cast<long>(k.size()); }
};

// Bilinear transform:
//   Abar = (1 + dt/2 A) / (1 - dt/2 A),  Bbar = dt B / (1 - dt/2 A),  Cbar = C.
// Maps the open left half-plane into the open unit disk.
inline DiscreteSSM discretize(const ContinuousSSM& p) {
  const double dt = p.dt();
  require_arg(dt > 0.0, "discretize: step size must be positive");
  DiscreteSSM d;
  const long n = p.state_size();
  d.a_bar.resize(static_cast<std::size_t>(n));
  d.b_bar.resize(static_cast<std::size_t>(n));
  d.c_bar = p.c;
  for (long i = 0; i < n; ++i) {
    std::complex<double> half = 0.5 * dt * p.a[static_cast<std::size_t>(i)];
    std::complex<double> den = 1.0 - half;
    if (std::abs(den) < 1e-300)
      throw NumericError("discretize: singular bilinear denominator at eigenvalue " +
                         std::to_string(i));
    d.a_bar[static_cast<std::size_t>(i)] = (1.0 + half) / den;
    d.b_bar[static_cast<std::size_t>(i)] = dt * p.b[static_cast<std::size_t>(i)] / den;
  }
  return d;
}

// One recurrence step. Returns the updated state and output sample.
inline std::pair<std::vector<std::complex<double>>, double> step_recurrent(
    const DiscreteSSM& d, const std::vector<std::complex<double>>& state, double u, double skip) {
  const long n = d.state_size();
  require_arg(static_cast<long>(state.size()) == n, "step_recurrent: state size mismatch");
  std::vector<std::complex<double>> next(static_cast<std::size_t>(n));
  std::complex<double> readout{0.0, 0.0};
  for (long i = 0; i < n; ++i) {
    const auto s = state[static_cast<std::size_t>(i)];
    require_numeric(std::isfinite(s.real()) && std::isfinite(s.imag()),
                    "step_recurrent: non-finite state");
    next[static_cast<std::size_t>(i)] =
        d.a_bar[static_cast<std::size_t>(i)] * s + d.b_bar[static_cast<std::size_t>(i)] * u;
    readout += d.c_bar[static_cast<std::size_t>(i)] * next[static_cast<std::size_t>(i)];
  }
  return {std::move(next), readout.real() + skip * u};
}

// Full rollout of the recurrence; the reference path for the convolution form.
inline std::vector<double> rollout_recurrent(const DiscreteSSM& d, double skip,
                                             const std::vector<double>& u) {
  std::vector<std::complex<double>> state(static_cast<std::size_t>(d.state_size()), {0.0, 0.0});
  std::vector<double> y(u.size());
  for (std::size_t t = 0; t < u.size(); ++t) {
    auto [next, yt] = step_recurrent(d, state, u[t], skip);
    state = std::move(next);
    y[t] = yt;
  }
  return y;
}

// k[t] = Re(sum_n Cbar_n Abar_n^t Bbar_n), materialized by iterated
// elementwise products.
inline SSMKernel materialize_kernel(const DiscreteSSM& d, long length) {
  require_arg(length >= 1, "materialize_kernel: length must be >= 1");
  const long n = d.state_size();
  SSMKernel out;
  out.k.resize(static_cast<std::size_t>(length));
  std::vector<std::complex<double>> p = d.b_bar;
  for (long t = 0; t < length; ++t) {
    std::complex<double> acc{0.0, 0.0};
    for (long i = 0; i < n; ++i) acc += d.c_bar[static_cast<std::size_t>(i)] * p[static_cast<std::size_t>(i)];
    require_numeric(std::isfinite(acc.real()), "materialize_kernel: overflow at tap " +
                                                   std::to_string(t));
    out.k[static_cast<std::size_t>(t)] = acc.real();
    for (long i = 0; i < n; ++i) p[static_cast<std::size_t>(i)] *= d.a_bar[static_cast<std::size_t>(i)];
  }
  return out;
}

// y = (k * u) + skip u with k materialized at the input length; the
// convolution itself runs through the padded-FFT path.
inline std::vector<double> apply_conv(const DiscreteSSM& d, double skip,
                                      const std::vector<double>& u) {
  require_arg(!u.empty(), "apply_conv: empty input");
  SSMKernel k = materialize_kernel(d, static_cast<long>(u.size()));
  std::vector<double> y = linear_conv_fft(k.k, u);
  for (std::size_t t = 0; t < u.size(); ++t) y[t] += skip * u[t];
  return y;
}

// Diagonal-linear initialization: a_n = -1/2 + i pi n, b_n = 1, c_n drawn
// from a complex normal with variance 1/N, d = 1, log-step uniform in log
// space over [dt_min, dt_max].
inline ContinuousSSM init_s4d_lin(long n, Rng& rng, double dt_min = 1e-3, double dt_max = 1e-1) {
  require_arg(n >= 2 && n % 2 == 0, "init_s4d_lin: state size must be even, got " +
                                        std::to_string(n));
  ContinuousSSM p;
  p.a.resize(static_cast<std::size_t>(n));
  p.b.assign(static_cast<std::size_t>(n), {1.0, 0.0});
  p.c.resize(static_cast<std::size_t>(n));
  const double pi = 3.14159265358979323846;
  const double cstd = std::sqrt(0.5 / static_cast<double>(n));
  for (long i = 0; i < n; ++i) {
    p.a[static_cast<std::size_t>(i)] = {-0.5, pi * static_cast<double>(i)};
    double re = rng.normal(0.0, cstd);
    double im = rng.normal(0.0, cstd);
    p.c[static_cast<std::size_t>(i)] = {re, im};
  }
  p.d = 1.0;
  p.log_dt = rng.uniform(std::log(dt_min), std::log(dt_max));
  return p;
}

// ---------------------------------------------------------------------------
// Taped kernel materialization over batched per-channel parameters. The six
// inputs are the discretized quantities as [C, N] real pairs; output is the
// kernel bank [C, L]. The closed-form pullback uses the holomorphic structure
// of k[t] = Re(c abar^t bbar): with complex cotangent G accumulated along the
// power chain, grads of (re, im) pairs are (Re conj(G), Im conj(G)).
// ---------------------------------------------------------------------------

namespace ad {

template <class T>
Tensor<T> ssm_kernel_forward(const Tensor<T>& ar, const Tensor<T>& ai, const Tensor<T>& br,
                             const Tensor<T>& bi, const Tensor<T>& cr, const Tensor<T>& ci,
                             long length) {
  const long c = ar.dim(0), n = ar.dim(1);
  Tensor<T> out({c, length});
  std::vector<T> pr(static_cast<std::size_t>(n)), pi(static_cast<std::size_t>(n));
  for (long ch = 0; ch < c; ++ch) {
    const T* arp = ar.ptr() + ch * n;
    const T* aip = ai.ptr() + ch * n;
    const T* brp = br.ptr() + ch * n;
    const T* bip = bi.ptr() + ch * n;
    const T* crp = cr.ptr() + ch * n;
    const T* cip = ci.ptr() + ch * n;
    for (long i = 0; i < n; ++i) {
      pr[static_cast<std::size_t>(i)] = brp[i];
      pi[static_cast<std::size_t>(i)] = bip[i];
    }
    for (long t = 0; t < length; ++t) {
      T acc = 0;
      for (long i = 0; i < n; ++i)
        acc += crp[i] * pr[static_cast<std::size_t>(i)] - cip[i] * pi[static_cast<std::size_t>(i)];
      out.at(ch, t) = acc;
      if (t + 1 < length) {
        for (long i = 0; i < n; ++i) {
          T nr = arp[i] * pr[static_cast<std::size_t>(i)] - aip[i] * pi[static_cast<std::size_t>(i)];
          T ni = arp[i] * pi[static_cast<std::size_t>(i)] + aip[i] * pr[static_cast<std::size_t>(i)];
          pr[static_cast<std::size_t>(i)] = nr;
          pi[static_cast<std::size_t>(i)] = ni;
        }
      }
    }
  }
  return out;
}

}  // namespace ad

template <class T>
Tensor<T> ssm_kernel(const Tensor<T>& ar, const Tensor<T>& ai, const Tensor<T>& br,
                     const Tensor<T>& bi, const Tensor<T>& cr, const Tensor<T>& ci, long length) {
  require_arg(ar.rank() == 2 && ar.same_shape(ai) && ar.same_shape(br) && ar.same_shape(bi) &&
                  ar.same_shape(cr) && ar.same_shape(ci),
              "ssm_kernel: all parameter tensors must share shape [C,N]");
  require_arg(length >= 1, "ssm_kernel: length must be >= 1");
  return ad::ssm_kernel_forward(ar, ai, br, bi, cr, ci, length);
}

template <class T>
Var<T> ssm_kernel(const Var<T>& ar, const Var<T>& ai, const Var<T>& br, const Var<T>& bi,
                  const Var<T>& cr, const Var<T>& ci, long length) {
  ar.tape->check_same_tape({&ar, &ai, &br, &bi, &cr, &ci});
  Tensor<T> out = ssm_kernel(ar.value(), ai.value(), br.value(), bi.value(), cr.value(),
                             ci.value(), length);
  long iar = ar.id, iai = ai.id, ibr = br.id, ibi = bi.id, icr = cr.id, ici = ci.id;
  return ar.tape->record1(std::move(out), [iar, iai, ibr, ibi, icr, ici](Tape<T>& tp, long o) {
    using C = std::complex<T>;
    const Tensor<T>& g = tp.grad(o);
    const Tensor<T>& arv = tp.value(iar);
    const Tensor<T>& aiv = tp.value(iai);
    const Tensor<T>& brv = tp.value(ibr);
    const Tensor<T>& biv = tp.value(ibi);
    const Tensor<T>& crv = tp.value(icr);
    const Tensor<T>& civ = tp.value(ici);
    const long c = arv.dim(0), n = arv.dim(1), length = g.dim(1);
    Tensor<T> gar(arv.shape), gai(arv.shape), gbr(arv.shape), gbi(arv.shape), gcr(arv.shape),
        gci(arv.shape);
    std::vector<C> u(static_cast<std::size_t>(n));       // abar^t
    std::vector<C> uprev(static_cast<std::size_t>(n));   // abar^{t-1}
    std::vector<C> acc_c(static_cast<std::size_t>(n));   // sum_t g abar^t bbar
    std::vector<C> acc_b(static_cast<std::size_t>(n));   // sum_t g cbar abar^t
    std::vector<C> acc_a(static_cast<std::size_t>(n));   // sum_t g t cbar abar^{t-1} bbar
    for (long ch = 0; ch < c; ++ch) {
      for (long i = 0; i < n; ++i) {
        u[static_cast<std::size_t>(i)] = {T(1), T(0)};
        acc_c[static_cast<std::size_t>(i)] = acc_b[static_cast<std::size_t>(i)] =
            acc_a[static_cast<std::size_t>(i)] = {T(0), T(0)};
      }
      for (long t = 0; t < length; ++t) {
        const T gt = g.at(ch, t);
        for (long i = 0; i < n; ++i) {
          const std::size_t ii = static_cast<std::size_t>(i);
          const C a{arv.at(ch, i), aiv.at(ch, i)};
          const C b{brv.at(ch, i), biv.at(ch, i)};
          const C cc{crv.at(ch, i), civ.at(ch, i)};
          if (gt != T(0)) {
            acc_c[ii] += gt * u[ii] * b;
            acc_b[ii] += gt * cc * u[ii];
            if (t > 0) acc_a[ii] += gt * static_cast<T>(t) * cc * uprev[ii] * b;
          }
          uprev[ii] = u[ii];
          u[ii] *= a;
        }
      }
      // Re(z)-valued outputs over complex params: grads of (re, im) are
      // (Re conj(acc), Im conj(acc)) = (Re acc, -Im acc).
      for (long i = 0; i < n; ++i) {
        const std::size_t ii = static_cast<std::size_t>(i);
        gcr.at(ch, i) = acc_c[ii].real();
        gci.at(ch, i) = -acc_c[ii].imag();
        gbr.at(ch, i) = acc_b[ii].real();
        gbi.at(ch, i) = -acc_b[ii].imag();
        gar.at(ch, i) = acc_a[ii].real();
        gai.at(ch, i) = -acc_a[ii].imag();
      }
    }
    ad::accumulate(tp, iar, gar);
    ad::accumulate(tp, iai, gai);
    ad::accumulate(tp, ibr, gbr);
    ad::accumulate(tp, ibi, gbi);
    ad::accumulate(tp, icr, gcr);
    ad::accumulate(tp, ici, gci);
  });
}

}  // namespace sicrn
