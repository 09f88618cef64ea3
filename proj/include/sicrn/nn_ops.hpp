#pragma once

#include <memory>
#include <vector>

#include "sicrn/autodiff.hpp"
#include "sicrn/fft.hpp"
#include "sicrn/tensor.hpp"

namespace sicrn {

// Stride-1 2-D convolution geometry. Time padding is causal: kt-1 zeros on
// the past side and none on the future side. Frequency padding is symmetric
// zeros chosen so the frequency extent never changes.
struct Conv2dSpec {
  long kt = 2;
  long kf = 3;
  long pad_f_lo() const { return (kf - 1) / 2; }
  long pad_f_hi() const { return kf - 1 - pad_f_lo(); }
};

enum class ConvPath { auto_select, direct, fft };

namespace ad {

template <class T>
Tensor<T> pad_causal(const Tensor<T>& x, const Conv2dSpec& spec) {
  const long b = x.dim(0), c = x.dim(1), t = x.dim(2), f = x.dim(3);
  const long tp = t + spec.kt - 1, fp = f + spec.kf - 1;
  Tensor<T> out({b, c, tp, fp});
  for (long bi = 0; bi < b; ++bi)
    for (long ci = 0; ci < c; ++ci)
      for (long ti = 0; ti < t; ++ti) {
        const T* src = x.ptr() + ((bi * c + ci) * t + ti) * f;
        T* dst = out.ptr() + ((bi * c + ci) * tp + ti + spec.kt - 1) * fp + spec.pad_f_lo();
        for (long fi = 0; fi < f; ++fi) dst[fi] = src[fi];
      }
  return out;
}

template <class T>
Tensor<T> unpad_causal(const Tensor<T>& xp, const Conv2dSpec& spec, long t, long f) {
  const long b = xp.dim(0), c = xp.dim(1), tp = xp.dim(2), fp = xp.dim(3);
  Tensor<T> out({b, c, t, f});
  for (long bi = 0; bi < b; ++bi)
    for (long ci = 0; ci < c; ++ci)
      for (long ti = 0; ti < t; ++ti) {
        const T* src = xp.ptr() + ((bi * c + ci) * tp + ti + spec.kt - 1) * fp + spec.pad_f_lo();
        T* dst = out.ptr() + ((bi * c + ci) * t + ti) * f;
        for (long fi = 0; fi < f; ++fi) dst[fi] = src[fi];
      }
  return out;
}

template <class T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                         const Conv2dSpec& spec) {
  require_arg(x.rank() == 4, "conv2d: input must be [B,C,T,F]");
  require_arg(w.rank() == 4 && w.dim(2) == spec.kt && w.dim(3) == spec.kf,
              "conv2d: weight must be [Cout,Cin,kt,kf]");
  require_arg(w.dim(1) == x.dim(1), "conv2d: channel mismatch, input has " +
                                        std::to_string(x.dim(1)) + ", weight expects " +
                                        std::to_string(w.dim(1)));
  require_arg(bias.rank() == 1 && bias.dim(0) == w.dim(0), "conv2d: bias must be [Cout]");
  const long b = x.dim(0), cin = x.dim(1), t = x.dim(2), f = x.dim(3);
  const long cout = w.dim(0), fp = f + spec.kf - 1;
  Tensor<T> xp = pad_causal(x, spec);
  Tensor<T> y({b, cout, t, f});
  for (long bi = 0; bi < b; ++bi)
    for (long o = 0; o < cout; ++o) {
      T* yplane = y.ptr() + (bi * cout + o) * t * f;
      for (long i = 0; i < t * f; ++i) yplane[i] = bias[o];
      for (long ci = 0; ci < cin; ++ci)
        for (long dt = 0; dt < spec.kt; ++dt)
          for (long df = 0; df < spec.kf; ++df) {
            const T wv = w.at(o, ci, dt, df);
            if (wv == T(0)) continue;
            for (long ti = 0; ti < t; ++ti) {
              const T* src = xp.ptr() + ((bi * cin + ci) * (t + spec.kt - 1) + ti + dt) * fp + df;
              T* dst = yplane + ti * f;
              for (long fi = 0; fi < f; ++fi) dst[fi] += wv * src[fi];
            }
          }
    }
  return y;
}

template <class T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& g,
                     const Conv2dSpec& spec, Tensor<T>& gx, Tensor<T>& gw, Tensor<T>& gb) {
  const long b = x.dim(0), cin = x.dim(1), t = x.dim(2), f = x.dim(3);
  const long cout = w.dim(0), tp = t + spec.kt - 1, fp = f + spec.kf - 1;
  Tensor<T> xp = pad_causal(x, spec);
  Tensor<T> gxp({b, cin, tp, fp});
  gw = Tensor<T>(w.shape);
  gb = Tensor<T>({cout});
  for (long bi = 0; bi < b; ++bi)
    for (long o = 0; o < cout; ++o) {
      const T* gplane = g.ptr() + (bi * cout + o) * t * f;
      T acc = 0;
      for (long i = 0; i < t * f; ++i) acc += gplane[i];
      gb[o] += acc;
      for (long ci = 0; ci < cin; ++ci)
        for (long dt = 0; dt < spec.kt; ++dt)
          for (long df = 0; df < spec.kf; ++df) {
            const T wv = w.at(o, ci, dt, df);
            T wsum = 0;
            for (long ti = 0; ti < t; ++ti) {
              const T* gp = gplane + ti * f;
              const T* xpp = xp.ptr() + ((bi * cin + ci) * tp + ti + dt) * fp + df;
              T* gxpp = gxp.ptr() + ((bi * cin + ci) * tp + ti + dt) * fp + df;
              T dot = 0;
              for (long fi = 0; fi < f; ++fi) {
                dot += gp[fi] * xpp[fi];
                gxpp[fi] += wv * gp[fi];
              }
              wsum += dot;
            }
            gw.at(o, ci, dt, df) += wsum;
          }
    }
  gx = unpad_causal(gxp, spec, t, f);
}

}  // namespace ad

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 const Conv2dSpec& spec) {
  return ad::conv2d_forward(x, w, bias, spec);
}

template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, const Conv2dSpec& spec) {
  x.tape->check_same_tape({&x, &w, &bias});
  long ix = x.id, iw = w.id, ib = bias.id;
  return x.tape->record1(ad::conv2d_forward(x.value(), w.value(), bias.value(), spec),
                         [ix, iw, ib, spec](Tape<T>& tp, long o) {
                           Tensor<T> gx, gw, gb;
                           ad::conv2d_backward(tp.value(ix), tp.value(iw), tp.grad(o), spec, gx,
                                               gw, gb);
                           ad::accumulate(tp, ix, gx);
                           ad::accumulate(tp, iw, gw);
                           ad::accumulate(tp, ib, gb);
                         });
}

// ---------------------------------------------------------------------------
// Pointwise (1x1) convolution: channel mixing applied independently at every
// (t, f) position.
// ---------------------------------------------------------------------------

namespace ad {

template <class T>
Tensor<T> pointwise_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  require_arg(x.rank() == 4, "pointwise_conv: input must be [B,C,T,F]");
  require_arg(w.rank() == 2 && w.dim(1) == x.dim(1), "pointwise_conv: weight must be [Cout,Cin]");
  require_arg(bias.rank() == 1 && bias.dim(0) == w.dim(0), "pointwise_conv: bias must be [Cout]");
  const long b = x.dim(0), cin = x.dim(1), plane = x.dim(2) * x.dim(3), cout = w.dim(0);
  Tensor<T> y({b, cout, x.dim(2), x.dim(3)});
  for (long bi = 0; bi < b; ++bi)
    for (long o = 0; o < cout; ++o) {
      T* dst = y.ptr() + (bi * cout + o) * plane;
      for (long i = 0; i < plane; ++i) dst[i] = bias[o];
      for (long ci = 0; ci < cin; ++ci) {
        const T wv = w.at(o, ci);
        const T* src = x.ptr() + (bi * cin + ci) * plane;
        for (long i = 0; i < plane; ++i) dst[i] += wv * src[i];
      }
    }
  return y;
}

}  // namespace ad

template <class T>
Tensor<T> pointwise_conv(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  return ad::pointwise_forward(x, w, bias);
}

template <class T>
Var<T> pointwise_conv(const Var<T>& x, const Var<T>& w, const Var<T>& bias) {
  x.tape->check_same_tape({&x, &w, &bias});
  long ix = x.id, iw = w.id, ib = bias.id;
  return x.tape->record1(
      ad::pointwise_forward(x.value(), w.value(), bias.value()), [ix, iw, ib](Tape<T>& tp, long o) {
        const Tensor<T>& g = tp.grad(o);
        const Tensor<T>& xv = tp.value(ix);
        const Tensor<T>& wv = tp.value(iw);
        const long b = xv.dim(0), cin = xv.dim(1), plane = xv.dim(2) * xv.dim(3),
                   cout = wv.dim(0);
        Tensor<T> gx(xv.shape), gw(wv.shape), gb({cout});
        for (long bi = 0; bi < b; ++bi)
          for (long o2 = 0; o2 < cout; ++o2) {
            const T* gp = g.ptr() + (bi * cout + o2) * plane;
            T acc = 0;
            for (long i = 0; i < plane; ++i) acc += gp[i];
            gb[o2] += acc;
            for (long ci = 0; ci < cin; ++ci) {
              const T* xpp = xv.ptr() + (bi * cin + ci) * plane;
              T* gxp = gx.ptr() + (bi * cin + ci) * plane;
              const T wvv = wv.at(o2, ci);
              T dot = 0;
              for (long i = 0; i < plane; ++i) {
                gxp[i] += wvv * gp[i];
                dot += gp[i] * xpp[i];
              }
              gw.at(o2, ci) += dot;
            }
          }
        ad::accumulate(tp, ix, gx);
        ad::accumulate(tp, iw, gw);
        ad::accumulate(tp, ib, gb);
      });
}

// ---------------------------------------------------------------------------
// Depthwise causal convolution along the time axis with a per-channel kernel
// [C, L]. The direct path touches no future sample, so prefixes of its output
// are bit-identical under future perturbation; the FFT path computes the same
// sums via padded transforms and is preferred for long sequences.
// ---------------------------------------------------------------------------

namespace ad {

template <class T>
bool use_fft_time_conv(long t, long l, ConvPath path) {
  if (path == ConvPath::direct) return false;
  if (path == ConvPath::fft) return true;
  return t > 192 && l > 48;
}

template <class T>
Tensor<T> dw_time_forward_direct(const Tensor<T>& x, const Tensor<T>& k) {
  const long b = x.dim(0), c = x.dim(1), t = x.dim(2), f = x.dim(3), l = k.dim(1);
  Tensor<T> y(x.shape);
  for (long bi = 0; bi < b; ++bi)
    for (long ci = 0; ci < c; ++ci) {
      const T* kp = k.ptr() + ci * l;
      const T* xp = x.ptr() + (bi * c + ci) * t * f;
      T* yp = y.ptr() + (bi * c + ci) * t * f;
      for (long ti = 0; ti < t; ++ti) {
        T* dst = yp + ti * f;
        const long jmax = std::min(ti, l - 1);
        for (long j = 0; j <= jmax; ++j) {
          const T kv = kp[j];
          const T* src = xp + (ti - j) * f;
          for (long fi = 0; fi < f; ++fi) dst[fi] += kv * src[fi];
        }
      }
    }
  return y;
}

// Per-(b,c,f) column convolution via padded FFT, reusing one plan pair and
// per-channel kernel spectra.
template <class T>
Tensor<T> dw_time_forward_fft(const Tensor<T>& x, const Tensor<T>& k) {
  const long b = x.dim(0), c = x.dim(1), t = x.dim(2), f = x.dim(3), l = k.dim(1);
  const long m = detail::next_pow2(t + l - 1);
  FftPlan<T> fwd(m, FftDirection::forward);
  FftPlan<T> inv(m, FftDirection::inverse);
  Tensor<T> y(x.shape);
  std::vector<std::complex<T>> buf(static_cast<std::size_t>(m));
  for (long ci = 0; ci < c; ++ci) {
    std::fill(buf.begin(), buf.end(), std::complex<T>(0, 0));
    for (long j = 0; j < l; ++j) buf[static_cast<std::size_t>(j)] = k.at(ci, j);
    auto kspec = fwd.execute_raw(buf);
    for (long bi = 0; bi < b; ++bi) {
      const T* xp = x.ptr() + (bi * c + ci) * t * f;
      T* yp = y.ptr() + (bi * c + ci) * t * f;
      for (long fi = 0; fi < f; ++fi) {
        std::fill(buf.begin(), buf.end(), std::complex<T>(0, 0));
        for (long ti = 0; ti < t; ++ti) buf[static_cast<std::size_t>(ti)] = xp[ti * f + fi];
        auto spec = fwd.execute_raw(buf);
        for (long i = 0; i < m; ++i) spec[static_cast<std::size_t>(i)] *= kspec[static_cast<std::size_t>(i)];
        auto col = inv.execute_raw(spec);
        const T inv_m = T(1) / static_cast<T>(m);
        for (long ti = 0; ti < t; ++ti) yp[ti * f + fi] = col[static_cast<std::size_t>(ti)].real() * inv_m;
      }
    }
  }
  return y;
}

// gx[tau] = sum_j k[j] g[tau + j]; gk[j] = sum_{t>=j} x[t-j] g[t].
template <class T>
void dw_time_backward(const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>& g, Tensor<T>& gx,
                      Tensor<T>& gk) {
  const long b = x.dim(0), c = x.dim(1), t = x.dim(2), f = x.dim(3), l = k.dim(1);
  gx = Tensor<T>(x.shape);
  gk = Tensor<T>(k.shape);
  for (long bi = 0; bi < b; ++bi)
    for (long ci = 0; ci < c; ++ci) {
      const T* kp = k.ptr() + ci * l;
      T* gkp = gk.ptr() + ci * l;
      const T* xp = x.ptr() + (bi * c + ci) * t * f;
      const T* gp = g.ptr() + (bi * c + ci) * t * f;
      T* gxp = gx.ptr() + (bi * c + ci) * t * f;
      for (long ti = 0; ti < t; ++ti) {
        const T* gr = gp + ti * f;
        const long jmax = std::min(ti, l - 1);
        for (long j = 0; j <= jmax; ++j) {
          const T kv = kp[j];
          T* gxr = gxp + (ti - j) * f;
          const T* xr = xp + (ti - j) * f;
          T dot = 0;
          for (long fi = 0; fi < f; ++fi) {
            gxr[fi] += kv * gr[fi];
            dot += xr[fi] * gr[fi];
          }
          gkp[j] += dot;
        }
      }
    }
}

}  // namespace ad

template <class T>
Tensor<T> depthwise_conv_time(const Tensor<T>& x, const Tensor<T>& k,
                              ConvPath path = ConvPath::auto_select) {
  require_arg(x.rank() == 4 && k.rank() == 2 && k.dim(0) == x.dim(1),
              "depthwise_conv_time: wants x[B,C,T,F], k[C,L]");
  require_arg(k.dim(1) <= x.dim(2), "depthwise_conv_time: kernel longer than sequence");
  if (ad::use_fft_time_conv<T>(x.dim(2), k.dim(1), path))
    return ad::dw_time_forward_fft(x, k);
  return ad::dw_time_forward_direct(x, k);
}

template <class T>
Var<T> depthwise_conv_time(const Var<T>& x, const Var<T>& k,
                           ConvPath path = ConvPath::auto_select) {
  x.tape->check_same_tape({&x, &k});
  long ix = x.id, ik = k.id;
  return x.tape->record1(depthwise_conv_time(x.value(), k.value(), path),
                         [ix, ik](Tape<T>& tp, long o) {
                           Tensor<T> gx, gk;
                           ad::dw_time_backward(tp.value(ix), tp.value(ik), tp.grad(o), gx, gk);
                           ad::accumulate(tp, ix, gx);
                           ad::accumulate(tp, ik, gk);
                         });
}

// ---------------------------------------------------------------------------
// Depthwise causal convolution along the frequency axis (low to high) with a
// per-channel kernel [C, Lf]. Frequency extents stay fixed; bidirectional
// variants are built by the caller with flip_freq.
// ---------------------------------------------------------------------------

namespace ad {

template <class T>
Tensor<T> dw_freq_forward(const Tensor<T>& x, const Tensor<T>& k) {
  const long b = x.dim(0), c = x.dim(1), t = x.dim(2), f = x.dim(3), l = k.dim(1);
  Tensor<T> y(x.shape);
  for (long bi = 0; bi < b; ++bi)
    for (long ci = 0; ci < c; ++ci) {
      const T* kp = k.ptr() + ci * l;
      const T* xp = x.ptr() + (bi * c + ci) * t * f;
      T* yp = y.ptr() + (bi * c + ci) * t * f;
      for (long ti = 0; ti < t; ++ti) {
        const T* src = xp + ti * f;
        T* dst = yp + ti * f;
        for (long j = 0; j < std::min(l, f); ++j) {
          const T kv = kp[j];
          for (long fi = j; fi < f; ++fi) dst[fi] += kv * src[fi - j];
        }
      }
    }
  return y;
}

template <class T>
void dw_freq_backward(const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>& g, Tensor<T>& gx,
                      Tensor<T>& gk) {
  const long b = x.dim(0), c = x.dim(1), t = x.dim(2), f = x.dim(3), l = k.dim(1);
  gx = Tensor<T>(x.shape);
  gk = Tensor<T>(k.shape);
  for (long bi = 0; bi < b; ++bi)
    for (long ci = 0; ci < c; ++ci) {
      const T* kp = k.ptr() + ci * l;
      T* gkp = gk.ptr() + ci * l;
      const T* xp = x.ptr() + (bi * c + ci) * t * f;
      const T* gp = g.ptr() + (bi * c + ci) * t * f;
      T* gxp = gx.ptr() + (bi * c + ci) * t * f;
      for (long ti = 0; ti < t; ++ti) {
        const T* gr = gp + ti * f;
        const T* xr = xp + ti * f;
        T* gxr = gxp + ti * f;
        for (long j = 0; j < std::min(l, f); ++j) {
          const T kv = kp[j];
          T dot = 0;
          for (long fi = j; fi < f; ++fi) {
            gxr[fi - j] += kv * gr[fi];
            dot += xr[fi - j] * gr[fi];
          }
          gkp[j] += dot;
        }
      }
    }
}

}  // namespace ad

template <class T>
Tensor<T> depthwise_conv_freq(const Tensor<T>& x, const Tensor<T>& k) {
  require_arg(x.rank() == 4 && k.rank() == 2 && k.dim(0) == x.dim(1),
              "depthwise_conv_freq: wants x[B,C,T,F], k[C,L]");
  return ad::dw_freq_forward(x, k);
}

template <class T>
Var<T> depthwise_conv_freq(const Var<T>& x, const Var<T>& k) {
  x.tape->check_same_tape({&x, &k});
  long ix = x.id, ik = k.id;
  return x.tape->record1(depthwise_conv_freq(x.value(), k.value()),
                         [ix, ik](Tape<T>& tp, long o) {
                           Tensor<T> gx, gk;
                           ad::dw_freq_backward(tp.value(ix), tp.value(ik), tp.grad(o), gx, gk);
                           ad::accumulate(tp, ix, gx);
                           ad::accumulate(tp, ik, gk);
                         });
}

}  // namespace sicrn
