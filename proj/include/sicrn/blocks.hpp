#pragma once

#include <cassert>
#include <string>
#include <vector>

#include "sicrn/autodiff.hpp"
#include "sicrn/nn_ops.hpp"
#include "sicrn/s4nd.hpp"
#include "sicrn/ssm.hpp"

namespace sicrn {

// Records (name, shape) at every layer boundary when attached to a context;
// used to verify that no layer ever changes the time or frequency extent.
struct ShapeAudit {
  std::vector<std::pair<std::string, Shape>> entries;
  void push(const std::string& name, const Shape& s) { entries.emplace_back(name, s); }
};

// Execution contexts. Layer forwards are written once against a generic
// handle; the taped context records every op for backward, the eager context
// runs plain tensor kernels and lets intermediates die with scope.
template <class T>
struct TapeCtx {
  using Real = T;
  using Handle = Var<T>;
  Tape<T>* tape = nullptr;
  bool train = false;
  ConvPath conv_path = ConvPath::auto_select;
  ShapeAudit* audit = nullptr;

  Handle use(Tensor<T>& t) const { return tape->param(t); }
  Handle lift(Tensor<T> v) const { return tape->leaf(std::move(v)); }
  static const Tensor<T>& val(const Handle& h) { return h.value(); }
};

template <class T>
struct EagerCtx {
  using Real = T;
  using Handle = Tensor<T>;
  bool train = false;
  ConvPath conv_path = ConvPath::direct;
  ShapeAudit* audit = nullptr;

  const Tensor<T>& use(Tensor<T>& t) const { return t; }
  Tensor<T> lift(Tensor<T> v) const { return v; }
  static const Tensor<T>& val(const Handle& h) { return h; }
};

template <class T>
struct NamedParam {
  std::string name;
  Tensor<T>* tensor;
};

namespace init {

// He-style scaling for conv stacks feeding ELUs.
template <class T>
Tensor<T> conv_weight(const Shape& s, long fan_in, Rng& rng) {
  return randn<T>(s, rng, std::sqrt(2.0 / static_cast<double>(fan_in)));
}

}  // namespace init

// ---------------------------------------------------------------------------
// Stride-1 convolution layer (causal in time, same-size in frequency).
// ---------------------------------------------------------------------------

template <class T>
struct InplaceConv2dLayer {
  Tensor<T> w;  // [Cout, Cin, kt, kf]
  Tensor<T> b;  // [Cout]
  Conv2dSpec spec;

  void init(long c_out, long c_in, Conv2dSpec s, Rng& rng) {
    spec = s;
    w = init::conv_weight<T>({c_out, c_in, s.kt, s.kf}, c_in * s.kt * s.kf, rng);
    b = Tensor<T>({c_out});
  }

  template <class Ctx>
  typename Ctx::Handle forward(const Ctx& ctx, const typename Ctx::Handle& x) const {
    auto y = conv2d(x, ctx.use(w), ctx.use(b), spec);
    assert(Ctx::val(y).dim(3) == Ctx::val(x).dim(3) && Ctx::val(y).dim(2) == Ctx::val(x).dim(2));
    if (ctx.audit) ctx.audit->push("inplace_conv", Ctx::val(y).shape);
    return y;
  }

  void collect(std::vector<NamedParam<T>>& out, const std::string& prefix) {
    out.push_back({prefix + ".w", &w});
    out.push_back({prefix + ".b", &b});
  }

  long param_count() const { return w.numel() + b.numel(); }

 private:
  // collect() hands out mutable pointers; keep members non-const.
  template <class Ctx>
  typename Ctx::Handle conv2d_use(const Ctx&) const;

 public:
  // use() needs mutable tensors for tape binding
  template <class Ctx>
  friend struct LayerAccess;
};

// use() binds by address, so layers expose their tensors mutably.
#define SICRN_LAYER_USE(ctx, member) (ctx).use(const_cast<Tensor<T>&>(member))

}  // namespace sicrn

namespace sicrn {

// ---------------------------------------------------------------------------
// Pointwise channel-mixing layer.
// ---------------------------------------------------------------------------

template <class T>
struct PointwiseLayer {
  Tensor<T> w;  // [Cout, Cin]
  Tensor<T> b;  // [Cout]

  void init(long c_out, long c_in, Rng& rng, double w_std = -1.0) {
    double std = w_std > 0 ? w_std : std::sqrt(2.0 / static_cast<double>(c_in));
    w = randn<T>({c_out, c_in}, rng, std);
    b = Tensor<T>({c_out});
  }

  template <class Ctx>
  typename Ctx::Handle forward(const Ctx& ctx, const typename Ctx::Handle& x) const {
    auto y = pointwise_conv(x, SICRN_LAYER_USE(ctx, w), SICRN_LAYER_USE(ctx, b));
    if (ctx.audit) ctx.audit->push("pointwise", Ctx::val(y).shape);
    return y;
  }

  void collect(std::vector<NamedParam<T>>& out, const std::string& prefix) {
    out.push_back({prefix + ".w", &w});
    out.push_back({prefix + ".b", &b});
  }

  long param_count() const { return w.numel() + b.numel(); }
};

// ---------------------------------------------------------------------------
// Batch normalization over channels. Training mode normalizes with batch
// statistics over (batch, time, frequency) and updates running estimates;
// inference mode is a frozen per-channel affine map, so it cannot leak
// information across time.
// ---------------------------------------------------------------------------

template <class T>
struct BatchNormLayer {
  Tensor<T> gamma;
  Tensor<T> beta;
  Tensor<T> run_mean;
  Tensor<T> run_var;
  T momentum = T(0.1);
  T eps = T(1e-5);

  void init(long c) {
    gamma = Tensor<T>({c}, T(1));
    beta = Tensor<T>({c});
    run_mean = Tensor<T>({c});
    run_var = Tensor<T>({c}, T(1));
  }

  template <class Ctx>
  typename Ctx::Handle forward(const Ctx& ctx, const typename Ctx::Handle& x) {
    typename Ctx::Handle y = [&] {
      if (ctx.train) {
        auto mean = mean_channels(x);
        auto xc = add_channel(x, neg(mean));
        auto var = mean_channels(square(xc));
        auto one = ctx.lift(Tensor<T>({1}, T(1)));
        auto inv = div(one, sqrt_op(add_const(var, eps)));
        update_running(Ctx::val(mean), Ctx::val(var));
        return add_channel(mul_channel(xc, mul(inv, SICRN_LAYER_USE(ctx, gamma))),
                           SICRN_LAYER_USE(ctx, beta));
      }
      const long c = gamma.numel();
      Tensor<T> scale({c}), shift({c});
      for (long i = 0; i < c; ++i) {
        scale[i] = gamma[i] / static_cast<T>(std::sqrt(static_cast<double>(run_var[i] + eps)));
        shift[i] = beta[i] - run_mean[i] * scale[i];
      }
      return add_channel(mul_channel(x, ctx.lift(std::move(scale))), ctx.lift(std::move(shift)));
    }();
    if (ctx.audit) ctx.audit->push("batchnorm", Ctx::val(y).shape);
    return y;
  }

  void collect(std::vector<NamedParam<T>>& out, const std::string& prefix) {
    out.push_back({prefix + ".gamma", &gamma});
    out.push_back({prefix + ".beta", &beta});
  }

  long param_count() const { return gamma.numel() + beta.numel(); }

 private:
  void update_running(const Tensor<T>& mean, const Tensor<T>& var) {
    for (long i = 0; i < run_mean.numel(); ++i) {
      run_mean[i] = (T(1) - momentum) * run_mean[i] + momentum * mean[i];
      run_var[i] = (T(1) - momentum) * run_var[i] + momentum * var[i];
    }
  }
};

// ---------------------------------------------------------------------------
// Batched per-channel 2-D state-space layer. Parameters live as [C, N] real
// pairs per axis; the bilinear transform and kernel materialization run on
// the tape, so the continuous parameters (including the log step) train.
// The frequency axis runs bidirectionally by default: one causal pass low to
// high plus an independent pass high to low. Time stays one-directional.
// ---------------------------------------------------------------------------

template <class T>
struct SsmAxisParams {
  Tensor<T> a_re, a_im;  // [C, N]
  Tensor<T> b_re, b_im;  // [C, N]
  Tensor<T> c_re, c_im;  // [C, N]
  Tensor<T> log_dt;      // [C]

  void init(long channels, long n, Rng& rng, double dt_min, double dt_max) {
    a_re = Tensor<T>({channels, n});
    a_im = Tensor<T>({channels, n});
    b_re = Tensor<T>({channels, n}, T(1));
    b_im = Tensor<T>({channels, n});
    c_re = Tensor<T>({channels, n});
    c_im = Tensor<T>({channels, n});
    log_dt = Tensor<T>({channels});
    const double pi = 3.14159265358979323846;
    const double cstd = std::sqrt(0.5 / static_cast<double>(n));
    for (long ch = 0; ch < channels; ++ch) {
      for (long i = 0; i < n; ++i) {
        a_re.at(ch, i) = T(-0.5);
        a_im.at(ch, i) = static_cast<T>(pi * static_cast<double>(i));
        c_re.at(ch, i) = static_cast<T>(rng.normal(0.0, cstd));
        c_im.at(ch, i) = static_cast<T>(rng.normal(0.0, cstd));
      }
      log_dt[ch] = static_cast<T>(rng.uniform(std::log(dt_min), std::log(dt_max)));
    }
  }

  // Bilinear transform on the tape (or eagerly), then the fused kernel op.
  template <class Ctx>
  typename Ctx::Handle kernel(const Ctx& ctx, long length) const {
    auto dt = exp_op(SICRN_LAYER_USE(ctx, log_dt));
    auto zr = scale(mul_rows(SICRN_LAYER_USE(ctx, a_re), dt), T(0.5));
    auto zi = scale(mul_rows(SICRN_LAYER_USE(ctx, a_im), dt), T(0.5));
    ComplexPair<typename Ctx::Handle> num{add_const(zr, T(1)), zi};
    ComplexPair<typename Ctx::Handle> den{add_const(neg(zr), T(1)), neg(zi)};
    auto abar = cdiv(num, den);
    ComplexPair<typename Ctx::Handle> bdt{mul_rows(SICRN_LAYER_USE(ctx, b_re), dt),
                                          mul_rows(SICRN_LAYER_USE(ctx, b_im), dt)};
    auto bbar = cdiv(bdt, den);
    return ssm_kernel(abar.re, abar.im, bbar.re, bbar.im, SICRN_LAYER_USE(ctx, c_re),
                      SICRN_LAYER_USE(ctx, c_im), length);
  }

  // Plain-parameter view of one channel, for kernel dumps and oracles.
  ContinuousSSM channel(long ch) const {
    const long n = a_re.dim(1);
    ContinuousSSM p;
    p.a.resize(static_cast<std::size_t>(n));
    p.b.resize(static_cast<std::size_t>(n));
    p.c.resize(static_cast<std::size_t>(n));
    for (long i = 0; i < n; ++i) {
      p.a[static_cast<std::size_t>(i)] = {static_cast<double>(a_re.at(ch, i)),
                                          static_cast<double>(a_im.at(ch, i))};
      p.b[static_cast<std::size_t>(i)] = {static_cast<double>(b_re.at(ch, i)),
                                          static_cast<double>(b_im.at(ch, i))};
      p.c[static_cast<std::size_t>(i)] = {static_cast<double>(c_re.at(ch, i)),
                                          static_cast<double>(c_im.at(ch, i))};
    }
    p.d = 0.0;
    p.log_dt = static_cast<double>(log_dt[ch]);
    return p;
  }

  void collect(std::vector<NamedParam<T>>& out, const std::string& prefix) {
    out.push_back({prefix + ".a_re", &a_re});
    out.push_back({prefix + ".a_im", &a_im});
    out.push_back({prefix + ".b_re", &b_re});
    out.push_back({prefix + ".b_im", &b_im});
    out.push_back({prefix + ".c_re", &c_re});
    out.push_back({prefix + ".c_im", &c_im});
    out.push_back({prefix + ".log_dt", &log_dt});
  }

  long param_count() const {
    return a_re.numel() * 6 + log_dt.numel();
  }
};

template <class T>
struct S4nd2dLayer {
  SsmAxisParams<T> time_axis;
  SsmAxisParams<T> freq_fwd;
  SsmAxisParams<T> freq_bwd;  // unused when unidirectional
  Tensor<T> skip;             // [C]
  bool bidirectional = true;

  void init(long channels, long n_time, long n_freq, bool bidir, Rng& rng, double dt_min = 1e-3,
            double dt_max = 1e-1) {
    bidirectional = bidir;
    time_axis.init(channels, n_time, rng, dt_min, dt_max);
    freq_fwd.init(channels, n_freq, rng, dt_min, dt_max);
    if (bidir) freq_bwd.init(channels, n_freq, rng, dt_min, dt_max);
    skip = Tensor<T>({channels}, T(1));
  }

  template <class Ctx>
  typename Ctx::Handle forward(const Ctx& ctx, const typename Ctx::Handle& x) const {
    const long t = Ctx::val(x).dim(2), f = Ctx::val(x).dim(3);
    auto kt = time_axis.template kernel<Ctx>(ctx, t);
    auto tc = depthwise_conv_time(x, kt, ctx.conv_path);
    auto kf = freq_fwd.template kernel<Ctx>(ctx, f);
    auto y = depthwise_conv_freq(tc, kf);
    if (bidirectional) {
      auto kb = freq_bwd.template kernel<Ctx>(ctx, f);
      y = add(y, flip_freq(depthwise_conv_freq(flip_freq(tc), kb)));
    }
    y = add(y, mul_channel(x, SICRN_LAYER_USE(ctx, skip)));
    if (ctx.audit) ctx.audit->push("s4nd2d", Ctx::val(y).shape);
    return y;
  }

  void collect(std::vector<NamedParam<T>>& out, const std::string& prefix) {
    time_axis.collect(out, prefix + ".time");
    freq_fwd.collect(out, prefix + ".freq_fwd");
    if (bidirectional) freq_bwd.collect(out, prefix + ".freq_bwd");
    out.push_back({prefix + ".skip", &skip});
  }

  long param_count() const {
    return time_axis.param_count() + freq_fwd.param_count() +
           (bidirectional ? freq_bwd.param_count() : 0) + skip.numel();
  }
};

// S4ND block: state-space layer, ELU, channel-mixing linear, residual
// connection, batch normalization.
template <class T>
struct S4ndBlockLayer {
  S4nd2dLayer<T> ssm;
  PointwiseLayer<T> linear;
  BatchNormLayer<T> bn;

  void init(long channels, long n_time, long n_freq, bool bidir, Rng& rng) {
    ssm.init(channels, n_time, n_freq, bidir, rng);
    linear.init(channels, channels, rng);
    bn.init(channels);
  }

  template <class Ctx>
  typename Ctx::Handle forward(const Ctx& ctx, const typename Ctx::Handle& x) {
    auto y = bn.forward(ctx, add(x, linear.forward(ctx, elu(ssm.forward(ctx, x)))));
    assert(Ctx::val(y).dim(3) == Ctx::val(x).dim(3));
    if (ctx.audit) ctx.audit->push("s4nd_block", Ctx::val(y).shape);
    return y;
  }

  void collect(std::vector<NamedParam<T>>& out, const std::string& prefix) {
    ssm.collect(out, prefix + ".ssm");
    linear.collect(out, prefix + ".linear");
    bn.collect(out, prefix + ".bn");
  }

  long param_count() const { return ssm.param_count() + linear.param_count() + bn.param_count(); }
};

enum class GlobalBranch { s4nd, inplace };

// ---------------------------------------------------------------------------
// SIC block. The input's first half of channels feeds a three-layer inplace
// convolution trunk shared by two pointwise heads (original features and
// attention logits); the second half feeds the global branch. A sigmoid of
// (attention logits + global features) gates the original features, halving
// the channel count.
// ---------------------------------------------------------------------------

template <class T>
struct SicBlockLayer {
  long width = 0;
  std::vector<InplaceConv2dLayer<T>> ic_stack;  // 3 layers, width -> width
  PointwiseLayer<T> head_feat;
  PointwiseLayer<T> head_attn;
  std::vector<S4ndBlockLayer<T>> s4nd_stack;          // 4 blocks (global branch)
  std::vector<InplaceConv2dLayer<T>> inplace_stack;   // ablation global branch
  GlobalBranch global_branch = GlobalBranch::s4nd;

  void init(long w, Conv2dSpec spec, long n_time, long n_freq, bool bidir, GlobalBranch branch,
            Rng& rng) {
    width = w;
    global_branch = branch;
    ic_stack.resize(3);
    for (auto& l : ic_stack) l.init(w, w, spec, rng);
    head_feat.init(w, w, rng);
    head_attn.init(w, w, rng);
    if (branch == GlobalBranch::s4nd) {
      s4nd_stack.resize(4);
      for (auto& blk : s4nd_stack) blk.init(w, n_time, n_freq, bidir, rng);
    } else {
      inplace_stack.resize(4);
      for (auto& l : inplace_stack) l.init(w, w, spec, rng);
    }
  }

  template <class Ctx>
  typename Ctx::Handle forward(const Ctx& ctx, const typename Ctx::Handle& x) {
    require_arg(Ctx::val(x).dim(1) == 2 * width,
                "sic block: input channels " + std::to_string(Ctx::val(x).dim(1)) +
                    " != 2 * width " + std::to_string(width));
    auto local_in = slice_channels(x, 0, width);
    auto global_in = slice_channels(x, width, 2 * width);

    // Shared trunk with ELU between the three convolutions.
    auto trunk = ic_stack[0].forward(ctx, local_in);
    trunk = ic_stack[1].forward(ctx, elu(trunk));
    trunk = ic_stack[2].forward(ctx, elu(trunk));

    auto feats = head_feat.forward(ctx, trunk);
    auto attn_logits = head_attn.forward(ctx, trunk);

    typename Ctx::Handle global_feats = [&] {
      if (global_branch == GlobalBranch::s4nd) {
        auto g = global_in;
        for (auto& blk : s4nd_stack) g = blk.forward(ctx, g);
        return g;
      }
      auto g = global_in;
      for (std::size_t i = 0; i < inplace_stack.size(); ++i) {
        g = inplace_stack[i].forward(ctx, g);
        if (i + 1 < inplace_stack.size()) g = elu(g);
      }
      return g;
    }();

    auto attn = sigmoid(add(attn_logits, global_feats));
    auto y = mul(feats, attn);
    assert(Ctx::val(y).dim(1) == width && Ctx::val(y).dim(3) == Ctx::val(x).dim(3));
    if (ctx.audit) ctx.audit->push("sic_block", Ctx::val(y).shape);
    return y;
  }

  void collect(std::vector<NamedParam<T>>& out, const std::string& prefix) {
    for (std::size_t i = 0; i < ic_stack.size(); ++i)
      ic_stack[i].collect(out, prefix + ".ic" + std::to_string(i));
    head_feat.collect(out, prefix + ".head_feat");
    head_attn.collect(out, prefix + ".head_attn");
    for (std::size_t i = 0; i < s4nd_stack.size(); ++i)
      s4nd_stack[i].collect(out, prefix + ".s4nd" + std::to_string(i));
    for (std::size_t i = 0; i < inplace_stack.size(); ++i)
      inplace_stack[i].collect(out, prefix + ".gic" + std::to_string(i));
  }

  long param_count() const {
    long n = head_feat.param_count() + head_attn.param_count();
    for (const auto& l : ic_stack) n += l.param_count();
    for (const auto& blk : s4nd_stack) n += blk.param_count();
    for (const auto& l : inplace_stack) n += l.param_count();
    return n;
  }
};

// ---------------------------------------------------------------------------
// LSTM. Gate layout in the packed weights is (input, forget, cell, output);
// the forget-gate bias starts at one. Strictly causal by construction.
// ---------------------------------------------------------------------------

template <class T>
struct LstmLayer {
  Tensor<T> w_ih;  // [4H, D]
  Tensor<T> w_hh;  // [4H, H]
  Tensor<T> bias;  // [4H]
  long hidden = 0;

  void init(long d_in, long h, Rng& rng) {
    hidden = h;
    const double bound = 1.0 / std::sqrt(static_cast<double>(h));
    w_ih = rand_uniform<T>({4 * h, d_in}, rng, -bound, bound);
    w_hh = rand_uniform<T>({4 * h, h}, rng, -bound, bound);
    bias = Tensor<T>({4 * h});
    for (long i = h; i < 2 * h; ++i) bias[i] = T(1);
  }

  // x: [B, T, D] -> [B, T, H]
  template <class Ctx>
  typename Ctx::Handle forward(const Ctx& ctx, const typename Ctx::Handle& x) const {
    const long b = Ctx::val(x).dim(0), t = Ctx::val(x).dim(1), d = Ctx::val(x).dim(2);
    const long h = hidden;
    // One big input projection for all steps, then the sequential recurrence.
    auto flat = reshape_any(ctx, x, {b * t, d});
    auto xw = add_row(matmul_nt(flat, SICRN_LAYER_USE(ctx, w_ih)), SICRN_LAYER_USE(ctx, bias));
    auto xw3 = reshape_any(ctx, xw, {b, t, 4 * h});
    auto hh = ctx.lift(Tensor<T>({b, h}));
    auto cc = ctx.lift(Tensor<T>({b, h}));
    std::vector<typename Ctx::Handle> outs;
    outs.reserve(static_cast<std::size_t>(t));
    for (long step = 0; step < t; ++step) {
      auto z = add(time_slice(xw3, step), matmul_nt(hh, SICRN_LAYER_USE(ctx, w_hh)));
      auto ig = sigmoid(col_slice(z, 0, h));
      auto fg = sigmoid(col_slice(z, h, 2 * h));
      auto gg = tanh_op(col_slice(z, 2 * h, 3 * h));
      auto og = sigmoid(col_slice(z, 3 * h, 4 * h));
      cc = add(mul(fg, cc), mul(ig, gg));
      hh = mul(og, tanh_op(cc));
      outs.push_back(hh);
    }
    return stack_time(outs);
  }

  void collect(std::vector<NamedParam<T>>& out, const std::string& prefix) {
    out.push_back({prefix + ".w_ih", &w_ih});
    out.push_back({prefix + ".w_hh", &w_hh});
    out.push_back({prefix + ".bias", &bias});
  }

  long param_count() const { return w_ih.numel() + w_hh.numel() + bias.numel(); }

 private:
  template <class Ctx>
  static typename Ctx::Handle reshape_any(const Ctx&, const typename Ctx::Handle& h, Shape s) {
    if constexpr (std::is_same_v<typename Ctx::Handle, Tensor<T>>) {
      return h.reshaped(std::move(s));
    } else {
      return reshape(h, std::move(s));
    }
  }
};

template <class T>
struct LstmStackLayer {
  std::vector<LstmLayer<T>> layers;

  void init(long d_in, long hidden, long n_layers, Rng& rng) {
    layers.resize(static_cast<std::size_t>(n_layers));
    long d = d_in;
    for (auto& l : layers) {
      l.init(d, hidden, rng);
      d = hidden;
    }
  }

  template <class Ctx>
  typename Ctx::Handle forward(const Ctx& ctx, const typename Ctx::Handle& x) const {
    auto y = x;
    for (const auto& l : layers) y = l.forward(ctx, y);
    return y;
  }

  void collect(std::vector<NamedParam<T>>& out, const std::string& prefix) {
    for (std::size_t i = 0; i < layers.size(); ++i)
      layers[i].collect(out, prefix + ".l" + std::to_string(i));
  }

  long param_count() const {
    long n = 0;
    for (const auto& l : layers) n += l.param_count();
    return n;
  }
};

}  // namespace sicrn
