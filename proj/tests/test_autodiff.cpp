#include <doctest.h>

#include <cmath>

#include "sicrn/autodiff.hpp"
#include "sicrn/nn_ops.hpp"
#include "sicrn/ssm.hpp"
#include "test_util.hpp"

using namespace sicrn;

namespace {

Tensor<double> rand_t(const Shape& s, Rng& rng, double scale = 1.0) {
  return randn<double>(s, rng, scale);
}

}  // namespace

TEST_CASE("y = x*x has gradient 2x") {
  Tensor<double> x({1}, std::vector<double>{3.0});
  Tape<double> tape;
  Var<double> vx = tape.param(x);
  Var<double> y = mul(vx, vx);
  tape.backward(y);
  CHECK(vx.grad()[0] == doctest::Approx(6.0));
}

TEST_CASE("sigmoid at zero: value 0.5, gradient 0.25") {
  Tensor<double> x({1}, std::vector<double>{0.0});
  Tape<double> tape;
  Var<double> vx = tape.param(x);
  Var<double> y = sum_all(sigmoid(vx));
  CHECK(sigmoid(x)[0] == doctest::Approx(0.5));
  tape.backward(y);
  CHECK(vx.grad()[0] == doctest::Approx(0.25));
}

TEST_CASE("unreachable parameters keep zero gradients") {
  Tensor<double> x({3}, 1.0);
  Tensor<double> p({2}, 5.0);
  Tape<double> tape;
  Var<double> vx = tape.param(x);
  Var<double> vp = tape.param(p);
  Var<double> loss = sum_all(square(vx));
  tape.backward(loss);
  for (long i = 0; i < 2; ++i) CHECK(vp.grad()[i] == 0.0);
  CHECK(vx.grad()[0] == doctest::Approx(2.0));
}

TEST_CASE("fan-out accumulates: y = x + x") {
  Tensor<double> x({1}, std::vector<double>{1.5});
  Tape<double> tape;
  Var<double> vx = tape.param(x);
  Var<double> y = add(vx, vx);
  tape.backward(y);
  CHECK(vx.grad()[0] == doctest::Approx(2.0));
}

TEST_CASE("mixed-tape inputs are rejected") {
  Tensor<double> a({2}, 1.0), b({2}, 2.0);
  Tape<double> t1, t2;
  Var<double> va = t1.param(a);
  Var<double> vb = t2.param(b);
  CHECK_THROWS_AS(add(va, vb), UsageError);
}

TEST_CASE("backward requires a scalar loss") {
  Tensor<double> a({3}, 1.0);
  Tape<double> tape;
  Var<double> va = tape.param(a);
  Var<double> y = square(va);
  CHECK_THROWS_AS(tape.backward(y), UsageError);
}

TEST_CASE("backward is deterministic") {
  Rng rng(3);
  Tensor<double> x = rand_t({4, 6}, rng);
  Tensor<double> w = rand_t({5, 6}, rng);
  auto run = [&]() {
    Tape<double> tape;
    Var<double> vx = tape.param(x);
    Var<double> vw = tape.param(w);
    Var<double> y = sum_all(tanh_op(matmul_nt(vx, vw)));
    tape.backward(y);
    return std::make_pair(vx.grad(), vw.grad());
  };
  auto [g1x, g1w] = run();
  auto [g2x, g2w] = run();
  for (long i = 0; i < g1x.numel(); ++i) CHECK(g1x[i] == g2x[i]);
  for (long i = 0; i < g1w.numel(); ++i) CHECK(g1w[i] == g2w[i]);
}

TEST_CASE("gradient accumulation across summed losses is additive") {
  Rng rng(5);
  Tensor<double> x = rand_t({6}, rng);
  auto grad_of = [&](int which) {
    Tape<double> tape;
    Var<double> vx = tape.param(x);
    Var<double> l1 = sum_all(square(vx));
    Var<double> l2 = sum_all(elu(vx));
    Var<double> loss = which == 0 ? l1 : (which == 1 ? l2 : add(l1, l2));
    tape.backward(loss);
    return vx.grad();
  };
  Tensor<double> g1 = grad_of(0), g2 = grad_of(1), gs = grad_of(2);
  for (long i = 0; i < x.numel(); ++i)
    CHECK(std::abs(gs[i] - (g1[i] + g2[i])) < 1e-12);
}

// --- per-primitive FD sweep -------------------------------------------------

namespace {

template <class F>
void expect_fd(F f, std::vector<Tensor<double>*> params, double tol = 1e-5) {
  FdReport rep = grad_check<double>(f, params, 1e-6, tol);
  CAPTURE(rep.worst);
  CAPTURE(rep.worst_param);
  CHECK(rep.pass);
}

}  // namespace

TEST_CASE("FD: elementwise binary ops") {
  for (int it = 0; it < 10; ++it) {
    Rng rng(100 + it);
    Tensor<double> a = rand_t({3, 4}, rng);
    Tensor<double> b = rand_t({3, 4}, rng);
    for (long i = 0; i < b.numel(); ++i) b[i] += (b[i] >= 0 ? 2.0 : -2.0);  // keep div away from 0
    Tensor<double> s({1}, std::vector<double>{rng.normal() + 3.0});
    expect_fd(
        [&](Tape<double>& tp) {
          Var<double> va = tp.param(a);
          Var<double> vb = tp.param(b);
          Var<double> vs = tp.param(s);
          Var<double> t1 = add(va, vb);
          Var<double> t2 = sub(t1, mul(va, vb));
          Var<double> t3 = div(t2, vb);
          Var<double> t4 = mul(t3, vs);  // scalar broadcast
          return sum_all(t4);
        },
        {&a, &b, &s});
  }
}

TEST_CASE("FD: unary ops") {
  for (int it = 0; it < 10; ++it) {
    Rng rng(200 + it);
    Tensor<double> a = rand_t({12}, rng);
    for (long i = 0; i < a.numel(); ++i)
      if (std::abs(a[i]) < 0.05) a[i] += 0.2;  // keep clear of the elu kink
    Tensor<double> b = rand_t({12}, rng);
    for (long i = 0; i < b.numel(); ++i) b[i] = std::abs(b[i]) + 0.5;  // sqrt/log domain
    expect_fd(
        [&](Tape<double>& tp) {
          Var<double> va = tp.param(a);
          Var<double> vb = tp.param(b);
          Var<double> y = sum_all(elu(va));
          y = add(y, sum_all(sigmoid(va)));
          y = add(y, sum_all(tanh_op(va)));
          y = add(y, sum_all(exp_op(scale(va, 0.3))));
          y = add(y, sum_all(log10_op(vb)));
          y = add(y, sum_all(sqrt_op(vb)));
          y = add(y, sum_all(square(va)));
          y = add(y, sum_all(neg(add_const(va, 1.0))));
          return y;
        },
        {&a, &b});
  }
}

TEST_CASE("FD: reductions and broadcasts") {
  for (int it = 0; it < 10; ++it) {
    Rng rng(300 + it);
    Tensor<double> x = rand_t({2, 3, 4, 5}, rng);
    Tensor<double> v = rand_t({3}, rng);
    Tensor<double> r = rand_t({4, 6}, rng);
    Tensor<double> rs = rand_t({4}, rng);
    expect_fd(
        [&](Tape<double>& tp) {
          Var<double> vx = tp.param(x);
          Var<double> vv = tp.param(v);
          Var<double> vr = tp.param(r);
          Var<double> vrs = tp.param(rs);
          Var<double> y = sum_all(mul_channel(add_channel(vx, vv), vv));
          y = add(y, sum_all(mean_channels(vx)));
          y = add(y, mean_all(vx));
          y = add(y, sum_all(mul_rows(vr, vrs)));
          y = add(y, sum_all(row_sum(vr)));
          return y;
        },
        {&x, &v, &r, &rs});
  }
}

TEST_CASE("FD: matmul family") {
  for (int it = 0; it < 10; ++it) {
    Rng rng(400 + it);
    Tensor<double> a = rand_t({3, 4}, rng);
    Tensor<double> b = rand_t({4, 5}, rng);
    Tensor<double> w = rand_t({5, 4}, rng);
    Tensor<double> bias = rand_t({5}, rng);
    expect_fd(
        [&](Tape<double>& tp) {
          Var<double> va = tp.param(a);
          Var<double> vb = tp.param(b);
          Var<double> vw = tp.param(w);
          Var<double> vbias = tp.param(bias);
          Var<double> y = sum_all(tanh_op(matmul(va, vb)));
          y = add(y, sum_all(add_row(matmul_nt(va, vw), vbias)));
          return y;
        },
        {&a, &b, &w, &bias});
  }
}

TEST_CASE("FD: shape ops") {
  for (int it = 0; it < 10; ++it) {
    Rng rng(500 + it);
    Tensor<double> x = rand_t({2, 4, 3, 5}, rng);
    Tensor<double> z = rand_t({2, 6, 7}, rng);
    expect_fd(
        [&](Tape<double>& tp) {
          Var<double> vx = tp.param(x);
          Var<double> vz = tp.param(z);
          Var<double> lo = slice_channels(vx, 0, 2);
          Var<double> hi = slice_channels(vx, 2, 4);
          Var<double> y = sum_all(mul(lo, hi));
          y = add(y, sum_all(square(concat_channels(hi, lo))));
          y = add(y, sum_all(flip_freq(vx)));
          y = add(y, sum_all(permute_bctf_to_btcf(square(vx))));
          y = add(y, sum_all(reshape(vx, {8, 15})));
          Var<double> st = time_slice(vz, 3);
          y = add(y, sum_all(square(st)));
          y = add(y, sum_all(col_slice(st, 2, 5)));
          std::vector<Var<double>> steps{time_slice(vz, 0), time_slice(vz, 1)};
          y = add(y, sum_all(elu(stack_time(steps))));
          return y;
        },
        {&x, &z});
  }
}

TEST_CASE("FD: conv2d") {
  for (int it = 0; it < 10; ++it) {
    Rng rng(600 + it);
    Conv2dSpec spec{2, 3};
    Tensor<double> x = rand_t({1, 2, 4, 5}, rng, 0.5);
    Tensor<double> w = rand_t({3, 2, 2, 3}, rng, 0.5);
    Tensor<double> b = rand_t({3}, rng, 0.5);
    expect_fd(
        [&](Tape<double>& tp) {
          Var<double> y = conv2d(tp.param(x), tp.param(w), tp.param(b), spec);
          return sum_all(square(add_const(y, 1.0)));
        },
        {&x, &w, &b});
  }
}

TEST_CASE("FD: pointwise conv") {
  for (int it = 0; it < 10; ++it) {
    Rng rng(620 + it);
    Tensor<double> x = rand_t({2, 3, 3, 4}, rng, 0.5);
    Tensor<double> w = rand_t({2, 3}, rng, 0.5);
    Tensor<double> b = rand_t({2}, rng, 0.5);
    expect_fd(
        [&](Tape<double>& tp) {
          Var<double> y = pointwise_conv(tp.param(x), tp.param(w), tp.param(b));
          return sum_all(square(add_const(y, 1.0)));
        },
        {&x, &w, &b});
  }
}

TEST_CASE("FD: depthwise time conv, direct path") {
  for (int it = 0; it < 10; ++it) {
    Rng rng(640 + it);
    Tensor<double> x = rand_t({1, 2, 6, 4}, rng, 0.5);
    Tensor<double> k = rand_t({2, 6}, rng, 0.5);
    expect_fd(
        [&](Tape<double>& tp) {
          Var<double> y = depthwise_conv_time(tp.param(x), tp.param(k), ConvPath::direct);
          return sum_all(square(add_const(y, 1.0)));
        },
        {&x, &k});
  }
}

TEST_CASE("FD: depthwise freq conv") {
  for (int it = 0; it < 10; ++it) {
    Rng rng(680 + it);
    Tensor<double> x = rand_t({1, 2, 3, 7}, rng, 0.5);
    Tensor<double> k = rand_t({2, 7}, rng, 0.5);
    expect_fd(
        [&](Tape<double>& tp) {
          Var<double> y = depthwise_conv_freq(tp.param(x), tp.param(k));
          return sum_all(square(add_const(y, 1.0)));
        },
        {&x, &k});
  }
}

TEST_CASE("FD: depthwise time conv, FFT path") {
  for (int it = 0; it < 5; ++it) {
    Rng rng(650 + it);
    Tensor<double> x = rand_t({1, 2, 9, 4}, rng);
    Tensor<double> k = rand_t({2, 9}, rng, 0.5);
    expect_fd(
        [&](Tape<double>& tp) {
          Var<double> vx = tp.param(x);
          Var<double> vk = tp.param(k);
          return sum_all(square(depthwise_conv_time(vx, vk, ConvPath::fft)));
        },
        {&x, &k});
  }
}

TEST_CASE("depthwise time conv: FFT and direct paths agree") {
  Rng rng(660);
  Tensor<double> x = rand_t({2, 3, 40, 5}, rng);
  Tensor<double> k = rand_t({3, 40}, rng);
  Tensor<double> a = depthwise_conv_time(x, k, ConvPath::direct);
  Tensor<double> b = depthwise_conv_time(x, k, ConvPath::fft);
  CHECK(max_abs_diff(a, b) < 1e-10);
}

TEST_CASE("FD: fused state-space kernel op") {
  for (int it = 0; it < 10; ++it) {
    Rng rng(700 + it);
    Tensor<double> ar = rand_t({2, 3}, rng, 0.3);
    for (long i = 0; i < ar.numel(); ++i) ar[i] = -std::abs(ar[i]) - 0.1;
    Tensor<double> ai = rand_t({2, 3}, rng, 0.5);
    Tensor<double> br = rand_t({2, 3}, rng);
    Tensor<double> bi = rand_t({2, 3}, rng);
    Tensor<double> cr = rand_t({2, 3}, rng);
    Tensor<double> ci = rand_t({2, 3}, rng);
    expect_fd(
        [&](Tape<double>& tp) {
          Var<double> k = ssm_kernel(tp.param(ar), tp.param(ai), tp.param(br), tp.param(bi),
                                     tp.param(cr), tp.param(ci), 7);
          return sum_all(square(k));
        },
        {&ar, &ai, &br, &bi, &cr, &ci});
  }
}

TEST_CASE("FD: loss through fft -> |.|^2 -> sum") {
  for (int it = 0; it < 5; ++it) {
    Rng rng(800 + it);
    Tensor<double> re = rand_t({12}, rng);
    Tensor<double> im = rand_t({12}, rng);
    expect_fd(
        [&](Tape<double>& tp) {
          ComplexPair<Var<double>> x{tp.param(re), tp.param(im)};
          auto y = fft_taped(x);
          return sum_all(add(square(y.re), square(y.im)));
        },
        {&re, &im}, 1e-6);
  }
}

TEST_CASE("FD: loss through ifft") {
  Rng rng(850);
  Tensor<double> re = rand_t({10}, rng);
  Tensor<double> im = rand_t({10}, rng);
  expect_fd(
      [&](Tape<double>& tp) {
        ComplexPair<Var<double>> x{tp.param(re), tp.param(im)};
        auto y = ifft_taped(x);
        return sum_all(add(square(y.re), square(y.im)));
      },
      {&re, &im}, 1e-6);
}

TEST_CASE("taped fft round trip reproduces the input") {
  Rng rng(860);
  Tensor<double> re = rand_t({30}, rng);
  Tensor<double> im = rand_t({30}, rng);
  Tape<double> tp;
  ComplexPair<Var<double>> x{tp.param(re), tp.param(im)};
  auto y = ifft_taped(fft_taped(x));
  CHECK(max_abs_diff(y.re.value(), re) < 1e-12);
  CHECK(max_abs_diff(y.im.value(), im) < 1e-12);
}

// --- grad_check utility contract ---------------------------------------------

TEST_CASE("grad_check: linear function is exact") {
  Rng rng(900);
  Tensor<double> x = rand_t({8}, rng);
  FdReport rep = grad_check<double>(
      [&](Tape<double>& tp) { return sum_all(tp.param(x)); }, {&x}, 1e-6, 1e-9);
  CHECK(rep.pass);
  CHECK(rep.worst < 1e-9);
}

TEST_CASE("grad_check: elu away from the kink") {
  Rng rng(901);
  Tensor<double> x = rand_t({10}, rng);
  for (long i = 0; i < x.numel(); ++i)
    if (std::abs(x[i]) < 0.2) x[i] += 0.5;
  FdReport rep = grad_check<double>(
      [&](Tape<double>& tp) { return sum_all(elu(tp.param(x))); }, {&x}, 1e-6, 1e-7);
  CHECK(rep.pass);
}

TEST_CASE("grad_check: complex-mul mask application") {
  Rng rng(902);
  // Values bounded away from zero keep every gradient component O(1), so the
  // comparison probes the pullback rather than finite-difference noise.
  Tensor<double> mr = rand_uniform<double>({9}, rng, 0.5, 1.5);
  Tensor<double> mi = rand_uniform<double>({9}, rng, 0.5, 1.5);
  Tensor<double> xr = rand_uniform<double>({9}, rng, 0.5, 1.5);
  Tensor<double> xi = rand_uniform<double>({9}, rng, 0.5, 1.5);
  FdReport rep = grad_check<double>(
      [&](Tape<double>& tp) {
        ComplexPair<Var<double>> m{tp.param(mr), tp.param(mi)};
        ComplexPair<Var<double>> x{tp.param(xr), tp.param(xi)};
        auto y = cmul(m, x);
        return sum_all(add(square(y.re), square(y.im)));
      },
      {&mr, &mi, &xr, &xi}, 1e-6, 1e-6);
  CHECK(rep.pass);
}

TEST_CASE("grad_check: non-finite output names the parameter") {
  Tensor<double> x({2}, std::vector<double>{-1.0, 2.0});
  CHECK_THROWS_AS(grad_check<double>(
                      [&](Tape<double>& tp) { return sum_all(log10_op(tp.param(x))); }, {&x},
                      1e-6, 1e-5),
                  NumericError);
}
