#include <doctest.h>

#include <cmath>
#include <complex>

#include "sicrn/ssm.hpp"
#include "test_util.hpp"

using namespace sicrn;

namespace {

ContinuousSSM random_stable(long n, Rng& rng) {
  ContinuousSSM p;
  p.a.resize(static_cast<std::size_t>(n));
  p.b.resize(static_cast<std::size_t>(n));
  p.c.resize(static_cast<std::size_t>(n));
  for (long i = 0; i < n; ++i) {
    p.a[static_cast<std::size_t>(i)] = {-(0.05 + 2.0 * rng.uniform()), 4.0 * rng.normal()};
    p.b[static_cast<std::size_t>(i)] = {rng.normal(), rng.normal()};
    p.c[static_cast<std::size_t>(i)] = {rng.normal(), rng.normal()};
  }
  p.d = rng.normal();
  p.log_dt = rng.uniform(std::log(1e-2), std::log(0.5));
  return p;
}

}  // namespace

TEST_CASE("discretize: zero eigenvalue maps to exactly one") {
  ContinuousSSM p;
  p.a = {{0.0, 0.0}};
  p.b = {{1.0, 0.0}};
  p.c = {{1.0, 0.0}};
  p.log_dt = std::log(0.1);
  DiscreteSSM d = discretize(p);
  CHECK(d.a_bar[0].real() == 1.0);
  CHECK(d.a_bar[0].imag() == 0.0);
}

TEST_CASE("discretize: scalar example a=-1, dt=0.1") {
  ContinuousSSM p;
  p.a = {{-1.0, 0.0}};
  p.b = {{1.0, 0.0}};
  p.c = {{1.0, 0.0}};
  p.log_dt = std::log(0.1);
  DiscreteSSM d = discretize(p);
  CHECK(d.a_bar[0].real() == doctest::Approx(0.95 / 1.05).epsilon(1e-12));
  CHECK(d.a_bar[0].imag() == doctest::Approx(0.0));
  // Bbar = dt*B / (1 - dt/2 a) = 0.1/1.05
  CHECK(d.b_bar[0].real() == doctest::Approx(0.1 / 1.05).epsilon(1e-12));
}

TEST_CASE("discretize: left half-plane maps into the unit disk (1000 draws)") {
  Rng rng(41);
  for (int it = 0; it < 1000; ++it) {
    ContinuousSSM p = random_stable(4, rng);
    DiscreteSSM d = discretize(p);
    for (const auto& a : d.a_bar) CHECK(std::abs(a) < 1.0);
  }
}

TEST_CASE("step_recurrent: fixed point at zero") {
  Rng rng(43);
  ContinuousSSM p = random_stable(3, rng);
  DiscreteSSM d = discretize(p);
  std::vector<std::complex<double>> state(3, {0.0, 0.0});
  auto [next, y] = step_recurrent(d, state, 0.0, p.d);
  CHECK(y == 0.0);
  for (const auto& s : next) {
    CHECK(s.real() == 0.0);
    CHECK(s.imag() == 0.0);
  }
}

TEST_CASE("step_recurrent: scalar geometric response") {
  DiscreteSSM d;
  d.a_bar = {{0.5, 0.0}};
  d.b_bar = {{1.0, 0.0}};
  d.c_bar = {{1.0, 0.0}};
  std::vector<double> u = {1.0, 0.0, 0.0};
  auto y = rollout_recurrent(d, 0.0, u);
  CHECK(y[0] == doctest::Approx(1.0));
  CHECK(y[1] == doctest::Approx(0.5));
  CHECK(y[2] == doctest::Approx(0.25));
}

TEST_CASE("step_recurrent rejects non-finite state") {
  DiscreteSSM d;
  d.a_bar = {{0.5, 0.0}};
  d.b_bar = {{1.0, 0.0}};
  d.c_bar = {{1.0, 0.0}};
  std::vector<std::complex<double>> state = {{std::nan(""), 0.0}};
  CHECK_THROWS_AS(step_recurrent(d, state, 1.0, 0.0), NumericError);
}

TEST_CASE("materialize_kernel: geometric series") {
  DiscreteSSM d;
  d.a_bar = {{0.5, 0.0}};
  d.b_bar = {{1.0, 0.0}};
  d.c_bar = {{1.0, 0.0}};
  SSMKernel k = materialize_kernel(d, 4);
  CHECK(k.k[0] == doctest::Approx(1.0));
  CHECK(k.k[1] == doctest::Approx(0.5));
  CHECK(k.k[2] == doctest::Approx(0.25));
  CHECK(k.k[3] == doctest::Approx(0.125));
}

TEST_CASE("materialize_kernel: length one returns the first tap") {
  Rng rng(47);
  ContinuousSSM p = random_stable(5, rng);
  DiscreteSSM d = discretize(p);
  SSMKernel k = materialize_kernel(d, 1);
  std::complex<double> acc{0.0, 0.0};
  for (std::size_t i = 0; i < d.c_bar.size(); ++i) acc += d.c_bar[i] * d.b_bar[i];
  CHECK(k.k[0] == doctest::Approx(acc.real()).epsilon(1e-12));
}

TEST_CASE("apply_conv: impulse response is the kernel plus the skip tap") {
  Rng rng(53);
  ContinuousSSM p = random_stable(4, rng);
  DiscreteSSM d = discretize(p);
  std::vector<double> delta(32, 0.0);
  delta[0] = 1.0;
  auto y = apply_conv(d, p.d, delta);
  SSMKernel k = materialize_kernel(d, 32);
  CHECK(std::abs(y[0] - (k.k[0] + p.d)) < 1e-10);
  for (std::size_t t = 1; t < y.size(); ++t) CHECK(std::abs(y[t] - k.k[t]) < 1e-10);
}

TEST_CASE("apply_conv: pure skip path when the state path is zero") {
  ContinuousSSM p;
  p.a = {{-1.0, 0.0}};
  p.b = {{0.0, 0.0}};
  p.c = {{0.0, 0.0}};
  p.d = 1.0;
  p.log_dt = std::log(0.1);
  DiscreteSSM d = discretize(p);
  Rng rng(59);
  auto u = testutil::random_real_vec(64, rng);
  auto y = apply_conv(d, p.d, u);
  CHECK(testutil::max_err(y, u) < 1e-12);
}

TEST_CASE("recurrent and convolutional paths agree") {
  Rng rng(61);
  double worst = 0.0;
  for (int it = 0; it < 100; ++it) {
    long n = 1 + static_cast<long>(rng.below(16));
    long len = 8 + static_cast<long>(rng.below(505));
    ContinuousSSM p = random_stable(n, rng);
    DiscreteSSM d = discretize(p);
    auto u = testutil::random_real_vec(len, rng);
    auto yr = rollout_recurrent(d, p.d, u);
    auto yc = apply_conv(d, p.d, u);
    worst = std::max(worst, testutil::max_err(yr, yc));
  }
  CHECK(worst < 1e-8);
}

TEST_CASE("kernel decay bound") {
  Rng rng(67);
  for (int it = 0; it < 20; ++it) {
    ContinuousSSM p = random_stable(6, rng);
    DiscreteSSM d = discretize(p);
    double rho = 0.0, cb = 0.0;
    for (std::size_t i = 0; i < d.a_bar.size(); ++i) {
      rho = std::max(rho, std::abs(d.a_bar[i]));
      cb = std::max(cb, std::abs(d.c_bar[i] * d.b_bar[i]));
    }
    SSMKernel k = materialize_kernel(d, 128);
    double bound_scale = static_cast<double>(d.state_size()) * cb;
    for (long t = 0; t < 128; ++t) {
      CHECK(std::abs(k.k[static_cast<std::size_t>(t)]) <=
            bound_scale * std::pow(rho, static_cast<double>(t)) + 1e-12);
    }
  }
}

TEST_CASE("apply_conv is linear") {
  Rng rng(71);
  ContinuousSSM p = random_stable(4, rng);
  DiscreteSSM d = discretize(p);
  auto u = testutil::random_real_vec(100, rng);
  auto y1 = apply_conv(d, p.d, u);
  std::vector<double> u2(u.size());
  for (std::size_t i = 0; i < u.size(); ++i) u2[i] = 3.25 * u[i];
  auto y2 = apply_conv(d, p.d, u2);
  for (std::size_t i = 0; i < u.size(); ++i) CHECK(std::abs(y2[i] - 3.25 * y1[i]) < 1e-10);
}

TEST_CASE("recurrent path is strictly causal bit-exactly") {
  Rng rng(73);
  ContinuousSSM p = random_stable(5, rng);
  DiscreteSSM d = discretize(p);
  auto u = testutil::random_real_vec(64, rng);
  auto y = rollout_recurrent(d, p.d, u);
  auto u2 = u;
  for (std::size_t t = 33; t < u2.size(); ++t) u2[t] += rng.normal();
  auto y2 = rollout_recurrent(d, p.d, u2);
  for (std::size_t t = 0; t <= 32; ++t) CHECK(y[t] == y2[t]);
}

TEST_CASE("init_s4d_lin: construction invariants") {
  Rng rng(79);
  ContinuousSSM p = init_s4d_lin(8, rng);
  for (const auto& a : p.a) CHECK(a.real() == -0.5);
  DiscreteSSM d = discretize(p);
  for (const auto& a : d.a_bar) CHECK(std::abs(a) < 1.0);
  SSMKernel k = materialize_kernel(d, 4096);
  double energy = 0.0;
  for (double v : k.k) energy += v * v;
  CHECK(std::isfinite(energy));
}

TEST_CASE("init_s4d_lin rejects odd state sizes") {
  Rng rng(83);
  CHECK_THROWS_AS(init_s4d_lin(7, rng), ArgumentError);
}

TEST_CASE("taped kernel matches plain materialization") {
  Rng rng(89);
  const long n = 4, len = 24;
  ContinuousSSM p = random_stable(n, rng);
  DiscreteSSM d = discretize(p);
  Tensor<double> ar({1, n}), ai({1, n}), br({1, n}), bi({1, n}), cr({1, n}), ci({1, n});
  for (long i = 0; i < n; ++i) {
    ar.at(0, i) = d.a_bar[static_cast<std::size_t>(i)].real();
    ai.at(0, i) = d.a_bar[static_cast<std::size_t>(i)].imag();
    br.at(0, i) = d.b_bar[static_cast<std::size_t>(i)].real();
    bi.at(0, i) = d.b_bar[static_cast<std::size_t>(i)].imag();
    cr.at(0, i) = d.c_bar[static_cast<std::size_t>(i)].real();
    ci.at(0, i) = d.c_bar[static_cast<std::size_t>(i)].imag();
  }
  Tensor<double> k = ssm_kernel(ar, ai, br, bi, cr, ci, len);
  SSMKernel ref = materialize_kernel(d, len);
  for (long t = 0; t < len; ++t)
    CHECK(k.at(0, t) == doctest::Approx(ref.k[static_cast<std::size_t>(t)]).epsilon(1e-12));
}
