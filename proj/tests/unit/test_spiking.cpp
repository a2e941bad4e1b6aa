#include <cmath>

#include "../oracle/reference.hpp"
#include "doctest.h"
#include "ems/error.hpp"
#include "ems/ops.hpp"
#include "ems/random.hpp"
#include "ems/spiking.hpp"

using namespace ems;

namespace {
Tensor column(std::vector<float> v) {
  const auto n = static_cast<int64_t>(v.size());
  return Tensor({n, 1, 1, 1}, std::move(v));
}
}  // namespace

TEST_CASE("LIF hand-iterated trace") {
  LIFConfig cfg;
  LIFState s = lif_forward(column({0.3f, 0.3f, 0.6f}), 3, cfg);
  CHECK(s.membrane[0] == doctest::Approx(0.3).epsilon(1e-7));
  CHECK(s.membrane[1] == doctest::Approx(0.375).epsilon(1e-7));
  CHECK(s.membrane[2] == doctest::Approx(0.69375).epsilon(1e-7));
  CHECK(s.last_spike == column({0, 0, 1}));
}

TEST_CASE("LIF constant supra-threshold input fires every step") {
  LIFState s = lif_forward(column({0.6f, 0.6f, 0.6f, 0.6f}), 4, LIFConfig{});
  CHECK(s.last_spike == column({1, 1, 1, 1}));
  for (int t = 0; t < 4; ++t) CHECK(s.membrane[t] == doctest::Approx(0.6).epsilon(1e-7));
}

TEST_CASE("LIF zero input stays silent") {
  LIFState s = lif_forward(Tensor({8, 2, 3, 3}), 8, LIFConfig{});
  CHECK(s.last_spike.sum() == 0.0);
  CHECK(s.membrane.sum() == 0.0);
}

TEST_CASE("LIF fires exactly at threshold") {
  LIFState s = lif_forward(column({0.5f}), 1, LIFConfig{});
  CHECK(s.last_spike[0] == 1.0f);
}

TEST_CASE("LIF leak fixed point") {
  const float c = 0.3f;  // c / (1 - tau) = 0.4 < v_th
  std::vector<float> in(40, c);
  LIFState s = lif_forward(column(in), 40, LIFConfig{});
  CHECK(s.last_spike.sum() == 0.0);
  for (int t = 1; t < 40; ++t) CHECK(s.membrane[t] >= s.membrane[t - 1]);
  CHECK(s.membrane[39] == doctest::Approx(0.4).epsilon(1e-6));
}

TEST_CASE("LIF spikes are binary on random input") {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor in = rng.normal_tensor({4 * 3, 2, 5, 5}, 0.3f, 1.0f);
    CHECK(lif_forward(in, 4, LIFConfig{}).last_spike.is_binary());
  }
}

TEST_CASE("LIF rejects bad configuration and input") {
  LIFConfig bad;
  bad.tau = 1.0f;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = LIFConfig{};
  bad.v_th = 0.0f;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = LIFConfig{};
  bad.a = 0.0f;
  CHECK_THROWS_AS(bad.validate(), Error);
  try {
    lif_forward(column({0.1f, NAN}), 2, LIFConfig{});
    FAIL("expected rejection");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kNumeric);
  }
}

TEST_CASE("surrogate window") {
  LIFConfig cfg;
  CHECK(surrogate_grad(0.5f, cfg) == 1.0f);
  CHECK(surrogate_grad(1.01f, cfg) == 0.0f);
  CHECK(surrogate_grad(0.0f, cfg) == 1.0f);
  CHECK(surrogate_grad(1.0f, cfg) == 1.0f);
  CHECK(surrogate_grad(-0.01f, cfg) == 0.0f);
  cfg.a = 0.5f;
  CHECK(surrogate_grad(0.5f, cfg) == 2.0f);
  CHECK(surrogate_grad(0.8f, cfg) == 0.0f);
}

TEST_CASE("spike derivative through autodiff equals the surrogate") {
  LIFConfig cfg;
  for (float v : {-0.5f, 0.0f, 0.2f, 0.5f, 0.99f, 1.0f, 1.001f}) {
    Var in(column({v}), true);
    backward(sum(lif(in, 1, cfg).spikes));
    CHECK(in.grad()[0] == surrogate_grad(v, cfg));
  }
}

TEST_CASE("reset path gradient modes") {
  // Second-step spike depends on the first-step reset only through the
  // surrogate of the first membrane.
  LIFConfig cfg;
  auto grad0 = [&](ResetGrad mode) {
    cfg.reset_grad = mode;
    Var in(column({0.7f, 0.2f}), true);
    Var m = lif(in, 2, cfg).membrane;
    backward(weighted_sum(m, column({0.0f, 1.0f})));
    return in.grad()[0];
  };
  // dV1/dV0 = tau(1 - X0) + tau(v_reset - V0) s'(V0) = 0 + 0.25 * (-0.7) * 1
  CHECK(grad0(ResetGrad::kSurrogate) == doctest::Approx(-0.175));
  CHECK(grad0(ResetGrad::kDetached) == 0.0f);
}

TEST_CASE("ramp twin BPTT matches finite differences") {
  Rng rng(4);
  LIFConfig cfg;
  cfg.spike_fn = SpikeFn::kRamp;
  const int T = 5;
  Tensor x0 = rng.normal_tensor({T * 2, 3, 2, 2}, 0.3f, 0.6f);
  Tensor wts = rng.normal_tensor(x0.shape());
  Tensor wm = rng.normal_tensor(x0.shape());
  Var x(x0, true);
  LIFOutput out = lif(x, T, cfg);
  backward(add(weighted_sum(out.spikes, wts), weighted_sum(out.membrane, wm)));
  Tensor g = x.grad();

  ref::LifParams p;
  p.ramp = true;
  ref::T4 rx(x0);
  auto f = [&] {
    ref::T4 mem;
    ref::T4 s = ref::lif(rx, T, p, &mem);
    return ref::dot(s, wts) + ref::dot(mem, wm);
  };
  auto central = [&](std::size_t i, double h) {
    const double keep = rx.v[i];
    rx.v[i] = keep + h;
    const double up = f();
    rx.v[i] = keep - h;
    const double down = f();
    rx.v[i] = keep;
    return (up - down) / (2 * h);
  };
  int checked = 0;
  for (std::size_t i = 0; i < rx.v.size(); ++i) {
    const double fd = central(i, 1e-4);
    // Two step sizes disagree only when a ramp kink lies inside the stencil.
    if (std::abs(fd - central(i, 5e-5)) > 1e-6 * std::max(1.0, std::abs(fd))) continue;
    ++checked;
    CHECK(std::abs(g[i] - fd) <= 1e-4 * std::max(1e-3, std::abs(fd)));
  }
  CHECK(checked > int(rx.v.size()) / 2);
}

TEST_CASE("TDBN hand normalization") {
  TDBN bn(1, 1.0f, 0.5f, 1e-12f);
  Var x(Tensor({4, 1, 1, 1}, {1, 2, 3, 4}));
  Tensor y = bn.forward(x, BNMode::kTrain).value();
  CHECK(y[3] == doctest::Approx(0.5 * 1.5 / std::sqrt(1.25)).epsilon(1e-6));
  CHECK(y[3] == doctest::Approx(0.6708).epsilon(1e-4));
}

TEST_CASE("TDBN constant input maps to beta") {
  TDBN bn(2, 1.0f, 0.5f);
  bn.beta().mutable_value()[1] = 0.25f;
  Tensor y = bn.forward(Var(Tensor({3, 2, 2, 2}, 7.0f)), BNMode::kTrain).value();
  for (int n = 0; n < 3; ++n)
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j) {
        CHECK(y.at(n, 0, i, j) == 0.0f);
        CHECK(y.at(n, 1, i, j) == 0.25f);
      }
}

TEST_CASE("TDBN output statistics") {
  Rng rng(2);
  TDBN bn(3, 1.0f, 0.5f);
  bn.lambda().mutable_value()[2] = -2.0f;
  bn.beta().mutable_value()[1] = 0.7f;
  Tensor x = rng.normal_tensor({64, 3, 4, 4}, 3.0f, 5.0f);  // 1024 samples per channel
  Tensor y = bn.forward(Var(x), BNMode::kTrain).value();
  for (int c = 0; c < 3; ++c) {
    double s = 0, ss = 0;
    for (int n = 0; n < 64; ++n)
      for (int i = 0; i < 16; ++i) s += y[(n * 3 + c) * 16 + i];
    const double mu = s / 1024.0;
    for (int n = 0; n < 64; ++n)
      for (int i = 0; i < 16; ++i) ss += std::pow(y[(n * 3 + c) * 16 + i] - mu, 2);
    const double sd = std::sqrt(ss / 1024.0);
    CHECK(mu == doctest::Approx(c == 1 ? 0.7 : 0.0).epsilon(0).scale(1).epsilon(1e-3));
    CHECK(std::abs(sd - (c == 2 ? 1.0 : 0.5)) < 1e-3);
  }
}

TEST_CASE("TDBN running statistics and inference") {
  TDBN bn(1, 1.0f, 0.5f);
  Var x(Tensor({4, 1, 1, 1}, {1, 2, 3, 4}));
  bn.forward(x, BNMode::kTrain);
  CHECK(bn.running_mean()[0] == doctest::Approx(0.25));
  CHECK(bn.running_var()[0] == doctest::Approx(0.9 + 0.1 * (5.0 / 3.0)));
  bn.forward(x, BNMode::kBatchStats);
  CHECK(bn.running_mean()[0] == doctest::Approx(0.25));
  Tensor y = bn.forward(Var(Tensor({1, 1, 1, 1}, 0.25f)), BNMode::kInfer).value();
  CHECK(y[0] == doctest::Approx(0.0));
  CHECK_THROWS_AS(bn.forward(Var(Tensor({1, 1, 1, 1})), BNMode::kTrain), Error);
  CHECK_THROWS_AS(TDBN(1, 1.0f, 0.5f, 0.0f), Error);
}

TEST_CASE("TDBN gradient matches finite differences") {
  Rng rng(6);
  TDBN bn(2, 1.0f, 0.5f);
  bn.lambda().mutable_value()[0] = 1.3f;
  bn.beta().mutable_value()[1] = -0.2f;
  Tensor x0 = rng.normal_tensor({3, 2, 2, 2});
  Tensor wts = rng.normal_tensor(x0.shape());
  Var x(x0, true);
  backward(weighted_sum(bn.forward(x, BNMode::kBatchStats), wts));

  ref::T4 rx(x0);
  std::vector<double> lam{1.3, 1.0}, bet{0.0, -0.2};
  auto f = [&] { return ref::dot(ref::tdbn(rx, lam, bet, 1.0, 0.5, 1e-5), wts); };
  auto fd = [&](double& p) {
    const double keep = p, h = 1e-4;
    p = keep + h;
    const double up = f();
    p = keep - h;
    const double down = f();
    p = keep;
    return (up - down) / (2 * h);
  };
  Tensor gx = x.grad();
  for (std::size_t i = 0; i < rx.v.size(); ++i)
    CHECK(std::abs(gx[i] - fd(rx.v[i])) <= 1e-4 * std::max(1e-2, std::abs(fd(rx.v[i]))));
  for (int c = 0; c < 2; ++c) {
    CHECK(bn.lambda().grad()[c] == doctest::Approx(fd(lam[c])).epsilon(1e-4));
    CHECK(bn.beta().grad()[c] == doctest::Approx(fd(bet[c])).epsilon(1e-4));
  }
}
