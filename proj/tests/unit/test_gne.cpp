#include <cmath>

#include "doctest.h"
#include "ems/error.hpp"
#include "ems/gne.hpp"
#include "ems/ops.hpp"

using namespace ems;

TEST_CASE("second moment examples") {
  CHECK(second_moment(Tensor({4}, {1, 1, 1, 1})) == 1.0);
  CHECK(second_moment(Tensor({2}, {2, 0})) == 2.0);
  CHECK(second_moment(Tensor({3, 3})) == 0.0);
}

TEST_CASE("phi of identity and scaling maps") {
  Rng rng(1);
  const Tensor x = rng.normal_tensor({2, 4, 8, 8});
  PhiEstimate id = estimate_phi([](const Var& v) { return v; }, x, 64, 3);
  CHECK(id.samples == 64);
  CHECK(std::abs(id.phi - 1.0) <= 4 * id.stderr + 1e-12);
  CHECK(id.phi == doctest::Approx(1.0).epsilon(0.05));
  PhiEstimate two = estimate_phi([](const Var& v) { return scale(v, 2.0f); }, x, 64, 3);
  CHECK(two.phi == doctest::Approx(4.0).epsilon(0.05));
  // Same cotangents, so the estimate scales exactly by 4.
  CHECK(two.phi == doctest::Approx(4.0 * id.phi).epsilon(1e-6));
}

TEST_CASE("phi standard error shrinks like one over root n") {
  Rng rng(2);
  const Tensor x = rng.normal_tensor({1, 1, 4, 4});
  auto f = [](const Var& v) { return v; };
  const PhiEstimate small = estimate_phi(f, x, 32, 10), large = estimate_phi(f, x, 512, 10);
  CHECK(large.stderr < small.stderr);
  CHECK(small.stderr / large.stderr == doctest::Approx(4.0).epsilon(0.35));
  CHECK_THROWS_AS(estimate_phi(f, x, 1, 0), Error);
}

TEST_CASE("TDBN scale for a target moment") {
  CHECK(lambda_for_moment(3.0, 1.0f, 0.5f) == doctest::Approx(3.4641).epsilon(1e-4));
  CHECK(lambda_for_moment(2.0, 1.0f, 0.5f) == doctest::Approx(2.8284).epsilon(1e-4));
  CHECK(lambda_for_moment(1.0, 1.0f, 0.5f) == doctest::Approx(2.0));
}

TEST_CASE("widening branch target") {
  CHECK(ems2_branch_moment(2.0, 32, 64) == doctest::Approx(2.0));
  CHECK(lambda_for_moment(ems2_branch_moment(2.0, 32, 64), 1.0f, 0.5f) == doctest::Approx(2.8284).epsilon(1e-4));
  CHECK(ems2_branch_moment(4.0, 0, 64) == doctest::Approx(2.0));
  CHECK(ems2_branch_moment(3.0, 32, 64) == doctest::Approx(1.0));
  CHECK(ems2_branch_moment(4.64, 32, 64) < 0.0);
}

TEST_CASE("initialized widening block sits near phi = 2 / alpha2") {
  Rng rng(5);
  ResidualBlock block("b", {BlockKind::kEMS2, 32, 64, 2}, 1.0f, 0.5f, rng);
  const Tensor x = rng.normal_tensor({4, 32, 16, 16}, 0.0f, std::sqrt(2.0f));
  GneOptions opt;
  GneBlockInit info = init_block_gne(block, x, opt, 7);
  CHECK(info.lambda_residual > 0);
  CHECK(info.lambda_shortcut > 0);
  ForwardContext ctx{opt.steps, BNMode::kBatchStats, opt.lif, nullptr};
  PhiEstimate phi = estimate_phi([&](const Var& v) { return block.forward(v, ctx); }, x, 128, 9);
  const double want = 2.0 / second_moment(x);
  CHECK(std::abs(phi.phi - want) <= 0.15 * want);
  CHECK(expected_phi(block, second_moment(x)) == doctest::Approx(want));
}

TEST_CASE("formula scheme rejects an unreachable branch target") {
  Rng rng(6);
  ResidualBlock block("b", {BlockKind::kEMS2, 32, 64, 2}, 1.0f, 0.5f, rng);
  // Large input moment pushes the pooled identity channels past the target.
  const Tensor x = rng.normal_tensor({4, 32, 16, 16}, 0.0f, 3.0f);
  GneOptions opt;
  opt.scheme = GneScheme::kFormula;
  try {
    init_block_gne(block, x, opt, 1);
    FAIL("expected E_NUMERIC");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kNumeric);
  }
}

TEST_CASE("encode scale hits the stem target") {
  Network net(NetworkSpec::for_depth(10), LIFConfig{}, 0);
  GneInitReport rep = init_bn_gne(net);
  CHECK(rep.encode_lambda == doctest::Approx(3.4641).epsilon(1e-4));
  CHECK(rep.blocks.size() == net.all_blocks().size());
  MomentTrace t = trace_moments(net, encode_probe(net, {}, 42), {});
  CHECK(t.alpha2_encode == doctest::Approx(3.0).epsilon(0.05));
}

TEST_CASE("depth diagnostic rows and zero-weight sanity") {
  DepthDiagnostic d = depth_gradient_diagnostic({10}, 0, {}, true, true);
  REQUIRE(d.rows.size() == 1);
  CHECK(d.rows[0].depth == 10);
  CHECK(d.rows[0].grad_norm == 0.0);
  CHECK(d.ratios.empty());
}
