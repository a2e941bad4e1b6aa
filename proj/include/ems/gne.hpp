#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <tuple>
#include <vector>

#include "ems/blocks.hpp"

namespace ems {

// Mean of squared elements.
double second_moment(const Tensor& x);

struct PhiEstimate {
  double phi = 0;
  double stderr = 0;
  int samples = 0;
};

using BlockFn = std::function<Var(const Var&)>;

// Hutchinson estimate of tr(J J^T) / m_out via vector-Jacobian products with
// standard-normal cotangents.
PhiEstimate estimate_phi(const BlockFn& f, const Tensor& probe_input, int n_probes, std::uint64_t seed);

// lambda giving a TDBN output second moment of `target` at beta = 0.
float lambda_for_moment(double target, float alpha, float v_th);

// Shortcut-branch target for a widening block: (2 c_j - a_mp c_{j-1}) / delta_j.
double ems2_branch_moment(double alpha2_maxpool, int c_in, int c_out);

enum class GneScheme {
  // Shortcut-branch scale from ems2_branch_moment, residual scales at unit
  // variance. Rejects a non-positive branch target.
  kFormula,
  // Residual and shortcut scales solved per block from measured path moments
  // so the block output holds the fixed point and phi = 2 / alpha2_in.
  kCalibrated,
};

struct GneOptions {
  GneScheme scheme = GneScheme::kCalibrated;
  double encode_moment = 3.0;
  double block_moment = 2.0;  // fixed point between blocks
  int steps = 1;
  int batch = 4;
  int height = 32;  // probe resolution at the encode output
  int width = 32;
  int calibration_probes = 32;
  std::uint64_t seed = 0;
  LIFConfig lif;
};

struct GneBlockInit {
  std::string name;
  BlockKind kind = BlockKind::kMS;
  double alpha2_in = 0;
  double alpha2_maxpool = 0;  // pooled widening blocks only
  double alpha2_bn = 0;       // shortcut-branch target under kFormula
  float lambda_residual = 0;
  float lambda_shortcut = 0;  // 0 when the block has no shortcut unit
  double alpha2_out = 0;
  bool feasible = true;  // calibration targets reachable with positive scales
};

struct GneInitReport {
  float encode_lambda = 0;
  double alpha2_encode = 0;
  std::vector<GneBlockInit> blocks;
};

// Standard-normal stand-ins for the encode-conv output, [T*B, C, H, W].
Tensor encode_probe(const Network& net, const GneOptions& opt, std::uint64_t seed);

// Sets one block's TDBN scales (beta = 0) from its input probe [T*B, C, H, W].
GneBlockInit init_block_gne(ResidualBlock& block, const Tensor& input, const GneOptions& opt, std::uint64_t seed);

// Sets TDBN scales (beta = 0) for the encode layer and every block, backbone
// then head, following `opt.scheme`.
GneInitReport init_bn_gne(Network& net, const GneOptions& opt = {});

// Probe batch propagated through the encode TDBN and every block.
struct MomentTrace {
  double alpha2_encode = 0;
  std::vector<std::pair<std::string, double>> block_outputs;
  std::vector<Tensor> block_inputs;
};
MomentTrace trace_moments(Network& net, const Tensor& probe, const GneOptions& opt);

struct PhiRow {
  std::string name;
  BlockKind kind = BlockKind::kMS;
  double alpha2_in = 0;
  double alpha2_out = 0;
  PhiEstimate phi;
  bool has_expectation = true;
  double expected = 0;  // 2 / alpha2_in for EMS blocks, 1 + 1 / alpha2_in for identity MS blocks
  bool pass = false;
};

double expected_phi(const ResidualBlock& block, double alpha2_in, bool* has_expectation = nullptr);

std::vector<PhiRow> block_phi_table(Network& net, const Tensor& probe, const GneOptions& opt, int n_probes,
                                    double tolerance);

// Composition checks of the Jacobian-moment calculus.
struct CompositionCheck {
  std::string name;
  double phi_whole = 0;
  double phi_parts = 0;  // sum of path estimates, or product of block estimates
  double rel_err = 0;
};

// phi(block) against phi(residual) + phi(shortcut).
CompositionCheck addition_check(ResidualBlock& block, const Tensor& input, const GneOptions& opt, int n_probes);
// phi(second . first) against phi(first) * phi(second).
CompositionCheck multiplication_check(ResidualBlock& first, ResidualBlock& second, const Tensor& input,
                                      const GneOptions& opt, int n_probes);

struct DepthRow {
  int depth = 0;
  double grad_norm = 0;
};

struct DepthDiagnostic {
  std::vector<DepthRow> rows;
  // (depth_i, depth_j, grad_norm_i / grad_norm_j) for every pair with depth_i > depth_j.
  std::vector<std::tuple<int, int, double>> ratios;
};

// Norm of the encode-weight gradient under a fixed random projection of the
// backbone output, for each depth with identical init and probe batch.
// zero_weights zeroes every parameter after init, BN scales included.
DepthDiagnostic depth_gradient_diagnostic(const std::vector<int>& depths, std::uint64_t seed,
                                          const GneOptions& opt = {}, bool gne_init = true,
                                          bool zero_weights = false);

}  // namespace ems
