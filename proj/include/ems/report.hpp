#pragma once

#include <string>
#include <vector>

#include "ems/config.hpp"
#include "ems/gne.hpp"
#include "json.hpp"

namespace ems {

struct GneReportOptions {
  bool apply_init = true;  // false is the negative control
  int n_probes = 256;
  double phi_tolerance = 0.15;
  double moment_tolerance = 0.10;  // inter-block alpha2 around 2
  double encode_tolerance = 0.05;  // alpha2 of the encode output around 3
  double composition_tolerance = 0.20;
  std::vector<int> depths{10, 18, 34};
  double ratio_low = 0.1, ratio_high = 10.0;
};

struct MomentCheck {
  std::string name;
  double measured = 0;
  double expected = 0;
  bool pass = false;
};

struct GneReport {
  int depth = 10;
  GneInitReport init;
  MomentCheck encode;
  std::vector<PhiRow> blocks;            // every block of the configured network
  std::vector<PhiRow> reference_blocks;  // stand-alone EMS2 and MS blocks fed alpha2 = 2
  std::vector<MomentCheck> inter_block;  // backbone EMS block outputs, post-add
  std::vector<CompositionCheck> addition;
  std::vector<CompositionCheck> multiplication;
  std::vector<bool> composition_pass;  // addition then multiplication
  DepthDiagnostic depth_table;
  double depth_ratio = 0;  // deepest / shallowest
  bool depth_pass = false;

  bool phi_pass() const;
  bool moments_pass() const;
  bool all_pass() const;
  nlohmann::json to_json() const;
};

// Builds the configured network (family forced to EMS), applies init_bn_gne,
// estimates phi per block and runs the depth diagnostic.
GneReport run_gne_report(const RunConfig& cfg, const GneReportOptions& opt = {});

}  // namespace ems
