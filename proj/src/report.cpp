#include "ems/report.hpp"

#include <cmath>

#include "ems/error.hpp"

namespace ems {

namespace {

nlohmann::json phi_row_json(const PhiRow& r) {
  nlohmann::json j = {{"name", r.name},
                      {"kind", to_string(r.kind)},
                      {"alpha2_in", r.alpha2_in},
                      {"alpha2_out", r.alpha2_out},
                      {"phi_hat", r.phi.phi},
                      {"stderr", r.phi.stderr},
                      {"n_probes", r.phi.samples},
                      {"pass", r.pass}};
  if (r.has_expectation)
    j["expected"] = r.expected;
  else
    j["expected"] = nullptr;
  return j;
}

nlohmann::json moment_json(const MomentCheck& m) {
  return {{"name", m.name}, {"alpha2", m.measured}, {"expected", m.expected}, {"pass", m.pass}};
}

nlohmann::json composition_json(const CompositionCheck& c, bool pass) {
  return {{"name", c.name}, {"phi_whole", c.phi_whole}, {"phi_parts", c.phi_parts}, {"rel_err", c.rel_err},
          {"pass", pass}};
}

bool is_ems(BlockKind k) { return k == BlockKind::kEMS1 || k == BlockKind::kEMS2; }

PhiRow reference_row(const std::string& name, BlockSpec spec, const RunConfig& cfg, const GneOptions& gopt,
                     const GneReportOptions& opt, std::uint64_t seed) {
  Rng rng(seed);
  const LIFConfig lif = cfg.lif();
  ResidualBlock block(name, spec, static_cast<float>(cfg.model.alpha), lif.v_th, rng);
  // Standard normal scaled to second moment 2, the inter-block fixed point.
  Tensor probe = rng.normal_tensor({static_cast<std::int64_t>(gopt.steps) * gopt.batch, spec.in_channels,
                                    gopt.height / 2, gopt.width / 2},
                                   0.0f, static_cast<float>(std::sqrt(gopt.block_moment)));
  if (opt.apply_init) init_block_gne(block, probe, gopt, seed + 1);
  ForwardContext ctx{gopt.steps, BNMode::kBatchStats, lif, nullptr};
  PhiRow row;
  row.name = name;
  row.kind = spec.kind;
  row.alpha2_in = second_moment(probe);
  row.phi = estimate_phi([&](const Var& v) { return block.forward(v, ctx); }, probe, opt.n_probes, seed + 2);
  row.expected = expected_phi(block, row.alpha2_in, &row.has_expectation);
  row.pass = std::abs(row.phi.phi - row.expected) <= opt.phi_tolerance * row.expected;
  {
    NoGradGuard no_grad;
    row.alpha2_out = second_moment(block.forward(Var(probe), ctx).value());
  }
  return row;
}

}  // namespace

bool GneReport::phi_pass() const {
  for (const auto& r : blocks)
    if (!r.pass) return false;
  for (const auto& r : reference_blocks)
    if (!r.pass) return false;
  return true;
}

bool GneReport::moments_pass() const {
  if (!encode.pass) return false;
  for (const auto& m : inter_block)
    if (!m.pass) return false;
  return true;
}

bool GneReport::all_pass() const {
  for (bool c : composition_pass)
    if (!c) return false;
  return phi_pass() && moments_pass() && depth_pass;
}

nlohmann::json GneReport::to_json() const {
  nlohmann::json j;
  j["depth"] = depth;
  j["encode"] = moment_json(encode);
  j["encode"]["lambda"] = init.encode_lambda;
  nlohmann::json bs = nlohmann::json::array(), refs = nlohmann::json::array(), ib = nlohmann::json::array();
  for (const auto& r : blocks) bs.push_back(phi_row_json(r));
  for (const auto& r : reference_blocks) refs.push_back(phi_row_json(r));
  for (const auto& m : inter_block) ib.push_back(moment_json(m));
  j["blocks"] = bs;
  j["reference_blocks"] = refs;
  j["inter_block"] = ib;
  nlohmann::json init_j = nlohmann::json::array();
  for (const auto& b : init.blocks)
    init_j.push_back({{"name", b.name},
                      {"alpha2_in", b.alpha2_in},
                      {"alpha2_maxpool", b.alpha2_maxpool},
                      {"lambda_residual", b.lambda_residual},
                      {"lambda_shortcut", b.lambda_shortcut},
                      {"alpha2_out", b.alpha2_out},
                      {"feasible", b.feasible}});
  j["init"] = init_j;
  nlohmann::json comp = nlohmann::json::array();
  std::size_t k = 0;
  for (const auto& c : addition) comp.push_back(composition_json(c, composition_pass.at(k++)));
  for (const auto& c : multiplication) comp.push_back(composition_json(c, composition_pass.at(k++)));
  j["composition"] = comp;
  nlohmann::json rows = nlohmann::json::array(), ratios = nlohmann::json::array();
  for (const auto& r : depth_table.rows) rows.push_back({{"depth", r.depth}, {"grad_norm", r.grad_norm}});
  for (const auto& [a, b, q] : depth_table.ratios) ratios.push_back({{"deeper", a}, {"shallower", b}, {"ratio", q}});
  j["depth_gradient"] = {{"rows", rows}, {"ratios", ratios}, {"ratio", depth_ratio}, {"pass", depth_pass}};
  j["pass"] = {{"phi", phi_pass()}, {"moments", moments_pass()}, {"depth", depth_pass}, {"all", all_pass()}};
  return j;
}

GneReport run_gne_report(const RunConfig& cfg, const GneReportOptions& opt) {
  require(opt.n_probes >= 2, ErrorCode::kConfig, "GNE report needs n_probes >= 2");
  GneReport rep;
  rep.depth = cfg.model.depth;
  RunConfig ems_cfg = cfg;
  ems_cfg.model.family = Family::kEMS;
  const NetworkSpec spec = ems_cfg.network_spec();
  GneOptions gopt;
  gopt.lif = cfg.lif();
  gopt.seed = cfg.train.seed;

  Network net(spec, gopt.lif, cfg.train.seed);
  if (opt.apply_init) rep.init = init_bn_gne(net, gopt);
  const Tensor probe = encode_probe(net, gopt, cfg.train.seed + 17);
  MomentTrace trace = trace_moments(net, probe, gopt);
  rep.encode = {"encode", trace.alpha2_encode, gopt.encode_moment,
                std::abs(trace.alpha2_encode - gopt.encode_moment) <= opt.encode_tolerance * gopt.encode_moment};

  gopt.seed = cfg.train.seed + 100;
  rep.blocks = block_phi_table(net, probe, gopt, opt.n_probes, opt.phi_tolerance);
  for (const auto& r : rep.blocks)
    if (is_ems(r.kind) && r.name.rfind("stage", 0) == 0)
      rep.inter_block.push_back({r.name, r.alpha2_out, gopt.block_moment,
                                 std::abs(r.alpha2_out - gopt.block_moment) <= opt.moment_tolerance * gopt.block_moment});

  rep.reference_blocks.push_back(
      reference_row("reference.ems2", {BlockKind::kEMS2, 64, 128, 2}, cfg, gopt, opt, cfg.train.seed + 200));
  rep.reference_blocks.push_back(
      reference_row("reference.ms", {BlockKind::kMS, 64, 64, 1}, cfg, gopt, opt, cfg.train.seed + 300));

  auto& backbone = net.backbone();
  rep.addition.push_back(addition_check(backbone[0], trace.block_inputs[0], gopt, opt.n_probes));
  rep.multiplication.push_back(
      multiplication_check(backbone[0], backbone[1], trace.block_inputs[0], gopt, opt.n_probes));
  for (const auto& c : rep.addition) rep.composition_pass.push_back(c.rel_err <= opt.composition_tolerance);
  for (const auto& c : rep.multiplication) rep.composition_pass.push_back(c.rel_err <= opt.composition_tolerance);

  GneOptions dopt;
  dopt.lif = cfg.lif();
  dopt.seed = cfg.train.seed;
  rep.depth_table = depth_gradient_diagnostic(opt.depths, cfg.train.seed, dopt, opt.apply_init);
  const auto& rows = rep.depth_table.rows;
  if (rows.size() >= 2) {
    auto lo = rows.front(), hi = rows.front();
    for (const auto& r : rows) {
      if (r.depth < lo.depth) lo = r;
      if (r.depth > hi.depth) hi = r;
    }
    rep.depth_ratio = lo.grad_norm > 0 ? hi.grad_norm / lo.grad_norm : std::nan("");
    rep.depth_pass = rep.depth_ratio >= opt.ratio_low && rep.depth_ratio <= opt.ratio_high;
  } else {
    rep.depth_pass = true;
  }
  return rep;
}

}  // namespace ems
