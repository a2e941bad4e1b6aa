#include "ems/gne.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <sstream>

#include "ems/error.hpp"
#include "ems/ops.hpp"

namespace ems {

namespace {

class GradModeGuard {
 public:
  explicit GradModeGuard(bool on) : prev_(GradMode::enabled()) { GradMode::set_enabled(on); }
  ~GradModeGuard() { GradMode::set_enabled(prev_); }
  GradModeGuard(const GradModeGuard&) = delete;
  GradModeGuard& operator=(const GradModeGuard&) = delete;

 private:
  bool prev_;
};

ForwardContext probe_context(const GneOptions& opt) {
  return ForwardContext{opt.steps, BNMode::kBatchStats, opt.lif, nullptr};
}

// Visits every block in network order with its (no-grad) input and returns
// the encode output moment. `visit` returns the block output.
template <class Visit>
void walk_blocks(Network& net, const Var& first_input, Visit&& visit) {
  const NetworkSpec& spec = net.spec();
  auto& backbone = net.backbone();
  Var x = first_input;
  Var fine_tap, coarse_tap;
  std::size_t i = 0;
  for (std::size_t s = 0; s < 4; ++s) {
    for (int b = 0; b < spec.blocks_per_stage[s]; ++b, ++i) x = visit(backbone[i], x);
    if (s == 2) fine_tap = x;
    if (s == 3) coarse_tap = x;
  }
  Var hc = visit(net.head_coarse(), coarse_tap);
  Var fine_in;
  {
    NoGradGuard no_grad;
    fine_in = concat_channels(upsample_nearest2x(hc), fine_tap);
  }
  visit(net.head_fine(), fine_in);
}

Var block_output(ResidualBlock& block, const Var& x, const GneOptions& opt) {
  NoGradGuard no_grad;
  ForwardContext ctx = probe_context(opt);
  return block.forward(x, ctx);
}

float default_lambda(const TDBN& bn) { return lambda_for_moment(1.0, bn.alpha(), bn.v_th()); }

// Moment and phi of one path, linear in lambda^2 of the unit that ends it:
// value(l2) = at0 + slope * l2.
struct PathFit {
  double alpha_at0 = 0, alpha_slope = 0;
  double phi_at0 = 0, phi_slope = 0;
};

PathFit fit_path(const BlockFn& path, TDBN& bn, const Tensor& input, bool constant_part, int n_probes,
                 std::uint64_t seed) {
  auto measure = [&](float lambda) {
    bn.set_lambda(lambda);
    double a;
    {
      NoGradGuard no_grad;
      a = second_moment(path(Var(input)).value());
    }
    return std::pair<double, double>{a, estimate_phi(path, input, n_probes, seed).phi};
  };
  PathFit fit;
  auto [a1, p1] = measure(1.0f);
  if (constant_part) {
    auto [a0, p0] = measure(0.0f);
    fit.alpha_at0 = a0;
    fit.phi_at0 = p0;
  }
  fit.alpha_slope = a1 - fit.alpha_at0;
  fit.phi_slope = p1 - fit.phi_at0;
  return fit;
}

struct Solution {
  double u = 0, w = 0;  // lambda^2 of the residual and shortcut units
  bool feasible = true;
};

// Two paths summed: alpha = r.a0 + r.as*u + s.a0 + s.as*w, phi likewise.
// Solves alpha = target_alpha and phi = target_phi with u, w >= floor. When
// that point is out of reach phi is held and alpha taken as close as the phi
// line allows; when phi itself is out of reach both sit at the floor.
Solution solve_two_paths(const PathFit& r, const PathFit& s, double target_alpha, double target_phi,
                         double floor) {
  const double a0 = r.alpha_at0 + s.alpha_at0, p0 = r.phi_at0 + s.phi_at0;
  const double ra = target_alpha - a0, rp = target_phi - p0;
  const double det = r.alpha_slope * s.phi_slope - s.alpha_slope * r.phi_slope;
  if (std::abs(det) > 1e-12) {
    const double u = (ra * s.phi_slope - s.alpha_slope * rp) / det;
    const double w = (r.alpha_slope * rp - ra * r.phi_slope) / det;
    if (u >= floor && w >= floor) return {u, w, true};
  }
  const double u_end = (rp - s.phi_slope * floor) / r.phi_slope;  // w at the floor
  const double w_end = (rp - r.phi_slope * floor) / s.phi_slope;  // u at the floor
  auto alpha_err = [&](double u, double w) { return std::abs(r.alpha_slope * u + s.alpha_slope * w - ra); };
  Solution best{floor, floor, false};
  double best_err = std::numeric_limits<double>::infinity();
  if (u_end >= floor && alpha_err(u_end, floor) < best_err) {
    best = {u_end, floor, false};
    best_err = alpha_err(u_end, floor);
  }
  if (w_end >= floor && alpha_err(floor, w_end) < best_err) best = {floor, w_end, false};
  return best;
}

}  // namespace

double second_moment(const Tensor& x) {
  require(x.numel() >= 1, ErrorCode::kNumeric, "second moment of an empty tensor");
  double s = 0;
  for (float v : x.data()) s += static_cast<double>(v) * v;
  return s / static_cast<double>(x.numel());
}

PhiEstimate estimate_phi(const BlockFn& f, const Tensor& probe_input, int n_probes, std::uint64_t seed) {
  require(n_probes >= 2, ErrorCode::kConfig, "estimate_phi needs at least 2 probes, got " + std::to_string(n_probes));
  GradModeGuard grad_on(true);
  Rng rng(seed);
  double sum = 0, sum_sq = 0;
  for (int k = 0; k < n_probes; ++k) {
    Var x(probe_input, true);
    Var y = f(x);
    Tensor v = rng.normal_tensor(y.shape());
    backward(weighted_sum(y, v));
    const Tensor g = x.grad();
    double norm_sq = 0;
    for (float e : g.data()) norm_sq += static_cast<double>(e) * e;
    const double s = norm_sq / static_cast<double>(y.numel());
    sum += s;
    sum_sq += s * s;
  }
  PhiEstimate est;
  est.samples = n_probes;
  est.phi = sum / n_probes;
  const double var = std::max(0.0, (sum_sq - n_probes * est.phi * est.phi) / (n_probes - 1));
  est.stderr = std::sqrt(var / n_probes);
  return est;
}

float lambda_for_moment(double target, float alpha, float v_th) {
  require(target > 0 && std::isfinite(target), ErrorCode::kNumeric,
          "second-moment target must be positive, got " + std::to_string(target));
  return static_cast<float>(std::sqrt(target) / (static_cast<double>(alpha) * v_th));
}

double ems2_branch_moment(double alpha2_maxpool, int c_in, int c_out) {
  require(c_out > c_in && c_in >= 0, ErrorCode::kConfig, "widening block needs c_out > c_in");
  return (2.0 * c_out - alpha2_maxpool * c_in) / static_cast<double>(c_out - c_in);
}

Tensor encode_probe(const Network& net, const GneOptions& opt, std::uint64_t seed) {
  require(opt.steps >= 1 && opt.batch >= 1 && opt.height >= 1 && opt.width >= 1, ErrorCode::kConfig,
          "probe steps, batch and resolution must be positive");
  Rng rng(seed);
  return rng.normal_tensor({static_cast<std::int64_t>(opt.steps) * opt.batch, net.spec().stem_channels,
                            opt.height, opt.width});
}

GneBlockInit init_block_gne(ResidualBlock& block, const Tensor& input, const GneOptions& opt, std::uint64_t seed) {
  const Var x(input);
  GneBlockInit info;
  info.name = block.name();
  info.kind = block.spec().kind;
  info.alpha2_in = second_moment(x.value());
  ConvBN* sc = block.shortcut_unit();
  for (ConvBN* unit : {&block.res1(), &block.res2(), sc}) {
    if (!unit) continue;
    unit->bn.set_lambda(default_lambda(unit->bn));
    unit->bn.beta().mutable_value().fill(0.0f);
  }
  const bool pooled_ems2 = info.kind == BlockKind::kEMS2 && block.shortcut_pools();
  if (pooled_ems2) {
    NoGradGuard no_grad;
    info.alpha2_maxpool = second_moment(maxpool2d(x, 2, 2, true).value());
  }
  const int c_in = block.spec().in_channels, c_out = block.spec().out_channels;

  if (opt.scheme == GneScheme::kFormula) {
    if (info.kind == BlockKind::kEMS2) {
      const double a_mp = pooled_ems2 ? info.alpha2_maxpool : info.alpha2_in;
      info.alpha2_bn = ems2_branch_moment(a_mp, c_in, c_out);
      if (!(info.alpha2_bn > 0)) {
        std::ostringstream os;
        os << block.name() << ": shortcut-branch moment (2*" << c_out << " - " << a_mp << "*" << c_in << ")/"
           << (c_out - c_in) << " = " << info.alpha2_bn << " is not positive (input moment " << info.alpha2_in
           << ")";
        throw Error(ErrorCode::kNumeric, os.str());
      }
      sc->bn.set_lambda(lambda_for_moment(info.alpha2_bn, sc->bn.alpha(), sc->bn.v_th()));
    }
  } else if (info.kind != BlockKind::kSEW) {
    const int n = opt.calibration_probes;
    ForwardContext ctx = probe_context(opt);
    TDBN& r2 = block.res2().bn;
    const double floor_r = std::pow(default_lambda(r2), 2) / 100.0;
    PathFit rf = fit_path([&](const Var& v) { return block.residual(v, ctx); }, r2, x.value(), false, n,
                          seed++);
    const double phi_half = 1.0 / info.alpha2_in;
    // A path whose Jacobian vanishes (dead neurons, zero weights) keeps
    // its unit-variance scale.
    auto scale_for = [](double target, double slope, double floor, double fallback) {
      if (!(slope > 0) || !std::isfinite(target / slope)) return std::pair<double, bool>{fallback, false};
      return std::pair<double, bool>{std::max(floor, target / slope), target / slope >= floor};
    };
    const double def_r = std::pow(default_lambda(r2), 2);
    if (!sc) {
      // Identity shortcut: the residual path carries 1 / alpha2_in.
      auto [u, ok] = scale_for(phi_half, rf.phi_slope, floor_r, def_r);
      r2.set_lambda(static_cast<float>(std::sqrt(u)));
      info.feasible = ok;
    } else {
      const double floor_s = std::pow(default_lambda(sc->bn), 2) / 100.0;
      const double def_s = std::pow(default_lambda(sc->bn), 2);
      PathFit sf = fit_path([&](const Var& v) { return block.shortcut(v, ctx); }, sc->bn, x.value(),
                            info.kind == BlockKind::kEMS2, n, seed++);
      Solution sol;
      if (info.kind == BlockKind::kMS) {
        auto [u, ok_r] = scale_for(phi_half, rf.phi_slope, floor_r, def_r);
        auto [w, ok_s] = scale_for(phi_half, sf.phi_slope, floor_s, def_s);
        sol = {u, w, ok_r && ok_s};
      } else if (rf.phi_slope > 0 && sf.phi_slope > 0) {
        sol = solve_two_paths(rf, sf, opt.block_moment, 2.0 / info.alpha2_in, std::max(floor_r, floor_s));
      } else {
        sol = {def_r, def_s, false};
      }
      r2.set_lambda(static_cast<float>(std::sqrt(sol.u)));
      sc->bn.set_lambda(static_cast<float>(std::sqrt(sol.w)));
      info.feasible = sol.feasible;
    }
  }
  info.lambda_residual = block.res2().bn.lambda().value().data()[0];
  info.lambda_shortcut = sc ? sc->bn.lambda().value().data()[0] : 0.0f;
  info.lambda_residual = block.res2().bn.lambda().value().data()[0];
  info.lambda_shortcut = sc ? sc->bn.lambda().value().data()[0] : 0.0f;
  info.alpha2_out = second_moment(block_output(block, x, opt).value());
  return info;
}

GneInitReport init_bn_gne(Network& net, const GneOptions& opt) {
  require(opt.encode_moment > 0 && opt.block_moment > 0, ErrorCode::kConfig, "GNE moment targets must be positive");
  GneInitReport rep;
  TDBN& enc = net.encoder().bn;
  rep.encode_lambda = lambda_for_moment(opt.encode_moment, enc.alpha(), enc.v_th());
  enc.set_lambda(rep.encode_lambda);
  enc.beta().mutable_value().fill(0.0f);

  Var x0;
  {
    NoGradGuard no_grad;
    x0 = enc.forward(Var(encode_probe(net, opt, opt.seed)), BNMode::kBatchStats);
  }
  rep.alpha2_encode = second_moment(x0.value());

  std::uint64_t seed = opt.seed + 1;
  walk_blocks(net, x0, [&](ResidualBlock& block, const Var& x) {
    rep.blocks.push_back(init_block_gne(block, x.value(), opt, seed));
    seed += 2;
    return block_output(block, x, opt);
  });
  return rep;
}

MomentTrace trace_moments(Network& net, const Tensor& probe, const GneOptions& opt) {
  MomentTrace out;
  Var x0;
  {
    NoGradGuard no_grad;
    x0 = net.encoder().bn.forward(Var(probe), BNMode::kBatchStats);
  }
  out.alpha2_encode = second_moment(x0.value());
  walk_blocks(net, x0, [&](ResidualBlock& block, const Var& x) {
    out.block_inputs.push_back(x.value());
    Var y = block_output(block, x, opt);
    out.block_outputs.emplace_back(block.name(), second_moment(y.value()));
    return y;
  });
  return out;
}

double expected_phi(const ResidualBlock& block, double alpha2_in, bool* has_expectation) {
  if (has_expectation) *has_expectation = true;
  switch (block.spec().kind) {
    case BlockKind::kEMS1:
    case BlockKind::kEMS2:
      return block.spec().identity_shortcut() ? 1.0 + 1.0 / alpha2_in : 2.0 / alpha2_in;
    case BlockKind::kMS:
      return block.spec().identity_shortcut() ? 1.0 + 1.0 / alpha2_in : 2.0 / alpha2_in;
    case BlockKind::kSEW:
      break;
  }
  if (has_expectation) *has_expectation = false;
  return std::numeric_limits<double>::quiet_NaN();
}

std::vector<PhiRow> block_phi_table(Network& net, const Tensor& probe, const GneOptions& opt, int n_probes,
                                    double tolerance) {
  std::vector<PhiRow> rows;
  Var x0;
  {
    NoGradGuard no_grad;
    x0 = net.encoder().bn.forward(Var(probe), BNMode::kBatchStats);
  }
  std::uint64_t seed = opt.seed + 1000;
  walk_blocks(net, x0, [&](ResidualBlock& block, const Var& x) {
    PhiRow row;
    row.name = block.name();
    row.kind = block.spec().kind;
    row.alpha2_in = second_moment(x.value());
    ForwardContext ctx = probe_context(opt);
    row.phi = estimate_phi([&](const Var& v) { return block.forward(v, ctx); }, x.value(), n_probes, seed++);
    row.expected = expected_phi(block, row.alpha2_in, &row.has_expectation);
    row.pass = !row.has_expectation || std::abs(row.phi.phi - row.expected) <= tolerance * row.expected;
    Var y = block_output(block, x, opt);
    row.alpha2_out = second_moment(y.value());
    rows.push_back(row);
    return y;
  });
  return rows;
}

CompositionCheck addition_check(ResidualBlock& block, const Tensor& input, const GneOptions& opt, int n_probes) {
  ForwardContext ctx = probe_context(opt);
  CompositionCheck c;
  c.name = block.name();
  c.phi_whole = estimate_phi([&](const Var& v) { return block.forward(v, ctx); }, input, n_probes, opt.seed).phi;
  c.phi_parts = estimate_phi([&](const Var& v) { return block.residual(v, ctx); }, input, n_probes, opt.seed + 1).phi +
                estimate_phi([&](const Var& v) { return block.shortcut(v, ctx); }, input, n_probes, opt.seed + 2).phi;
  c.rel_err = std::abs(c.phi_whole - c.phi_parts) / std::max(c.phi_parts, 1e-30);
  return c;
}

CompositionCheck multiplication_check(ResidualBlock& first, ResidualBlock& second, const Tensor& input,
                                      const GneOptions& opt, int n_probes) {
  ForwardContext ctx = probe_context(opt);
  CompositionCheck c;
  c.name = first.name() + "+" + second.name();
  const double p1 =
      estimate_phi([&](const Var& v) { return first.forward(v, ctx); }, input, n_probes, opt.seed).phi;
  const Tensor mid = block_output(first, Var(input), opt).value();
  const double p2 = estimate_phi([&](const Var& v) { return second.forward(v, ctx); }, mid, n_probes, opt.seed + 1).phi;
  c.phi_whole = estimate_phi([&](const Var& v) { return second.forward(first.forward(v, ctx), ctx); }, input,
                             n_probes, opt.seed + 2)
                    .phi;
  c.phi_parts = p1 * p2;
  c.rel_err = std::abs(c.phi_whole - c.phi_parts) / std::max(c.phi_parts, 1e-30);
  return c;
}

DepthDiagnostic depth_gradient_diagnostic(const std::vector<int>& depths, std::uint64_t seed, const GneOptions& opt,
                                          bool gne_init, bool zero_weights) {
  require(!depths.empty(), ErrorCode::kConfig, "depth diagnostic needs at least one depth");
  DepthDiagnostic diag;
  for (int depth : depths) {
    NetworkSpec spec = NetworkSpec::for_depth(depth, Family::kEMS);
    Network net(spec, opt.lif, seed);
    if (gne_init) init_bn_gne(net, opt);
    if (zero_weights)
      for (auto& p : net.parameters()) p.var->mutable_value().fill(0.0f);

    Rng rng(seed + 1);
    const Tensor frames = rng.normal_tensor({static_cast<std::int64_t>(opt.steps) * opt.batch, spec.input_channels,
                                             2 * opt.height, 2 * opt.width});
    GradModeGuard grad_on(true);
    ForwardContext ctx = probe_context(opt);
    Var x = net.encode(Var(frames), ctx);
    for (auto& block : net.backbone()) x = block.forward(x, ctx);
    Rng proj(seed + 2);
    backward(weighted_sum(x, proj.normal_tensor(x.shape())));
    const Tensor g = net.encoder().conv.weight().grad();
    double s = 0;
    for (float v : g.data()) s += static_cast<double>(v) * v;
    diag.rows.push_back({depth, std::sqrt(s)});
  }
  for (std::size_t i = 0; i < diag.rows.size(); ++i)
    for (std::size_t j = 0; j < diag.rows.size(); ++j)
      if (diag.rows[i].depth > diag.rows[j].depth)
        diag.ratios.emplace_back(diag.rows[i].depth, diag.rows[j].depth,
                                 diag.rows[j].grad_norm > 0 ? diag.rows[i].grad_norm / diag.rows[j].grad_norm
                                                            : std::numeric_limits<double>::quiet_NaN());
  return diag;
}

}  // namespace ems
