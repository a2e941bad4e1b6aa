#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "../oracle/reference.hpp"
#include "CLI11.hpp"
#include "ems/blocks.hpp"
#include "ems/config.hpp"
#include "ems/detection.hpp"
#include "ems/encoding.hpp"
#include "ems/energy.hpp"
#include "ems/error.hpp"
#include "ems/ops.hpp"
#include "ems/random.hpp"
#include "ems/report.hpp"
#include "ems/spiking.hpp"
#include "ems/train.hpp"

using namespace ems;
namespace fs = std::filesystem;

namespace {

// Pinned thresholds.
constexpr double kLifTol = 1e-7;
constexpr double kLifSeconds = 1.0;
constexpr int kSurrogatePoints = 10;
constexpr int kGradProbes = 100;
constexpr double kGradRelTol = 1e-4;
constexpr double kGradFloor = 1e-3;
constexpr double kGradSeconds = 60.0;
constexpr int kAuditInputs = 100;
constexpr double kAuditSeconds = 60.0;
constexpr int kBnSamples = 4096;
constexpr double kBnTol = 1e-3;
constexpr double kEnergySeconds = 60.0;
constexpr int kGneProbes = 256;
constexpr double kGneSeconds = 300.0;
constexpr int kNmsSets = 1000;
constexpr double kApTol = 1e-6;
constexpr int kRoundTripRecords = 1000;
constexpr double kTrainMap = 0.80;
constexpr int kTrainEpochs = 30;
constexpr double kTrainSeconds = 1800.0;
constexpr double kStepSlack = 0.02;

struct Outcome {
  bool pass = true;
  std::vector<std::string> notes;

  void check(bool ok, const std::string& what) {
    pass &= ok;
    notes.push_back(std::string(ok ? "ok   " : "FAIL ") + what);
  }
};

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::string fmt(const char* f, double a, double b) {
  char buf[160];
  std::snprintf(buf, sizeof buf, f, a, b);
  return buf;
}

std::string fmt(const char* f, double a, double b, double c) {
  char buf[192];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Tensor column(std::vector<float> v) {
  const auto n = static_cast<std::int64_t>(v.size());
  return Tensor({n, 1, 1, 1}, std::move(v));
}

Tensor uniform(Rng& rng, Shape shape) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<float>(rng.uniform());
  return t;
}

// ---------------------------------------------------------------------------

Outcome lif_exactness() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  const LIFConfig cfg;
  struct Case {
    std::vector<float> in;
    std::vector<double> mem;
    std::vector<float> spikes;
  };
  const std::vector<Case> cases = {
      {{0.3f, 0.3f, 0.6f}, {0.3, 0.375, 0.69375}, {0, 0, 1}},
      {{0.6f, 0.6f, 0.6f, 0.6f}, {0.6, 0.6, 0.6, 0.6}, {1, 1, 1, 1}},
      {{0, 0, 0, 0, 0}, {0, 0, 0, 0, 0}, {0, 0, 0, 0, 0}},
  };
  for (const auto& c : cases) {
    const int T = static_cast<int>(c.in.size());
    LIFState s = lif_forward(column(c.in), T, cfg);
    double err = 0;
    for (int t = 0; t < T; ++t) err = std::max(err, std::abs(double(s.membrane[t]) - c.mem[t]));
    o.check(err <= kLifTol && s.last_spike == column(c.spikes), fmt("hand sequence of length %.0f, max err %.2e", T, err));
  }
  // Random sequences against the double-precision oracle.
  Rng rng(11);
  const int T = 8;
  const Tensor x = rng.normal_tensor({T * 4, 3, 5, 5}, 0.3f, 0.5f);
  LIFOutput out = lif(Var(x), T, cfg);
  ref::T4 mem;
  ref::T4 spikes = ref::lif(ref::T4(x), T, ref::LifParams{}, &mem);
  double err = 0;
  bool same = true;
  for (std::size_t i = 0; i < mem.v.size(); ++i) {
    err = std::max(err, std::abs(double(out.membrane.value()[i]) - mem.v[i]));
    same &= double(out.spikes.value()[i]) == spikes.v[i];
  }
  o.check(err <= kLifTol && same, fmt("random sequences vs oracle, max err %.2e", err));
  const double secs = seconds_since(t0);
  o.check(secs < kLifSeconds, fmt("runtime %.3f s", secs));
  return o;
}

Outcome surrogate_correctness() {
  Outcome o;
  const LIFConfig cfg;
  const double lo = cfg.v_th - cfg.a / 2, hi = cfg.v_th + cfg.a / 2;
  const std::vector<float> points = {-1.0f, -0.001f, static_cast<float>(lo), 0.25f, 0.5f,
                                     0.75f, 0.999f,  static_cast<float>(hi), 1.001f, 2.0f};
  int exact = 0;
  for (float v : points) {
    Var in(column({v}), true);
    backward(sum(lif(in, 1, cfg).spikes));
    const double want = std::abs(double(v) - cfg.v_th) <= cfg.a / 2 ? 1.0 / cfg.a : 0.0;
    exact += double(in.grad()[0]) == want;
  }
  o.check(exact == kSurrogatePoints && int(points.size()) == kSurrogatePoints,
          fmt("%.0f of %.0f probe points exact (boundaries included)", exact, kSurrogatePoints));
  return o;
}

// Two-block net: EMS2 (C -> 2C, stride 2) then EMS1 (2C -> 2C, identity).
struct TwoBlockOracle {
  std::map<std::string, std::vector<double>> p;
  std::map<std::string, std::vector<std::int64_t>> shape;
  double alpha = 1, v_th = 0.5, eps = 1e-5;
  ref::LifParams lif;

  ref::T4 weight(const std::string& name) const {
    const auto& s = shape.at(name);
    ref::T4 k(s[0], s[1], s[2], s[3]);
    k.v = p.at(name);
    return k;
  }
  ref::T4 unit(const std::string& name, const ref::T4& x, int stride) const {
    const ref::T4 k = weight(name + ".conv.weight");
    ref::T4 y = ref::conv(x, k, stride, k.h == 3 ? 1 : 0);
    return ref::tdbn(y, p.at(name + ".bn.lambda"), p.at(name + ".bn.beta"), alpha, v_th, eps);
  }
  ref::T4 residual(const std::string& b, const ref::T4& x, int stride, int steps) const {
    ref::T4 s0 = ref::lif(x, steps, lif);
    ref::T4 s1 = ref::lif(unit(b + ".res1", s0, stride), steps, lif);
    return unit(b + ".res2", s1, 1);
  }
  ref::T4 forward(const ref::T4& x, int steps) const {
    const ref::T4 pooled = ref::maxpool_ceil(x);
    ref::T4 fresh = unit("b1.shortcut", ref::lif(pooled, steps, lif), 1);
    ref::T4 y = ref::add(residual("b1", x, 2, steps), ref::concat(pooled, fresh));
    return ref::add(residual("b2", y, 1, steps), y);
  }
};

Outcome gradient_wiring() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  const int T = 2, B = 2, C = 4, S = 8;
  Rng rng(21);
  ResidualBlock b1("b1", {BlockKind::kEMS2, C, 2 * C, 2}, 1.0f, 0.5f, rng);
  ResidualBlock b2("b2", {BlockKind::kEMS1, 2 * C, 2 * C, 1}, 1.0f, 0.5f, rng);
  std::vector<NamedParam> params;
  std::vector<NamedBuffer> buffers;
  b1.collect(params, buffers);
  b2.collect(params, buffers);
  // Move lambda and beta off their defaults so every parameter matters.
  for (auto& np : params)
    if (np.name.find(".bn.") != std::string::npos)
      for (auto& v : np.var->mutable_value().data())
        v = np.name.find("lambda") != std::string::npos ? 0.5f + static_cast<float>(rng.uniform()) * 1.5f
                                                        : static_cast<float>(rng.uniform()) - 0.5f;
  LIFConfig cfg;
  cfg.spike_fn = SpikeFn::kRamp;
  const Tensor x0 = rng.normal_tensor({T * B, C, S, S}, 0.3f, 1.0f);
  const Tensor wts = rng.normal_tensor({T * B, 2 * C, S / 2, S / 2});

  ForwardContext ctx{T, BNMode::kBatchStats, cfg, nullptr};
  for (auto& np : params) np.var->zero_grad();
  Var y = b2.forward(b1.forward(Var(x0), ctx), ctx);
  backward(weighted_sum(y, wts));

  TwoBlockOracle oracle;
  oracle.lif.ramp = true;
  oracle.alpha = b1.res1().bn.alpha();
  oracle.v_th = b1.res1().bn.v_th();
  oracle.eps = b1.res1().bn.eps();
  for (auto& np : params) {
    const Tensor& v = np.var->value();
    oracle.p[np.name] = std::vector<double>(v.data().begin(), v.data().end());
    std::vector<std::int64_t> s(v.shape().begin(), v.shape().end());
    oracle.shape[np.name] = s;
  }
  const ref::T4 rx(x0);
  auto f = [&] { return ref::dot(oracle.forward(rx, T), wts); };
  auto central = [&](double& q, double h) {
    const double keep = q;
    q = keep + h;
    const double up = f();
    q = keep - h;
    const double down = f();
    q = keep;
    return (up - down) / (2 * h);
  };
  std::map<std::string, const Var*> by_name;
  for (auto& np : params) by_name[np.name] = np.var;

  // Probes cycle through the parameter tensors, random element within each.
  std::mt19937_64 gen(5);
  int checked = 0, kinks = 0, bad = 0;
  double worst = 0;
  std::set<std::string> touched;
  for (int attempt = 0; checked < kGradProbes && attempt < 20 * kGradProbes; ++attempt) {
    const std::string& name = params[attempt % params.size()].name;
    const std::size_t i = std::uniform_int_distribution<std::size_t>(0, oracle.p[name].size() - 1)(gen);
    double& q = oracle.p[name][i];
    const double fd = central(q, 1e-4);
    // Two step sizes disagree only when a ramp or pooling kink lies inside the stencil.
    if (std::abs(fd - central(q, 5e-5)) > 1e-6 * std::max(1.0, std::abs(fd))) {
      ++kinks;
      continue;
    }
    ++checked;
    touched.insert(name);
    const double g = by_name[name]->grad()[i];
    const double rel = std::abs(g - fd) / std::max(kGradFloor, std::abs(fd));
    worst = std::max(worst, rel);
    bad += rel > kGradRelTol;
  }
  o.check(checked == kGradProbes, fmt("%.0f probes checked, %.0f skipped at kinks", checked, kinks));
  o.check(bad == 0, fmt("%.0f probes over tolerance, max rel err %.2e", bad, worst));
  o.notes.push_back("     " + std::to_string(touched.size()) + " of " + std::to_string(params.size()) +
                    " parameter tensors probed");
  const double secs = seconds_since(t0);
  o.check(secs < kGradSeconds, fmt("runtime %.1f s", secs));
  return o;
}

Outcome full_spike_invariant() {
  Outcome o;
  const LIFConfig lif;
  const int T = 2, side = 64;
  auto probes = [&](std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Tensor> out;
    for (int i = 0; i < kAuditInputs; ++i) out.push_back(uniform(rng, {T, 3, side, side}));
    return out;
  };
  for (int depth : {10, 18, 34}) {
    const auto t0 = std::chrono::steady_clock::now();
    Network net(NetworkSpec::for_depth(depth, Family::kEMS), lif, 1);
    const auto v = full_spike_audit(net, probes(100 + depth), T, lif);
    const double secs = seconds_since(t0);
    o.check(v.empty(), fmt("EMS-ResNet-%.0f: %.0f violating convs on 100 inputs", depth, double(v.size())));
    o.check(secs < kAuditSeconds, fmt("EMS-ResNet-%.0f runtime %.1f s", depth, secs));
  }
  for (Family fam : {Family::kSEW, Family::kMS}) {
    const auto t0 = std::chrono::steady_clock::now();
    Network net(NetworkSpec::for_depth(10, fam), lif, 1);
    const auto v = full_spike_audit(net, probes(7), T, lif);
    const double secs = seconds_since(t0);
    const std::string name = fam == Family::kSEW ? "SEW" : "MS";
    bool shortcut = false;
    for (const auto& a : v) shortcut |= a.conv.find(".shortcut.conv") != std::string::npos;
    o.check(!v.empty(), name + "-ResNet-10: " + std::to_string(v.size()) + " violating convs");
    if (fam == Family::kMS) o.check(shortcut, "MS violations include a channel-changing shortcut conv");
    o.check(secs < kAuditSeconds, fmt("runtime %.1f s", secs));
  }
  return o;
}

Outcome tdbn_statistics() {
  Outcome o;
  const int C = 4;
  Rng rng(31);
  TDBN bn(C, 1.0f, 0.5f);
  for (int c = 0; c < C; ++c) {
    bn.lambda().mutable_value()[c] = 0.25f + static_cast<float>(c);
    bn.beta().mutable_value()[c] = -0.6f + 0.4f * static_cast<float>(c);
  }
  // [64, C, 8, 8] pools 64 * 64 = 4096 samples per channel.
  const Tensor x = rng.normal_tensor({64, C, 8, 8}, 2.0f, 3.0f);
  const Tensor y = bn.forward(Var(x), BNMode::kTrain).value();
  const std::int64_t hw = 64;
  double worst_mu = 0, worst_sd = 0;
  for (int c = 0; c < C; ++c) {
    double s = 0, ss = 0;
    for (int n = 0; n < 64; ++n)
      for (std::int64_t i = 0; i < hw; ++i) s += y[(n * C + c) * hw + i];
    const double mu = s / kBnSamples;
    for (int n = 0; n < 64; ++n)
      for (std::int64_t i = 0; i < hw; ++i) ss += std::pow(y[(n * C + c) * hw + i] - mu, 2);
    const double sd = std::sqrt(ss / kBnSamples);
    const double lam = bn.lambda().value()[c], beta = bn.beta().value()[c];
    worst_mu = std::max(worst_mu, std::abs(mu - beta));
    worst_sd = std::max(worst_sd, std::abs(sd - lam * 1.0 * 0.5));
  }
  o.check(worst_mu <= kBnTol, fmt("max |mean - beta| %.2e over 4 channels", worst_mu));
  o.check(worst_sd <= kBnTol, fmt("max |std - lambda alpha V_th| %.2e", worst_sd));
  return o;
}

// Layer energy recomputed from the op capacities and the raw firing counts.
double recompute_total(const OpCount& ops, const FiringStats& stats, int T, bool& same_layers,
                       const EnergyReport& rep) {
  double total = 0;
  same_layers = ops.size() == rep.layers.size();
  for (std::size_t i = 0; i < ops.size(); ++i) {
    const LayerFiring& f = stats.layers.at(ops[i].name);
    const bool mac = ops[i].role != LayerRole::kSpikeFed || f.non_binary > 0;
    const double cap = static_cast<double>(ops[i].op_capacity);
    const double fr = static_cast<double>(f.active) / static_cast<double>(f.total);
    const double e = mac ? T * (kEnergyMAC * cap) : T * (fr * kEnergyAC * cap);
    if (same_layers) same_layers &= rep.layers[i].name == ops[i].name && rep.layers[i].energy_pj == e;
    total += e;
  }
  return total;
}

double csv_total(const std::string& csv, std::size_t& rows) {
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  double total = 0;
  rows = 0;
  while (std::getline(in, line)) {
    std::vector<std::string> f;
    std::stringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
    if (f[0] == "total" || f[0] == "ratio") continue;
    total += std::stod(f[6]);
    ++rows;
  }
  return total;
}

Outcome energy_model() {
  Outcome o;
  {
    OpCount ac = {{"l", "l", LayerRole::kSpikeFed, 10000}};
    FiringStats s;
    s.layers["l"] = {1, 4, 0};
    const double e = estimate_energy(ac, s, 4).snn_total_pj;
    o.check(e == 9000.0, fmt("AC example %.1f pJ (want 9000)", e));
    OpCount mac = {{"l", "l", LayerRole::kMembraneFed, 10000}};
    s.layers["l"] = {0, 4, 0};
    const double m = estimate_energy(mac, s, 4).snn_total_pj;
    o.check(m == 184000.0, fmt("MAC example %.1f pJ (want 184000)", m));
  }
  const int T = 2, B = 4, side = 64;
  Rng rng(41);
  const Tensor probe = uniform(rng, {T * B, 3, side, side});
  std::map<Family, double> totals;
  for (Family fam : {Family::kEMS, Family::kMS, Family::kSEW}) {
    const auto t0 = std::chrono::steady_clock::now();
    const NetworkSpec spec = NetworkSpec::for_depth(10, fam);
    Network net(spec, LIFConfig{}, 3);
    Trace trace;
    ForwardContext ctx{T, BNMode::kBatchStats, LIFConfig{}, &trace};
    NoGradGuard no_grad;
    net.forward(Var(probe), ctx);
    const FiringStats stats = record_firing(trace);
    const EnergyReport rep = estimate_energy(count_ops(trace), stats, T);
    bool same_layers = false;
    const double mine = recompute_total(count_ops(spec, side, side), stats, T, same_layers, rep);
    std::size_t rows = 0;
    const double from_csv = csv_total(rep.to_csv(), rows);
    const double secs = seconds_since(t0);
    const std::string name = fam == Family::kEMS ? "EMS" : (fam == Family::kMS ? "MS" : "SEW");
    o.check(same_layers && mine == rep.snn_total_pj && from_csv == rep.snn_total_pj && rows == rep.layers.size(),
            name + ": total " + fmt("%.6e pJ recomputed bit-for-bit", rep.snn_total_pj));
    o.check(secs < kEnergySeconds, name + fmt(" runtime %.1f s", secs));
    totals[fam] = rep.snn_total_pj;
  }
  o.check(totals[Family::kEMS] < totals[Family::kMS] && totals[Family::kMS] < totals[Family::kSEW],
          fmt("EMS %.4e < MS %.4e < SEW %.4e pJ", totals[Family::kEMS], totals[Family::kMS], totals[Family::kSEW]));
  return o;
}

Outcome gne_criterion() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  GneReportOptions opt;
  opt.n_probes = kGneProbes;
  const GneReport rep = run_gne_report(RunConfig{}, opt);
  for (const auto* rows : {&rep.blocks, &rep.reference_blocks})
    for (const auto& r : *rows) {
      if (!r.has_expectation) continue;
      o.check(r.pass, r.name + fmt(" phi %.4f vs %.4f (alpha2_in %.3f)", r.phi.phi, r.expected, r.alpha2_in));
    }
  o.check(rep.encode.pass, fmt("encode alpha2 %.4f vs 3 +- 5%%", rep.encode.measured));
  for (const auto& m : rep.inter_block) o.check(m.pass, m.name + fmt(" alpha2 %.4f vs 2 +- 10%%", m.measured));
  o.check(rep.depth_pass, fmt("depth gradient ratio 34/10 = %.3f in [0.1, 10]", rep.depth_ratio));
  const double secs = seconds_since(t0);
  o.check(secs < kGneSeconds, fmt("runtime %.1f s", secs));
  return o;
}

Detection det(float x, float y, float w, float h, float conf, int cls = 0) { return {{x, y, w, h}, cls, conf}; }
GroundTruth gt(float x, float y, float w, float h, int cls = 0) { return {{x, y, w, h}, cls}; }

double iou_ref(const BBox& a, const BBox& b) {
  const double ix = std::max(0.0, std::min<double>(a.x + a.w, b.x + b.w) - std::max<double>(a.x, b.x));
  const double iy = std::max(0.0, std::min<double>(a.y + a.h, b.y + b.h) - std::max<double>(a.y, b.y));
  const double inter = ix * iy, uni = double(a.w) * a.h + double(b.w) * b.h - inter;
  return uni > 0 ? inter / uni : 0.0;
}

std::vector<Detection> nms_brute(std::vector<Detection> pool, double thresh) {
  std::vector<Detection> kept;
  while (!pool.empty()) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < pool.size(); ++i)
      if (pool[i].confidence > pool[best].confidence) best = i;
    const Detection top = pool[best];
    kept.push_back(top);
    pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(best));
    std::vector<Detection> rest;
    for (const auto& d : pool)
      if (d.class_id != top.class_id || iou_ref(d.box, top.box) <= thresh) rest.push_back(d);
    pool = rest;
  }
  return kept;
}

Outcome detection_oracles() {
  Outcome o;
  std::mt19937_64 gen(17);
  std::uniform_real_distribution<float> pos(0, 20), size(1, 12), conf(0, 1), thr(0.1f, 0.9f);
  std::uniform_int_distribution<int> count(0, 6), cls(0, 1);
  int mismatched = 0;
  for (int trial = 0; trial < kNmsSets; ++trial) {
    std::vector<Detection> dets;
    const int n = count(gen);
    for (int i = 0; i < n; ++i) dets.push_back(det(pos(gen), pos(gen), size(gen), size(gen), conf(gen), cls(gen)));
    const float t = thr(gen);
    const auto got = nms(dets, t), want = nms_brute(dets, t);
    bool same = got.size() == want.size();
    for (std::size_t i = 0; same && i < got.size(); ++i)
      same = got[i].confidence == want[i].confidence && got[i].class_id == want[i].class_id &&
             got[i].box.x == want[i].box.x && got[i].box.y == want[i].box.y && got[i].box.w == want[i].box.w &&
             got[i].box.h == want[i].box.h;
    mismatched += !same;
  }
  o.check(mismatched == 0, fmt("NMS vs brute-force greedy: %.0f of 1000 sets differ", mismatched));
  const double one = eval_map({{det(0, 0, 10, 10, 0.9f)}}, {{gt(0, 0, 10, 10)}}, 1, {0.5}).map50;
  o.check(std::abs(one - 1.0) <= kApTol, fmt("single hit AP %.9f (want 1)", one));
  const double half =
      eval_map({{det(0, 0, 10, 10, 0.9f)}}, {{gt(0, 0, 10, 10), gt(30, 30, 10, 10)}}, 1, {0.5}).map50;
  o.check(std::abs(half - 51.0 / 101.0) <= kApTol, fmt("half recall AP %.9f (want 51/101 = %.9f)", half, 51.0 / 101.0));
  return o;
}

Outcome event_encoding() {
  Outcome o;
  FrameSequence f = bin_events({{100, 5, 7, 1}, {1500, 5, 7, -1}}, 2, 1000, 16, 16);
  o.check(f.frames.shape() == Shape{2, 2, 16, 16} && f.frames.at(0, 0, 7, 5) == 1.0f && f.frames.at(1, 1, 7, 5) == 1.0f &&
              f.frames.sum() == 2.0,
          "two-event binning example");
  o.check(bin_events({}, 3, 10, 4, 4).frames.sum() == 0.0, "empty stream gives empty frames");
  FrameSequence w = bin_events({{99, 0, 0, 1}, {100, 1, 0, 1}, {119, 2, 0, 1}, {120, 3, 0, 1}}, 2, 10, 1, 4, 100);
  o.check(w.frames.at(0, 0, 0, 1) == 1.0f && w.frames.at(1, 0, 0, 2) == 1.0f && w.frames.sum() == 2.0,
          "half-open window with offset start");

  std::mt19937_64 gen(23);
  std::uniform_int_distribution<std::uint64_t> t(0, 1ull << 40);
  std::uniform_int_distribution<int> xy(0, 63), p(0, 1);
  std::vector<EventRecord> ev;
  for (int i = 0; i < kRoundTripRecords; ++i)
    ev.push_back({t(gen), static_cast<std::uint16_t>(xy(gen)), static_cast<std::uint16_t>(xy(gen)),
                  static_cast<std::int8_t>(p(gen) ? 1 : -1)});
  std::stringstream csv, bin;
  write_events_csv(csv, ev);
  write_events_binary(bin, ev);
  o.check(parse_events_csv(csv) == ev, "CSV round trip of 1000 records");
  o.check(parse_events_binary(bin) == ev, "binary round trip of 1000 records");
  return o;
}

Outcome training(const std::string& out_root) {
  Outcome o;
  auto run = [&](int steps) {
    RunConfig cfg = config_from_json(nlohmann::json::object());
    cfg.model.steps = steps;
    const fs::path dir = fs::path(out_root) / ("T" + std::to_string(steps));
    fs::remove_all(dir);
    fs::create_directories(dir);
    const auto t0 = std::chrono::steady_clock::now();
    TrainResult r = train_model(cfg, dir.string(), [&](const EpochMetrics& m) {
      std::printf("  T=%d epoch %2d loss %.4f map50 %.4f (%.0f s)\n", steps, m.epoch, m.loss, m.map50,
                  seconds_since(t0));
      std::fflush(stdout);
    });
    return std::make_pair(r, seconds_since(t0));
  };
  const auto [r4, s4] = run(4);
  const double map4 = r4.epochs.empty() ? 0.0 : r4.epochs.back().map50;
  o.check(int(r4.epochs.size()) == kTrainEpochs, fmt("T=4 ran %.0f epochs", double(r4.epochs.size())));
  o.check(map4 >= kTrainMap, fmt("T=4 final mAP@0.5 %.4f >= 0.80", map4));
  o.check(s4 <= kTrainSeconds, fmt("T=4 wall time %.0f s <= 1800 s", s4));
  const auto [r1, s1] = run(1);
  const double map1 = r1.epochs.empty() ? 0.0 : r1.epochs.back().map50;
  o.check(map4 >= map1 - kStepSlack, fmt("mAP(T=4) %.4f >= mAP(T=1) %.4f - 0.02", map4, map1));
  o.notes.push_back(fmt("     T=1 wall time %.0f s", s1));
  return o;
}

struct Criterion {
  int id;
  const char* title;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<int> only;
  std::string out_root = (fs::temp_directory_path() / "ems_acceptance").string();
  app.add_option("-c,--criterion", only, "run only these criteria (1-10)");
  app.add_option("--out", out_root, "scratch directory for training runs");
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> all = {
      {1, "LIF exactness", lif_exactness},
      {2, "surrogate correctness", surrogate_correctness},
      {3, "gradient wiring", gradient_wiring},
      {4, "full-spike invariant", full_spike_invariant},
      {5, "TDBN statistics", tdbn_statistics},
      {6, "energy model", energy_model},
      {7, "GNE", gne_criterion},
      {8, "detection oracles", detection_oracles},
      {9, "event encoding", event_encoding},
      {10, "desk-scale training", [&] { return training(out_root); }},
  };
  int failed = 0;
  for (const auto& c : all) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.check(false, std::string("exception: ") + e.what());
    }
    for (const auto& n : o.notes) std::printf("    %s\n", n.c_str());
    std::printf("%s criterion %d: %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", c.id, c.title, seconds_since(t0));
    std::fflush(stdout);
    failed += !o.pass;
  }
  return failed == 0 ? 0 : 1;
}
