#include "ems/energy.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include "ems/error.hpp"
#include "ems/ops.hpp"
#include "json.hpp"

namespace ems {

namespace {

std::string block_of(const std::string& layer) {
  for (const char* tail : {".res1.conv", ".res2.conv", ".shortcut.conv"}) {
    const std::string t(tail);
    if (layer.size() > t.size() && layer.compare(layer.size() - t.size(), t.size(), t) == 0)
      return layer.substr(0, layer.size() - t.size());
  }
  if (layer == "encode.conv") return "encode";
  return layer;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

OpCount count_ops(const Trace& trace) {
  OpCount out;
  for (const auto& rec : trace.convs()) out.push_back({rec.name, block_of(rec.name), rec.role, rec.op_capacity});
  return out;
}

OpCount count_ops(const NetworkSpec& spec, int height, int width) {
  require(height > 0 && width > 0, ErrorCode::kConfig, "input resolution must be positive");
  const int coarse = spec.strides().back();
  require(height % coarse == 0 && width % coarse == 0, ErrorCode::kConfig,
          "input resolution " + std::to_string(height) + "x" + std::to_string(width) +
              " must be a multiple of the coarsest stride " + std::to_string(coarse));
  LIFConfig lif;
  Network net(spec, lif, 0);
  Trace trace;
  NoGradGuard no_grad;
  ForwardContext ctx{1, BNMode::kBatchStats, lif, &trace};
  net.forward(Var(Tensor({2, spec.input_channels, height, width})), ctx);
  return count_ops(trace);
}

void FiringStats::merge(const FiringStats& other) {
  for (const auto& [name, f] : other.layers) {
    LayerFiring& mine = layers[name];
    mine.active += f.active;
    mine.total += f.total;
    mine.non_binary += f.non_binary;
  }
}

double FiringStats::mean_rate(const OpCount& counts) const {
  std::int64_t active = 0, total = 0;
  for (const auto& layer : counts) {
    if (layer.role != LayerRole::kSpikeFed) continue;
    auto it = layers.find(layer.name);
    if (it == layers.end()) continue;
    active += it->second.active;
    total += it->second.total;
  }
  return total > 0 ? static_cast<double>(active) / static_cast<double>(total) : 0.0;
}

FiringStats record_firing(const Trace& trace) {
  FiringStats stats;
  for (const auto& rec : trace.convs()) stats.layers[rec.name] = {rec.active, rec.total, rec.non_binary};
  return stats;
}

EnergyReport estimate_energy(const OpCount& counts, const FiringStats& stats, int steps, EnergyOptions options) {
  require(steps >= 1, ErrorCode::kConfig, "T must be >= 1");
  EnergyReport rep;
  rep.steps = steps;
  rep.include_encode = options.include_encode;
  const double T = steps;
  for (const auto& layer : counts) {
    auto it = stats.layers.find(layer.name);
    require(it != stats.layers.end(), ErrorCode::kData, "no firing statistics for layer " + layer.name);
    const LayerFiring& f = it->second;
    LayerEnergy e;
    e.name = layer.name;
    e.block = layer.block;
    e.role = layer.role;
    e.op_capacity = layer.op_capacity;
    e.fr = f.rate();
    const bool mac = layer.role != LayerRole::kSpikeFed || f.non_binary > 0;
    e.op_class = mac ? OpClass::kMAC : OpClass::kAC;
    const double cap = static_cast<double>(layer.op_capacity);
    const double op_ac = mac ? 0.0 : cap;
    const double op_mac = mac ? cap : 0.0;
    e.energy_pj = T * (e.fr * kEnergyAC * op_ac + kEnergyMAC * op_mac);
    e.ann_energy_pj = kEnergyMAC * cap;
    if (options.include_encode || layer.role != LayerRole::kEncode) {
      rep.snn_total_pj += e.energy_pj;
      rep.ann_total_pj += e.ann_energy_pj;
    }
    rep.layers.push_back(e);
  }
  rep.ratio = rep.snn_total_pj > 0 ? rep.ann_total_pj / rep.snn_total_pj : std::numeric_limits<double>::infinity();
  return rep;
}

std::vector<std::pair<std::string, double>> EnergyReport::block_totals() const {
  std::vector<std::pair<std::string, double>> out;
  for (const auto& l : layers) {
    if (!include_encode && l.role == LayerRole::kEncode) continue;
    if (out.empty() || out.back().first != l.block) out.emplace_back(l.block, 0.0);
    out.back().second += l.energy_pj;
  }
  return out;
}

double EnergyReport::mac_capacity() const {
  double s = 0;
  for (const auto& l : layers)
    if (l.op_class == OpClass::kMAC) s += static_cast<double>(l.op_capacity);
  return s;
}

std::string EnergyReport::to_json() const {
  nlohmann::json j;
  j["steps"] = steps;
  j["include_encode"] = include_encode;
  j["e_mac_pj"] = kEnergyMAC;
  j["e_ac_pj"] = kEnergyAC;
  nlohmann::json ls = nlohmann::json::array();
  for (const auto& l : layers)
    ls.push_back({{"layer", l.name},
                  {"block", l.block},
                  {"tag", to_string(l.role)},
                  {"op_class", l.op_class == OpClass::kMAC ? "MAC" : "AC"},
                  {"op_capacity", l.op_capacity},
                  {"fr", l.fr},
                  {"pJ", l.energy_pj},
                  {"ann_pJ", l.ann_energy_pj}});
  j["layers"] = ls;
  nlohmann::json bs = nlohmann::json::array();
  for (const auto& [name, pj] : block_totals()) bs.push_back({{"block", name}, {"pJ", pj}});
  j["blocks"] = bs;
  j["snn_total_pJ"] = snn_total_pj;
  j["ann_total_pJ"] = ann_total_pj;
  if (std::isfinite(ratio))
    j["ratio"] = ratio;
  else
    j["ratio"] = nullptr;
  return j.dump(2);
}

std::string EnergyReport::to_csv() const {
  std::ostringstream os;
  os << "layer,block,tag,op_class,op_capacity,fr,pJ,ann_pJ\n";
  for (const auto& l : layers)
    os << l.name << ',' << l.block << ',' << to_string(l.role) << ',' << (l.op_class == OpClass::kMAC ? "MAC" : "AC")
       << ',' << l.op_capacity << ',' << fmt(l.fr) << ',' << fmt(l.energy_pj) << ',' << fmt(l.ann_energy_pj) << '\n';
  os << "total,,,,," << "," << fmt(snn_total_pj) << ',' << fmt(ann_total_pj) << '\n';
  os << "ratio,,,,,,," << fmt(ratio) << '\n';
  return os.str();
}

}  // namespace ems
