#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ems/blocks.hpp"

namespace ems {

// 45 nm, 32-bit operation energies in picojoules.
inline constexpr double kEnergyMAC = 4.6;
inline constexpr double kEnergyAC = 0.9;

struct LayerOps {
  std::string name;
  std::string block;  // owning block, or the layer itself for stand-alone convs
  LayerRole role = LayerRole::kSpikeFed;
  std::int64_t op_capacity = 0;  // per sample and time step
};

using OpCount = std::vector<LayerOps>;

// Capacities of every conv for one input resolution; pooling, upsampling and
// concatenation have no multiply-accumulates and do not appear.
OpCount count_ops(const NetworkSpec& spec, int height, int width);
OpCount count_ops(const Trace& trace);

struct LayerFiring {
  std::int64_t active = 0;      // nonzero conv-input elements
  std::int64_t total = 0;       // conv-input elements
  std::int64_t non_binary = 0;  // conv-input elements outside {0, 1}

  double rate() const { return total > 0 ? static_cast<double>(active) / static_cast<double>(total) : 0.0; }
};

struct FiringStats {
  std::map<std::string, LayerFiring> layers;

  void merge(const FiringStats& other);
  // Element-weighted mean input rate over spike-fed layers.
  double mean_rate(const OpCount& counts) const;
};

FiringStats record_firing(const Trace& trace);

enum class OpClass { kAC, kMAC };

struct LayerEnergy {
  std::string name;
  std::string block;
  LayerRole role = LayerRole::kSpikeFed;
  OpClass op_class = OpClass::kAC;
  std::int64_t op_capacity = 0;
  double fr = 0;
  double energy_pj = 0;
  double ann_energy_pj = 0;
};

struct EnergyOptions {
  bool include_encode = true;
};

struct EnergyReport {
  int steps = 1;
  bool include_encode = true;
  std::vector<LayerEnergy> layers;
  double snn_total_pj = 0;
  double ann_total_pj = 0;
  double ratio = 0;  // ann / snn

  std::vector<std::pair<std::string, double>> block_totals() const;
  double mac_capacity() const;  // summed capacity of MAC-classified layers
  std::string to_json() const;
  std::string to_csv() const;
};

// Per layer: E = T * (fr * E_AC * OP_AC + E_MAC * OP_MAC), where the capacity
// lands in OP_MAC for encode and membrane-fed layers and for any spike-fed
// layer that saw a non-binary input; otherwise in OP_AC. The ANN baseline
// counts every layer as MAC with T = 1.
EnergyReport estimate_energy(const OpCount& counts, const FiringStats& stats, int steps,
                             EnergyOptions options = {});

}  // namespace ems
