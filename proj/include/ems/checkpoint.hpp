#pragma once

#include <string>
#include <utility>
#include <vector>

#include "ems/blocks.hpp"
#include "ems/config.hpp"
#include "ems/detection.hpp"

namespace ems {

// "EMSCKPT1", u32 version, u64 config length + config JSON, then two tensor
// sections (parameters, BN running statistics). Each section is a u32 count
// followed by records: u32 name length, name, u32 rank, u64 dims, f32 values.
// Every integer and float is little-endian.
inline constexpr char kCheckpointMagic[9] = "EMSCKPT1";
inline constexpr std::uint32_t kCheckpointVersion = 1;

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

struct Checkpoint {
  nlohmann::json config;
  NamedTensors tensors;  // parameters plus "anchors" [S, A, 2]
  NamedTensors buffers;  // TDBN running mean / var

  const Tensor* find_tensor(const std::string& name) const;
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::string& bytes);
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

Checkpoint capture_checkpoint(Network& net, const RunConfig& cfg, const AnchorSet& anchors);

// Copies every parameter and buffer by name. Missing names, extra names and
// shape mismatches are collected and rejected together (E_CONFIG).
void restore_network(Network& net, const Checkpoint& ckpt);

AnchorSet checkpoint_anchors(const Checkpoint& ckpt, const std::vector<int>& strides);

}  // namespace ems
