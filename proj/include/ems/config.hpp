#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ems/blocks.hpp"
#include "ems/encoding.hpp"
#include "json.hpp"

namespace ems {

struct ModelConfig {
  int depth = 10;
  Family family = Family::kEMS;
  int steps = 4;  // T
  double tau = 0.25;
  double v_th = 0.5;
  double v_reset = 0.0;
  double alpha = 1.0;            // TDBN threshold coefficient
  double surrogate_width = 1.0;  // a
  Readout readout = Readout::kMembrane;
  int num_classes = 2;
  int anchors_per_scale = 3;
  int head_channels = 128;
  std::string init = "gne";  // "gne" or "default" (TDBN lambda = 1, beta = 0)
};

struct TrainConfig {
  std::string optimizer = "sgd";
  double lr = 1e-2;
  double momentum = 0.9;
  double weight_decay = 0.0;
  int epochs = 30;
  int batch_size = 8;
  std::uint64_t seed = 0;
  std::string warm_start;             // checkpoint path, may have a different T
  std::string lr_schedule = "cosine";  // "constant" or "cosine"
  int warmup_epochs = 1;
  double grad_clip = 10.0;  // global L2 norm, 0 disables
  bool flip = true;         // random horizontal flip
};

// Either an annotations file (paths relative to it) or a synthetic set.
struct DataSource {
  std::string annotations;
  bool synth = false;
  std::uint64_t synth_seed = 0;
  int synth_images = 0;
};

struct DataConfig {
  SynthMode input = SynthMode::kFrames;
  double dt = 1000.0;  // microseconds per bin for events
  int height = 64;
  int width = 64;
  DataSource train;
  DataSource eval;

  int channels() const { return input == SynthMode::kEvents ? 2 : 3; }
};

struct EvalConfig {
  std::vector<double> iou_thresholds;  // defaults to 0.50:0.05:0.95
  double nms_threshold = 0.5;
  double conf_threshold = 0.01;
  int max_detections = 100;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  EvalConfig eval;
  std::string output_dir = "runs/default";

  RunConfig();
  void validate() const;
  NetworkSpec network_spec() const;
  LIFConfig lif() const;
};

// Unknown keys and ill-typed values are E_CONFIG.
RunConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const RunConfig& cfg);
RunConfig load_config(const std::string& path);

// Output directory with the EMS_OUTPUT_DIR override applied.
std::string resolve_output_dir(const RunConfig& cfg);
inline constexpr const char* kOutputDirEnv = "EMS_OUTPUT_DIR";

}  // namespace ems
