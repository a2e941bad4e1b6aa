#pragma once

#include <functional>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include "ems/checkpoint.hpp"
#include "ems/config.hpp"
#include "ems/detection.hpp"
#include "ems/encoding.hpp"
#include "ems/energy.hpp"

namespace ems {

struct Sample {
  std::int64_t image_id = 0;
  Tensor image;                     // frames input: [3, H, W] in [0, 1]
  std::vector<EventRecord> events;  // events input
  std::vector<GroundTruth> boxes;
};

struct Dataset {
  SynthMode input = SynthMode::kFrames;
  int height = 0, width = 0;
  std::vector<Sample> samples;
};

// Synthetic sets are generated in memory; annotation files resolve image and
// event paths relative to their own directory.
Dataset load_dataset(const DataSource& source, const DataConfig& data);

// [T, C, H, W] network input of one sample, optionally mirrored left-right.
Tensor sample_frames(const Sample& s, const Dataset& ds, int steps, double dt, bool flip = false);

// Boxes mirrored like sample_frames(flip = true).
std::vector<GroundTruth> flip_boxes(const std::vector<GroundTruth>& boxes, int width);

struct Model {
  RunConfig config;
  std::unique_ptr<Network> net;
  AnchorSet anchors;
};

// Fresh network with the configured init; anchors from k-means over `boxes`.
Model build_model(const RunConfig& cfg, const Dataset& train_set);
// Network, anchors and BN statistics rebuilt from a checkpoint and its config snapshot.
Model load_model(const std::string& checkpoint_path);

struct EvalResult {
  MapResult map;
  double mean_fr = 0;
  FiringStats firing;
  std::vector<std::vector<Detection>> detections;  // per sample, after NMS
  std::vector<std::int64_t> image_ids;
};

// Inference-mode evaluation (running BN statistics) at `steps` time steps.
EvalResult evaluate_model(Model& model, const Dataset& ds, int steps);

// Per-image post-processing: decode both scales, drop below the confidence
// cutoff, class-wise NMS, keep the top max_detections.
std::vector<Detection> postprocess(const NetworkOutput& out, std::int64_t batch_index, const Model& model);

// One image (.ppm) or event stream (.csv / binary) checked against the data config.
Sample load_input(const std::string& path, const DataConfig& data);
// Inference-mode detections for a single sample.
std::vector<Detection> detect(Model& model, const Sample& sample, int steps);

struct EpochMetrics {
  int epoch = 0;
  double loss = 0;
  double map50 = 0;
  double map50_95 = 0;
  double mean_fr = 0;
  double lr = 0;
};

struct TrainResult {
  std::vector<EpochMetrics> epochs;
  std::string checkpoint_path;
  std::string metrics_csv;
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

// Writes model.ckpt, metrics.csv, metrics.json and curves.svg under out_dir.
TrainResult train_model(const RunConfig& cfg, const std::string& out_dir, const EpochCallback& on_epoch = {});

std::string metrics_csv(const std::vector<EpochMetrics>& rows);
std::string metrics_svg(const std::vector<EpochMetrics>& rows);

// Firing statistics of every conv over the dataset plus the energy estimate.
EnergyReport energy_report(Model& model, const Dataset& ds, int steps, EnergyOptions options = {});

}  // namespace ems
