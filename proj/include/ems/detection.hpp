#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ems/autograd.hpp"
#include "ems/random.hpp"

namespace ems {

// Top-left corner plus size, in pixels.
struct BBox {
  float x = 0, y = 0, w = 0, h = 0;
};

struct Detection {
  BBox box;
  int class_id = 0;
  float confidence = 0;
};

struct GroundTruth {
  BBox box;
  int class_id = 0;
};

float iou(const BBox& a, const BBox& b);

struct Anchor {
  float w = 0, h = 0;
};

// Priors per scale, ordered like the network's output maps.
struct AnchorSet {
  std::vector<std::vector<Anchor>> per_scale;
  std::vector<int> strides;

  std::size_t scales() const { return per_scale.size(); }
  void validate(int anchors_per_scale) const;
};

// Width/height k-means with 1 - IoU distance; result sorted by area and split
// small-to-large over the scales in stride order.
AnchorSet kmeans_anchors(const std::vector<Anchor>& boxes, const std::vector<int>& strides,
                         int anchors_per_scale, std::uint64_t seed);

// Raw channel layout per anchor: tx, ty, tw, th, objectness, class logits.
struct BoxTarget {
  float off_x = 0, off_y = 0;  // center offset inside the cell, sigmoid space
  float log_w = 0, log_h = 0;  // log ratio to the anchor
};

BoxTarget encode_box(const BBox& box, int cell_x, int cell_y, const Anchor& anchor, int stride);
BBox decode_box(float tx, float ty, float tw, float th, int cell_x, int cell_y, const Anchor& anchor,
                int stride);

// Candidates of one image from one scale map [B, A*(5+K), H, W].
std::vector<Detection> decode_map(const Tensor& raw, std::int64_t batch_index,
                                  const std::vector<Anchor>& anchors, int stride, int num_classes,
                                  float conf_threshold);

std::vector<Detection> nms(const std::vector<Detection>& dets, float iou_threshold);

struct Assignment {
  std::size_t scale = 0;
  int anchor = 0;
  int cell_x = 0, cell_y = 0;
};

// Best prior IoU over every anchor of every scale, at the cell holding the box center.
Assignment assign_box(const BBox& box, const AnchorSet& anchors,
                      const std::vector<std::pair<int, int>>& grid_sizes);

struct LossWeights {
  float objectness = 1.0f;
  float cls = 1.0f;
  float box = 5.0f;
};

struct DetectionLoss {
  Var total;
  double objectness = 0, cls = 0, box = 0;
};

// Sum of objectness BCE over all cells, class BCE and box squared error over
// assigned cells; divided by the batch size.
DetectionLoss yolo_loss(const std::vector<Var>& maps,
                        const std::vector<std::vector<GroundTruth>>& truth,
                        const AnchorSet& anchors, int num_classes, LossWeights weights = {});

struct MapResult {
  double map50 = 0;
  double map50_95 = 0;
  std::vector<double> ap50;        // per class; NaN where the class has no ground truth
  std::vector<double> thresholds;  // IoU thresholds averaged for map50_95
};

double average_precision(const std::vector<std::vector<Detection>>& dets,
                         const std::vector<std::vector<GroundTruth>>& truth, int class_id,
                         double iou_threshold);

// 0.50, 0.55, ..., 0.95
std::vector<double> coco_iou_thresholds();

MapResult eval_map(const std::vector<std::vector<Detection>>& dets,
                   const std::vector<std::vector<GroundTruth>>& truth, int num_classes,
                   const std::vector<double>& thresholds = coco_iou_thresholds());

std::string detection_json(std::int64_t image_id, const Detection& det);

}  // namespace ems
