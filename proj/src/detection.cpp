#include "ems/detection.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "ems/error.hpp"
#include "json.hpp"

namespace ems {

namespace {

float sigmoid(float z) { return 1.0f / (1.0f + std::exp(-z)); }

double bce_logits(double z, double y) {
  return std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::fabs(z)));
}

float prior_iou(const Anchor& a, float w, float h) {
  const float inter = std::min(a.w, w) * std::min(a.h, h);
  const float uni = a.w * a.h + w * h - inter;
  return uni > 0 ? inter / uni : 0.0f;
}

}  // namespace

float iou(const BBox& a, const BBox& b) {
  const float ix = std::max(0.0f, std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x));
  const float iy = std::max(0.0f, std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y));
  const float inter = ix * iy;
  const float uni = a.w * a.h + b.w * b.h - inter;
  return uni > 0 ? inter / uni : 0.0f;
}

void AnchorSet::validate(int anchors_per_scale) const {
  require(!per_scale.empty() && per_scale.size() == strides.size(), ErrorCode::kConfig,
          "anchor set needs one prior list per scale");
  for (std::size_t s = 0; s < per_scale.size(); ++s) {
    require(static_cast<int>(per_scale[s].size()) == anchors_per_scale, ErrorCode::kConfig,
            "scale " + std::to_string(s) + " has " + std::to_string(per_scale[s].size()) +
                " anchors, expected " + std::to_string(anchors_per_scale));
    require(strides[s] > 0, ErrorCode::kConfig, "anchor strides must be positive");
    for (const auto& a : per_scale[s])
      require(a.w > 0 && a.h > 0, ErrorCode::kConfig, "anchor sizes must be positive");
  }
}

AnchorSet kmeans_anchors(const std::vector<Anchor>& boxes, const std::vector<int>& strides,
                         int anchors_per_scale, std::uint64_t seed) {
  require(!boxes.empty(), ErrorCode::kData, "anchor clustering needs at least one box");
  const std::size_t k = strides.size() * static_cast<std::size_t>(anchors_per_scale);
  Rng rng(seed);

  // k-means++ seeding under the 1 - IoU distance.
  std::vector<Anchor> centers{boxes[rng.uniform_int(0, static_cast<int>(boxes.size()) - 1)]};
  while (centers.size() < k) {
    std::vector<double> d(boxes.size());
    double total = 0;
    for (std::size_t i = 0; i < boxes.size(); ++i) {
      double best = 1.0;
      for (const auto& c : centers) best = std::min(best, 1.0 - prior_iou(c, boxes[i].w, boxes[i].h));
      d[i] = best * best;
      total += d[i];
    }
    if (total <= 0) {
      centers.push_back(centers.back());
      continue;
    }
    double r = rng.uniform(0.0, total);
    std::size_t pick = 0;
    for (; pick + 1 < boxes.size() && r > d[pick]; ++pick) r -= d[pick];
    centers.push_back(boxes[pick]);
  }

  std::vector<std::size_t> label(boxes.size(), k);
  for (int iter = 0; iter < 300; ++iter) {
    bool changed = false;
    for (std::size_t i = 0; i < boxes.size(); ++i) {
      std::size_t best = 0;
      float best_iou = -1;
      for (std::size_t c = 0; c < k; ++c) {
        const float v = prior_iou(centers[c], boxes[i].w, boxes[i].h);
        if (v > best_iou) best_iou = v, best = c;
      }
      changed |= label[i] != best;
      label[i] = best;
    }
    if (!changed) break;
    for (std::size_t c = 0; c < k; ++c) {
      double sw = 0, sh = 0;
      int n = 0;
      for (std::size_t i = 0; i < boxes.size(); ++i)
        if (label[i] == c) sw += boxes[i].w, sh += boxes[i].h, ++n;
      if (n > 0) centers[c] = {static_cast<float>(sw / n), static_cast<float>(sh / n)};
    }
  }
  std::sort(centers.begin(), centers.end(),
            [](const Anchor& a, const Anchor& b) { return a.w * a.h < b.w * b.h; });

  // Smallest priors go to the finest stride.
  std::vector<std::size_t> order(strides.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return strides[a] < strides[b]; });
  AnchorSet set;
  set.strides = strides;
  set.per_scale.resize(strides.size());
  for (std::size_t rank = 0; rank < order.size(); ++rank)
    for (int a = 0; a < anchors_per_scale; ++a)
      set.per_scale[order[rank]].push_back(centers[rank * anchors_per_scale + a]);
  return set;
}

BoxTarget encode_box(const BBox& box, int cell_x, int cell_y, const Anchor& anchor, int stride) {
  BoxTarget t;
  t.off_x = (box.x + 0.5f * box.w) / static_cast<float>(stride) - static_cast<float>(cell_x);
  t.off_y = (box.y + 0.5f * box.h) / static_cast<float>(stride) - static_cast<float>(cell_y);
  t.log_w = std::log(box.w / anchor.w);
  t.log_h = std::log(box.h / anchor.h);
  return t;
}

BBox decode_box(float tx, float ty, float tw, float th, int cell_x, int cell_y, const Anchor& anchor,
                int stride) {
  const float cx = (sigmoid(tx) + static_cast<float>(cell_x)) * static_cast<float>(stride);
  const float cy = (sigmoid(ty) + static_cast<float>(cell_y)) * static_cast<float>(stride);
  const float w = anchor.w * std::exp(tw), h = anchor.h * std::exp(th);
  return {cx - 0.5f * w, cy - 0.5f * h, w, h};
}

std::vector<Detection> decode_map(const Tensor& raw, std::int64_t batch_index,
                                  const std::vector<Anchor>& anchors, int stride, int num_classes,
                                  float conf_threshold) {
  const std::int64_t per = 5 + num_classes;
  require(raw.rank() == 4 && raw.dim(1) == static_cast<std::int64_t>(anchors.size()) * per,
          ErrorCode::kData,
          "prediction map " + shape_str(raw.shape()) + " does not carry " +
              std::to_string(anchors.size()) + " anchors x " + std::to_string(per) + " channels");
  const std::int64_t H = raw.dim(2), W = raw.dim(3);
  std::vector<Detection> out;
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    const std::int64_t base = static_cast<std::int64_t>(a) * per;
    for (std::int64_t i = 0; i < H; ++i)
      for (std::int64_t j = 0; j < W; ++j) {
        auto ch = [&](std::int64_t c) { return raw.at(batch_index, base + c, i, j); };
        const float obj = sigmoid(ch(4));
        int best = 0;
        float best_p = -1;
        for (int k = 0; k < num_classes; ++k) {
          const float p = sigmoid(ch(5 + k));
          if (p > best_p) best_p = p, best = k;
        }
        const float conf = obj * best_p;
        if (conf < conf_threshold) continue;
        Detection d;
        d.box = decode_box(ch(0), ch(1), ch(2), ch(3), static_cast<int>(j), static_cast<int>(i), anchors[a],
                           stride);
        d.class_id = best;
        d.confidence = conf;
        out.push_back(d);
      }
  }
  return out;
}

std::vector<Detection> nms(const std::vector<Detection>& dets, float iou_threshold) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](auto a, auto b) { return dets[a].confidence > dets[b].confidence; });
  std::vector<bool> removed(dets.size(), false);
  std::vector<Detection> kept;
  for (std::size_t oi = 0; oi < order.size(); ++oi) {
    const std::size_t i = order[oi];
    if (removed[i]) continue;
    kept.push_back(dets[i]);
    for (std::size_t oj = oi + 1; oj < order.size(); ++oj) {
      const std::size_t j = order[oj];
      if (!removed[j] && dets[j].class_id == dets[i].class_id && iou(dets[i].box, dets[j].box) > iou_threshold)
        removed[j] = true;
    }
  }
  return kept;
}

Assignment assign_box(const BBox& box, const AnchorSet& anchors,
                      const std::vector<std::pair<int, int>>& grid_sizes) {
  Assignment best;
  float best_iou = -1;
  for (std::size_t s = 0; s < anchors.scales(); ++s)
    for (std::size_t a = 0; a < anchors.per_scale[s].size(); ++a) {
      const float v = prior_iou(anchors.per_scale[s][a], box.w, box.h);
      if (v > best_iou) {
        best_iou = v;
        best.scale = s;
        best.anchor = static_cast<int>(a);
      }
    }
  const int stride = anchors.strides[best.scale];
  const auto [gh, gw] = grid_sizes.at(best.scale);
  best.cell_x = std::clamp(static_cast<int>(std::floor((box.x + 0.5f * box.w) / stride)), 0, gw - 1);
  best.cell_y = std::clamp(static_cast<int>(std::floor((box.y + 0.5f * box.h) / stride)), 0, gh - 1);
  return best;
}

DetectionLoss yolo_loss(const std::vector<Var>& maps,
                        const std::vector<std::vector<GroundTruth>>& truth,
                        const AnchorSet& anchors, int num_classes, LossWeights weights) {
  require(maps.size() == anchors.scales(), ErrorCode::kData, "loss: one map per anchor scale expected");
  const int A = static_cast<int>(anchors.per_scale.at(0).size());
  const std::int64_t per = 5 + num_classes;
  const std::int64_t batch = maps[0].dim(0);
  require(static_cast<std::int64_t>(truth.size()) == batch, ErrorCode::kData,
          "loss: ground truth count " + std::to_string(truth.size()) + " != batch " +
              std::to_string(batch));
  std::vector<std::pair<int, int>> grids;
  for (const auto& m : maps) {
    require(m.dim(1) == A * per && m.dim(0) == batch, ErrorCode::kData,
            "loss: unexpected map shape " + shape_str(m.shape()));
    grids.emplace_back(static_cast<int>(m.dim(2)), static_cast<int>(m.dim(3)));
  }

  // Target tables: -1 = no object; otherwise the ground-truth index.
  struct Slot {
    int gt = -1;
    std::int64_t b = 0;
  };
  std::vector<std::vector<Slot>> slots(maps.size());
  for (std::size_t s = 0; s < maps.size(); ++s) slots[s].resize(maps[s].numel() / per);
  auto slot_index = [&](std::size_t s, std::int64_t b, int a, int y, int x) {
    return ((b * A + a) * grids[s].first + y) * grids[s].second + x;
  };
  for (std::int64_t b = 0; b < batch; ++b)
    for (std::size_t g = 0; g < truth[b].size(); ++g) {
      const auto& gt = truth[b][g];
      require(gt.class_id >= 0 && gt.class_id < num_classes, ErrorCode::kData,
              "loss: class id " + std::to_string(gt.class_id) + " out of range");
      const Assignment as = assign_box(gt.box, anchors, grids);
      Slot& sl = slots[as.scale][slot_index(as.scale, b, as.anchor, as.cell_y, as.cell_x)];
      if (sl.gt < 0) sl = {static_cast<int>(g), b};  // first box keeps a contested slot
    }

  DetectionLoss out;
  std::vector<Tensor> grads;
  const double norm = 1.0 / static_cast<double>(batch);
  for (std::size_t s = 0; s < maps.size(); ++s) {
    const Tensor& raw = maps[s].value();
    Tensor g(raw.shape());
    const int gh = grids[s].first, gw = grids[s].second;
    const int stride = anchors.strides[s];
    for (std::int64_t b = 0; b < batch; ++b)
      for (int a = 0; a < A; ++a)
        for (int y = 0; y < gh; ++y)
          for (int x = 0; x < gw; ++x) {
            const Slot& sl = slots[s][slot_index(s, b, a, y, x)];
            const std::int64_t base = a * per;
            auto z = [&](std::int64_t c) { return raw.at(b, base + c, y, x); };
            auto dz = [&](std::int64_t c) -> float& { return g.at(b, base + c, y, x); };
            const double target = sl.gt >= 0 ? 1.0 : 0.0;
            out.objectness += weights.objectness * bce_logits(z(4), target) * norm;
            dz(4) = static_cast<float>(weights.objectness * (sigmoid(z(4)) - target) * norm);
            if (sl.gt < 0) continue;
            const GroundTruth& gt = truth[b][sl.gt];
            for (int k = 0; k < num_classes; ++k) {
              const double yk = k == gt.class_id ? 1.0 : 0.0;
              out.cls += weights.cls * bce_logits(z(5 + k), yk) * norm;
              dz(5 + k) = static_cast<float>(weights.cls * (sigmoid(z(5 + k)) - yk) * norm);
            }
            const BoxTarget t = encode_box(gt.box, x, y, anchors.per_scale[s][a], stride);
            const double sx = sigmoid(z(0)), sy = sigmoid(z(1));
            const double ex = sx - t.off_x, ey = sy - t.off_y, ew = z(2) - t.log_w, eh = z(3) - t.log_h;
            out.box += weights.box * (ex * ex + ey * ey + ew * ew + eh * eh) * norm;
            dz(0) = static_cast<float>(weights.box * 2 * ex * sx * (1 - sx) * norm);
            dz(1) = static_cast<float>(weights.box * 2 * ey * sy * (1 - sy) * norm);
            dz(2) = static_cast<float>(weights.box * 2 * ew * norm);
            dz(3) = static_cast<float>(weights.box * 2 * eh * norm);
          }
    grads.push_back(std::move(g));
  }
  const double total = out.objectness + out.cls + out.box;
  require(std::isfinite(total), ErrorCode::kNumeric, "detection loss is not finite");
  out.total = Var::make_result(Tensor({1}, static_cast<float>(total)), "yolo_loss", maps,
                               [grads = std::move(grads)](detail::Node& self) {
                                 const float up = self.grad[0];
                                 for (std::size_t s = 0; s < grads.size(); ++s) {
                                   detail::Node& in = *self.inputs[s];
                                   if (!in.requires_grad) continue;
                                   float* d = in.grad_buffer().raw();
                                   for (std::size_t i = 0; i < grads[s].numel(); ++i) d[i] += up * grads[s][i];
                                 }
                               });
  return out;
}

double average_precision(const std::vector<std::vector<Detection>>& dets,
                         const std::vector<std::vector<GroundTruth>>& truth, int class_id,
                         double iou_threshold) {
  struct Cand {
    std::size_t image;
    const Detection* det;
  };
  std::vector<Cand> cands;
  require(dets.size() == truth.size(), ErrorCode::kData,
          "detections cover " + std::to_string(dets.size()) + " images, ground truth " +
              std::to_string(truth.size()));
  std::size_t n_gt = 0;
  for (std::size_t i = 0; i < truth.size(); ++i)
    for (const auto& g : truth[i]) n_gt += g.class_id == class_id;
  for (std::size_t i = 0; i < dets.size(); ++i)
    for (const auto& d : dets[i])
      if (d.class_id == class_id) cands.push_back({i, &d});
  if (n_gt == 0) return std::numeric_limits<double>::quiet_NaN();

  // Confidence first, then a content key so the result ignores input order.
  auto key = [](const Cand& c) {
    return std::make_tuple(-c.det->confidence, c.image, c.det->box.x, c.det->box.y, c.det->box.w, c.det->box.h);
  };
  std::sort(cands.begin(), cands.end(), [&](const Cand& a, const Cand& b) { return key(a) < key(b); });

  std::vector<std::vector<bool>> used(truth.size());
  for (std::size_t i = 0; i < truth.size(); ++i) used[i].assign(truth[i].size(), false);
  std::vector<double> precision, recall;
  std::size_t tp = 0, fp = 0;
  for (const auto& c : cands) {
    int best = -1;
    double best_iou = -1.0;
    const auto& gts = truth[c.image];
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (gts[g].class_id != class_id || used[c.image][g]) continue;
      const double v = iou(c.det->box, gts[g].box);
      if (v >= iou_threshold && v > best_iou) best = static_cast<int>(g), best_iou = v;
    }
    if (best >= 0) {
      used[c.image][best] = true;
      ++tp;
    } else {
      ++fp;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
  }
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);

  double ap = 0;
  std::size_t pos = 0;
  for (int r = 0; r <= 100; ++r) {
    const double level = r / 100.0;
    while (pos < recall.size() && recall[pos] < level - 1e-12) ++pos;
    if (pos < recall.size()) ap += precision[pos];
  }
  return ap / 101.0;
}

std::vector<double> coco_iou_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

MapResult eval_map(const std::vector<std::vector<Detection>>& dets,
                   const std::vector<std::vector<GroundTruth>>& truth, int num_classes,
                   const std::vector<double>& thresholds) {
  require(!thresholds.empty(), ErrorCode::kConfig, "eval_map needs at least one IoU threshold");
  for (double t : thresholds)
    require(t > 0 && t <= 1, ErrorCode::kConfig, "IoU threshold " + std::to_string(t) + " outside (0, 1]");
  MapResult res;
  res.thresholds = thresholds;
  res.ap50.assign(num_classes, std::numeric_limits<double>::quiet_NaN());
  int counted = 0;
  double sum50 = 0, sum_all = 0;
  for (int c = 0; c < num_classes; ++c) {
    const double ap = average_precision(dets, truth, c, 0.5);
    if (std::isnan(ap)) continue;
    res.ap50[c] = ap;
    ++counted;
    sum50 += ap;
    double acc = 0;
    for (double t : res.thresholds) acc += average_precision(dets, truth, c, t);
    sum_all += acc / static_cast<double>(res.thresholds.size());
  }
  require(counted > 0, ErrorCode::kData, "evaluation set has no ground-truth boxes");
  res.map50 = sum50 / counted;
  res.map50_95 = sum_all / counted;
  return res;
}

std::string detection_json(std::int64_t image_id, const Detection& det) {
  nlohmann::json j = {{"image_id", image_id},  {"class_id", det.class_id}, {"x", det.box.x},
                      {"y", det.box.y},        {"w", det.box.w},           {"h", det.box.h},
                      {"confidence", det.confidence}};
  return j.dump();
}

}  // namespace ems
