#include <algorithm>
#include <cmath>
#include <random>

#include "doctest.h"
#include "ems/detection.hpp"
#include "ems/error.hpp"

using namespace ems;

namespace {

Detection det(float x, float y, float w, float h, float conf, int cls = 0) { return {{x, y, w, h}, cls, conf}; }
GroundTruth gt(float x, float y, float w, float h, int cls = 0) { return {{x, y, w, h}, cls}; }

double iou_ref(const BBox& a, const BBox& b) {
  const double ix = std::max(0.0, std::min<double>(a.x + a.w, b.x + b.w) - std::max<double>(a.x, b.x));
  const double iy = std::max(0.0, std::min<double>(a.y + a.h, b.y + b.h) - std::max<double>(a.y, b.y));
  const double inter = ix * iy, uni = double(a.w) * a.h + double(b.w) * b.h - inter;
  return uni > 0 ? inter / uni : 0.0;
}

// Greedy suppression over a shrinking pool: take the best remaining box,
// drop everything of its class that overlaps it too much.
std::vector<Detection> nms_ref(std::vector<Detection> pool, double thresh) {
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

// 101-point interpolated AP of one class in one image from a hand-listed
// TP/FP sequence.
double ap101(const std::vector<bool>& tp_seq, int n_gt) {
  std::vector<double> p, r;
  int tp = 0, n = 0;
  for (bool t : tp_seq) {
    ++n;
    tp += t;
    p.push_back(double(tp) / n);
    r.push_back(double(tp) / n_gt);
  }
  double s = 0;
  for (int k = 0; k <= 100; ++k) {
    double best = 0;
    for (std::size_t i = 0; i < p.size(); ++i)
      if (r[i] >= k / 100.0 - 1e-12) best = std::max(best, p[i]);
    s += best;
  }
  return s / 101.0;
}

}  // namespace

TEST_CASE("IoU examples") {
  CHECK(iou({0, 0, 2, 2}, {0, 0, 2, 2}) == doctest::Approx(1.0));
  CHECK(iou({0, 0, 2, 2}, {5, 5, 2, 2}) == 0.0f);
  CHECK(iou({0, 0, 2, 2}, {1, 1, 2, 2}) == doctest::Approx(1.0 / 7.0).epsilon(1e-7));
  CHECK(iou({0, 0, 0, 0}, {0, 0, 0, 0}) == 0.0f);
}

TEST_CASE("decode at the first cell") {
  const Anchor a{10, 20};
  BBox b = decode_box(0, 0, 0, 0, 0, 0, a, 8);
  CHECK(b.x + b.w / 2 == doctest::Approx(4.0));
  CHECK(b.y + b.h / 2 == doctest::Approx(4.0));
  CHECK(b.w == doctest::Approx(10.0));
  CHECK(b.h == doctest::Approx(20.0));
}

TEST_CASE("encode_box inverts decode_box") {
  const Anchor a{12, 9};
  const BBox box{37.5f, 20.25f, 17.0f, 6.5f};
  const int cx = static_cast<int>((box.x + box.w / 2) / 16), cy = static_cast<int>((box.y + box.h / 2) / 16);
  BoxTarget t = encode_box(box, cx, cy, a, 16);
  auto logit = [](float p) { return std::log(p / (1 - p)); };
  BBox back = decode_box(logit(t.off_x), logit(t.off_y), t.log_w, t.log_h, cx, cy, a, 16);
  CHECK(back.x == doctest::Approx(box.x).epsilon(1e-4));
  CHECK(back.y == doctest::Approx(box.y).epsilon(1e-4));
  CHECK(back.w == doctest::Approx(box.w).epsilon(1e-4));
  CHECK(back.h == doctest::Approx(box.h).epsilon(1e-4));
}

TEST_CASE("decode_map confidence vanishes for very negative objectness") {
  const int K = 2;
  Tensor raw({1, 5 + K, 2, 2});
  for (std::int64_t i = 0; i < 4; ++i) raw.data()[4 * 4 + i] = -60.0f;
  CHECK(decode_map(raw, 0, {{8, 8}}, 16, K, 1e-6f).empty());
}

TEST_CASE("NMS examples") {
  // Two 10x10 boxes offset by 2.5 px overlap at IoU 0.6.
  const Detection A = det(0, 0, 10, 10, 0.9f), B = det(0, 2.5f, 10, 10, 0.8f);
  CHECK(iou(A.box, B.box) == doctest::Approx(0.6));
  auto kept = nms({B, A}, 0.5f);
  REQUIRE(kept.size() == 1);
  CHECK(kept[0].confidence == 0.9f);
  CHECK(nms({}, 0.5f).empty());

  const Detection C = det(0, 5, 10, 10, 0.7f), chainA = det(0, -5, 10, 10, 0.9f);
  // A-B and B-C overlap strongly, A-C are disjoint.
  const Detection chainB = det(0, 0, 10, 10, 0.8f);
  kept = nms({chainA, chainB, C}, 0.3f);
  REQUIRE(kept.size() == 2);
  CHECK(kept[0].confidence == 0.9f);
  CHECK(kept[1].confidence == 0.7f);
}

TEST_CASE("NMS keeps different classes apart") {
  auto kept = nms({det(0, 0, 10, 10, 0.9f, 0), det(0, 0, 10, 10, 0.8f, 1)}, 0.5f);
  CHECK(kept.size() == 2);
}

TEST_CASE("NMS matches the greedy oracle on 1000 random sets") {
  std::mt19937_64 gen(7);
  std::uniform_real_distribution<float> pos(0, 20), size(1, 12), conf(0, 1), thr(0.1f, 0.9f);
  std::uniform_int_distribution<int> count(0, 6), cls(0, 1);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<Detection> dets;
    const int n = count(gen);
    for (int i = 0; i < n; ++i) dets.push_back(det(pos(gen), pos(gen), size(gen), size(gen), conf(gen), cls(gen)));
    const float t = thr(gen);
    auto got = nms(dets, t), want = nms_ref(dets, t);
    REQUIRE(got.size() == want.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
      CHECK(got[i].confidence == want[i].confidence);
      CHECK(got[i].box.x == want[i].box.x);
      CHECK(got[i].class_id == want[i].class_id);
    }
  }
}

TEST_CASE("anchor assignment prefers the closer prior") {
  AnchorSet anchors;
  anchors.strides = {16};
  anchors.per_scale = {{{8, 8}, {32, 32}}};
  Assignment a = assign_box({10, 10, 30, 30}, anchors, {{4, 4}});
  CHECK(a.anchor == 1);
  CHECK(a.cell_x == 1);
  CHECK(a.cell_y == 1);
}

TEST_CASE("YOLO loss of saturated negatives is near zero") {
  const int K = 2, A = 1;
  Tensor raw({2, A * (5 + K), 4, 4});
  for (std::int64_t b = 0; b < 2; ++b)
    for (std::int64_t i = 0; i < 16; ++i) raw.data()[(b * 7 + 4) * 16 + i] = -10.0f;
  AnchorSet anchors;
  anchors.strides = {16};
  anchors.per_scale = {{{8, 8}}};
  DetectionLoss loss = yolo_loss({Var(raw)}, {{}, {}}, anchors, K);
  CHECK(loss.total.value()[0] / 16.0 <= 1e-3);
  CHECK(loss.box == 0.0);
  CHECK(loss.cls == 0.0);
}

TEST_CASE("YOLO loss of a perfect assigned prediction has no box or class term") {
  const int K = 2;
  AnchorSet anchors;
  anchors.strides = {16};
  anchors.per_scale = {{{16, 16}}};
  const BBox box{20, 4, 16, 16};  // center (28, 12): cell (1, 0)
  BoxTarget t = encode_box(box, 1, 0, anchors.per_scale[0][0], 16);
  auto logit = [](float p) { return std::log(p / (1 - p)); };
  Tensor raw({1, 5 + K, 2, 2});
  auto at = [&](int c, int y, int x) -> float& { return raw.data()[(c * 2 + y) * 2 + x]; };
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 2; ++x) at(4, y, x) = -30.0f;
  at(0, 0, 1) = logit(t.off_x);
  at(1, 0, 1) = logit(t.off_y);
  at(2, 0, 1) = t.log_w;
  at(3, 0, 1) = t.log_h;
  at(4, 0, 1) = 30.0f;
  at(5, 0, 1) = -30.0f;
  at(6, 0, 1) = 30.0f;
  DetectionLoss loss = yolo_loss({Var(raw)}, {{{box, 1}}}, anchors, K);
  CHECK(loss.box == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(loss.cls < 1e-9);
}

TEST_CASE("mAP hand cases") {
  // One hit on one ground truth.
  MapResult m = eval_map({{det(0, 0, 10, 10, 0.9f)}}, {{gt(0, 0, 10, 10)}}, 1, {0.5});
  CHECK(m.map50 == doctest::Approx(1.0).epsilon(1e-6));
  // Two ground truths, one found: precision 1 up to recall 0.5.
  m = eval_map({{det(0, 0, 10, 10, 0.9f)}}, {{gt(0, 0, 10, 10), gt(30, 30, 10, 10)}}, 1, {0.5});
  CHECK(m.map50 == doctest::Approx(51.0 / 101.0).epsilon(1e-6));
  CHECK(ap101({true}, 2) == doctest::Approx(51.0 / 101.0).epsilon(1e-12));
}

TEST_CASE("duplicate detections count as false positives") {
  std::vector<std::vector<Detection>> dets = {
      {det(0, 0, 10, 10, 0.9f), det(0.5f, 0, 10, 10, 0.8f), det(30, 30, 10, 10, 0.7f), det(60, 0, 5, 5, 0.6f)}};
  std::vector<std::vector<GroundTruth>> truth = {{gt(0, 0, 10, 10), gt(30, 30, 10, 10), gt(50, 50, 8, 8)}};
  // Ranked: hit, duplicate, hit, miss.
  CHECK(average_precision(dets, truth, 0, 0.5) == doctest::Approx(ap101({true, false, true, false}, 3)).epsilon(1e-9));
}

TEST_CASE("AP is NaN without ground truth and mAP skips such classes") {
  CHECK(std::isnan(average_precision({{det(0, 0, 1, 1, 0.5f, 1)}}, {{}}, 1, 0.5)));
  MapResult m = eval_map({{det(0, 0, 10, 10, 0.9f)}}, {{gt(0, 0, 10, 10)}}, 2, {0.5});
  CHECK(m.map50 == doctest::Approx(1.0));
  CHECK(std::isnan(m.ap50[1]));
}

TEST_CASE("mAP over the COCO thresholds") {
  CHECK(coco_iou_thresholds().size() == 10);
  // IoU 0.6 hit: counted at 0.50 and 0.55 and 0.60 only.
  MapResult m = eval_map({{det(0, 2.5f, 10, 10, 0.9f)}}, {{gt(0, 0, 10, 10)}}, 1);
  CHECK(m.map50 == doctest::Approx(1.0));
  CHECK(m.map50_95 == doctest::Approx(0.3).epsilon(1e-6));
  CHECK_THROWS_AS(eval_map({{}}, {{}}, 1, {1.5}), Error);
}

TEST_CASE("k-means anchors are sorted across scales") {
  std::vector<Anchor> boxes;
  std::mt19937_64 gen(3);
  std::uniform_real_distribution<float> s(4, 40);
  for (int i = 0; i < 200; ++i) boxes.push_back({s(gen), s(gen)});
  AnchorSet set = kmeans_anchors(boxes, {16, 32}, 3, 0);
  set.validate(3);
  float prev = 0;
  for (const auto& scale : set.per_scale)
    for (const auto& a : scale) {
      CHECK(a.w * a.h >= prev);
      prev = a.w * a.h;
    }
}

TEST_CASE("detection JSON line") {
  CHECK(detection_json(3, det(1, 2, 3, 4, 0.5f, 1)) ==
        R"({"class_id":1,"confidence":0.5,"h":4.0,"image_id":3,"w":3.0,"x":1.0,"y":2.0})");
}
