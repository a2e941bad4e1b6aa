#include "ems/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "ems/error.hpp"
#include "ems/gne.hpp"
#include "ems/ops.hpp"

namespace ems {

namespace fs = std::filesystem;

namespace {

Tensor batch_input(const Dataset& ds, const std::vector<std::size_t>& idx, int steps, double dt,
                   const std::vector<bool>& flips) {
  std::vector<Tensor> seqs;
  seqs.reserve(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i)
    seqs.push_back(sample_frames(ds.samples[idx[i]], ds, steps, dt, !flips.empty() && flips[i]));
  std::vector<const Tensor*> ptrs;
  for (const auto& s : seqs) ptrs.push_back(&s);
  return time_major_batch(ptrs);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorCode::kData, "cannot write " + path.string());
  out << text;
}

std::string fmt(double v, const char* spec = "%.6f") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

}  // namespace

Dataset load_dataset(const DataSource& source, const DataConfig& data) {
  Dataset ds;
  ds.input = data.input;
  ds.height = data.height;
  ds.width = data.width;
  if (source.synth) {
    SynthConfig sc;
    sc.seed = source.synth_seed;
    sc.n_images = source.synth_images;
    sc.size = data.height;
    sc.mode = data.input;
    sc.dt = data.dt;
    sc.fit_objects();
    for (auto& s : synth_dataset(sc)) ds.samples.push_back({s.image_id, std::move(s.image), std::move(s.events), std::move(s.boxes)});
    return ds;
  }
  const fs::path base = fs::path(source.annotations).parent_path();
  for (const auto& ann : read_annotations(source.annotations)) {
    Sample s;
    s.image_id = ann.image_id;
    s.boxes = ann.boxes;
    const std::string path = (base / ann.path).string();
    if (data.input == SynthMode::kFrames) {
      s.image = read_ppm(path);
      require(s.image.dim(1) == data.height && s.image.dim(2) == data.width, ErrorCode::kData,
              path + ": image is " + std::to_string(s.image.dim(2)) + "x" + std::to_string(s.image.dim(1)) +
                  ", config expects " + std::to_string(data.width) + "x" + std::to_string(data.height));
    } else {
      s.events = parse_events(path);
    }
    check_boxes_inside(ann, data.height, data.width);
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

Tensor sample_frames(const Sample& s, const Dataset& ds, int steps, double dt, bool flip) {
  Tensor frames = ds.input == SynthMode::kFrames
                      ? replicate_static(s.image, steps).frames
                      : bin_events(s.events, steps, dt, ds.height, ds.width).frames;
  if (flip) {
    const std::int64_t W = frames.dim(3), rows = static_cast<std::int64_t>(frames.numel()) / W;
    for (std::int64_t r = 0; r < rows; ++r) std::reverse(frames.raw() + r * W, frames.raw() + (r + 1) * W);
  }
  return frames;
}

std::vector<GroundTruth> flip_boxes(const std::vector<GroundTruth>& boxes, int width) {
  std::vector<GroundTruth> out = boxes;
  for (auto& b : out) b.box.x = static_cast<float>(width) - b.box.x - b.box.w;
  return out;
}

Model build_model(const RunConfig& cfg, const Dataset& train_set) {
  cfg.validate();
  Model m;
  m.config = cfg;
  m.net = std::make_unique<Network>(cfg.network_spec(), cfg.lif(), cfg.train.seed);
  if (cfg.model.init == "gne") {
    GneOptions opt;
    opt.lif = cfg.lif();
    opt.seed = cfg.train.seed;
    init_bn_gne(*m.net, opt);
  }
  std::vector<Anchor> sizes;
  for (const auto& s : train_set.samples)
    for (const auto& b : s.boxes) sizes.push_back({b.box.w, b.box.h});
  require(!sizes.empty(), ErrorCode::kData, "training set has no boxes to fit anchors on");
  m.anchors = kmeans_anchors(sizes, cfg.network_spec().strides(), cfg.model.anchors_per_scale, cfg.train.seed);
  return m;
}

Model load_model(const std::string& checkpoint_path) {
  Checkpoint ckpt = load_checkpoint(checkpoint_path);
  Model m;
  m.config = config_from_json(ckpt.config);
  m.net = std::make_unique<Network>(m.config.network_spec(), m.config.lif(), m.config.train.seed);
  restore_network(*m.net, ckpt);
  m.anchors = checkpoint_anchors(ckpt, m.config.network_spec().strides());
  m.anchors.validate(m.config.model.anchors_per_scale);
  return m;
}

std::vector<Detection> postprocess(const NetworkOutput& out, std::int64_t batch_index, const Model& model) {
  const RunConfig& cfg = model.config;
  std::vector<Detection> cand;
  for (std::size_t s = 0; s < out.maps.size(); ++s) {
    auto d = decode_map(out.maps[s].value(), batch_index, model.anchors.per_scale[s], model.anchors.strides[s],
                        cfg.model.num_classes, static_cast<float>(cfg.eval.conf_threshold));
    cand.insert(cand.end(), d.begin(), d.end());
  }
  std::vector<Detection> kept = nms(cand, static_cast<float>(cfg.eval.nms_threshold));
  std::stable_sort(kept.begin(), kept.end(),
                   [](const Detection& a, const Detection& b) { return a.confidence > b.confidence; });
  if (kept.size() > static_cast<std::size_t>(cfg.eval.max_detections)) kept.resize(cfg.eval.max_detections);
  return kept;
}

EvalResult evaluate_model(Model& model, const Dataset& ds, int steps) {
  require(!ds.samples.empty(), ErrorCode::kData, "evaluation set is empty");
  require(steps >= 1, ErrorCode::kConfig, "T must be >= 1");
  const RunConfig& cfg = model.config;
  NoGradGuard no_grad;
  EvalResult res;
  std::vector<std::vector<GroundTruth>> truth;
  const std::size_t bs = static_cast<std::size_t>(cfg.train.batch_size);
  for (std::size_t start = 0; start < ds.samples.size(); start += bs) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(ds.samples.size(), start + bs); ++i) idx.push_back(i);
    Trace trace;
    ForwardContext ctx{steps, BNMode::kInfer, cfg.lif(), &trace};
    NetworkOutput out = model.net->forward(Var(batch_input(ds, idx, steps, cfg.data.dt, {})), ctx);
    res.firing.merge(record_firing(trace));
    for (std::size_t b = 0; b < idx.size(); ++b) {
      res.detections.push_back(postprocess(out, static_cast<std::int64_t>(b), model));
      res.image_ids.push_back(ds.samples[idx[b]].image_id);
      truth.push_back(ds.samples[idx[b]].boxes);
    }
  }
  res.map = eval_map(res.detections, truth, cfg.model.num_classes, cfg.eval.iou_thresholds);
  res.mean_fr = res.firing.mean_rate(count_ops(cfg.network_spec(), cfg.data.height, cfg.data.width));
  return res;
}

Sample load_input(const std::string& path, const DataConfig& data) {
  require(fs::exists(path), ErrorCode::kData, "input not found: " + path);
  Sample s;
  if (fs::path(path).extension() == ".ppm") {
    require(data.input == SynthMode::kFrames, ErrorCode::kData, "config expects events but got image " + path);
    s.image = read_ppm(path);
    require(s.image.dim(1) == data.height && s.image.dim(2) == data.width, ErrorCode::kData,
            "image " + path + " is " + shape_str(s.image.shape()) + ", config expects " +
                std::to_string(data.height) + "x" + std::to_string(data.width));
  } else {
    require(data.input == SynthMode::kEvents, ErrorCode::kData, "config expects images but got events " + path);
    s.events = parse_events(path);
  }
  return s;
}

std::vector<Detection> detect(Model& model, const Sample& sample, int steps) {
  require(steps >= 1, ErrorCode::kConfig, "T must be >= 1");
  const RunConfig& cfg = model.config;
  Dataset ds{cfg.data.input, cfg.data.height, cfg.data.width, {sample}};
  NoGradGuard no_grad;
  ForwardContext ctx{steps, BNMode::kInfer, cfg.lif(), nullptr};
  NetworkOutput out = model.net->forward(Var(batch_input(ds, {0}, steps, cfg.data.dt, {})), ctx);
  return postprocess(out, 0, model);
}

std::string metrics_csv(const std::vector<EpochMetrics>& rows) {
  std::ostringstream os;
  os << "epoch,loss,map50,map50_95,mean_fr,lr\n";
  for (const auto& r : rows)
    os << r.epoch << ',' << fmt(r.loss, "%.9g") << ',' << fmt(r.map50, "%.9g") << ',' << fmt(r.map50_95, "%.9g")
       << ',' << fmt(r.mean_fr, "%.9g") << ',' << fmt(r.lr, "%.9g") << '\n';
  return os.str();
}

std::string metrics_svg(const std::vector<EpochMetrics>& rows) {
  const double W = 640, H = 320, pad = 40;
  double max_loss = 1e-12;
  for (const auto& r : rows) max_loss = std::max(max_loss, r.loss);
  const double n = std::max<double>(1.0, static_cast<double>(rows.size()) - 1.0);
  auto px = [&](std::size_t i) { return pad + (W - 2 * pad) * static_cast<double>(i) / n; };
  auto py = [&](double v) { return H - pad - (H - 2 * pad) * v; };
  std::string loss_pts, map_pts;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    loss_pts += fmt(px(i), "%.1f") + "," + fmt(py(rows[i].loss / max_loss), "%.1f") + " ";
    map_pts += fmt(px(i), "%.1f") + "," + fmt(py(rows[i].map50), "%.1f") + " ";
  }
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<line x1=\"" << pad << "\" y1=\"" << H - pad << "\" x2=\"" << W - pad << "\" y2=\"" << H - pad
     << "\" stroke=\"black\"/>\n"
     << "<line x1=\"" << pad << "\" y1=\"" << pad << "\" x2=\"" << pad << "\" y2=\"" << H - pad
     << "\" stroke=\"black\"/>\n"
     << "<polyline fill=\"none\" stroke=\"#c0392b\" stroke-width=\"2\" points=\"" << loss_pts << "\"/>\n"
     << "<polyline fill=\"none\" stroke=\"#2471a3\" stroke-width=\"2\" points=\"" << map_pts << "\"/>\n"
     << "<text x=\"" << pad << "\" y=\"20\" font-size=\"12\" fill=\"#c0392b\">loss / " << fmt(max_loss, "%.4g")
     << "</text>\n"
     << "<text x=\"" << W / 2 << "\" y=\"20\" font-size=\"12\" fill=\"#2471a3\">mAP@0.5</text>\n"
     << "</svg>\n";
  return os.str();
}

TrainResult train_model(const RunConfig& cfg, const std::string& out_dir, const EpochCallback& on_epoch) {
  cfg.validate();
  const Dataset train_set = load_dataset(cfg.data.train, cfg.data);
  const Dataset eval_set = load_dataset(cfg.data.eval, cfg.data);
  require(!train_set.samples.empty(), ErrorCode::kData, "training set is empty");
  require(!eval_set.samples.empty(), ErrorCode::kData, "evaluation set is empty");

  Model model;
  if (!cfg.train.warm_start.empty()) {
    // Weights do not depend on T, so a T=1 checkpoint seeds a larger-T run.
    Checkpoint ckpt = load_checkpoint(cfg.train.warm_start);
    model.config = cfg;
    model.net = std::make_unique<Network>(cfg.network_spec(), cfg.lif(), cfg.train.seed);
    restore_network(*model.net, ckpt);
    model.anchors = checkpoint_anchors(ckpt, cfg.network_spec().strides());
    model.anchors.validate(cfg.model.anchors_per_scale);
  } else {
    model = build_model(cfg, train_set);
  }
  Network& net = *model.net;

  fs::create_directories(out_dir);
  TrainResult result;
  result.checkpoint_path = (fs::path(out_dir) / "model.ckpt").string();
  result.metrics_csv = (fs::path(out_dir) / "metrics.csv").string();

  std::vector<NamedParam> params = net.parameters();
  std::vector<Tensor> velocity;
  for (const auto& p : params) velocity.push_back(Tensor::zeros_like(p.var->value()));

  const int steps = cfg.model.steps;
  const std::size_t bs = static_cast<std::size_t>(cfg.train.batch_size);
  const std::size_t iters_per_epoch = (train_set.samples.size() + bs - 1) / bs;
  const double total_iters = static_cast<double>(iters_per_epoch) * cfg.train.epochs;
  const double warm_iters = static_cast<double>(iters_per_epoch) * std::min(cfg.train.warmup_epochs, cfg.train.epochs);
  auto lr_at = [&](double it) {
    if (it < warm_iters) return cfg.train.lr * (it + 1) / warm_iters;
    if (cfg.train.lr_schedule == "constant" || total_iters <= warm_iters) return cfg.train.lr;
    return cfg.train.lr * 0.5 * (1.0 + std::cos(M_PI * (it - warm_iters) / (total_iters - warm_iters)));
  };

  double it = 0;
  for (int epoch = 1; epoch <= cfg.train.epochs; ++epoch) {
    Rng rng(cfg.train.seed * 1000003ull + static_cast<std::uint64_t>(epoch));
    std::vector<std::size_t> order(train_set.samples.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng.engine());
    double loss_sum = 0;
    double lr = cfg.train.lr;
    for (std::size_t start = 0; start < order.size(); start += bs, it += 1) {
      std::vector<std::size_t> idx(order.begin() + start, order.begin() + std::min(order.size(), start + bs));
      std::vector<bool> flips;
      std::vector<std::vector<GroundTruth>> truth;
      for (std::size_t i : idx) {
        const bool f = cfg.train.flip && rng.uniform() < 0.5;
        flips.push_back(f);
        truth.push_back(f ? flip_boxes(train_set.samples[i].boxes, train_set.width) : train_set.samples[i].boxes);
      }
      ForwardContext ctx{steps, BNMode::kTrain, cfg.lif(), nullptr};
      NetworkOutput out = net.forward(Var(batch_input(train_set, idx, steps, cfg.data.dt, flips)), ctx);
      DetectionLoss loss = yolo_loss(out.maps, truth, model.anchors, cfg.model.num_classes);
      backward(loss.total);
      loss_sum += loss.total.value()[0];

      std::vector<Tensor> grads;
      double norm_sq = 0;
      for (const auto& p : params) {
        grads.push_back(p.var->grad());
        for (float g : grads.back().data()) norm_sq += static_cast<double>(g) * g;
      }
      require(std::isfinite(norm_sq), ErrorCode::kNumeric, "non-finite gradient at epoch " + std::to_string(epoch));
      const double clip = cfg.train.grad_clip > 0 && std::sqrt(norm_sq) > cfg.train.grad_clip
                              ? cfg.train.grad_clip / std::sqrt(norm_sq)
                              : 1.0;
      lr = lr_at(it);
      const float mu = static_cast<float>(cfg.train.momentum), wd = static_cast<float>(cfg.train.weight_decay);
      for (std::size_t k = 0; k < params.size(); ++k) {
        Var& v = *params[k].var;
        const Tensor& g = grads[k];
        auto w = v.mutable_value().data();
        auto m = velocity[k].data();
        for (std::size_t e = 0; e < w.size(); ++e) {
          m[e] = mu * m[e] + static_cast<float>(clip) * g[e] + wd * w[e];
          w[e] -= static_cast<float>(lr) * m[e];
        }
        v.zero_grad();
      }
    }
    EvalResult ev = evaluate_model(model, eval_set, steps);
    EpochMetrics row{epoch, loss_sum / static_cast<double>(iters_per_epoch), ev.map.map50, ev.map.map50_95,
                     ev.mean_fr, lr};
    result.epochs.push_back(row);
    write_text(result.metrics_csv, metrics_csv(result.epochs));
    if (on_epoch) on_epoch(row);
  }

  save_checkpoint(result.checkpoint_path, capture_checkpoint(net, cfg, model.anchors));
  write_text(result.metrics_csv, metrics_csv(result.epochs));
  nlohmann::json mj = nlohmann::json::array();
  for (const auto& r : result.epochs)
    mj.push_back({{"epoch", r.epoch},
                  {"loss", r.loss},
                  {"map50", r.map50},
                  {"map50_95", r.map50_95},
                  {"mean_fr", r.mean_fr},
                  {"lr", r.lr}});
  write_text(fs::path(out_dir) / "metrics.json", mj.dump(2) + "\n");
  write_text(fs::path(out_dir) / "curves.svg", metrics_svg(result.epochs));
  return result;
}

EnergyReport energy_report(Model& model, const Dataset& ds, int steps, EnergyOptions options) {
  require(!ds.samples.empty(), ErrorCode::kData, "energy probe set is empty");
  const RunConfig& cfg = model.config;
  NoGradGuard no_grad;
  FiringStats firing;
  OpCount counts;
  const std::size_t bs = static_cast<std::size_t>(cfg.train.batch_size);
  for (std::size_t start = 0; start < ds.samples.size(); start += bs) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(ds.samples.size(), start + bs); ++i) idx.push_back(i);
    Trace trace;
    ForwardContext ctx{steps, BNMode::kInfer, cfg.lif(), &trace};
    model.net->forward(Var(batch_input(ds, idx, steps, cfg.data.dt, {})), ctx);
    if (counts.empty()) counts = count_ops(trace);
    firing.merge(record_firing(trace));
  }
  return estimate_energy(counts, firing, steps, options);
}

}  // namespace ems
