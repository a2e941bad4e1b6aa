#include "ems/config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>

#include "ems/detection.hpp"
#include "ems/error.hpp"

namespace ems {

using nlohmann::json;

namespace {

void check_keys(const json& j, const std::string& where, const std::set<std::string>& allowed) {
  require(j.is_object(), ErrorCode::kConfig, where + " must be a JSON object");
  for (const auto& [key, value] : j.items())
    require(allowed.count(key) > 0, ErrorCode::kConfig, "unknown config key " + where + "." + key);
}

template <class T>
void read(const json& j, const char* key, const std::string& where, T& out) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->template get<T>();
  } catch (const json::exception&) {
    fail(ErrorCode::kConfig, "config " + where + "." + key + " has the wrong type: " + it->dump());
  }
}

DataSource source_from_json(const json& j, const std::string& where) {
  DataSource s;
  check_keys(j, where, {"annotations", "synth"});
  read(j, "annotations", where, s.annotations);
  if (j.contains("synth")) {
    const json& sj = j["synth"];
    check_keys(sj, where + ".synth", {"seed", "n_images"});
    s.synth = true;
    read(sj, "seed", where + ".synth", s.synth_seed);
    read(sj, "n_images", where + ".synth", s.synth_images);
  }
  return s;
}

json source_to_json(const DataSource& s) {
  json j = json::object();
  if (!s.annotations.empty()) j["annotations"] = s.annotations;
  if (s.synth) j["synth"] = {{"seed", s.synth_seed}, {"n_images", s.synth_images}};
  return j;
}

void validate_source(const DataSource& s, const std::string& where) {
  require(s.synth != !s.annotations.empty(), ErrorCode::kConfig,
          where + " needs exactly one of \"annotations\" or \"synth\"");
  if (s.synth) require(s.synth_images >= 1, ErrorCode::kConfig, where + ".synth.n_images must be >= 1");
}

}  // namespace

RunConfig::RunConfig() {
  data.train.synth = true;
  data.train.synth_seed = 0;
  data.train.synth_images = 500;
  data.eval.synth = true;
  data.eval.synth_seed = 1;
  data.eval.synth_images = 100;
  eval.iou_thresholds = coco_iou_thresholds();
}

void RunConfig::validate() const {
  require(model.depth == 10 || model.depth == 18 || model.depth == 34, ErrorCode::kConfig,
          "model.depth must be 10, 18 or 34, got " + std::to_string(model.depth));
  require(model.steps >= 1, ErrorCode::kConfig, "model.steps must be >= 1");
  require(model.num_classes >= 1 && model.anchors_per_scale >= 1 && model.head_channels >= 1, ErrorCode::kConfig,
          "model.num_classes, anchors_per_scale and head_channels must be >= 1");
  require(model.init == "gne" || model.init == "default", ErrorCode::kConfig,
          "model.init must be \"gne\" or \"default\", got \"" + model.init + "\"");
  require(model.alpha > 0, ErrorCode::kConfig, "model.alpha must be positive");
  lif().validate();
  require(train.optimizer == "sgd", ErrorCode::kConfig, "train.optimizer must be \"sgd\"");
  require(train.lr > 0 && train.momentum >= 0 && train.momentum < 1 && train.weight_decay >= 0, ErrorCode::kConfig,
          "train.lr must be positive, momentum in [0, 1), weight_decay >= 0");
  require(train.epochs >= 0 && train.batch_size >= 1 && train.warmup_epochs >= 0 && train.grad_clip >= 0,
          ErrorCode::kConfig, "train.epochs, warmup_epochs, grad_clip >= 0 and batch_size >= 1 required");
  require(train.lr_schedule == "constant" || train.lr_schedule == "cosine", ErrorCode::kConfig,
          "train.lr_schedule must be \"constant\" or \"cosine\"");
  require(data.height >= 32 && data.width >= 32 && data.height % 32 == 0 && data.width % 32 == 0, ErrorCode::kConfig,
          "data.height and data.width must be positive multiples of 32");
  require(data.dt > 0, ErrorCode::kConfig, "data.dt must be positive");
  validate_source(data.train, "data.train");
  validate_source(data.eval, "data.eval");
  if (data.train.synth || data.eval.synth)
    require(data.height == data.width, ErrorCode::kConfig, "synthetic data needs data.height == data.width");
  require(!eval.iou_thresholds.empty(), ErrorCode::kConfig, "eval.iou_thresholds must not be empty");
  for (double t : eval.iou_thresholds)
    require(t > 0 && t <= 1, ErrorCode::kConfig, "eval.iou_thresholds entries must lie in (0, 1]");
  require(eval.nms_threshold > 0 && eval.nms_threshold <= 1, ErrorCode::kConfig, "eval.nms_threshold must lie in (0, 1]");
  require(eval.conf_threshold >= 0 && eval.conf_threshold < 1, ErrorCode::kConfig,
          "eval.conf_threshold must lie in [0, 1)");
  require(eval.max_detections >= 1, ErrorCode::kConfig, "eval.max_detections must be >= 1");
  network_spec().validate();
}

NetworkSpec RunConfig::network_spec() const {
  NetworkSpec spec = NetworkSpec::for_depth(model.depth, model.family);
  spec.input_channels = data.channels();
  spec.head.num_classes = model.num_classes;
  spec.head.anchors_per_scale = model.anchors_per_scale;
  spec.head.channels = model.head_channels;
  spec.readout = model.readout;
  spec.alpha = static_cast<float>(model.alpha);
  return spec;
}

LIFConfig RunConfig::lif() const {
  LIFConfig l;
  l.tau = static_cast<float>(model.tau);
  l.v_th = static_cast<float>(model.v_th);
  l.v_reset = static_cast<float>(model.v_reset);
  l.a = static_cast<float>(model.surrogate_width);
  return l;
}

RunConfig config_from_json(const json& j) {
  RunConfig c;
  check_keys(j, "config", {"model", "train", "data", "eval", "output_dir"});
  read(j, "output_dir", "config", c.output_dir);
  if (j.contains("model")) {
    const json& m = j["model"];
    const std::string w = "model";
    check_keys(m, w,
               {"depth", "block_kind", "steps", "tau", "v_th", "v_reset", "alpha", "surrogate_width", "detection_readout",
                "num_classes", "anchors_per_scale", "head_channels", "init"});
    read(m, "depth", w, c.model.depth);
    std::string family = to_string(c.model.family), readout = to_string(c.model.readout);
    read(m, "block_kind", w, family);
    read(m, "detection_readout", w, readout);
    c.model.family = family_from_string(family);
    c.model.readout = readout_from_string(readout);
    read(m, "steps", w, c.model.steps);
    read(m, "tau", w, c.model.tau);
    read(m, "v_th", w, c.model.v_th);
    read(m, "v_reset", w, c.model.v_reset);
    read(m, "alpha", w, c.model.alpha);
    read(m, "surrogate_width", w, c.model.surrogate_width);
    read(m, "num_classes", w, c.model.num_classes);
    read(m, "anchors_per_scale", w, c.model.anchors_per_scale);
    read(m, "head_channels", w, c.model.head_channels);
    read(m, "init", w, c.model.init);
  }
  if (j.contains("train")) {
    const json& t = j["train"];
    const std::string w = "train";
    check_keys(t, w,
               {"optimizer", "lr", "momentum", "weight_decay", "epochs", "batch_size", "seed", "warm_start",
                "lr_schedule", "warmup_epochs", "grad_clip", "flip"});
    read(t, "optimizer", w, c.train.optimizer);
    read(t, "lr", w, c.train.lr);
    read(t, "momentum", w, c.train.momentum);
    read(t, "weight_decay", w, c.train.weight_decay);
    read(t, "epochs", w, c.train.epochs);
    read(t, "batch_size", w, c.train.batch_size);
    read(t, "seed", w, c.train.seed);
    read(t, "warm_start", w, c.train.warm_start);
    read(t, "lr_schedule", w, c.train.lr_schedule);
    read(t, "warmup_epochs", w, c.train.warmup_epochs);
    read(t, "grad_clip", w, c.train.grad_clip);
    read(t, "flip", w, c.train.flip);
  }
  if (j.contains("data")) {
    const json& d = j["data"];
    check_keys(d, "data", {"input", "dt", "height", "width", "train", "eval"});
    std::string input = c.data.input == SynthMode::kEvents ? "events" : "frames";
    read(d, "input", "data", input);
    c.data.input = synth_mode_from_string(input);
    read(d, "dt", "data", c.data.dt);
    read(d, "height", "data", c.data.height);
    read(d, "width", "data", c.data.width);
    if (d.contains("train")) c.data.train = source_from_json(d["train"], "data.train");
    if (d.contains("eval")) c.data.eval = source_from_json(d["eval"], "data.eval");
  }
  if (j.contains("eval")) {
    const json& e = j["eval"];
    check_keys(e, "eval", {"iou_thresholds", "nms_threshold", "conf_threshold", "max_detections"});
    read(e, "iou_thresholds", "eval", c.eval.iou_thresholds);
    read(e, "nms_threshold", "eval", c.eval.nms_threshold);
    read(e, "conf_threshold", "eval", c.eval.conf_threshold);
    read(e, "max_detections", "eval", c.eval.max_detections);
  }
  c.validate();
  return c;
}

json config_to_json(const RunConfig& c) {
  json j;
  j["model"] = {{"depth", c.model.depth},
                {"block_kind", to_string(c.model.family)},
                {"steps", c.model.steps},
                {"tau", c.model.tau},
                {"v_th", c.model.v_th},
                {"v_reset", c.model.v_reset},
                {"alpha", c.model.alpha},
                {"surrogate_width", c.model.surrogate_width},
                {"detection_readout", to_string(c.model.readout)},
                {"num_classes", c.model.num_classes},
                {"anchors_per_scale", c.model.anchors_per_scale},
                {"head_channels", c.model.head_channels},
                {"init", c.model.init}};
  j["train"] = {{"optimizer", c.train.optimizer},     {"lr", c.train.lr},
                {"momentum", c.train.momentum},       {"weight_decay", c.train.weight_decay},
                {"epochs", c.train.epochs},           {"batch_size", c.train.batch_size},
                {"seed", c.train.seed},               {"warm_start", c.train.warm_start},
                {"lr_schedule", c.train.lr_schedule}, {"warmup_epochs", c.train.warmup_epochs},
                {"grad_clip", c.train.grad_clip},     {"flip", c.train.flip}};
  j["data"] = {{"input", c.data.input == SynthMode::kEvents ? "events" : "frames"},
               {"dt", c.data.dt},
               {"height", c.data.height},
               {"width", c.data.width},
               {"train", source_to_json(c.data.train)},
               {"eval", source_to_json(c.data.eval)}};
  j["eval"] = {{"iou_thresholds", c.eval.iou_thresholds},
               {"nms_threshold", c.eval.nms_threshold},
               {"conf_threshold", c.eval.conf_threshold},
               {"max_detections", c.eval.max_detections}};
  j["output_dir"] = c.output_dir;
  return j;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::kConfig, "cannot open config " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    fail(ErrorCode::kConfig, "config " + path + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

std::string resolve_output_dir(const RunConfig& cfg) {
  const char* env = std::getenv(kOutputDirEnv);
  if (env && *env) return env;
  return cfg.output_dir;
}

}  // namespace ems
