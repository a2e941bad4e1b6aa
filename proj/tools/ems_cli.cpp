#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "ems/config.hpp"
#include "ems/error.hpp"
#include "ems/report.hpp"
#include "ems/train.hpp"

namespace fs = std::filesystem;
using namespace ems;

namespace {

RunConfig config_or_default(const std::string& path) {
  if (path.empty()) return config_from_json(nlohmann::json::object());
  return load_config(path);
}

std::string output_dir(const std::string& fallback) {
  const char* env = std::getenv(kOutputDirEnv);
  if (env && *env) return env;
  return fallback;
}

// Error output must stay on one line for machine parsing.
std::string one_line(std::string s) {
  for (char& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorCode::kData, "cannot write " + path.string());
  out << text;
  require(out.good(), ErrorCode::kData, "failed writing " + path.string());
}

std::string detections_jsonl(const std::vector<std::int64_t>& ids,
                             const std::vector<std::vector<Detection>>& dets) {
  std::string out;
  for (std::size_t i = 0; i < dets.size(); ++i)
    for (const auto& d : dets[i]) out += detection_json(ids[i], d) + "\n";
  return out;
}

nlohmann::json eval_json(const EvalResult& ev, int steps) {
  nlohmann::json ap = nlohmann::json::array();
  for (double a : ev.map.ap50) {
    if (std::isnan(a))
      ap.push_back(nullptr);
    else
      ap.push_back(a);
  }
  return {{"steps", steps},          {"images", ev.image_ids.size()}, {"map50", ev.map.map50},
          {"map50_95", ev.map.map50_95}, {"ap50_per_class", ap},       {"iou_thresholds", ev.map.thresholds},
          {"mean_fr", ev.mean_fr}};
}

int cmd_train(const std::string& config_path) {
  const RunConfig cfg = config_or_default(config_path);
  const std::string out = resolve_output_dir(cfg);
  TrainResult res = train_model(cfg, out, [](const EpochMetrics& m) {
    std::printf("epoch %d loss %.4f map50 %.4f map50_95 %.4f mean_fr %.4f lr %.6f\n", m.epoch, m.loss, m.map50,
                m.map50_95, m.mean_fr, m.lr);
    std::fflush(stdout);
  });
  std::printf("checkpoint %s\nmetrics %s\n", res.checkpoint_path.c_str(), res.metrics_csv.c_str());
  return 0;
}

int cmd_eval(const std::string& ckpt, int steps, const std::string& annotations, const std::string& dets_out) {
  Model model = load_model(ckpt);
  if (!annotations.empty()) model.config.data.eval = {annotations, false, 0, 0};
  const int t = steps > 0 ? steps : model.config.model.steps;
  const Dataset ds = load_dataset(model.config.data.eval, model.config.data);
  EvalResult ev = evaluate_model(model, ds, t);
  const std::string out = output_dir(model.config.output_dir);
  const std::string text = eval_json(ev, t).dump(2) + "\n";
  write_file(fs::path(out) / "eval.json", text);
  write_file(dets_out.empty() ? fs::path(out) / "detections.jsonl" : fs::path(dets_out),
             detections_jsonl(ev.image_ids, ev.detections));
  std::cout << text;
  return 0;
}

int cmd_detect(const std::string& ckpt, const std::string& input, int steps, std::int64_t image_id,
               const std::string& dets_out) {
  Model model = load_model(ckpt);
  Sample s = load_input(input, model.config.data);
  s.image_id = image_id;
  const auto dets = detect(model, s, steps > 0 ? steps : model.config.model.steps);
  const std::string text = detections_jsonl({image_id}, {dets});
  if (dets_out.empty())
    std::cout << text;
  else
    write_file(dets_out, text);
  return 0;
}

int cmd_energy(const std::string& config_path, const std::string& ckpt, const std::string& block_kind, int steps,
               bool no_encode, int probe_images) {
  Model model;
  if (!ckpt.empty()) {
    model = load_model(ckpt);
    require(block_kind.empty() || family_from_string(block_kind) == model.config.model.family, ErrorCode::kConfig,
            "--block-kind " + block_kind + " does not match the checkpoint (" +
                to_string(model.config.model.family) + "); drop --checkpoint to compare fresh networks");
  } else {
    RunConfig cfg = config_or_default(config_path);
    if (!block_kind.empty()) cfg.model.family = family_from_string(block_kind);
    const Dataset train_set = load_dataset(cfg.data.train, cfg.data);
    model = build_model(cfg, train_set);
  }
  Dataset ds = load_dataset(model.config.data.eval, model.config.data);
  if (probe_images > 0 && static_cast<std::size_t>(probe_images) < ds.samples.size())
    ds.samples.resize(static_cast<std::size_t>(probe_images));
  EnergyOptions opt;
  opt.include_encode = !no_encode;
  const EnergyReport rep = energy_report(model, ds, steps > 0 ? steps : model.config.model.steps, opt);
  const fs::path out = output_dir(model.config.output_dir);
  write_file(out / "energy.json", rep.to_json());
  write_file(out / "energy.csv", rep.to_csv());
  std::printf("family %s snn_pj %.6g ann_pj %.6g ratio %.4f mac_capacity %lld\n",
              to_string(model.config.model.family).c_str(), rep.snn_total_pj, rep.ann_total_pj, rep.ratio,
              static_cast<long long>(rep.mac_capacity()));
  std::printf("report %s\n", (out / "energy.json").string().c_str());
  return 0;
}

int cmd_gne(const std::string& config_path, int n_probes, bool no_init, const std::vector<int>& depths) {
  const RunConfig cfg = config_or_default(config_path);
  GneReportOptions opt;
  opt.n_probes = n_probes;
  opt.apply_init = !no_init;
  if (!depths.empty()) opt.depths = depths;
  const GneReport rep = run_gne_report(cfg, opt);
  const fs::path out = output_dir(cfg.output_dir);
  write_file(out / "gne.json", rep.to_json().dump(2) + "\n");
  std::printf("encode alpha2 %.4f %s\n", rep.encode.measured, rep.encode.pass ? "PASS" : "FAIL");
  for (const auto& r : rep.blocks)
    std::printf("%-16s alpha2_in %.3f phi %.4f +- %.4f expected %.4f %s\n", r.name.c_str(), r.alpha2_in, r.phi.phi,
                r.phi.stderr, r.expected, r.pass ? "PASS" : "FAIL");
  for (const auto& r : rep.reference_blocks)
    std::printf("%-16s alpha2_in %.3f phi %.4f +- %.4f expected %.4f %s\n", r.name.c_str(), r.alpha2_in, r.phi.phi,
                r.phi.stderr, r.expected, r.pass ? "PASS" : "FAIL");
  for (const auto& m : rep.inter_block)
    std::printf("%-16s alpha2_out %.4f %s\n", m.name.c_str(), m.measured, m.pass ? "PASS" : "FAIL");
  std::printf("depth ratio %.4f %s\n", rep.depth_ratio, rep.depth_pass ? "PASS" : "FAIL");
  std::printf("report %s\n", (out / "gne.json").string().c_str());
  return 0;
}

int cmd_encode(const std::string& input, int steps, double dt, int height, int width, bool count,
               const std::string& out_flag) {
  const auto events = parse_events(input);
  const FrameSequence seq =
      bin_events(events, steps, dt, height, width, 0, count ? BinMode::kCount : BinMode::kPresence);
  const fs::path out = output_dir(out_flag);
  fs::create_directories(out);
  const std::int64_t plane = static_cast<std::int64_t>(height) * width;
  float peak = 0;
  for (float v : seq.frames.data()) peak = std::max(peak, v);
  for (int t = 0; t < steps; ++t)
    for (int c = 0; c < 2; ++c) {
      Tensor p({height, width});
      for (std::int64_t i = 0; i < plane; ++i)
        p.data()[i] = peak > 0 ? seq.frames.data()[(t * 2 + c) * plane + i] / peak : 0.0f;
      char name[64];
      std::snprintf(name, sizeof name, "t%02d_%s.pgm", t, c == 0 ? "pos" : "neg");
      write_pgm((out / name).string(), p);
    }
  std::printf("events %zu frames %d dt %.6g written to %s\n", events.size(), steps, dt, out.string().c_str());
  return 0;
}

int cmd_synth(const SynthConfig& sc, const std::string& out_flag) {
  const fs::path out = output_dir(out_flag);
  write_synth_dataset(out.string(), synth_dataset(sc), sc.mode);
  std::printf("%d %s samples written to %s\n", sc.n_images, sc.mode == SynthMode::kEvents ? "events" : "frames",
              out.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fully spiking object detection toolkit"};
  app.require_subcommand(1);

  std::string config, ckpt, input, annotations, dets_out, block_kind, out_flag;
  int steps = 0, n_probes = 256, probe_images = 0;
  std::int64_t image_id = 0;
  bool no_init = false, no_encode = false, count = false;
  std::vector<int> depths;

  auto* train = app.add_subcommand("train", "train a detector; writes model.ckpt and metrics");
  train->add_option("-c,--config", config, "JSON config file")->check(CLI::ExistingFile);

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint; writes eval.json and detections.jsonl");
  eval->add_option("--checkpoint", ckpt, "checkpoint path")->required();
  eval->add_option("-T,--steps", steps, "override time steps");
  eval->add_option("--annotations", annotations, "evaluate on this annotations file instead");
  eval->add_option("--detections", dets_out, "detections JSONL path");

  auto* det = app.add_subcommand("detect", "detections for one image or event stream as JSON lines");
  det->add_option("--checkpoint", ckpt, "checkpoint path")->required();
  det->add_option("-i,--input", input, ".ppm image or event file")->required();
  det->add_option("-T,--steps", steps, "override time steps");
  det->add_option("--image-id", image_id, "image_id written to each line");
  det->add_option("-o,--output", dets_out, "JSONL path (default stdout)");

  auto* energy = app.add_subcommand("energy", "per-layer energy report as JSON and CSV");
  energy->add_option("-c,--config", config, "JSON config file (fresh network)")->check(CLI::ExistingFile);
  energy->add_option("--checkpoint", ckpt, "trained checkpoint");
  energy->add_option("--block-kind", block_kind, "EMS, MS or SEW");
  energy->add_option("-T,--steps", steps, "override time steps");
  energy->add_option("--probe-images", probe_images, "cap on probe images from the eval set");
  energy->add_flag("--no-encode", no_encode, "exclude the encode conv");

  auto* gne = app.add_subcommand("gne", "gradient-norm-equality diagnostic report");
  gne->add_option("-c,--config", config, "JSON config file")->check(CLI::ExistingFile);
  gne->add_option("--n-probes", n_probes, "Hutchinson probes per block");
  gne->add_option("--depths", depths, "depths for the gradient-norm table")->delimiter(',');
  gne->add_flag("--no-init", no_init, "skip the BN initialization (control)");

  SynthConfig sc;
  std::string mode = "frames";
  double dt = 1000.0;
  int height = 64, width = 64;
  auto* enc = app.add_subcommand("encode", "bin an event stream into PGM frame previews");
  enc->add_option("-i,--input", input, "event file (.csv or binary)")->required();
  enc->add_option("-T,--steps", steps, "number of bins")->required();
  enc->add_option("--dt", dt, "bin width in microseconds");
  enc->add_option("--height", height, "sensor height");
  enc->add_option("--width", width, "sensor width");
  enc->add_flag("--count", count, "event counts instead of presence");
  enc->add_option("-o,--output", out_flag, "output directory")->required();

  auto* synth = app.add_subcommand("synth", "generate the synthetic two-class dataset");
  synth->add_option("--seed", sc.seed, "generator seed");
  synth->add_option("-n,--n-images", sc.n_images, "number of samples");
  synth->add_option("--size", sc.size, "image side in pixels");
  synth->add_option("--mode", mode, "frames or events");
  synth->add_option("-T,--steps", sc.steps, "events: bins per sample");
  synth->add_option("--dt", sc.dt, "events: microseconds per bin");
  synth->add_option("-o,--output", out_flag, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "E_CONFIG: %s\n", one_line(e.what()).c_str());
    return static_cast<int>(ErrorCode::kConfig);
  }

  try {
    if (*train) return cmd_train(config);
    if (*eval) return cmd_eval(ckpt, steps, annotations, dets_out);
    if (*det) return cmd_detect(ckpt, input, steps, image_id, dets_out);
    if (*energy) return cmd_energy(config, ckpt, block_kind, steps, no_encode, probe_images);
    if (*gne) return cmd_gne(config, n_probes, no_init, depths);
    if (*enc) return cmd_encode(input, steps, dt, height, width, count, out_flag);
    if (*synth) {
      sc.mode = synth_mode_from_string(mode);
      sc.fit_objects();
      return cmd_synth(sc, out_flag);
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "%s: %s\n", error_tag(e.code()), one_line(e.what()).c_str());
    return static_cast<int>(e.code());
  } catch (const nlohmann::json::exception& e) {
    std::fprintf(stderr, "E_CONFIG: %s\n", one_line(e.what()).c_str());
    return static_cast<int>(ErrorCode::kConfig);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "E_DATA: %s\n", one_line(e.what()).c_str());
    return static_cast<int>(ErrorCode::kData);
  }
  return 0;
}
