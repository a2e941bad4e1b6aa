#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "ems/config.hpp"
#include "ems/detection.hpp"
#include "ems/encoding.hpp"
#include "ems/energy.hpp"
#include "ems/error.hpp"
#include "ems/report.hpp"
#include "ems/spiking.hpp"
#include "ems/train.hpp"

namespace py = pybind11;
using namespace ems;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const FloatArray& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(std::move(shape), std::vector<float>(a.data(), a.data() + a.size()));
}

py::array_t<float> to_array(const Tensor& t) {
  py::array_t<float> out(t.shape());
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

std::vector<EventRecord> to_events(const py::array_t<std::int64_t, py::array::c_style | py::array::forcecast>& a) {
  require(a.ndim() == 2 && a.shape(1) == 4, ErrorCode::kData, "events must be an (N, 4) array of t, x, y, p");
  std::vector<EventRecord> out(static_cast<std::size_t>(a.shape(0)));
  auto r = a.unchecked<2>();
  for (py::ssize_t i = 0; i < a.shape(0); ++i) {
    require(r(i, 0) >= 0 && r(i, 1) >= 0 && r(i, 2) >= 0 && r(i, 1) < 65536 && r(i, 2) < 65536 &&
                (r(i, 3) == 1 || r(i, 3) == -1),
            ErrorCode::kData, "event " + std::to_string(i) + " out of range");
    out[i] = {static_cast<std::uint64_t>(r(i, 0)), static_cast<std::uint16_t>(r(i, 1)),
              static_cast<std::uint16_t>(r(i, 2)), static_cast<std::int8_t>(r(i, 3))};
  }
  return out;
}

py::array_t<std::int64_t> from_events(const std::vector<EventRecord>& ev) {
  py::array_t<std::int64_t> out({static_cast<py::ssize_t>(ev.size()), py::ssize_t{4}});
  auto w = out.mutable_unchecked<2>();
  for (std::size_t i = 0; i < ev.size(); ++i) {
    w(i, 0) = static_cast<std::int64_t>(ev[i].t);
    w(i, 1) = ev[i].x;
    w(i, 2) = ev[i].y;
    w(i, 3) = ev[i].p;
  }
  return out;
}

LIFConfig lif_config(float tau, float v_th, float v_reset, float a) {
  LIFConfig cfg;
  cfg.tau = tau;
  cfg.v_th = v_th;
  cfg.v_reset = v_reset;
  cfg.a = a;
  cfg.validate();
  return cfg;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Fully spiking object detection toolkit";

  static py::exception<Error> error(m, "EmsError", PyExc_RuntimeError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::set_error(error, (std::string(error_tag(e.code())) + ": " + e.what()).c_str());
    }
  });

  m.def(
      "lif_forward",
      [](const FloatArray& inputs, int steps, float tau, float v_th, float v_reset) {
        LIFState s = lif_forward(to_tensor(inputs), steps, lif_config(tau, v_th, v_reset, 1.0f));
        return py::make_tuple(to_array(s.last_spike), to_array(s.membrane));
      },
      py::arg("inputs"), py::arg("steps"), py::arg("tau") = 0.25f, py::arg("v_th") = 0.5f,
      py::arg("v_reset") = 0.0f, "Time-major LIF; returns (spikes, membrane).");

  m.def(
      "surrogate_grad",
      [](float v, float v_th, float a) { return surrogate_grad(v, lif_config(0.25f, v_th, 0.0f, a)); },
      py::arg("v"), py::arg("v_th") = 0.5f, py::arg("a") = 1.0f);

  m.def(
      "iou", [](std::array<float, 4> a, std::array<float, 4> b) {
        return iou({a[0], a[1], a[2], a[3]}, {b[0], b[1], b[2], b[3]});
      },
      py::arg("a"), py::arg("b"), "IoU of two [x, y, w, h] boxes.");

  m.def(
      "nms",
      [](const std::vector<std::array<float, 4>>& boxes, const std::vector<float>& scores,
         const std::vector<int>& classes, float iou_threshold) {
        require(boxes.size() == scores.size() && boxes.size() == classes.size(), ErrorCode::kData,
                "boxes, scores and classes differ in length");
        std::vector<Detection> dets;
        for (std::size_t i = 0; i < boxes.size(); ++i)
          dets.push_back({{boxes[i][0], boxes[i][1], boxes[i][2], boxes[i][3]}, classes[i], scores[i]});
        py::list out;
        for (const auto& d : nms(dets, iou_threshold))
          out.append(py::make_tuple(std::array<float, 4>{d.box.x, d.box.y, d.box.w, d.box.h}, d.confidence,
                                    d.class_id));
        return out;
      },
      py::arg("boxes"), py::arg("scores"), py::arg("classes"), py::arg("iou_threshold") = 0.5f,
      "Class-aware greedy NMS; returns (box, score, class) tuples by descending score.");

  m.def(
      "bin_events",
      [](const py::array_t<std::int64_t, py::array::c_style | py::array::forcecast>& events, int steps, double dt,
         int height, int width, std::uint64_t window_start, bool count) {
        return to_array(bin_events(to_events(events), steps, dt, height, width, window_start,
                                   count ? BinMode::kCount : BinMode::kPresence)
                            .frames);
      },
      py::arg("events"), py::arg("steps"), py::arg("dt"), py::arg("height"), py::arg("width"),
      py::arg("window_start") = 0, py::arg("count") = false, "Bins (N, 4) events into [T, 2, H, W] frames.");

  m.def("read_events", [](const std::string& path) { return from_events(parse_events(path)); }, py::arg("path"));
  m.def(
      "write_events",
      [](const std::string& path, const py::array_t<std::int64_t, py::array::c_style | py::array::forcecast>& ev) {
        write_events(path, to_events(ev), event_format_from_path(path));
      },
      py::arg("path"), py::arg("events"));

  m.def(
      "layer_energy",
      [](std::int64_t op_capacity, double firing_rate, int steps, bool mac) {
        OpCount ops = {{"l", "l", mac ? LayerRole::kMembraneFed : LayerRole::kSpikeFed, op_capacity}};
        FiringStats s;
        const std::int64_t total = 1 << 20;
        s.layers["l"] = {static_cast<std::int64_t>(firing_rate * total), total, 0};
        return estimate_energy(ops, s, steps).snn_total_pj;
      },
      py::arg("op_capacity"), py::arg("firing_rate"), py::arg("steps"), py::arg("mac") = false,
      "Energy in pJ of one conv layer.");

  m.def(
      "normalize_config",
      [](const std::string& json_text) { return config_to_json(config_from_json(nlohmann::json::parse(json_text))).dump(); },
      py::arg("json_text"), "Validates a JSON config and returns it with defaults filled in.");

  m.def(
      "train",
      [](const std::string& json_text, const std::string& out_dir) {
        const RunConfig cfg = config_from_json(nlohmann::json::parse(json_text));
        TrainResult r;
        {
          py::gil_scoped_release release;
          r = train_model(cfg, out_dir);
        }
        py::list rows;
        for (const auto& e : r.epochs) {
          py::dict d;
          d["epoch"] = e.epoch;
          d["loss"] = e.loss;
          d["map50"] = e.map50;
          d["map50_95"] = e.map50_95;
          d["mean_fr"] = e.mean_fr;
          d["lr"] = e.lr;
          rows.append(d);
        }
        return py::make_tuple(rows, r.checkpoint_path);
      },
      py::arg("json_text"), py::arg("out_dir"), "Trains from a JSON config; returns (epochs, checkpoint path).");

  m.def(
      "gne_report",
      [](const std::string& json_text, int n_probes, const std::vector<int>& depths, bool apply_init) {
        const RunConfig cfg = config_from_json(nlohmann::json::parse(json_text));
        GneReportOptions opt;
        opt.n_probes = n_probes;
        opt.depths = depths;
        opt.apply_init = apply_init;
        py::gil_scoped_release release;
        return run_gne_report(cfg, opt).to_json().dump();
      },
      py::arg("json_text"), py::arg("n_probes") = 256, py::arg("depths") = std::vector<int>{10, 18, 34},
      py::arg("apply_init") = true, "Runs the GNE diagnostics; returns the report as JSON text.");
}
