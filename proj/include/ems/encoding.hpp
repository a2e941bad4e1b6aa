#pragma once

#include <algorithm>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "ems/detection.hpp"
#include "ems/tensor.hpp"

namespace ems {

struct EventRecord {
  std::uint64_t t = 0;  // microseconds
  std::uint16_t x = 0, y = 0;
  std::int8_t p = 1;  // +1 or -1

  friend bool operator==(const EventRecord&, const EventRecord&) = default;
};

enum class EventFormat { kCsv, kBinary };
EventFormat event_format_from_path(const std::string& path);

// Binned or replicated input, [T, C, H, W].
struct FrameSequence {
  Tensor frames;
  std::optional<double> dt;  // bin width in microseconds; none for static input

  int steps() const { return static_cast<int>(frames.dim(0)); }
  std::optional<double> gamma() const {
    if (!dt) return std::nullopt;
    return *dt * steps();
  }
};

FrameSequence replicate_static(const Tensor& image, int steps);

enum class BinMode { kPresence, kCount };

// Channel 0 collects p = +1, channel 1 p = -1. Events outside
// [window_start, window_start + T*dt) are ignored.
FrameSequence bin_events(const std::vector<EventRecord>& stream, int steps, double dt, int height,
                         int width, std::uint64_t window_start = 0, BinMode mode = BinMode::kPresence);

// Stacks equal-length sequences into the network layout [T*B, C, H, W].
Tensor time_major_batch(const std::vector<const Tensor*>& sequences);

// CSV: optional "t,x,y,p" header, then one event per line. Binary: "EVS1",
// u32 version, then 16-byte records {u64 t, u16 x, u16 y, i8 p, 3 pad}, little-endian.
std::vector<EventRecord> parse_events_csv(std::istream& in);
std::vector<EventRecord> parse_events_binary(std::istream& in);
std::vector<EventRecord> parse_events(const std::string& path, EventFormat format);
std::vector<EventRecord> parse_events(const std::string& path);

void write_events_csv(std::ostream& out, const std::vector<EventRecord>& events);
void write_events_binary(std::ostream& out, const std::vector<EventRecord>& events);
void write_events(const std::string& path, const std::vector<EventRecord>& events, EventFormat format);

// 8-bit binary PPM (P6); values are v/255.
Tensor read_ppm(const std::string& path);
void write_ppm(const std::string& path, const Tensor& image);
// 8-bit binary PGM (P5) of one plane.
void write_pgm(const std::string& path, const Tensor& plane);

struct Annotation {
  std::int64_t image_id = 0;
  std::string path;
  std::vector<GroundTruth> boxes;
};

std::vector<Annotation> read_annotations(const std::string& path);
void write_annotations(const std::string& path, const std::vector<Annotation>& anns);
std::string annotation_json(const Annotation& ann);
// Rejects boxes that leave the image or have a negative size.
void check_boxes_inside(const Annotation& ann, int height, int width);

enum class SynthMode { kFrames, kEvents };
SynthMode synth_mode_from_string(const std::string& s);

struct SynthConfig {
  std::uint64_t seed = 0;
  int n_images = 16;
  int size = 64;
  SynthMode mode = SynthMode::kFrames;
  int steps = 4;         // events: micro-frame transitions, one per bin
  double dt = 1000.0;    // events: microseconds per bin
  int min_object = 10;
  int max_object = 26;

  // Shrinks the object size range to fit images smaller than 52 px.
  void fit_objects() {
    max_object = std::min(max_object, size / 2);
    min_object = std::min(min_object, max_object);
  }
};

struct SynthSample {
  std::int64_t image_id = 0;
  Tensor image;                        // [3, H, W]; events mode: last micro-frame
  std::vector<EventRecord> events;     // events mode only
  std::vector<Tensor> motion_frames;   // events mode: T+1 intensity planes [H, W]
  std::vector<GroundTruth> boxes;
};

std::vector<SynthSample> synth_dataset(const SynthConfig& cfg);

// Writes images/ or events/ plus annotations.jsonl under `dir`.
void write_synth_dataset(const std::string& dir, const std::vector<SynthSample>& samples, SynthMode mode);

}  // namespace ems
