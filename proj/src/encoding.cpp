#include "ems/encoding.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ems/error.hpp"
#include "ems/random.hpp"
#include "json.hpp"

namespace ems {

namespace fs = std::filesystem;

EventFormat event_format_from_path(const std::string& path) {
  const std::string ext = fs::path(path).extension().string();
  if (ext == ".csv" || ext == ".txt") return EventFormat::kCsv;
  return EventFormat::kBinary;
}

FrameSequence replicate_static(const Tensor& image, int steps) {
  require(steps >= 1, ErrorCode::kConfig, "T must be >= 1, got " + std::to_string(steps));
  require(image.rank() == 3, ErrorCode::kData, "static image must be [C,H,W], got " + shape_str(image.shape()));
  Tensor frames({steps, image.dim(0), image.dim(1), image.dim(2)});
  for (int t = 0; t < steps; ++t) std::copy(image.storage().begin(), image.storage().end(), frames.raw() + t * image.numel());
  return {std::move(frames), std::nullopt};
}

FrameSequence bin_events(const std::vector<EventRecord>& stream, int steps, double dt, int height,
                         int width, std::uint64_t window_start, BinMode mode) {
  require(steps >= 1, ErrorCode::kConfig, "T must be >= 1, got " + std::to_string(steps));
  require(dt > 0, ErrorCode::kConfig, "event bin width dt must be > 0");
  require(height > 0 && width > 0, ErrorCode::kConfig, "sensor size must be positive");
  Tensor frames({steps, 2, height, width});
  const double span = dt * steps;
  for (std::size_t i = 0; i < stream.size(); ++i) {
    const EventRecord& e = stream[i];
    require(e.x < width && e.y < height, ErrorCode::kData,
            "event " + std::to_string(i) + " at (" + std::to_string(e.x) + "," + std::to_string(e.y) +
                ") outside " + std::to_string(width) + "x" + std::to_string(height) + " sensor");
    require(e.p == 1 || e.p == -1, ErrorCode::kData, "event " + std::to_string(i) + " has polarity " +
                                                         std::to_string(int(e.p)));
    if (e.t < window_start) continue;
    const double rel = static_cast<double>(e.t - window_start);
    if (rel >= span) continue;
    const int bin = std::min(steps - 1, static_cast<int>(std::floor(rel / dt)));
    float& cell = frames.at(bin, e.p > 0 ? 0 : 1, e.y, e.x);
    cell = mode == BinMode::kPresence ? 1.0f : cell + 1.0f;
  }
  return {std::move(frames), dt};
}

Tensor time_major_batch(const std::vector<const Tensor*>& sequences) {
  require(!sequences.empty(), ErrorCode::kData, "empty batch");
  const Shape& s0 = sequences[0]->shape();
  require(s0.size() == 4, ErrorCode::kData, "sequence must be [T,C,H,W], got " + shape_str(s0));
  const std::int64_t B = static_cast<std::int64_t>(sequences.size()), T = s0[0];
  const std::int64_t frame = s0[1] * s0[2] * s0[3];
  Tensor out({T * B, s0[1], s0[2], s0[3]});
  for (std::int64_t b = 0; b < B; ++b) {
    require(sequences[b]->shape() == s0, ErrorCode::kData,
            "batch mixes sequence shapes " + shape_str(s0) + " and " + shape_str(sequences[b]->shape()));
    for (std::int64_t t = 0; t < T; ++t)
      std::copy_n(sequences[b]->raw() + t * frame, frame, out.raw() + (t * B + b) * frame);
  }
  return out;
}

// --- event files -----------------------------------------------------------

namespace {

template <typename T>
bool parse_int(std::string_view s, T& out) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  if (s.empty()) return false;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size();
}

constexpr char kEventMagic[4] = {'E', 'V', 'S', '1'};
constexpr std::uint32_t kEventVersion = 1;

void put_le(char* dst, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) dst[i] = static_cast<char>((v >> (8 * i)) & 0xff);
}

std::uint64_t get_le(const char* src, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(src[i])) << (8 * i);
  return v;
}

}  // namespace

std::vector<EventRecord> parse_events_csv(std::istream& in) {
  std::vector<EventRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    if (lineno == 1 && line.rfind("t,x,y,p", 0) == 0 && line.find_first_not_of(" \t\r", 7) == std::string::npos)
      continue;
    std::vector<std::string_view> f;
    std::string_view rest(line);
    for (auto comma = rest.find(','); comma != std::string_view::npos; comma = rest.find(',')) {
      f.push_back(rest.substr(0, comma));
      rest.remove_prefix(comma + 1);
    }
    f.push_back(rest);
    std::uint64_t t = 0;
    std::uint32_t x = 0, y = 0;
    int p = 0;
    const bool ok = f.size() == 4 && parse_int(f[0], t) && parse_int(f[1], x) && parse_int(f[2], y) &&
                    parse_int(f[3], p) && x <= 0xffff && y <= 0xffff && (p == 1 || p == -1);
    require(ok, ErrorCode::kData, "event csv line " + std::to_string(lineno) + ": expected t,x,y,p with p in {-1,1}, got '" + line + "'");
    out.push_back({t, static_cast<std::uint16_t>(x), static_cast<std::uint16_t>(y), static_cast<std::int8_t>(p)});
  }
  return out;
}

std::vector<EventRecord> parse_events_binary(std::istream& in) {
  char header[8];
  in.read(header, 8);
  require(in.gcount() == 8, ErrorCode::kData, "event file truncated in header at byte offset 0");
  require(std::memcmp(header, kEventMagic, 4) == 0, ErrorCode::kData, "event file: bad magic at byte offset 0");
  const auto version = static_cast<std::uint32_t>(get_le(header + 4, 4));
  require(version == kEventVersion, ErrorCode::kData, "event file: unsupported version " + std::to_string(version));
  std::vector<EventRecord> out;
  std::uint64_t offset = 8;
  char rec[16];
  while (true) {
    in.read(rec, 16);
    const auto got = in.gcount();
    if (got == 0) break;
    require(got == 16, ErrorCode::kData, "event file: truncated record at byte offset " + std::to_string(offset));
    EventRecord e;
    e.t = get_le(rec, 8);
    e.x = static_cast<std::uint16_t>(get_le(rec + 8, 2));
    e.y = static_cast<std::uint16_t>(get_le(rec + 10, 2));
    e.p = static_cast<std::int8_t>(rec[12]);
    require(e.p == 1 || e.p == -1, ErrorCode::kData,
            "event file: polarity " + std::to_string(int(e.p)) + " at byte offset " + std::to_string(offset + 12));
    out.push_back(e);
    offset += 16;
  }
  return out;
}

std::vector<EventRecord> parse_events(const std::string& path, EventFormat format) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::kData, "cannot open event file " + path);
  return format == EventFormat::kCsv ? parse_events_csv(in) : parse_events_binary(in);
}

std::vector<EventRecord> parse_events(const std::string& path) {
  return parse_events(path, event_format_from_path(path));
}

void write_events_csv(std::ostream& out, const std::vector<EventRecord>& events) {
  out << "t,x,y,p\n";
  for (const auto& e : events) out << e.t << ',' << e.x << ',' << e.y << ',' << int(e.p) << '\n';
}

void write_events_binary(std::ostream& out, const std::vector<EventRecord>& events) {
  char header[8];
  std::memcpy(header, kEventMagic, 4);
  put_le(header + 4, kEventVersion, 4);
  out.write(header, 8);
  for (const auto& e : events) {
    char rec[16] = {};
    put_le(rec, e.t, 8);
    put_le(rec + 8, e.x, 2);
    put_le(rec + 10, e.y, 2);
    rec[12] = static_cast<char>(e.p);
    out.write(rec, 16);
  }
}

void write_events(const std::string& path, const std::vector<EventRecord>& events, EventFormat format) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorCode::kData, "cannot write event file " + path);
  if (format == EventFormat::kCsv)
    write_events_csv(out, events);
  else
    write_events_binary(out, events);
}

// --- images ----------------------------------------------------------------

namespace {

std::uint8_t quantize(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

float level(int k) { return static_cast<float>(k) / 255.0f; }

std::string next_token(std::istream& in) {
  std::string tok;
  while (in) {
    const int c = in.peek();
    if (c == '#') {
      std::string skip;
      std::getline(in, skip);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      break;
    }
  }
  in >> tok;
  return tok;
}

}  // namespace

Tensor read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::kData, "cannot open image " + path);
  const std::string magic = next_token(in);
  require(magic == "P6" || magic == "P5", ErrorCode::kData, path + ": not a binary PPM/PGM");
  int w = 0, h = 0, maxv = 0;
  try {
    w = std::stoi(next_token(in));
    h = std::stoi(next_token(in));
    maxv = std::stoi(next_token(in));
  } catch (const std::exception&) {
    fail(ErrorCode::kData, path + ": malformed header");
  }
  require(w > 0 && h > 0 && maxv == 255, ErrorCode::kData, path + ": only 8-bit images are supported");
  in.get();
  const int planes = magic == "P6" ? 3 : 1;
  std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h * planes);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  require(static_cast<std::size_t>(in.gcount()) == buf.size(), ErrorCode::kData, path + ": truncated pixel data");
  Tensor img({3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img[(static_cast<std::size_t>(c) * h + y) * w + x] = level(buf[(static_cast<std::size_t>(y) * w + x) * planes + (planes == 3 ? c : 0)]);
  return img;
}

void write_ppm(const std::string& path, const Tensor& image) {
  require(image.rank() == 3 && image.dim(0) == 3, ErrorCode::kData, "PPM output needs [3,H,W], got " + shape_str(image.shape()));
  const auto h = image.dim(1), w = image.dim(2);
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorCode::kData, "cannot write image " + path);
  out << "P6\n" << w << ' ' << h << "\n255\n";
  std::vector<char> buf(static_cast<std::size_t>(w * h * 3));
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) buf[(y * w + x) * 3 + c] = static_cast<char>(quantize(image[(c * h + y) * w + x]));
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

void write_pgm(const std::string& path, const Tensor& plane) {
  require(plane.rank() == 2, ErrorCode::kData, "PGM output needs [H,W], got " + shape_str(plane.shape()));
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorCode::kData, "cannot write image " + path);
  out << "P5\n" << plane.dim(1) << ' ' << plane.dim(0) << "\n255\n";
  for (float v : plane.data()) out.put(static_cast<char>(quantize(v)));
}

// --- annotations -----------------------------------------------------------

std::string annotation_json(const Annotation& ann) {
  nlohmann::json boxes = nlohmann::json::array();
  for (const auto& b : ann.boxes)
    boxes.push_back({{"x", b.box.x}, {"y", b.box.y}, {"w", b.box.w}, {"h", b.box.h}, {"class_id", b.class_id}});
  nlohmann::json j = {{"image_id", ann.image_id}, {"path", ann.path}, {"boxes", boxes}};
  return j.dump();
}

std::vector<Annotation> read_annotations(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::kData, "cannot open annotations " + path);
  std::vector<Annotation> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path + ":" + std::to_string(lineno) + ": ";
    try {
      const auto j = nlohmann::json::parse(line);
      Annotation a;
      a.image_id = j.at("image_id").get<std::int64_t>();
      a.path = j.at("path").get<std::string>();
      for (const auto& b : j.at("boxes")) {
        GroundTruth g;
        g.box = {b.at("x").get<float>(), b.at("y").get<float>(), b.at("w").get<float>(), b.at("h").get<float>()};
        g.class_id = b.at("class_id").get<int>();
        require(g.box.w >= 0 && g.box.h >= 0, ErrorCode::kData, where + "negative box size");
        require(g.class_id >= 0, ErrorCode::kData, where + "negative class id");
        a.boxes.push_back(g);
      }
      out.push_back(std::move(a));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::kData, where + e.what());
    }
  }
  return out;
}

void write_annotations(const std::string& path, const std::vector<Annotation>& anns) {
  std::ofstream out(path);
  require(out.good(), ErrorCode::kData, "cannot write annotations " + path);
  for (const auto& a : anns) out << annotation_json(a) << '\n';
}

void check_boxes_inside(const Annotation& ann, int height, int width) {
  for (const auto& g : ann.boxes) {
    const bool inside = g.box.x >= 0 && g.box.y >= 0 && g.box.w >= 0 && g.box.h >= 0 &&
                        g.box.x + g.box.w <= width && g.box.y + g.box.h <= height;
    require(inside, ErrorCode::kData,
            "image " + std::to_string(ann.image_id) + ": box (" + std::to_string(g.box.x) + "," +
                std::to_string(g.box.y) + "," + std::to_string(g.box.w) + "," + std::to_string(g.box.h) +
                ") leaves the " + std::to_string(width) + "x" + std::to_string(height) + " image");
  }
}

// --- synthetic data --------------------------------------------------------

SynthMode synth_mode_from_string(const std::string& s) {
  if (s == "frames") return SynthMode::kFrames;
  if (s == "events") return SynthMode::kEvents;
  fail(ErrorCode::kConfig, "unknown synth mode '" + s + "' (expected frames or events)");
}

namespace {

struct Shape2D {
  int cls;       // 0 square, 1 disk
  int size;
  double x, y;   // top-left at micro-frame 0
  double vx, vy;
  std::array<int, 3> color;
};

bool covers(const Shape2D& s, double ox, double oy, int px, int py) {
  const double cx = px + 0.5, cy = py + 0.5;
  if (s.cls == 0) return cx >= ox && cx < ox + s.size && cy >= oy && cy < oy + s.size;
  const double r = 0.5 * s.size, mx = ox + r, my = oy + r;
  return (cx - mx) * (cx - mx) + (cy - my) * (cy - my) <= r * r;
}

// Tight pixel box of the shape placed at (ox, oy).
BBox rendered_box(const Shape2D& s, double ox, double oy, int size) {
  int x0 = size, y0 = size, x1 = -1, y1 = -1;
  for (int py = std::max(0, int(oy) - 1); py < std::min(size, int(oy) + s.size + 2); ++py)
    for (int px = std::max(0, int(ox) - 1); px < std::min(size, int(ox) + s.size + 2); ++px)
      if (covers(s, ox, oy, px, py)) {
        x0 = std::min(x0, px), x1 = std::max(x1, px);
        y0 = std::min(y0, py), y1 = std::max(y1, py);
      }
  return {float(x0), float(y0), float(x1 - x0 + 1), float(y1 - y0 + 1)};
}

bool overlaps(const BBox& a, const BBox& b, float gap) {
  return a.x < b.x + b.w + gap && b.x < a.x + a.w + gap && a.y < b.y + b.h + gap && b.y < a.y + a.h + gap;
}

BBox sweep(const Shape2D& s, int frames) {
  const double x0 = std::min(s.x, s.x + s.vx * frames), y0 = std::min(s.y, s.y + s.vy * frames);
  const double x1 = std::max(s.x, s.x + s.vx * frames) + s.size, y1 = std::max(s.y, s.y + s.vy * frames) + s.size;
  return {float(x0), float(y0), float(x1 - x0), float(y1 - y0)};
}

}  // namespace

std::vector<SynthSample> synth_dataset(const SynthConfig& cfg) {
  require(cfg.size >= 32, ErrorCode::kConfig, "synthetic image size must be >= 32");
  require(cfg.n_images >= 0, ErrorCode::kConfig, "image count must be >= 0");
  require(cfg.min_object >= 4 && cfg.max_object >= cfg.min_object && cfg.max_object <= cfg.size / 2,
          ErrorCode::kConfig, "object size range must satisfy 4 <= min <= max <= size/2");
  const bool events = cfg.mode == SynthMode::kEvents;
  if (events) {
    require(cfg.steps >= 1, ErrorCode::kConfig, "events synthesis needs T >= 1");
    require(cfg.dt >= 1, ErrorCode::kConfig, "events synthesis needs dt >= 1 microsecond");
  }
  const int motion = events ? cfg.steps : 0;
  Rng rng(cfg.seed);
  std::vector<SynthSample> out;
  const int S = cfg.size;
  for (int n = 0; n < cfg.n_images; ++n) {
    SynthSample sample;
    sample.image_id = n;
    // Background noise, 8-bit levels in [0, 0.4].
    Tensor bg({3, S, S});
    for (auto& v : bg.data()) v = level(rng.uniform_int(0, 102));

    std::vector<Shape2D> shapes;
    std::vector<BBox> swept;
    const int want = rng.uniform_int(1, 3);
    for (int attempt = 0; attempt < 200 && static_cast<int>(shapes.size()) < want; ++attempt) {
      Shape2D s;
      s.cls = rng.uniform_int(0, 1);
      s.size = rng.uniform_int(cfg.min_object, cfg.max_object);
      s.vx = events ? rng.uniform(-1.5, 1.5) : 0.0;
      s.vy = events ? rng.uniform(-1.5, 1.5) : 0.0;
      // Keep the whole trajectory inside the image.
      const double lo_x = std::max(0.0, -s.vx * motion), hi_x = std::min<double>(S - s.size, S - s.size - s.vx * motion);
      const double lo_y = std::max(0.0, -s.vy * motion), hi_y = std::min<double>(S - s.size, S - s.size - s.vy * motion);
      if (hi_x < lo_x || hi_y < lo_y) continue;
      s.x = events ? rng.uniform(lo_x, hi_x) : rng.uniform_int(0, S - s.size);
      s.y = events ? rng.uniform(lo_y, hi_y) : rng.uniform_int(0, S - s.size);
      for (auto& c : s.color) c = rng.uniform_int(153, 255);
      const BBox sw = sweep(s, motion);
      if (std::any_of(swept.begin(), swept.end(), [&](const BBox& o) { return overlaps(o, sw, 1.0f); })) continue;
      shapes.push_back(s);
      swept.push_back(sw);
    }

    auto render = [&](int k, Tensor& img) {
      img = bg;
      for (const auto& s : shapes) {
        const double ox = s.x + s.vx * k, oy = s.y + s.vy * k;
        for (int py = std::max(0, int(oy) - 1); py < std::min(S, int(oy) + s.size + 2); ++py)
          for (int px = std::max(0, int(ox) - 1); px < std::min(S, int(ox) + s.size + 2); ++px)
            if (covers(s, ox, oy, px, py))
              for (int c = 0; c < 3; ++c) img[(static_cast<std::size_t>(c) * S + py) * S + px] = level(s.color[c]);
      }
    };

    if (!events) {
      render(0, sample.image);
    } else {
      // Grayscale planes; the background is static so only moving edges change.
      for (int k = 0; k <= motion; ++k) {
        Tensor img;
        render(k, img);
        Tensor plane({S, S});
        for (int i = 0; i < S * S; ++i) plane[i] = img[i];
        sample.motion_frames.push_back(std::move(plane));
        if (k == motion) sample.image = std::move(img);
      }
      for (int k = 0; k < motion; ++k) {
        const Tensor& a = sample.motion_frames[k];
        const Tensor& b = sample.motion_frames[k + 1];
        for (int py = 0; py < S; ++py)
          for (int px = 0; px < S; ++px) {
            const float d = b[py * S + px] - a[py * S + px];
            if (d == 0.0f) continue;
            const double start = k * cfg.dt;
            auto t = static_cast<std::uint64_t>(std::floor(start + rng.uniform() * cfg.dt));
            const auto last = static_cast<std::uint64_t>(std::ceil((k + 1) * cfg.dt)) - 1;
            t = std::clamp<std::uint64_t>(t, static_cast<std::uint64_t>(std::ceil(start)), last);
            sample.events.push_back({t, static_cast<std::uint16_t>(px), static_cast<std::uint16_t>(py),
                                     static_cast<std::int8_t>(d > 0 ? 1 : -1)});
          }
      }
      std::stable_sort(sample.events.begin(), sample.events.end(),
                       [](const EventRecord& a, const EventRecord& b) { return a.t < b.t; });
    }
    for (const auto& s : shapes)
      sample.boxes.push_back({rendered_box(s, s.x + s.vx * motion, s.y + s.vy * motion, S), s.cls});
    out.push_back(std::move(sample));
  }
  return out;
}

void write_synth_dataset(const std::string& dir, const std::vector<SynthSample>& samples, SynthMode mode) {
  const fs::path root(dir);
  const std::string sub = mode == SynthMode::kFrames ? "images" : "events";
  std::error_code ec;
  fs::create_directories(root / sub, ec);
  require(!ec, ErrorCode::kData, "cannot create " + (root / sub).string() + ": " + ec.message());
  std::vector<Annotation> anns;
  for (const auto& s : samples) {
    char name[32];
    std::snprintf(name, sizeof name, "%06lld.%s", static_cast<long long>(s.image_id),
                  mode == SynthMode::kFrames ? "ppm" : "evs");
    const std::string rel = sub + "/" + name;
    if (mode == SynthMode::kFrames)
      write_ppm((root / rel).string(), s.image);
    else
      write_events((root / rel).string(), s.events, EventFormat::kBinary);
    anns.push_back({s.image_id, rel, s.boxes});
  }
  write_annotations((root / "annotations.jsonl").string(), anns);
}

}  // namespace ems
