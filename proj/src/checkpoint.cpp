#include "ems/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "ems/error.hpp"

namespace ems {

namespace {

class Writer {
 public:
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void bytes(const std::string& s) { out_ += s; }
  std::string take() { return std::move(out_); }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  std::string out_;
};

class Reader {
 public:
  explicit Reader(const std::string& in) : in_(in) {}
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string bytes(std::uint64_t n) {
    need(n);
    std::string s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == in_.size(); }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::uint64_t n) const {
    require(n <= in_.size() - pos_, ErrorCode::kData,
            "checkpoint truncated at byte " + std::to_string(pos_) + " (need " + std::to_string(n) + " more)");
  }
  std::uint64_t get(int n) {
    need(n);
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in_[pos_ + i])) << (8 * i);
    pos_ += n;
    return v;
  }
  const std::string& in_;
  std::size_t pos_ = 0;
};

void write_section(Writer& w, const NamedTensors& section) {
  w.u32(static_cast<std::uint32_t>(section.size()));
  for (const auto& [name, t] : section) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (std::int64_t d : t.shape()) w.u64(static_cast<std::uint64_t>(d));
    for (float v : t.data()) w.f32(v);
  }
}

NamedTensors read_section(Reader& r) {
  NamedTensors out;
  const std::uint32_t n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name = r.bytes(r.u32());
    const std::uint32_t rank = r.u32();
    require(rank <= 8, ErrorCode::kData, "checkpoint tensor " + name + " has rank " + std::to_string(rank));
    Shape shape;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const std::uint64_t d = r.u64();
      require(d < (1ull << 32), ErrorCode::kData, "checkpoint tensor " + name + " has an absurd dimension");
      shape.push_back(static_cast<std::int64_t>(d));
    }
    Tensor t(shape);
    for (auto& v : t.data()) v = r.f32();
    out.emplace_back(std::move(name), std::move(t));
  }
  return out;
}

}  // namespace

const Tensor* Checkpoint::find_tensor(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return &t;
  return nullptr;
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  w.bytes(std::string(kCheckpointMagic, 8));
  w.u32(kCheckpointVersion);
  const std::string cfg = ckpt.config.dump();
  w.u64(cfg.size());
  w.bytes(cfg);
  write_section(w, ckpt.tensors);
  write_section(w, ckpt.buffers);
  return w.take();
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  Reader r(bytes);
  require(bytes.size() >= 8 && bytes.compare(0, 8, kCheckpointMagic) == 0, ErrorCode::kData,
          "not a checkpoint (magic EMSCKPT1 missing)");
  r.bytes(8);
  const std::uint32_t version = r.u32();
  require(version == kCheckpointVersion, ErrorCode::kData,
          "unsupported checkpoint version " + std::to_string(version));
  Checkpoint ckpt;
  const std::string cfg = r.bytes(r.u64());
  try {
    ckpt.config = nlohmann::json::parse(cfg);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kData, std::string("checkpoint config snapshot is not JSON: ") + e.what());
  }
  ckpt.tensors = read_section(r);
  ckpt.buffers = read_section(r);
  require(r.done(), ErrorCode::kData, "trailing bytes after checkpoint at offset " + std::to_string(r.pos()));
  return ckpt;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorCode::kData, "cannot write checkpoint " + path);
  const std::string bytes = serialize_checkpoint(ckpt);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  require(out.good(), ErrorCode::kData, "failed writing checkpoint " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::kData, "cannot open checkpoint " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str());
}

Checkpoint capture_checkpoint(Network& net, const RunConfig& cfg, const AnchorSet& anchors) {
  Checkpoint ckpt;
  ckpt.config = config_to_json(cfg);
  for (const auto& p : net.parameters()) ckpt.tensors.emplace_back(p.name, p.var->value());
  const std::int64_t S = static_cast<std::int64_t>(anchors.scales());
  const std::int64_t A = S > 0 ? static_cast<std::int64_t>(anchors.per_scale[0].size()) : 0;
  Tensor a({S, A, 2});
  for (std::int64_t s = 0; s < S; ++s)
    for (std::int64_t k = 0; k < A; ++k) {
      a.data()[(s * A + k) * 2] = anchors.per_scale[s][k].w;
      a.data()[(s * A + k) * 2 + 1] = anchors.per_scale[s][k].h;
    }
  ckpt.tensors.emplace_back("anchors", std::move(a));
  for (const auto& b : net.buffers()) ckpt.buffers.emplace_back(b.name, *b.tensor);
  return ckpt;
}

void restore_network(Network& net, const Checkpoint& ckpt) {
  std::map<std::string, const Tensor*> have;
  for (const auto& [n, t] : ckpt.tensors)
    if (n != "anchors") have[n] = &t;
  for (const auto& [n, t] : ckpt.buffers) have[n] = &t;
  std::vector<std::string> problems;
  std::vector<std::pair<Tensor*, const Tensor*>> copies;
  auto match = [&](const std::string& name, Tensor& dst) {
    auto it = have.find(name);
    if (it == have.end()) {
      problems.push_back(name + ": missing from checkpoint");
      return;
    }
    if (it->second->shape() != dst.shape())
      problems.push_back(name + ": checkpoint " + shape_str(it->second->shape()) + " vs network " +
                         shape_str(dst.shape()));
    else
      copies.emplace_back(&dst, it->second);
    have.erase(it);
  };
  for (auto& p : net.parameters()) match(p.name, p.var->mutable_value());
  for (auto& b : net.buffers()) match(b.name, *b.tensor);
  for (const auto& [n, t] : have) problems.push_back(n + ": not in the network");
  if (!problems.empty()) {
    std::string msg = "checkpoint does not fit the network (" + std::to_string(problems.size()) + " mismatches): ";
    for (std::size_t i = 0; i < problems.size(); ++i) msg += (i ? "; " : "") + problems[i];
    fail(ErrorCode::kConfig, msg);
  }
  for (auto [dst, src] : copies) *dst = *src;
}

AnchorSet checkpoint_anchors(const Checkpoint& ckpt, const std::vector<int>& strides) {
  const Tensor* a = ckpt.find_tensor("anchors");
  require(a && a->rank() == 3 && a->dim(2) == 2, ErrorCode::kData, "checkpoint has no [S, A, 2] anchors tensor");
  require(a->dim(0) == static_cast<std::int64_t>(strides.size()), ErrorCode::kData,
          "checkpoint anchors cover " + std::to_string(a->dim(0)) + " scales, network has " +
              std::to_string(strides.size()));
  AnchorSet set;
  set.strides = strides;
  for (std::int64_t s = 0; s < a->dim(0); ++s) {
    set.per_scale.emplace_back();
    for (std::int64_t k = 0; k < a->dim(1); ++k)
      set.per_scale.back().push_back({a->data()[(s * a->dim(1) + k) * 2], a->data()[(s * a->dim(1) + k) * 2 + 1]});
  }
  return set;
}

}  // namespace ems
