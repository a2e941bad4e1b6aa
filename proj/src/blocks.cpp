#include "ems/blocks.hpp"

#include <algorithm>
#include <cmath>

#include "ems/error.hpp"
#include "ems/ops.hpp"

namespace ems {

std::string to_string(BlockKind kind) {
  switch (kind) {
    case BlockKind::kEMS1:
      return "EMS1";
    case BlockKind::kEMS2:
      return "EMS2";
    case BlockKind::kMS:
      return "MS";
    case BlockKind::kSEW:
      return "SEW";
  }
  return "?";
}

std::string to_string(Family family) {
  switch (family) {
    case Family::kEMS:
      return "EMS";
    case Family::kMS:
      return "MS";
    case Family::kSEW:
      return "SEW";
  }
  return "?";
}

std::string to_string(LayerRole role) {
  switch (role) {
    case LayerRole::kEncode:
      return "encode";
    case LayerRole::kSpikeFed:
      return "spike_fed";
    case LayerRole::kMembraneFed:
      return "membrane_fed";
  }
  return "?";
}

std::string to_string(Readout readout) {
  return readout == Readout::kMembrane ? "membrane" : "rate_coded";
}

Family family_from_string(const std::string& s) {
  if (s == "EMS") return Family::kEMS;
  if (s == "MS") return Family::kMS;
  if (s == "SEW") return Family::kSEW;
  fail(ErrorCode::kConfig, "unknown block_kind '" + s + "' (expected EMS, MS or SEW)");
}

Readout readout_from_string(const std::string& s) {
  if (s == "membrane") return Readout::kMembrane;
  if (s == "rate_coded") return Readout::kRateCoded;
  fail(ErrorCode::kConfig, "unknown detection_readout '" + s + "' (expected membrane or rate_coded)");
}

LayerRole role_from_string(const std::string& s) {
  if (s == "encode") return LayerRole::kEncode;
  if (s == "spike_fed") return LayerRole::kSpikeFed;
  if (s == "membrane_fed") return LayerRole::kMembraneFed;
  fail(ErrorCode::kData, "unknown layer role '" + s + "'");
}

// ---------------------------------------------------------------------------

void BlockSpec::validate() const {
  const std::string what = to_string(kind) + " block " + std::to_string(in_channels) + "->" +
                           std::to_string(out_channels) + " stride " + std::to_string(stride);
  require(in_channels > 0 && out_channels > 0, ErrorCode::kConfig,
          what + ": channel counts must be positive");
  require(stride == 1 || stride == 2, ErrorCode::kConfig, what + ": stride must be 1 or 2");
  switch (kind) {
    case BlockKind::kEMS1:
      require(out_channels <= in_channels, ErrorCode::kConfig,
              what + ": EMS1 handles constant or decreasing channels; use EMS2 to widen");
      break;
    case BlockKind::kEMS2:
      require(out_channels > in_channels, ErrorCode::kConfig,
              what + ": EMS2 requires out_channels > in_channels (identity slice + new channels)");
      break;
    case BlockKind::kMS:
    case BlockKind::kSEW:
      break;
  }
}

bool BlockSpec::identity_shortcut() const {
  return kind != BlockKind::kEMS2 && in_channels == out_channels && stride == 1;
}

NetworkSpec NetworkSpec::for_depth(int depth, Family family) {
  NetworkSpec spec;
  spec.depth = depth;
  spec.family = family;
  switch (depth) {
    case 10:
      spec.blocks_per_stage = {1, 1, 1, 1};
      break;
    case 18:
      spec.blocks_per_stage = {2, 2, 2, 2};
      break;
    case 34:
      spec.blocks_per_stage = {3, 4, 6, 3};
      break;
    default:
      fail(ErrorCode::kConfig, "depth must be 10, 18 or 34, got " + std::to_string(depth));
  }
  return spec;
}

void NetworkSpec::validate() const {
  require(depth == 10 || depth == 18 || depth == 34, ErrorCode::kConfig,
          "depth must be 10, 18 or 34, got " + std::to_string(depth));
  require(stage_channels.size() == 4 && blocks_per_stage.size() == 4, ErrorCode::kConfig,
          "network needs exactly four stages");
  require(head.num_classes >= 1, ErrorCode::kConfig, "class count must be >= 1");
  require(head.anchors_per_scale >= 1, ErrorCode::kConfig, "anchors per scale must be >= 1");
  require(head.channels >= 1 && head.channels <= stage_channels[3], ErrorCode::kConfig,
          "head channels must lie in [1, last stage width]");
  require(input_channels >= 1, ErrorCode::kConfig, "input channels must be >= 1");
  require(alpha > 0.0f, ErrorCode::kConfig, "alpha must be positive");
}

// ---------------------------------------------------------------------------

void Trace::record_conv(const std::string& name, LayerRole role, std::int64_t op_capacity,
                        const Tensor& input) {
  auto it = index_.find(name);
  if (it == index_.end()) {
    it = index_.emplace(name, convs_.size()).first;
    ConvRecord rec;
    rec.name = name;
    rec.role = role;
    rec.op_capacity = op_capacity;
    convs_.push_back(rec);
  }
  ConvRecord& rec = convs_[it->second];
  std::int64_t active = 0, odd = 0;
  for (float v : input.data()) {
    if (v != 0.0f) ++active;
    if (v != 0.0f && v != 1.0f) ++odd;
  }
  rec.active += active;
  rec.total += static_cast<std::int64_t>(input.numel());
  rec.non_binary += odd;
}

void Trace::record_block_output(const std::string& name, const Tensor& output) {
  double ss = 0.0;
  for (float v : output.data()) ss += static_cast<double>(v) * v;
  auto [it, inserted] = block_moment_sums_.try_emplace(name, 0.0, 0);
  if (inserted) block_order_.push_back(name);
  it->second.first += ss / static_cast<double>(std::max<std::size_t>(output.numel(), 1));
  it->second.second += 1;
}

const ConvRecord* Trace::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &convs_[it->second];
}

std::vector<std::pair<std::string, double>> Trace::block_moments() const {
  std::vector<std::pair<std::string, double>> out;
  for (const auto& name : block_order_) {
    const auto& [s, n] = block_moment_sums_.at(name);
    out.emplace_back(name, s / static_cast<double>(n));
  }
  return out;
}

void Trace::merge(const Trace& other) {
  for (const auto& rec : other.convs_) {
    auto it = index_.find(rec.name);
    if (it == index_.end()) {
      index_.emplace(rec.name, convs_.size());
      convs_.push_back(rec);
      continue;
    }
    ConvRecord& mine = convs_[it->second];
    mine.active += rec.active;
    mine.total += rec.total;
    mine.non_binary += rec.non_binary;
  }
  for (const auto& name : other.block_order_) {
    const auto& src = other.block_moment_sums_.at(name);
    auto [it, inserted] = block_moment_sums_.try_emplace(name, 0.0, 0);
    if (inserted) block_order_.push_back(name);
    it->second.first += src.first;
    it->second.second += src.second;
  }
}

void Trace::clear() {
  convs_.clear();
  index_.clear();
  block_order_.clear();
  block_moment_sums_.clear();
}

// ---------------------------------------------------------------------------

ConvLayer::ConvLayer(std::string name, int in_channels, int out_channels, int kernel, int stride,
                     LayerRole role, Rng& rng, bool with_bias)
    : name_(std::move(name)),
      in_(in_channels),
      out_(out_channels),
      k_(kernel),
      stride_(stride),
      role_(role) {
  const float fan_in = static_cast<float>(in_channels * kernel * kernel);
  // Detection outputs start near zero so early box regression stays tame.
  const float stddev = role == LayerRole::kMembraneFed ? 0.01f : std::sqrt(2.0f / fan_in);
  weight_ = Var(rng.normal_tensor({out_channels, in_channels, kernel, kernel}, 0.0f, stddev), true);
  if (with_bias) bias_ = Var(Tensor({out_channels}, 0.0f), true);
}

Var ConvLayer::forward(const Var& x, ForwardContext& ctx) const {
  Var y = conv2d(x, weight_, stride_, k_ == 3 ? 1 : 0);
  if (ctx.trace) {
    const std::int64_t cap = static_cast<std::int64_t>(k_) * k_ * in_ * out_ * y.dim(2) * y.dim(3);
    ctx.trace->record_conv(name_, role_, cap, x.value());
  }
  if (bias_.defined()) y = add_channel_bias(y, bias_);
  return y;
}

void ConvLayer::collect(std::vector<NamedParam>& out) {
  out.push_back({name_ + ".weight", &weight_});
  if (bias_.defined()) out.push_back({name_ + ".bias", &bias_});
}

Var ConvBN::forward(const Var& x, ForwardContext& ctx) {
  return bn.forward(conv.forward(x, ctx), ctx.bn_mode);
}

void ConvBN::collect(const std::string& prefix, std::vector<NamedParam>& params,
                     std::vector<NamedBuffer>& buffers) {
  conv.collect(params);
  params.push_back({prefix + ".bn.lambda", &bn.lambda()});
  params.push_back({prefix + ".bn.beta", &bn.beta()});
  buffers.push_back({prefix + ".bn.running_mean", &bn.running_mean()});
  buffers.push_back({prefix + ".bn.running_var", &bn.running_var()});
}

// ---------------------------------------------------------------------------

namespace {
ConvBN make_unit(const std::string& name, int cin, int cout, int k, int stride, LayerRole role,
                 float alpha, float v_th, Rng& rng) {
  return ConvBN{ConvLayer(name + ".conv", cin, cout, k, stride, role, rng),
                TDBN(cout, alpha, v_th)};
}
}  // namespace

ResidualBlock::ResidualBlock(std::string name, BlockSpec spec, float alpha, float v_th, Rng& rng)
    : name_(std::move(name)), spec_(spec) {
  spec_.validate();
  const int in = spec_.in_channels, out = spec_.out_channels;
  const int mid = std::min(in, out);
  res1_ = make_unit(name_ + ".res1", in, mid, 3, spec_.stride, LayerRole::kSpikeFed, alpha, v_th, rng);
  res2_ = make_unit(name_ + ".res2", mid, out, 3, 1, LayerRole::kSpikeFed, alpha, v_th, rng);
  switch (spec_.kind) {
    case BlockKind::kEMS1:
      if (!spec_.identity_shortcut()) {
        pool_shortcut_ = spec_.stride == 2;
        shortcut_ = make_unit(name_ + ".shortcut", in, out, 1, 1, LayerRole::kSpikeFed, alpha, v_th, rng);
      }
      break;
    case BlockKind::kEMS2:
      pool_shortcut_ = spec_.stride == 2;
      shortcut_ = make_unit(name_ + ".shortcut", in, out - in, 1, 1, LayerRole::kSpikeFed, alpha, v_th, rng);
      break;
    case BlockKind::kMS:
    case BlockKind::kSEW:
      if (!spec_.identity_shortcut())
        shortcut_ = make_unit(name_ + ".shortcut", in, out, 1, spec_.stride, LayerRole::kSpikeFed,
                              alpha, v_th, rng);
      break;
  }
}

Var ResidualBlock::residual(const Var& x, ForwardContext& ctx) {
  if (spec_.kind == BlockKind::kSEW) {
    Var s1 = lif(res1_.forward(x, ctx), ctx.steps, ctx.lif).spikes;
    return lif(res2_.forward(s1, ctx), ctx.steps, ctx.lif).spikes;
  }
  Var s0 = lif(x, ctx.steps, ctx.lif).spikes;
  Var s1 = lif(res1_.forward(s0, ctx), ctx.steps, ctx.lif).spikes;
  return res2_.forward(s1, ctx);
}

Var ResidualBlock::shortcut(const Var& x, ForwardContext& ctx) {
  if (!shortcut_) return x;
  switch (spec_.kind) {
    case BlockKind::kEMS1: {
      Var p = pool_shortcut_ ? maxpool2d(x, 2, 2, true) : x;
      return shortcut_->forward(lif(p, ctx.steps, ctx.lif).spikes, ctx);
    }
    case BlockKind::kEMS2: {
      Var p = pool_shortcut_ ? maxpool2d(x, 2, 2, true) : x;
      Var fresh = shortcut_->forward(lif(p, ctx.steps, ctx.lif).spikes, ctx);
      return concat_channels(p, fresh);
    }
    case BlockKind::kMS:
      return shortcut_->forward(x, ctx);
    case BlockKind::kSEW:
      return lif(shortcut_->forward(x, ctx), ctx.steps, ctx.lif).spikes;
  }
  return x;
}

Var ResidualBlock::forward(const Var& x, ForwardContext& ctx) {
  Var out = add(residual(x, ctx), shortcut(x, ctx));
  if (ctx.trace) ctx.trace->record_block_output(name_, out.value());
  return out;
}

void ResidualBlock::collect(std::vector<NamedParam>& params, std::vector<NamedBuffer>& buffers) {
  res1_.collect(name_ + ".res1", params, buffers);
  res2_.collect(name_ + ".res2", params, buffers);
  if (shortcut_) shortcut_->collect(name_ + ".shortcut", params, buffers);
}

std::vector<const ConvLayer*> ResidualBlock::convs() const {
  std::vector<const ConvLayer*> out{&res1_.conv, &res2_.conv};
  if (shortcut_) out.push_back(&shortcut_->conv);
  return out;
}

// ---------------------------------------------------------------------------

Network::Network(NetworkSpec spec, const LIFConfig& lif, std::uint64_t seed) : spec_(std::move(spec)) {
  spec_.validate();
  lif.validate();
  Rng rng(seed);
  const float alpha = spec_.alpha, v_th = lif.v_th;
  encode_ = make_unit("encode", spec_.input_channels, spec_.stem_channels, 3, 2, LayerRole::kEncode,
                      alpha, v_th, rng);
  int cin = spec_.stem_channels;
  for (std::size_t s = 0; s < 4; ++s) {
    const int cout = spec_.stage_channels[s];
    for (int b = 0; b < spec_.blocks_per_stage[s]; ++b) {
      BlockSpec bs;
      if (b == 0) {
        bs = {spec_.family == Family::kEMS ? BlockKind::kEMS2
                                            : (spec_.family == Family::kMS ? BlockKind::kMS : BlockKind::kSEW),
              cin, cout, 2};
      } else {
        bs = {spec_.family == Family::kSEW ? BlockKind::kSEW : BlockKind::kMS, cout, cout, 1};
      }
      backbone_.emplace_back("stage" + std::to_string(s + 1) + ".block" + std::to_string(b), bs, alpha,
                             v_th, rng);
      stage_of_block_.push_back(static_cast<int>(s));
    }
    cin = cout;
  }
  const BlockKind head_kind = spec_.family == Family::kEMS
                                  ? BlockKind::kEMS1
                                  : (spec_.family == Family::kMS ? BlockKind::kMS : BlockKind::kSEW);
  const int hc = spec_.head.channels;
  head_.emplace_back("head.coarse", BlockSpec{head_kind, spec_.stage_channels[3], hc, 1}, alpha, v_th, rng);
  head_.emplace_back("head.fine", BlockSpec{head_kind, hc + spec_.stage_channels[2], hc, 1}, alpha, v_th,
                     rng);
  const int outs = spec_.head.outputs_per_scale();
  detect_fine_ = ConvLayer("head.detect_fine", hc, outs, 1, 1, LayerRole::kMembraneFed, rng, true);
  detect_coarse_ = ConvLayer("head.detect_coarse", hc, outs, 1, 1, LayerRole::kMembraneFed, rng, true);
  // Objectness starts at a 1% prior.
  const float prior = std::log(0.01f / 0.99f);
  for (int a = 0; a < spec_.head.anchors_per_scale; ++a) {
    const std::size_t obj = static_cast<std::size_t>(a * (5 + spec_.head.num_classes) + 4);
    detect_fine_.bias().mutable_value()[obj] = prior;
    detect_coarse_.bias().mutable_value()[obj] = prior;
  }
}

Var Network::encode(const Var& frames, ForwardContext& ctx) {
  require(frames.value().rank() == 4 && frames.dim(1) == spec_.input_channels, ErrorCode::kData,
          "network input must be [T*B," + std::to_string(spec_.input_channels) + ",H,W], got " +
              shape_str(frames.shape()));
  Var e = encode_.forward(frames, ctx);
  if (spec_.family == Family::kSEW) e = lif(e, ctx.steps, ctx.lif).spikes;
  return e;
}

NetworkOutput Network::forward(const Var& frames, ForwardContext& ctx) {
  require(ctx.steps >= 1, ErrorCode::kConfig, "time steps T must be >= 1");
  require(frames.dim(0) % ctx.steps == 0, ErrorCode::kData,
          "input leading dim " + std::to_string(frames.dim(0)) + " not divisible by T=" +
              std::to_string(ctx.steps));
  Var x = encode(frames, ctx);
  Var fine_tap, coarse_tap;
  for (std::size_t i = 0; i < backbone_.size(); ++i) {
    x = backbone_[i].forward(x, ctx);
    const bool stage_end = i + 1 == backbone_.size() || stage_of_block_[i + 1] != stage_of_block_[i];
    if (stage_end && stage_of_block_[i] == 2) fine_tap = x;
    if (stage_end && stage_of_block_[i] == 3) coarse_tap = x;
  }
  Var hc = head_[0].forward(coarse_tap, ctx);
  Var hf = head_[1].forward(concat_channels(upsample_nearest2x(hc), fine_tap), ctx);

  auto readout = [&](const Var& h, const ConvLayer& det) {
    LIFOutput l = lif(h, ctx.steps, ctx.lif);
    Var in = spec_.readout == Readout::kMembrane ? last_step(l.membrane, ctx.steps)
                                                 : mean_over_steps(l.spikes, ctx.steps);
    return det.forward(in, ctx);
  };
  NetworkOutput out;
  out.maps.push_back(readout(hf, detect_fine_));
  out.maps.push_back(readout(hc, detect_coarse_));
  return out;
}

std::vector<ResidualBlock*> Network::all_blocks() {
  std::vector<ResidualBlock*> out;
  for (auto& b : backbone_) out.push_back(&b);
  for (auto& b : head_) out.push_back(&b);
  return out;
}

std::vector<NamedParam> Network::parameters() {
  std::vector<NamedParam> params;
  std::vector<NamedBuffer> buffers;
  encode_.collect("encode", params, buffers);
  for (auto* b : all_blocks()) b->collect(params, buffers);
  detect_fine_.collect(params);
  detect_coarse_.collect(params);
  return params;
}

std::vector<NamedBuffer> Network::buffers() {
  std::vector<NamedParam> params;
  std::vector<NamedBuffer> buffers;
  encode_.collect("encode", params, buffers);
  for (auto* b : all_blocks()) b->collect(params, buffers);
  return buffers;
}

std::vector<const ConvLayer*> Network::convs() const {
  std::vector<const ConvLayer*> out{&encode_.conv};
  for (const auto& b : backbone_)
    for (auto* c : b.convs()) out.push_back(c);
  for (const auto& b : head_)
    for (auto* c : b.convs()) out.push_back(c);
  out.push_back(&detect_fine_);
  out.push_back(&detect_coarse_);
  return out;
}

std::vector<AuditViolation> full_spike_audit(Network& net, const std::vector<Tensor>& probes,
                                             int steps, const LIFConfig& lif) {
  NoGradGuard no_grad;
  Trace trace;
  for (const auto& probe : probes) {
    ForwardContext ctx{steps, BNMode::kBatchStats, lif, &trace};
    net.forward(Var(probe), ctx);
  }
  std::vector<AuditViolation> out;
  for (const auto& rec : trace.convs()) {
    if (rec.role != LayerRole::kSpikeFed) continue;
    if (!rec.binary()) out.push_back({rec.name, rec.non_binary});
  }
  return out;
}

}  // namespace ems
