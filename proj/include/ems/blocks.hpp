#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ems/autograd.hpp"
#include "ems/random.hpp"
#include "ems/spiking.hpp"

namespace ems {

enum class BlockKind { kEMS1, kEMS2, kMS, kSEW };
enum class Family { kEMS, kMS, kSEW };
enum class LayerRole { kEncode, kSpikeFed, kMembraneFed };
enum class Readout { kMembrane, kRateCoded };

std::string to_string(BlockKind kind);
std::string to_string(Family family);
std::string to_string(LayerRole role);
std::string to_string(Readout readout);
Family family_from_string(const std::string& s);
Readout readout_from_string(const std::string& s);
LayerRole role_from_string(const std::string& s);

struct BlockSpec {
  BlockKind kind = BlockKind::kMS;
  int in_channels = 0;
  int out_channels = 0;
  int stride = 1;

  // EMS1: out <= in. EMS2: out > in. MS/SEW with out == in and stride 1 use an
  // identity shortcut; otherwise they fall back to their original conv
  // shortcut (non-spike for MS), which is what the ablations compare against.
  void validate() const;
  bool identity_shortcut() const;
};

struct HeadSpec {
  int num_classes = 2;
  int anchors_per_scale = 3;
  int channels = 128;

  int outputs_per_scale() const { return anchors_per_scale * (5 + num_classes); }
};

struct NetworkSpec {
  int depth = 10;
  Family family = Family::kEMS;
  int input_channels = 3;
  int stem_channels = 32;
  std::vector<int> stage_channels{64, 128, 256, 512};
  std::vector<int> blocks_per_stage{1, 1, 1, 1};
  HeadSpec head;
  Readout readout = Readout::kMembrane;
  float alpha = 1.0f;  // TDBN threshold coefficient

  static NetworkSpec for_depth(int depth, Family family = Family::kEMS);
  void validate() const;
  std::vector<int> strides() const { return {16, 32}; }  // fine, coarse
};

// Per-conv instrumentation gathered during a forward pass.
struct ConvRecord {
  std::string name;
  LayerRole role = LayerRole::kSpikeFed;
  std::int64_t op_capacity = 0;  // k^2 * Cin * Cout * Hout * Wout per sample and step
  std::int64_t active = 0;       // nonzero input elements (spikes when binary)
  std::int64_t total = 0;        // input elements seen
  std::int64_t non_binary = 0;   // input elements outside {0, 1}

  bool binary() const { return non_binary == 0; }
};

class Trace {
 public:
  void record_conv(const std::string& name, LayerRole role, std::int64_t op_capacity,
                   const Tensor& input);
  void record_block_output(const std::string& name, const Tensor& output);

  const std::vector<ConvRecord>& convs() const { return convs_; }
  const ConvRecord* find(const std::string& name) const;
  // Mean second moment of each block's output across recorded passes.
  std::vector<std::pair<std::string, double>> block_moments() const;
  void merge(const Trace& other);
  void clear();

 private:
  std::vector<ConvRecord> convs_;
  std::map<std::string, std::size_t> index_;
  std::vector<std::string> block_order_;
  std::map<std::string, std::pair<double, std::int64_t>> block_moment_sums_;
};

struct ForwardContext {
  int steps = 1;
  BNMode bn_mode = BNMode::kTrain;
  LIFConfig lif;
  Trace* trace = nullptr;
};

struct NamedParam {
  std::string name;
  Var* var;
};
struct NamedBuffer {
  std::string name;
  Tensor* tensor;
};

class ConvLayer {
 public:
  ConvLayer() = default;
  ConvLayer(std::string name, int in_channels, int out_channels, int kernel, int stride,
            LayerRole role, Rng& rng, bool with_bias = false);

  Var forward(const Var& x, ForwardContext& ctx) const;

  const std::string& name() const { return name_; }
  LayerRole role() const { return role_; }
  int in_channels() const { return in_; }
  int out_channels() const { return out_; }
  int kernel() const { return k_; }
  int stride() const { return stride_; }
  Var& weight() { return weight_; }
  Var& bias() { return bias_; }
  void collect(std::vector<NamedParam>& out);

 private:
  std::string name_;
  int in_ = 0, out_ = 0, k_ = 1, stride_ = 1;
  LayerRole role_ = LayerRole::kSpikeFed;
  Var weight_;
  Var bias_;
};

// Conv -> TDBN unit with its batch-norm exposed for initialization.
struct ConvBN {
  ConvLayer conv;
  TDBN bn;

  Var forward(const Var& x, ForwardContext& ctx);
  void collect(const std::string& prefix, std::vector<NamedParam>& params,
               std::vector<NamedBuffer>& buffers);
};

class ResidualBlock {
 public:
  ResidualBlock(std::string name, BlockSpec spec, float alpha, float v_th, Rng& rng);

  // X^L = F_r(X^{L-1}) + F_s(X^{L-1})
  Var forward(const Var& x, ForwardContext& ctx);
  Var residual(const Var& x, ForwardContext& ctx);
  Var shortcut(const Var& x, ForwardContext& ctx);

  const BlockSpec& spec() const { return spec_; }
  const std::string& name() const { return name_; }
  ConvBN& res1() { return res1_; }
  ConvBN& res2() { return res2_; }
  // Conv unit on the shortcut, if any (EMS2 new-channel branch, EMS1 down
  // branch, MS/SEW conv shortcut).
  ConvBN* shortcut_unit() { return shortcut_ ? &*shortcut_ : nullptr; }
  bool shortcut_pools() const { return pool_shortcut_; }

  void collect(std::vector<NamedParam>& params, std::vector<NamedBuffer>& buffers);
  std::vector<const ConvLayer*> convs() const;

 private:
  std::string name_;
  BlockSpec spec_;
  ConvBN res1_, res2_;
  std::optional<ConvBN> shortcut_;
  bool pool_shortcut_ = false;
};

struct NetworkOutput {
  std::vector<Var> maps;  // per scale [B, A*(5+K), H, W]; order follows NetworkSpec::strides()
};

class Network {
 public:
  Network(NetworkSpec spec, const LIFConfig& lif, std::uint64_t seed);

  // frames: [T*B, C, H, W]
  NetworkOutput forward(const Var& frames, ForwardContext& ctx);
  // Encode conv + TDBN (+ LIF for SEW); the first block's input.
  Var encode(const Var& frames, ForwardContext& ctx);

  const NetworkSpec& spec() const { return spec_; }
  ConvBN& encoder() { return encode_; }
  std::vector<ResidualBlock>& backbone() { return backbone_; }
  std::vector<ResidualBlock*> all_blocks();
  ResidualBlock& head_coarse() { return head_.at(0); }
  ResidualBlock& head_fine() { return head_.at(1); }

  std::vector<NamedParam> parameters();
  std::vector<NamedBuffer> buffers();
  std::vector<const ConvLayer*> convs() const;

 private:
  NetworkSpec spec_;
  ConvBN encode_;
  std::vector<ResidualBlock> backbone_;
  std::vector<int> stage_of_block_;
  std::vector<ResidualBlock> head_;  // coarse, fine
  ConvLayer detect_fine_;
  ConvLayer detect_coarse_;
};

struct AuditViolation {
  std::string conv;
  std::int64_t non_binary_inputs = 0;
};

// Lists every spike-fed conv that received a value outside {0, 1}.
std::vector<AuditViolation> full_spike_audit(Network& net, const std::vector<Tensor>& probes,
                                             int steps, const LIFConfig& lif);

}  // namespace ems
