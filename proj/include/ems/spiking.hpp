#pragma once

#include <string>

#include "ems/autograd.hpp"
#include "ems/tensor.hpp"

namespace ems {

enum class ResetGrad { kSurrogate, kDetached };

// Heaviside fires spikes; Ramp is the piecewise-linear twin whose exact
// derivative equals the surrogate window. The twin exists for gradient checks.
enum class SpikeFn { kHeaviside, kRamp };

struct LIFConfig {
  float tau = 0.25f;
  float v_th = 0.5f;
  float v_reset = 0.0f;
  float a = 1.0f;  // surrogate window width
  ResetGrad reset_grad = ResetGrad::kSurrogate;
  SpikeFn spike_fn = SpikeFn::kHeaviside;

  void validate() const;
};

// Rectangular surrogate: 1/a inside |v - v_th| <= a/2, else 0.
float surrogate_grad(float v, const LIFConfig& cfg);

// Membrane trace and spikes of one LIF layer over a whole sequence.
struct LIFState {
  Tensor membrane;    // V^t before reset, [T*B, ...]
  Tensor last_spike;  // X^t, [T*B, ...]
};

// Differentiable LIF over a time-major sequence [T*B, ...]. The spikes and
// membrane outputs share one BPTT backward.
struct LIFOutput {
  Var spikes;
  Var membrane;
};

LIFOutput lif(const Var& input, int steps, const LIFConfig& cfg);

// Graph-free convenience; state starts at V = 0, X = 0.
LIFState lif_forward(const Tensor& input, int steps, const LIFConfig& cfg);

// kBatchStats normalizes with batch statistics but leaves running stats alone
// (diagnostic probes).
enum class BNMode { kTrain, kInfer, kBatchStats };

// Threshold-dependent batch norm. Statistics are pooled per channel over
// time, batch and space: y = lambda * alpha * v_th * (x - mu) / sqrt(var + eps) + beta.
class TDBN {
 public:
  TDBN() = default;
  TDBN(std::int64_t channels, float alpha, float v_th, float eps = 1e-5f, float momentum = 0.1f);

  Var forward(const Var& x, BNMode mode);

  std::int64_t channels() const { return channels_; }
  Var& lambda() { return lambda_; }
  Var& beta() { return beta_; }
  const Var& lambda() const { return lambda_; }
  const Var& beta() const { return beta_; }
  Tensor& running_mean() { return running_mean_; }
  Tensor& running_var() { return running_var_; }
  const Tensor& running_mean() const { return running_mean_; }
  const Tensor& running_var() const { return running_var_; }
  float alpha() const { return alpha_; }
  float v_th() const { return v_th_; }
  float eps() const { return eps_; }

  // Sets every channel's lambda to one value (used by GNE initialization).
  void set_lambda(float value);

 private:
  std::int64_t channels_ = 0;
  float alpha_ = 1.0f;
  float v_th_ = 0.5f;
  float eps_ = 1e-5f;
  float momentum_ = 0.1f;
  Var lambda_;
  Var beta_;
  Tensor running_mean_;
  Tensor running_var_;
};

}  // namespace ems
