#pragma once

#include <cstdint>

#include "ems/autograd.hpp"

namespace ems {

// Every spatial op works on rank-4 NCHW tensors. Time-major sequences
// [T, B, C, H, W] are carried as [T*B, C, H, W] with T tracked by the caller.

Var conv2d(const Var& input, const Var& weight, int stride, int pad);
Var add_channel_bias(const Var& input, const Var& bias);
// ceil_mode keeps partial windows at the border so odd sizes round up.
Var maxpool2d(const Var& input, int kernel = 2, int stride = 2, bool ceil_mode = false);
Var upsample_nearest2x(const Var& input);
Var concat_channels(const Var& a, const Var& b);

Var add(const Var& a, const Var& b);
Var scale(const Var& x, float factor);
Var sum(const Var& x);
// sum(x * weights) with constant weights; the loss of a vector-Jacobian probe.
Var weighted_sum(const Var& x, const Tensor& weights);

// Leading-axis selection on [T*B, ...] sequences.
Var last_step(const Var& seq, int steps);
Var mean_over_steps(const Var& seq, int steps);
// [B, ...] -> [T*B, ...] by repeating along time.
Var repeat_steps(const Var& x, int steps);

}  // namespace ems
