#include "ems/spiking.hpp"

#include <algorithm>
#include <cmath>

#include "ems/error.hpp"

namespace ems {

void LIFConfig::validate() const {
  require(tau > 0.0f && tau < 1.0f, ErrorCode::kConfig,
          "LIF tau must lie in (0, 1), got " + std::to_string(tau));
  require(v_th > v_reset, ErrorCode::kConfig, "LIF v_th must exceed v_reset");
  require(a > 0.0f, ErrorCode::kConfig, "surrogate width a must be positive");
}

float surrogate_grad(float v, const LIFConfig& cfg) {
  return std::fabs(v - cfg.v_th) <= 0.5f * cfg.a ? 1.0f / cfg.a : 0.0f;
}

namespace {

float spike_value(float v, const LIFConfig& cfg) {
  if (cfg.spike_fn == SpikeFn::kHeaviside) return v - cfg.v_th >= 0.0f ? 1.0f : 0.0f;
  return std::clamp((v - cfg.v_th) / cfg.a + 0.5f, 0.0f, 1.0f);
}

float spike_slope(float v, const LIFConfig& cfg) {
  if (cfg.spike_fn == SpikeFn::kHeaviside) return surrogate_grad(v, cfg);
  return std::fabs(v - cfg.v_th) < 0.5f * cfg.a ? 1.0f / cfg.a : 0.0f;
}

std::size_t step_chunk(const Tensor& input, int steps) {
  require(steps >= 1, ErrorCode::kNumeric, "LIF: steps must be >= 1");
  require(input.rank() >= 1 && input.dim(0) % steps == 0, ErrorCode::kNumeric,
          "LIF: leading dim of " + shape_str(input.shape()) + " not divisible by T=" +
              std::to_string(steps));
  require(input.all_finite(), ErrorCode::kNumeric, "LIF: non-finite input current");
  return input.numel() / static_cast<std::size_t>(steps);
}

void run_lif(const Tensor& input, int steps, const LIFConfig& cfg, Tensor& membrane,
             Tensor& spikes) {
  const std::size_t chunk = step_chunk(input, steps);
  membrane = Tensor(input.shape());
  spikes = Tensor(input.shape());
  for (int t = 0; t < steps; ++t) {
    const std::size_t off = chunk * static_cast<std::size_t>(t);
    for (std::size_t i = 0; i < chunk; ++i) {
      float v;
      if (t == 0) {
        v = cfg.tau * cfg.v_reset + input[off + i];
      } else {
        const float vp = membrane[off - chunk + i];
        const float xp = spikes[off - chunk + i];
        v = cfg.tau * (vp * (1.0f - xp) + cfg.v_reset * xp) + input[off + i];
      }
      membrane[off + i] = v;
      spikes[off + i] = spike_value(v, cfg);
    }
  }
}

}  // namespace

LIFState lif_forward(const Tensor& input, int steps, const LIFConfig& cfg) {
  cfg.validate();
  LIFState state;
  run_lif(input, steps, cfg, state.membrane, state.last_spike);
  return state;
}

LIFOutput lif(const Var& input, int steps, const LIFConfig& cfg) {
  cfg.validate();
  Tensor membrane, spikes;
  run_lif(input.value(), steps, cfg, membrane, spikes);
  const std::size_t chunk = input.numel() / static_cast<std::size_t>(steps);

  // Spikes are kept alongside the trace so the reset factor is available in backward.
  auto spike_copy = std::make_shared<Tensor>(spikes);
  Var mem = Var::make_result(
      std::move(membrane), "lif_membrane", {input},
      [cfg, steps, chunk, spike_copy](detail::Node& self) {
        detail::Node& in = *self.inputs[0];
        if (!in.requires_grad) return;
        const Tensor& v = self.value;
        const Tensor& x = *spike_copy;
        float* gi = in.grad_buffer().raw();
        std::vector<float> carry(chunk, 0.0f);
        for (int t = steps - 1; t >= 0; --t) {
          const std::size_t off = chunk * static_cast<std::size_t>(t);
          for (std::size_t i = 0; i < chunk; ++i) {
            const float gv = self.grad[off + i] + carry[i];
            gi[off + i] += gv;
            if (t > 0) {
              const float vp = v[off - chunk + i];
              const float xp = x[off - chunk + i];
              float dv = cfg.tau * (1.0f - xp);
              if (cfg.reset_grad == ResetGrad::kSurrogate)
                dv += cfg.tau * (cfg.v_reset - vp) * spike_slope(vp, cfg);
              carry[i] = gv * dv;
            }
          }
        }
      });

  Var spk = Var::make_result(std::move(spikes), "lif_spikes", {mem}, [cfg](detail::Node& self) {
    detail::Node& m = *self.inputs[0];
    if (!m.requires_grad) return;
    float* gm = m.grad_buffer().raw();
    for (std::size_t i = 0; i < self.grad.numel(); ++i)
      gm[i] += self.grad[i] * spike_slope(m.value[i], cfg);
  });
  return {spk, mem};
}

TDBN::TDBN(std::int64_t channels, float alpha, float v_th, float eps, float momentum)
    : channels_(channels),
      alpha_(alpha),
      v_th_(v_th),
      eps_(eps),
      momentum_(momentum),
      lambda_(Tensor({channels}, 1.0f), true),
      beta_(Tensor({channels}, 0.0f), true),
      running_mean_({channels}, 0.0f),
      running_var_({channels}, 1.0f) {
  require(eps > 0.0f, ErrorCode::kConfig, "TDBN eps must be > 0");
}

void TDBN::set_lambda(float value) { lambda_.mutable_value().fill(value); }

Var TDBN::forward(const Var& x, BNMode mode) {
  require(x.value().rank() == 4 && x.dim(1) == channels_, ErrorCode::kNumeric,
          "TDBN: expected [N," + std::to_string(channels_) + ",H,W], got " + shape_str(x.shape()));
  const std::int64_t n = x.dim(0), c = channels_, hw = x.dim(2) * x.dim(3);
  const std::int64_t count = n * hw;
  const float gain = alpha_ * v_th_;

  std::vector<float> mean(c), inv_std(c);
  const bool batch_stats = mode != BNMode::kInfer;
  if (batch_stats) {
    require(count >= 2, ErrorCode::kNumeric,
            "TDBN: batch statistics need >= 2 samples per channel, got " + std::to_string(count));
    for (std::int64_t ch = 0; ch < c; ++ch) {
      double s = 0.0, ss = 0.0;
      for (std::int64_t b = 0; b < n; ++b) {
        const float* p = x.value().raw() + (b * c + ch) * hw;
        for (std::int64_t i = 0; i < hw; ++i) s += p[i];
      }
      const double mu = s / static_cast<double>(count);
      for (std::int64_t b = 0; b < n; ++b) {
        const float* p = x.value().raw() + (b * c + ch) * hw;
        for (std::int64_t i = 0; i < hw; ++i) {
          const double d = p[i] - mu;
          ss += d * d;
        }
      }
      const double var = ss / static_cast<double>(count);
      mean[ch] = static_cast<float>(mu);
      inv_std[ch] = static_cast<float>(1.0 / std::sqrt(var + eps_));
      if (mode == BNMode::kTrain) {
        const double unbiased = ss / static_cast<double>(count - 1);
        running_mean_[ch] = (1.0f - momentum_) * running_mean_[ch] + momentum_ * static_cast<float>(mu);
        running_var_[ch] =
            (1.0f - momentum_) * running_var_[ch] + momentum_ * static_cast<float>(unbiased);
      }
    }
  } else {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      mean[ch] = running_mean_[ch];
      inv_std[ch] = 1.0f / std::sqrt(running_var_[ch] + eps_);
    }
  }

  Tensor xhat(x.shape());
  Tensor out(x.shape());
  const Tensor& lam = lambda_.value();
  const Tensor& bet = beta_.value();
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const float* p = x.value().raw() + (b * c + ch) * hw;
      float* xh = xhat.raw() + (b * c + ch) * hw;
      float* o = out.raw() + (b * c + ch) * hw;
      const float scl = lam[ch] * gain;
      for (std::int64_t i = 0; i < hw; ++i) {
        xh[i] = (p[i] - mean[ch]) * inv_std[ch];
        o[i] = scl * xh[i] + bet[ch];
      }
    }

  return Var::make_result(
      std::move(out), "tdbn", {x, lambda_, beta_},
      [xhat = std::move(xhat), inv_std, n, c, hw, gain, batch_stats](detail::Node& self) {
        detail::Node& xn = *self.inputs[0];
        detail::Node& ln = *self.inputs[1];
        detail::Node& bn = *self.inputs[2];
        const Tensor& lam = ln.value;
        const double count = static_cast<double>(n * hw);
        for (std::int64_t ch = 0; ch < c; ++ch) {
          double sdy = 0.0, sdyx = 0.0;
          for (std::int64_t b = 0; b < n; ++b) {
            const float* g = self.grad.raw() + (b * c + ch) * hw;
            const float* xh = xhat.raw() + (b * c + ch) * hw;
            for (std::int64_t i = 0; i < hw; ++i) {
              sdy += g[i];
              sdyx += static_cast<double>(g[i]) * xh[i];
            }
          }
          if (ln.requires_grad) ln.grad_buffer()[ch] += static_cast<float>(gain * sdyx);
          if (bn.requires_grad) bn.grad_buffer()[ch] += static_cast<float>(sdy);
          if (!xn.requires_grad) continue;
          const float scl = lam[ch] * gain * inv_std[ch];
          const float mdy = static_cast<float>(sdy / count);
          const float mdyx = static_cast<float>(sdyx / count);
          float* gx = xn.grad_buffer().raw();
          for (std::int64_t b = 0; b < n; ++b) {
            const float* g = self.grad.raw() + (b * c + ch) * hw;
            const float* xh = xhat.raw() + (b * c + ch) * hw;
            float* d = gx + (b * c + ch) * hw;
            if (batch_stats) {
              for (std::int64_t i = 0; i < hw; ++i) d[i] += scl * (g[i] - mdy - xh[i] * mdyx);
            } else {
              for (std::int64_t i = 0; i < hw; ++i) d[i] += scl * g[i];
            }
          }
        }
      });
}

}  // namespace ems
