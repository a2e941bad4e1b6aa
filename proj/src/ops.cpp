#include "ems/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <limits>

#include "ems/error.hpp"

namespace ems {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMat>;
using ConstRowMap = Eigen::Map<const RowMat>;

struct ConvGeometry {
  std::int64_t n, cin, h, w, cout, k, stride, pad, hout, wout;
  std::int64_t patch() const { return cin * k * k; }
  std::int64_t positions() const { return hout * wout; }
};

void require_rank4(const Var& x, const char* op) {
  require(x.value().rank() == 4, ErrorCode::kNumeric,
          std::string(op) + ": expected NCHW input, got shape " + shape_str(x.shape()));
}

// cols is [patch, n * positions], row-major.
void im2col(const Tensor& x, const ConvGeometry& g, RowMat& cols) {
  const std::int64_t cols_n = g.n * g.positions();
  cols.resize(g.patch(), cols_n);
  const float* src = x.raw();
  for (std::int64_t ci = 0; ci < g.cin; ++ci) {
    for (std::int64_t ky = 0; ky < g.k; ++ky) {
      for (std::int64_t kx = 0; kx < g.k; ++kx) {
        float* row = cols.data() + ((ci * g.k + ky) * g.k + kx) * cols_n;
        for (std::int64_t b = 0; b < g.n; ++b) {
          const float* plane = src + (b * g.cin + ci) * g.h * g.w;
          float* dst = row + b * g.positions();
          for (std::int64_t oy = 0; oy < g.hout; ++oy) {
            const std::int64_t iy = oy * g.stride - g.pad + ky;
            float* drow = dst + oy * g.wout;
            if (iy < 0 || iy >= g.h) {
              std::fill(drow, drow + g.wout, 0.0f);
              continue;
            }
            const float* srow = plane + iy * g.w;
            for (std::int64_t ox = 0; ox < g.wout; ++ox) {
              const std::int64_t ix = ox * g.stride - g.pad + kx;
              drow[ox] = (ix >= 0 && ix < g.w) ? srow[ix] : 0.0f;
            }
          }
        }
      }
    }
  }
}

void col2im_add(const RowMat& cols, const ConvGeometry& g, Tensor& dx) {
  const std::int64_t cols_n = g.n * g.positions();
  float* dst = dx.raw();
  for (std::int64_t ci = 0; ci < g.cin; ++ci) {
    for (std::int64_t ky = 0; ky < g.k; ++ky) {
      for (std::int64_t kx = 0; kx < g.k; ++kx) {
        const float* row = cols.data() + ((ci * g.k + ky) * g.k + kx) * cols_n;
        for (std::int64_t b = 0; b < g.n; ++b) {
          float* plane = dst + (b * g.cin + ci) * g.h * g.w;
          const float* src = row + b * g.positions();
          for (std::int64_t oy = 0; oy < g.hout; ++oy) {
            const std::int64_t iy = oy * g.stride - g.pad + ky;
            if (iy < 0 || iy >= g.h) continue;
            float* prow = plane + iy * g.w;
            const float* srow = src + oy * g.wout;
            for (std::int64_t ox = 0; ox < g.wout; ++ox) {
              const std::int64_t ix = ox * g.stride - g.pad + kx;
              if (ix >= 0 && ix < g.w) prow[ix] += srow[ox];
            }
          }
        }
      }
    }
  }
}

void accumulate(detail::Node& input, const Tensor& delta) {
  if (!input.requires_grad) return;
  Tensor& g = input.grad_buffer();
  float* d = g.raw();
  const float* s = delta.raw();
  for (std::size_t i = 0; i < g.numel(); ++i) d[i] += s[i];
}

}  // namespace

Var conv2d(const Var& input, const Var& weight, int stride, int pad) {
  require_rank4(input, "conv2d");
  require(weight.value().rank() == 4, ErrorCode::kNumeric,
          "conv2d: weight must be [Cout,Cin,k,k], got " + shape_str(weight.shape()));
  ConvGeometry g{};
  g.n = input.dim(0);
  g.cin = input.dim(1);
  g.h = input.dim(2);
  g.w = input.dim(3);
  g.cout = weight.dim(0);
  g.k = weight.dim(2);
  g.stride = stride;
  g.pad = pad;
  require(weight.dim(1) == g.cin && weight.dim(3) == g.k, ErrorCode::kNumeric,
          "conv2d: input " + shape_str(input.shape()) + " incompatible with weight " +
              shape_str(weight.shape()));
  require(g.k >= 1 && weight.dim(2) == g.k, ErrorCode::kNumeric,
          "conv2d: kernel must be square, got " + shape_str(weight.shape()));
  require(stride == 1 || stride == 2, ErrorCode::kNumeric,
          "conv2d: stride must be 1 or 2, got " + std::to_string(stride));
  require(pad >= 0, ErrorCode::kNumeric, "conv2d: negative padding");
  g.hout = (g.h + 2 * pad - g.k) / stride + 1;
  g.wout = (g.w + 2 * pad - g.k) / stride + 1;
  require(g.h + 2 * pad >= g.k && g.w + 2 * pad >= g.k && g.hout >= 1 && g.wout >= 1,
          ErrorCode::kNumeric,
          "conv2d: input " + shape_str(input.shape()) + " too small for kernel " +
              std::to_string(g.k) + " with pad " + std::to_string(pad));

  RowMat cols;
  im2col(input.value(), g, cols);
  ConstRowMap wmat(weight.value().raw(), g.cout, g.patch());
  RowMat y = wmat * cols;  // [cout, n*positions]

  Tensor out({g.n, g.cout, g.hout, g.wout});
  const std::int64_t np = g.n * g.positions();
  for (std::int64_t co = 0; co < g.cout; ++co) {
    const float* yrow = y.data() + co * np;
    for (std::int64_t b = 0; b < g.n; ++b) {
      std::copy(yrow + b * g.positions(), yrow + (b + 1) * g.positions(),
                out.raw() + (b * g.cout + co) * g.positions());
    }
  }

  return Var::make_result(std::move(out), "conv2d", {input, weight}, [g](detail::Node& self) {
    detail::Node& x = *self.inputs[0];
    detail::Node& wn = *self.inputs[1];
    const std::int64_t np = g.n * g.positions();
    RowMat dy(g.cout, np);
    for (std::int64_t co = 0; co < g.cout; ++co) {
      float* drow = dy.data() + co * np;
      for (std::int64_t b = 0; b < g.n; ++b) {
        const float* src = self.grad.raw() + (b * g.cout + co) * g.positions();
        std::copy(src, src + g.positions(), drow + b * g.positions());
      }
    }
    RowMat cols;
    if (wn.requires_grad) {
      im2col(x.value, g, cols);
      RowMap dw(wn.grad_buffer().raw(), g.cout, g.patch());
      dw.noalias() += dy * cols.transpose();
    }
    if (x.requires_grad) {
      ConstRowMap wmat(wn.value.raw(), g.cout, g.patch());
      cols.noalias() = wmat.transpose() * dy;
      col2im_add(cols, g, x.grad_buffer());
    }
  });
}

Var add_channel_bias(const Var& input, const Var& bias) {
  require_rank4(input, "add_channel_bias");
  const std::int64_t n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
  require(static_cast<std::int64_t>(bias.numel()) == c, ErrorCode::kNumeric,
          "add_channel_bias: bias length " + std::to_string(bias.numel()) + " != channels " +
              std::to_string(c));
  Tensor out = input.value();
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      float* p = out.raw() + (b * c + ch) * hw;
      const float v = bias.value()[static_cast<std::size_t>(ch)];
      for (std::int64_t i = 0; i < hw; ++i) p[i] += v;
    }
  return Var::make_result(std::move(out), "add_channel_bias", {input, bias},
                          [n, c, hw](detail::Node& self) {
                            accumulate(*self.inputs[0], self.grad);
                            detail::Node& bn = *self.inputs[1];
                            if (!bn.requires_grad) return;
                            Tensor& gb = bn.grad_buffer();
                            for (std::int64_t b = 0; b < n; ++b)
                              for (std::int64_t ch = 0; ch < c; ++ch) {
                                const float* p = self.grad.raw() + (b * c + ch) * hw;
                                double s = 0.0;
                                for (std::int64_t i = 0; i < hw; ++i) s += p[i];
                                gb[static_cast<std::size_t>(ch)] += static_cast<float>(s);
                              }
                          });
}

Var maxpool2d(const Var& input, int kernel, int stride, bool ceil_mode) {
  require_rank4(input, "maxpool2d");
  const std::int64_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  require(kernel >= 1 && stride >= 1, ErrorCode::kNumeric, "maxpool2d: kernel/stride must be positive");
  require(ceil_mode || (kernel <= h && kernel <= w), ErrorCode::kNumeric,
          "maxpool2d: kernel " + std::to_string(kernel) + " exceeds input " + shape_str(input.shape()));
  const std::int64_t ho = ceil_mode ? (std::max<std::int64_t>(h - kernel, 0) + stride - 1) / stride + 1
                                    : (h - kernel) / stride + 1;
  const std::int64_t wo = ceil_mode ? (std::max<std::int64_t>(w - kernel, 0) + stride - 1) / stride + 1
                                    : (w - kernel) / stride + 1;
  Tensor out({n, c, ho, wo});
  auto argmax = std::make_shared<std::vector<std::int32_t>>(out.numel());
  const float* src = input.value().raw();
  std::size_t o = 0;
  for (std::int64_t plane = 0; plane < n * c; ++plane) {
    const float* p = src + plane * h * w;
    for (std::int64_t oy = 0; oy < ho; ++oy)
      for (std::int64_t ox = 0; ox < wo; ++ox, ++o) {
        std::int64_t best = (oy * stride) * w + ox * stride;
        for (std::int64_t ky = 0; ky < kernel && oy * stride + ky < h; ++ky)
          for (std::int64_t kx = 0; kx < kernel && ox * stride + kx < w; ++kx) {
            const std::int64_t idx = (oy * stride + ky) * w + ox * stride + kx;
            if (p[idx] > p[best]) best = idx;  // strict: first occurrence wins ties
          }
        out[o] = p[best];
        (*argmax)[o] = static_cast<std::int32_t>(best);
      }
  }
  return Var::make_result(std::move(out), "maxpool2d", {input},
                          [argmax, h, w, ho, wo](detail::Node& self) {
                            detail::Node& x = *self.inputs[0];
                            if (!x.requires_grad) return;
                            float* gx = x.grad_buffer().raw();
                            const std::int64_t per = ho * wo;
                            for (std::size_t i = 0; i < self.grad.numel(); ++i) {
                              const std::int64_t plane = static_cast<std::int64_t>(i) / per;
                              gx[plane * h * w + (*argmax)[i]] += self.grad[i];
                            }
                          });
}

Var upsample_nearest2x(const Var& input) {
  require_rank4(input, "upsample_nearest2x");
  const std::int64_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  Tensor out({n, c, 2 * h, 2 * w});
  for (std::int64_t plane = 0; plane < n * c; ++plane) {
    const float* p = input.value().raw() + plane * h * w;
    float* q = out.raw() + plane * 4 * h * w;
    for (std::int64_t y = 0; y < 2 * h; ++y)
      for (std::int64_t x = 0; x < 2 * w; ++x) q[y * 2 * w + x] = p[(y / 2) * w + x / 2];
  }
  return Var::make_result(std::move(out), "upsample_nearest2x", {input},
                          [n, c, h, w](detail::Node& self) {
                            detail::Node& x = *self.inputs[0];
                            if (!x.requires_grad) return;
                            float* gx = x.grad_buffer().raw();
                            for (std::int64_t plane = 0; plane < n * c; ++plane) {
                              const float* q = self.grad.raw() + plane * 4 * h * w;
                              float* p = gx + plane * h * w;
                              for (std::int64_t y = 0; y < 2 * h; ++y)
                                for (std::int64_t x2 = 0; x2 < 2 * w; ++x2)
                                  p[(y / 2) * w + x2 / 2] += q[y * 2 * w + x2];
                            }
                          });
}

Var concat_channels(const Var& a, const Var& b) {
  require_rank4(a, "concat_channels");
  require_rank4(b, "concat_channels");
  require(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
          ErrorCode::kNumeric,
          "concat_channels: mismatched shapes " + shape_str(a.shape()) + " and " +
              shape_str(b.shape()));
  const std::int64_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
  Tensor out({n, ca + cb, a.dim(2), a.dim(3)});
  for (std::int64_t s = 0; s < n; ++s) {
    std::copy_n(a.value().raw() + s * ca * hw, ca * hw, out.raw() + s * (ca + cb) * hw);
    std::copy_n(b.value().raw() + s * cb * hw, cb * hw, out.raw() + (s * (ca + cb) + ca) * hw);
  }
  return Var::make_result(std::move(out), "concat_channels", {a, b},
                          [n, ca, cb, hw](detail::Node& self) {
                            detail::Node& an = *self.inputs[0];
                            detail::Node& bn = *self.inputs[1];
                            for (std::int64_t s = 0; s < n; ++s) {
                              const float* g = self.grad.raw() + s * (ca + cb) * hw;
                              if (an.requires_grad) {
                                float* d = an.grad_buffer().raw() + s * ca * hw;
                                for (std::int64_t i = 0; i < ca * hw; ++i) d[i] += g[i];
                              }
                              if (bn.requires_grad && cb > 0) {
                                float* d = bn.grad_buffer().raw() + s * cb * hw;
                                for (std::int64_t i = 0; i < cb * hw; ++i) d[i] += g[ca * hw + i];
                              }
                            }
                          });
}

Var add(const Var& a, const Var& b) {
  require(a.shape() == b.shape(), ErrorCode::kNumeric,
          "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b.value()[i];
  return Var::make_result(std::move(out), "add", {a, b}, [](detail::Node& self) {
    accumulate(*self.inputs[0], self.grad);
    accumulate(*self.inputs[1], self.grad);
  });
}

Var scale(const Var& x, float factor) {
  Tensor out = x.value();
  for (auto& v : out.data()) v *= factor;
  return Var::make_result(std::move(out), "scale", {x}, [factor](detail::Node& self) {
    detail::Node& in = *self.inputs[0];
    if (!in.requires_grad) return;
    float* g = in.grad_buffer().raw();
    for (std::size_t i = 0; i < self.grad.numel(); ++i) g[i] += factor * self.grad[i];
  });
}

Var sum(const Var& x) {
  const double s = x.value().sum();
  return Var::make_result(Tensor({1}, static_cast<float>(s)), "sum", {x}, [](detail::Node& self) {
    detail::Node& in = *self.inputs[0];
    if (!in.requires_grad) return;
    const float g = self.grad[0];
    for (auto& v : in.grad_buffer().data()) v += g;
  });
}

Var weighted_sum(const Var& x, const Tensor& weights) {
  require(x.shape() == weights.shape(), ErrorCode::kNumeric,
          "weighted_sum: shape mismatch " + shape_str(x.shape()) + " vs " +
              shape_str(weights.shape()));
  double s = 0.0;
  for (std::size_t i = 0; i < weights.numel(); ++i)
    s += static_cast<double>(x.value()[i]) * weights[i];
  return Var::make_result(Tensor({1}, static_cast<float>(s)), "weighted_sum", {x},
                          [weights](detail::Node& self) {
                            detail::Node& in = *self.inputs[0];
                            if (!in.requires_grad) return;
                            const float g = self.grad[0];
                            float* d = in.grad_buffer().raw();
                            for (std::size_t i = 0; i < weights.numel(); ++i) d[i] += g * weights[i];
                          });
}

namespace {
Shape per_step_shape(const Var& seq, int steps, const char* op) {
  require(steps >= 1, ErrorCode::kNumeric, std::string(op) + ": steps must be >= 1");
  require(seq.value().rank() >= 1 && seq.dim(0) % steps == 0, ErrorCode::kNumeric,
          std::string(op) + ": leading dim of " + shape_str(seq.shape()) +
              " not divisible by steps " + std::to_string(steps));
  Shape s = seq.shape();
  s[0] /= steps;
  return s;
}
}  // namespace

Var last_step(const Var& seq, int steps) {
  Shape s = per_step_shape(seq, steps, "last_step");
  const std::size_t chunk = static_cast<std::size_t>(shape_numel(s));
  const std::size_t offset = chunk * static_cast<std::size_t>(steps - 1);
  Tensor out(s);
  std::copy_n(seq.value().raw() + offset, chunk, out.raw());
  return Var::make_result(std::move(out), "last_step", {seq}, [offset, chunk](detail::Node& self) {
    detail::Node& in = *self.inputs[0];
    if (!in.requires_grad) return;
    float* g = in.grad_buffer().raw() + offset;
    for (std::size_t i = 0; i < chunk; ++i) g[i] += self.grad[i];
  });
}

Var mean_over_steps(const Var& seq, int steps) {
  Shape s = per_step_shape(seq, steps, "mean_over_steps");
  const std::size_t chunk = static_cast<std::size_t>(shape_numel(s));
  Tensor out(s);
  for (int t = 0; t < steps; ++t) {
    const float* p = seq.value().raw() + chunk * static_cast<std::size_t>(t);
    for (std::size_t i = 0; i < chunk; ++i) out[i] += p[i];
  }
  const float inv = 1.0f / static_cast<float>(steps);
  for (auto& v : out.data()) v *= inv;
  return Var::make_result(std::move(out), "mean_over_steps", {seq},
                          [steps, chunk, inv](detail::Node& self) {
                            detail::Node& in = *self.inputs[0];
                            if (!in.requires_grad) return;
                            for (int t = 0; t < steps; ++t) {
                              float* g = in.grad_buffer().raw() + chunk * static_cast<std::size_t>(t);
                              for (std::size_t i = 0; i < chunk; ++i) g[i] += inv * self.grad[i];
                            }
                          });
}

Var repeat_steps(const Var& x, int steps) {
  require(steps >= 1, ErrorCode::kNumeric, "repeat_steps: steps must be >= 1");
  Shape s = x.shape();
  s[0] *= steps;
  const std::size_t chunk = x.numel();
  Tensor out(s);
  for (int t = 0; t < steps; ++t)
    std::copy_n(x.value().raw(), chunk, out.raw() + chunk * static_cast<std::size_t>(t));
  return Var::make_result(std::move(out), "repeat_steps", {x}, [steps, chunk](detail::Node& self) {
    detail::Node& in = *self.inputs[0];
    if (!in.requires_grad) return;
    float* g = in.grad_buffer().raw();
    for (int t = 0; t < steps; ++t) {
      const float* p = self.grad.raw() + chunk * static_cast<std::size_t>(t);
      for (std::size_t i = 0; i < chunk; ++i) g[i] += p[i];
    }
  });
}

}  // namespace ems
