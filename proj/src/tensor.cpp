#include "ems/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "ems/error.hpp"

namespace ems {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    require(d >= 0, ErrorCode::kNumeric, "negative dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, float fill)
    : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_numel(shape_)), fill) {}

Tensor::Tensor(Shape shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  require(static_cast<std::int64_t>(data_.size()) == shape_numel(shape_), ErrorCode::kNumeric,
          "tensor data length " + std::to_string(data_.size()) + " does not match shape " +
              shape_str(shape_));
}

Tensor Tensor::reshaped(Shape shape) const {
  require(shape_numel(shape) == static_cast<std::int64_t>(data_.size()), ErrorCode::kNumeric,
          "cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  return Tensor(std::move(shape), data_);
}

void Tensor::fill(float value) { std::fill(data_.begin(), data_.end(), value); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

bool Tensor::is_binary() const {
  return std::all_of(data_.begin(), data_.end(), [](float v) { return v == 0.0f || v == 1.0f; });
}

double Tensor::sum() const {
  double s = 0.0;
  for (float v : data_) s += v;
  return s;
}

}  // namespace ems
