#include "dfcr/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace dfcr {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
  if (data_.size() != shape_numel(shape_)) {
    throw ShapeError("tensor of shape " + shape_str(shape_) + " given " +
                     std::to_string(data_.size()) + " values");
  }
}

std::size_t Tensor::offset(std::initializer_list<std::size_t> idx) const {
  if (idx.size() != shape_.size()) throw ShapeError("index rank mismatch for " + shape_str(shape_));
  std::size_t off = 0;
  std::size_t axis = 0;
  for (auto i : idx) {
    if (i >= shape_[axis]) throw ShapeError("index out of range for " + shape_str(shape_));
    off = off * shape_[axis] + i;
    ++axis;
  }
  return off;
}

double& Tensor::at(std::initializer_list<std::size_t> idx) { return data_[offset(idx)]; }
double Tensor::at(std::initializer_list<std::size_t> idx) const { return data_[offset(idx)]; }

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  return Tensor(std::move(shape), data_);
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

double Rng::uniform(double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(engine_);
}

double Rng::normal(double mean, double stddev) {
  return std::normal_distribution<double>(mean, stddev)(engine_);
}

std::size_t Rng::index(std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
}

Tensor Rng::uniform_tensor(const Shape& shape, double lo, double hi) {
  Tensor t(shape);
  for (auto& v : t.storage()) v = uniform(lo, hi);
  return t;
}

Tensor Rng::normal_tensor(const Shape& shape, double stddev) {
  Tensor t(shape);
  for (auto& v : t.storage()) v = normal(0.0, stddev);
  return t;
}

}  // namespace dfcr
