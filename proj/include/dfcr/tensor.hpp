#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dfcr {

using Shape = std::vector<std::size_t>;

/// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Inconsistent module configuration (channel counts, reductions, kernels).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Input tensor shape incompatible with an operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Ill-conditioned or non-finite numerics.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Bad user input (labels out of range, empty matrices, zero windows).
class InputError : public Error {
 public:
  using Error::Error;
};

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

/// Dense row-major tensor of doubles. Value type; copies are deep.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  /// Multi-index access, row-major. Intended for tests and oracles.
  double& at(std::initializer_list<std::size_t> idx);
  double at(std::initializer_list<std::size_t> idx) const;

  /// Same storage, different shape; element counts must agree.
  Tensor reshaped(Shape shape) const;

  void fill(double v);
  bool all_finite() const;

 private:
  std::size_t offset(std::initializer_list<std::size_t> idx) const;

  Shape shape_;
  std::vector<double> data_;
};

/// Seeded generator shared by initializers and the synthetic data generator.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform(double lo, double hi);
  double normal(double mean = 0.0, double stddev = 1.0);
  std::size_t index(std::size_t n);
  std::mt19937_64& engine() { return engine_; }

  Tensor uniform_tensor(const Shape& shape, double lo, double hi);
  Tensor normal_tensor(const Shape& shape, double stddev);

 private:
  std::mt19937_64 engine_;
};

}  // namespace dfcr
