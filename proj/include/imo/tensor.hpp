#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace imo {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major float64 array. Rank 0 (empty shape) is a scalar.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() : data(1, 0.0) {}
  explicit Tensor(Shape s, double fill = 0.0);
  Tensor(Shape s, std::vector<double> values);

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
  static Tensor vector(std::vector<double> v);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v);

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t last_dim() const { return shape.empty() ? 1 : shape.back(); }
  /// Number of rows when viewed as a (size / last_dim) x last_dim matrix.
  std::size_t outer() const { return last_dim() == 0 ? 0 : size() / last_dim(); }

  double item() const;
  double& at(std::size_t i) { return data[i]; }
  double at(std::size_t i) const { return data[i]; }
  double& operator()(std::size_t r, std::size_t c) { return data[r * last_dim() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * last_dim() + c]; }

  std::span<double> row(std::size_t r) { return {data.data() + r * last_dim(), last_dim()}; }
  std::span<const double> row(std::size_t r) const {
    return {data.data() + r * last_dim(), last_dim()};
  }

  bool all_finite() const;
  void fill(double v);
};

/// A named trainable array owned by a model. Gradients accumulate into `grad`.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Tensor v);

  void zero_grad();
};

}  // namespace imo
