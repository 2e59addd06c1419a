#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace tdmpc {

using Shape = std::vector<std::size_t>;

/// Thrown whenever two tensor shapes that must agree do not.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major array of doubles with an optional gradient slot.
struct Tensor {
  Shape shape;
  std::vector<double> data;
  std::optional<std::vector<double>> grad;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0);
  Tensor(Shape s, std::vector<double> values);

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  std::span<double> values() { return data; }
  std::span<const double> values() const { return data; }

  /// Row `i` of a tensor viewed as [dim(0), numel/dim(0)].
  std::span<double> row(std::size_t i);
  std::span<const double> row(std::size_t i) const;
  std::size_t row_size() const { return shape.empty() ? 0 : numel() / shape[0]; }

  Tensor reshaped(Shape s) const;
  void zero_grad();
  bool all_finite() const;

  /// Throws ShapeError when shape/data/grad lengths disagree.
  void check() const;
};

void require_shape(const Tensor& t, const Shape& expected, const std::string& what);

/// Concatenate two [B, *] tensors along the feature axis.
Tensor concat_features(const Tensor& a, const Tensor& b);
/// Split columns [0, left) and [left, end) of a [B, F] tensor.
std::pair<Tensor, Tensor> split_features(const Tensor& t, std::size_t left);

/// Stack single samples into a batch [N, *sample_shape].
Tensor stack(std::span<const Tensor> samples);
Tensor slice_rows(const Tensor& t, std::size_t begin, std::size_t end);

double sum(const Tensor& t);
double squared_norm(const Tensor& t);

}  // namespace tdmpc
