#include "tdmpc/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace tdmpc {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
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

Tensor::Tensor(Shape s, double fill)
    : shape(std::move(s)), data(shape_numel(shape), fill) {}

Tensor::Tensor(Shape s, std::vector<double> values)
    : shape(std::move(s)), data(std::move(values)) {
  check();
}

std::span<double> Tensor::row(std::size_t i) {
  const std::size_t n = row_size();
  return std::span<double>(data).subspan(i * n, n);
}

std::span<const double> Tensor::row(std::size_t i) const {
  const std::size_t n = row_size();
  return std::span<const double>(data).subspan(i * n, n);
}

Tensor Tensor::reshaped(Shape s) const {
  if (shape_numel(s) != numel())
    throw ShapeError("cannot reshape " + shape_str(shape) + " to " + shape_str(s));
  Tensor out;
  out.shape = std::move(s);
  out.data = data;
  return out;
}

void Tensor::zero_grad() { grad.emplace(data.size(), 0.0); }

bool Tensor::all_finite() const {
  return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
}

void Tensor::check() const {
  for (auto d : shape)
    if (d == 0) throw ShapeError("zero-sized dimension in " + shape_str(shape));
  if (shape_numel(shape) != data.size())
    throw ShapeError("shape " + shape_str(shape) + " does not match " +
                     std::to_string(data.size()) + " values");
  if (grad && grad->size() != data.size())
    throw ShapeError("gradient length differs from data length");
}

void require_shape(const Tensor& t, const Shape& expected, const std::string& what) {
  if (t.shape != expected)
    throw ShapeError(what + ": expected " + shape_str(expected) + ", got " +
                     shape_str(t.shape));
}

Tensor concat_features(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0))
    throw ShapeError("concat_features: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  const std::size_t rows = a.dim(0), fa = a.dim(1), fb = b.dim(1);
  Tensor out({rows, fa + fb});
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(a.data.begin() + r * fa, fa, out.data.begin() + r * (fa + fb));
    std::copy_n(b.data.begin() + r * fb, fb, out.data.begin() + r * (fa + fb) + fa);
  }
  return out;
}

std::pair<Tensor, Tensor> split_features(const Tensor& t, std::size_t left) {
  if (t.rank() != 2 || left == 0 || left >= t.dim(1))
    throw ShapeError("split_features: cannot split " + shape_str(t.shape) + " at " +
                     std::to_string(left));
  const std::size_t rows = t.dim(0), f = t.dim(1), right = f - left;
  Tensor a({rows, left}), b({rows, right});
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(t.data.begin() + r * f, left, a.data.begin() + r * left);
    std::copy_n(t.data.begin() + r * f + left, right, b.data.begin() + r * right);
  }
  return {std::move(a), std::move(b)};
}

Tensor stack(std::span<const Tensor> samples) {
  if (samples.empty()) throw ShapeError("stack: no samples");
  Shape s{samples.size()};
  s.insert(s.end(), samples[0].shape.begin(), samples[0].shape.end());
  Tensor out;
  out.shape = s;
  out.data.reserve(shape_numel(s));
  for (const auto& x : samples) {
    require_shape(x, samples[0].shape, "stack");
    out.data.insert(out.data.end(), x.data.begin(), x.data.end());
  }
  return out;
}

Tensor slice_rows(const Tensor& t, std::size_t begin, std::size_t end) {
  if (t.rank() == 0 || begin >= end || end > t.dim(0))
    throw ShapeError("slice_rows out of range for " + shape_str(t.shape));
  Tensor out;
  out.shape = t.shape;
  out.shape[0] = end - begin;
  const std::size_t n = t.row_size();
  out.data.assign(t.data.begin() + begin * n, t.data.begin() + end * n);
  return out;
}

double sum(const Tensor& t) {
  double s = 0.0;
  for (double v : t.data) s += v;
  return s;
}

double squared_norm(const Tensor& t) {
  double s = 0.0;
  for (double v : t.data) s += v * v;
  return s;
}

}  // namespace tdmpc
