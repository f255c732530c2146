#include "crna/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace crna {

std::string shape_to_string(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << ")";
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

Tensor::Tensor(Shape shape)
    : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0) {}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
  if (data_.size() != shape_numel(shape_)) {
    throw ShapeError("tensor: value count " + std::to_string(data_.size()) +
                     " does not match shape " + shape_to_string(shape_));
  }
}

Tensor Tensor::full(Shape shape, double v) {
  Tensor t(std::move(shape));
  t.fill(v);
  return t;
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

void Tensor::add_scaled(const Tensor& other, double scale) {
  if (!same_shape(other)) {
    throw ShapeError("add_scaled: shape mismatch " + shape_to_string(shape_) +
                     " vs " + shape_to_string(other.shape_));
  }
  const double* o = other.data();
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += scale * o[i];
}

void Tensor::clamp(double lo, double hi) {
  for (double& v : data_) v = std::min(hi, std::max(lo, v));
}

void sgd_step(Tensor& param, const Tensor& grad, double lr) {
  if (lr <= 0) throw ConfigError("sgd_step: learning rate must be positive");
  param.add_scaled(grad, -lr);
}

void sgd_step(std::vector<Tensor*> params,
              const std::vector<const Tensor*>& grads, double lr) {
  if (params.size() != grads.size()) {
    throw ShapeError("sgd_step: parameter/gradient count mismatch");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    sgd_step(*params[i], *grads[i], lr);
  }
}

}  // namespace crna
