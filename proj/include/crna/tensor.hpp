#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "crna/error.hpp"

namespace crna {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& s);
std::size_t shape_numel(const Shape& s);

// Dense multi-dimensional array of doubles. Value semantics; no view
// machinery. Gradients live next to values on graph nodes, not here.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, double v);
  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  const Shape& shape() const { return shape_; }
  std::size_t ndim() const { return shape_.size(); }
  std::size_t numel() const { return data_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // 4-D accessors (N, C, H, W). Bounds are the caller's responsibility.
  double& at4(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  double at4(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  double& at2(std::size_t i, std::size_t j) {
    return data_[i * shape_[1] + j];
  }
  double at2(std::size_t i, std::size_t j) const {
    return data_[i * shape_[1] + j];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  bool all_finite() const;
  void fill(double v);

  // Elementwise in-place helpers used by optimizers and attacks.
  void add_scaled(const Tensor& other, double scale);  // this += scale * other
  void clamp(double lo, double hi);

  bool operator==(const Tensor& o) const {
    return shape_ == o.shape_ && data_ == o.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
};

// p <- p - lr * g, elementwise, shapes must match.
void sgd_step(Tensor& param, const Tensor& grad, double lr);
void sgd_step(std::vector<Tensor*> params, const std::vector<const Tensor*>& grads,
              double lr);

}  // namespace crna
