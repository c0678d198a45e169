#include "matl/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace matl {

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Index shape_size(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

namespace {

void check_shape(const Shape& shape) {
  if (shape.empty() || shape.size() > 3)
    throw ShapeError("tensor rank must be 1..3, got " + to_string(shape));
  for (Index d : shape)
    if (d < 0) throw ShapeError("negative dimension in " + to_string(shape));
}

}  // namespace

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  check_shape(shape_);
  data_.assign(static_cast<std::size_t>(shape_size(shape_)), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  check_shape(shape_);
  if (shape_size(shape_) != static_cast<Index>(data_.size()))
    throw ShapeError("shape " + to_string(shape_) + " does not match " +
                     std::to_string(data_.size()) + " values");
}

Tensor Tensor::matrix(Index rows, Index cols, std::initializer_list<double> values) {
  return Tensor({rows, cols}, std::vector<double>(values));
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

Tensor Tensor::from_matrix(const Eigen::Ref<const MatrixXdr>& m) {
  Tensor t({m.rows(), m.cols()});
  t.mat() = m;
  return t;
}

Tensor Tensor::filled(Shape shape, double value) {
  Tensor t(std::move(shape));
  std::fill(t.data_.begin(), t.data_.end(), value);
  return t;
}

Index Tensor::rows() const {
  switch (shape_.size()) {
    case 1: return 1;
    case 2: return shape_[0];
    case 3: return shape_[0] * shape_[1];
    default: return 0;
  }
}

Index Tensor::cols() const { return shape_.empty() ? 0 : shape_.back(); }

double Tensor::item() const {
  if (size() != 1)
    throw UsageError("item() on tensor of shape " + to_string(shape_));
  return data_[0];
}

void Tensor::set_requires_grad(bool on) {
  requires_grad_ = on;
  if (on && grad_.size() != data_.size()) grad_.assign(data_.size(), 0.0);
  if (!on) grad_.clear();
}

void Tensor::zero_grad() {
  if (requires_grad_) grad_.assign(data_.size(), 0.0);
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](double v) { return std::isfinite(v); });
}

}  // namespace matl
