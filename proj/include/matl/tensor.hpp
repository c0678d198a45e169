#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace matl {

using Index = std::ptrdiff_t;
using Shape = std::vector<Index>;

template <typename Scalar>
using RowMatrix =
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixXdr = RowMatrix<double>;

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct DomainError : std::domain_error {
  using std::domain_error::domain_error;
};

struct UsageError : std::logic_error {
  using std::logic_error::logic_error;
};

std::string to_string(const Shape& shape);

// Dense row-major array of doubles, rank <= 3. Rank-1 tensors view as a
// single row and rank-3 tensors fold their leading axes into rows.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor matrix(Index rows, Index cols, std::initializer_list<double> values);
  static Tensor scalar(double value);
  static Tensor from_matrix(const Eigen::Ref<const MatrixXdr>& m);
  static Tensor filled(Shape shape, double value);

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index size() const { return static_cast<Index>(data_.size()); }
  Index rows() const;
  Index cols() const;

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  double& operator[](Index i) { return data_[static_cast<std::size_t>(i)]; }
  double operator[](Index i) const { return data_[static_cast<std::size_t>(i)]; }
  double at(Index r, Index c) const { return data_[static_cast<std::size_t>(r * cols() + c)]; }
  double item() const;

  Eigen::Map<MatrixXdr> mat() { return {data_.data(), rows(), cols()}; }
  Eigen::Map<const MatrixXdr> mat() const { return {data_.data(), rows(), cols()}; }

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool on);
  bool has_grad() const { return !grad_.empty(); }
  std::span<double> grad() { return grad_; }
  std::span<const double> grad() const { return grad_; }
  void zero_grad();

  bool all_finite() const;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
  std::vector<double> grad_;
  bool requires_grad_ = false;
};

Index shape_size(const Shape& shape);

}  // namespace matl
