#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/StdVector>

namespace cte::num {

using Shape = std::vector<std::size_t>;

/// Tensor storage is over-aligned: Eigen's GEMM kernels choose their code
/// path from the buffer alignment, and results must not depend on where
/// malloc happened to place a buffer.
using Storage = std::vector<double, Eigen::aligned_allocator<double>>;

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

/// Keeps freed buffers in the process heap instead of returning them to the
/// kernel. A training step allocates and frees the same large activations
/// every time; with the default glibc thresholds each of them is a fresh
/// mmap. No effect on other C libraries. Call once at program start.
void retain_freed_memory();

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major array of doubles with an optional gradient accumulator.
///
/// Every operation views a tensor as rows() x cols(), where cols() is the
/// last extent and rows() is the product of the others. A scalar is a
/// tensor of shape {1}.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor vector(std::initializer_list<double> values);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t rows() const noexcept;
  std::size_t cols() const noexcept;
  bool empty() const noexcept { return data_.empty(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  Storage& storage() noexcept { return data_; }
  const Storage& storage() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  double item() const;

  MatrixMap matrix();
  ConstMatrixMap matrix() const;

  bool requires_grad() const noexcept { return requires_grad_; }
  void set_requires_grad(bool value) { requires_grad_ = value; }

  bool has_grad() const noexcept { return !grad_.empty(); }
  /// Allocates a zero gradient on first use.
  std::span<double> grad();
  std::span<const double> grad() const noexcept { return grad_; }
  void zero_grad();
  void clear_grad() { grad_.clear(); grad_.shrink_to_fit(); }

  void reshape(Shape shape);
  bool all_finite() const noexcept;

 private:
  Shape shape_;
  Storage data_;
  Storage grad_;
  bool requires_grad_ = false;
};

}  // namespace cte::num
