#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "cte/tensor.hpp"

namespace cte::num {

/// Arithmetic mode of a tape. f32 rounds every recorded value to the nearest
/// single-precision number; a tape never mixes the two.
enum class Precision { f64, f32 };

void round_to_float(std::span<double> values);

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t id() const noexcept { return id_; }
  Tape& tape() const noexcept { return *tape_; }
  bool valid() const noexcept { return tape_ != nullptr; }
  bool requires_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Records one forward pass for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the recording is already
/// topologically sorted and backward() is a single reverse sweep. Leaves
/// refer to caller-owned tensors; their gradients are accumulated into
/// Tensor::grad() of those tensors, so repeated backward() calls add up.
class Tape {
 public:
  /// Receives the tape and the id of the node whose output gradient is ready.
  using Backprop = std::function<void(Tape&, std::size_t)>;

  explicit Tape(Precision precision = Precision::f64) : precision_(precision) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Precision precision() const noexcept { return precision_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var constant(Tensor value);
  /// The tensor must outlive every use of this tape. It participates in
  /// differentiation iff tensor.requires_grad().
  Var leaf(Tensor& tensor);

  void backward(Var loss);

  /// Gradient held by a node after the last backward(); empty if unreached.
  std::span<const double> grad(Var v) const;

  // Op authoring interface.
  Var record(std::string_view op, Tensor value, std::vector<std::size_t> inputs, Backprop backprop);
  const Tensor& value(std::size_t id) const;
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::span<const double> output_grad(std::size_t id) const { return nodes_[id].grad; }
  /// Zero-initialised on first access within a backward sweep.
  std::span<double> grad_buffer(std::size_t id);

 private:
  struct Node {
    Tensor owned;
    Tensor* leaf = nullptr;
    std::vector<std::size_t> inputs;
    Backprop backprop;
    bool requires_grad = false;
    Storage grad;
  };

  Precision precision_;
  std::deque<Node> nodes_;
};

}  // namespace cte::num
