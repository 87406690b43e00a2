#include "cte/tape.hpp"

#include <algorithm>
#include <string>

#include "cte/error.hpp"

namespace cte::num {

void round_to_float(std::span<double> values) {
  for (double& v : values) v = static_cast<double>(static_cast<float>(v));
}

const Tensor& Var::value() const {
  if (!tape_) throw ContractError("use of an empty Var");
  return tape_->value(id_);
}

bool Var::requires_grad() const { return tape_ && tape_->requires_grad(id_); }

Var Tape::constant(Tensor value) {
  if (precision_ == Precision::f32) round_to_float(value.data());
  Node node;
  node.owned = std::move(value);
  nodes_.push_back(std::move(node));
  return {this, nodes_.size() - 1};
}

Var Tape::leaf(Tensor& tensor) {
  Node node;
  node.leaf = &tensor;
  node.requires_grad = tensor.requires_grad();
  if (precision_ == Precision::f32) {
    // Leaves are referenced, not copied; an f32 tape keeps a rounded copy.
    node.owned = tensor;
    node.owned.clear_grad();
    round_to_float(node.owned.data());
  }
  nodes_.push_back(std::move(node));
  return {this, nodes_.size() - 1};
}

const Tensor& Tape::value(std::size_t id) const {
  const Node& node = nodes_.at(id);
  if (node.leaf && precision_ == Precision::f64) return *node.leaf;
  return node.owned;
}

Var Tape::record(std::string_view op, Tensor value, std::vector<std::size_t> inputs,
                 Backprop backprop) {
  if (precision_ == Precision::f32) round_to_float(value.data());
  if (!value.all_finite()) {
    throw NumericalError("non-finite value produced by " + std::string(op));
  }
  Node node;
  node.owned = std::move(value);
  node.requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                   [&](std::size_t i) { return nodes_[i].requires_grad; });
  if (node.requires_grad) node.backprop = std::move(backprop);
  node.inputs = std::move(inputs);
  nodes_.push_back(std::move(node));
  return {this, nodes_.size() - 1};
}

std::span<double> Tape::grad_buffer(std::size_t id) {
  Node& node = nodes_[id];
  if (node.grad.empty()) node.grad.assign(value(id).size(), 0.0);
  return node.grad;
}

std::span<const double> Tape::grad(Var v) const { return nodes_.at(v.id()).grad; }

void Tape::backward(Var loss) {
  if (&loss.tape() != this) throw ContractError("backward: variable belongs to another tape");
  if (loss.value().size() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " +
                        shape_string(loss.value().shape()));
  }
  for (Node& node : nodes_) node.grad.clear();
  grad_buffer(loss.id())[0] = 1.0;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (node.grad.empty() || !node.requires_grad) continue;
    if (node.leaf) {
      auto dst = node.leaf->grad();
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += node.grad[j];
    } else if (node.backprop) {
      node.backprop(*this, i);
    }
  }
}

}  // namespace cte::num
