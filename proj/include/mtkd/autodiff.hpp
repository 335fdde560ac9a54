// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mtkd/tensor.hpp"

namespace mtkd {

template <typename T>
class Tape;

/// Handle to a value recorded on a tape.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::uint32_t id) : tape_(tape), id_(id) {}

  const Matrix<T>& value() const { return tape_->value(*this); }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  bool requires_grad() const { return tape_->requires_grad(*this); }
  /// The single value of a 1x1 result.
  T item() const;

  Tape<T>& tape() const { return *tape_; }
  std::uint32_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<T>* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

/// Execution-ordered record of differentiable operations.
///
/// Nodes are appended as operations run, so the node vector is already in
/// topological order and backward is a single reverse sweep. A tape is
/// single-use: backward() consumes it.
template <typename T>
class Tape {
 public:
  /// Receives the upstream gradient of the node and pushes contributions into
  /// its inputs with accumulate().
  using BackwardFn = std::function<void(Tape&, const Matrix<T>&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Matrix<T> value) {
    return push("constant", std::move(value), false, nullptr);
  }

  /// Binds a persistent tensor. If it requires grad, backward() adds the
  /// gradient into tensor.grad; the tensor must outlive the tape.
  Var<T> leaf(Tensor<T>& tensor, bool track_grad = true) {
    const bool needs = track_grad && tensor.requires_grad;
    Var<T> v = push("leaf", tensor.data, needs, nullptr);
    if (needs) nodes_.back().bound = &tensor;
    return v;
  }

  /// Appends the result of an operation. The backward rule is kept only when
  /// some input requires grad. Non-finite outputs abort with the op's name.
  Var<T> record(const char* op, Matrix<T> value, std::span<const Var<T>> inputs, BackwardFn backward) {
    bool needs = false;
    for (const Var<T>& in : inputs) {
      check_owned(in, op);
      needs = needs || nodes_[in.id()].requires_grad;
    }
    return push(op, std::move(value), needs, needs ? std::move(backward) : nullptr);
  }

  Var<T> record(const char* op, Matrix<T> value, std::initializer_list<Var<T>> inputs, BackwardFn backward) {
    return record(op, std::move(value), std::span<const Var<T>>(inputs.begin(), inputs.size()),
                  std::move(backward));
  }

  const Matrix<T>& value(Var<T> v) const { return nodes_.at(v.id()).value; }
  bool requires_grad(Var<T> v) const { return nodes_.at(v.id()).requires_grad; }
  const char* op_name(Var<T> v) const { return nodes_.at(v.id()).op; }
  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  /// Adds g into the pending gradient of v; no-op when v needs no gradient.
  template <typename Derived>
  void accumulate(Var<T> v, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[v.id()];
    if (!n.requires_grad) return;
    if (g.rows() != n.value.rows() || g.cols() != n.value.cols())
      throw DimensionError(std::string("backward of '") + n.op + "' produced gradient " +
                           shape_str(g.rows(), g.cols()) + " for value " + shape_str(n.value));
    if (n.has_grad) {
      n.grad.noalias() += g;
    } else {
      n.grad.noalias() = g;
      n.has_grad = true;
    }
  }

  /// Same as above for an owned matrix, which is moved in when it is the
  /// first contribution.
  void accumulate(Var<T> v, Matrix<T>&& g) {
    Node& n = nodes_[v.id()];
    if (!n.requires_grad) return;
    if (g.rows() != n.value.rows() || g.cols() != n.value.cols())
      throw DimensionError(std::string("backward of '") + n.op + "' produced gradient " +
                           shape_str(g.rows(), g.cols()) + " for value " + shape_str(n.value));
    if (n.has_grad) {
      n.grad += g;
    } else {
      n.grad = std::move(g);
      n.has_grad = true;
    }
  }

  /// Populates tensor gradients with d(loss)/d(tensor) for every bound tensor
  /// that requires grad. Returns the number of nodes whose rule ran.
  std::size_t backward(Var<T> loss) {
    if (consumed_) throw std::logic_error("tape already consumed");
    check_owned(loss, "backward");
    if (loss.rows() != 1 || loss.cols() != 1)
      throw DimensionError("backward needs a scalar loss, got " + shape_str(loss.value()));
    consumed_ = true;
    std::size_t visited = 0;
    Node& root = nodes_[loss.id()];
    if (!root.requires_grad) return 0;
    root.grad = Matrix<T>::Ones(1, 1);
    root.has_grad = true;
    for (std::int64_t i = loss.id(); i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.requires_grad || !n.has_grad) continue;
      if (!all_finite(n.grad))
        throw NumericError(std::string("non-finite gradient flowing into '") + n.op + "'");
      if (n.bound != nullptr) {
        n.bound->accumulate_grad(std::move(n.grad));
      } else if (n.backward) {
        n.backward(*this, n.grad);
        ++visited;
      }
      n.grad = Matrix<T>();
      n.has_grad = false;
    }
    return visited;
  }

 private:
  struct Node {
    const char* op;
    Matrix<T> value;
    bool requires_grad = false;
    bool has_grad = false;
    Matrix<T> grad;
    BackwardFn backward;
    Tensor<T>* bound = nullptr;
  };

  void check_owned(Var<T> v, const char* op) const {
    if (!v.valid() || &v.tape() != this || v.id() >= nodes_.size())
      throw std::logic_error(std::string(op) + ": variable belongs to a different tape");
  }

  Var<T> push(const char* op, Matrix<T> value, bool needs, BackwardFn fn) {
    if (consumed_) throw std::logic_error(std::string(op) + ": tape already consumed");
    if (!all_finite(value)) throw NumericError(std::string("non-finite value produced by '") + op + "'");
    nodes_.push_back(Node{op, std::move(value), needs, false, {}, std::move(fn), nullptr});
    return Var<T>(this, static_cast<std::uint32_t>(nodes_.size() - 1));
  }

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

template <typename T>
T Var<T>::item() const {
  const Matrix<T>& v = value();
  if (v.size() != 1) throw DimensionError("item() on non-scalar " + shape_str(v));
  return v(0, 0);
}

}  // namespace mtkd
