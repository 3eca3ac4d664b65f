#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lindit/tensor.hpp"

namespace lindit {

template <typename Scalar>
class Tape;

// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
template <typename Scalar>
struct Var {
  Tape<Scalar>* tape = nullptr;
  std::int32_t id = -1;

  const Matrix<Scalar>& value() const { return tape->value(*this); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

// Reverse-mode gradient tape over a closed set of matrix primitives.
//
// A tape built with record=false evaluates values only; it is what samplers
// use. Gradients flow only into nodes created by parameter() and anything
// computed from them.
template <typename Scalar>
class Tape {
 public:
  using Mat = Matrix<Scalar>;
  using Backprop = std::function<void(Tape&, const Mat& grad_out)>;

  explicit Tape(bool record = true) : record_(record) { nodes_.reserve(512); }

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var<Scalar> constant(Mat value) { return push(std::move(value), false, {}); }

  Var<Scalar> parameter(Mat value) { return push(std::move(value), record_, {}); }

  const Mat& value(Var<Scalar> v) const { return nodes_.at(check(v)).value; }

  bool needs_grad(Var<Scalar> v) const { return nodes_.at(check(v)).needs_grad; }

  // Gradient of the last backward() loss w.r.t. v; zeros if v was never reached.
  Mat grad(Var<Scalar> v) const {
    const Node& n = nodes_.at(check(v));
    if (n.grad.size() == 0) return Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  std::size_t size() const { return nodes_.size(); }

  void backward(Var<Scalar> loss) {
    const Node& ln = nodes_.at(check(loss));
    if (ln.value.rows() != 1 || ln.value.cols() != 1) {
      throw ContractError("backward: loss must be a 1x1 scalar, got " + shape_string(ln.value));
    }
    if (!record_) throw ContractError("backward: tape was created with record=false");
    for (auto& n : nodes_) n.grad.resize(0, 0);
    nodes_[loss.id].grad = Mat::Ones(1, 1);
    for (std::int32_t i = loss.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.backprop || n.grad.size() == 0) continue;
      n.backprop(*this, n.grad);
    }
  }

  // Creates an op output. `backprop` is recorded only when some input needs a gradient.
  template <typename Fn>
  Var<Scalar> push_op(Mat value, std::initializer_list<Var<Scalar>> inputs, Fn&& backprop) {
    bool any = false;
    if (record_) {
      for (auto in : inputs) any = any || nodes_.at(check(in)).needs_grad;
    }
    if (!any) return push(std::move(value), false, {});
    return push(std::move(value), true, Backprop(std::forward<Fn>(backprop)));
  }

  template <typename Derived>
  void accumulate(Var<Scalar> v, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[v.id];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

 private:
  struct Node {
    Mat value;
    Mat grad;
    Backprop backprop;
    bool needs_grad = false;
  };

  std::int32_t check(Var<Scalar> v) const {
    if (v.tape != this || v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) {
      throw ContractError("variable does not belong to this tape");
    }
    return v.id;
  }

  Var<Scalar> push(Mat value, bool needs_grad, Backprop backprop) {
    debug_check_finite(value, "tape node");
    nodes_.push_back(Node{std::move(value), Mat(), std::move(backprop), needs_grad});
    return Var<Scalar>{this, static_cast<std::int32_t>(nodes_.size() - 1)};
  }

  bool record_;
  std::vector<Node> nodes_;
};

}  // namespace lindit
