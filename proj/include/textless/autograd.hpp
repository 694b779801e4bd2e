#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "textless/tensor.hpp"

namespace textless {

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  bool needs_grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Topologically ordered operation trace. Nodes are appended in execution
/// order, so reverse iteration is a valid reverse-mode schedule.
///
/// A tape is single-threaded. Parameters bound with param() are read in
/// place and must outlive the tape.
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t)>;

  explicit Tape(bool record_grad = true) : record_grad_(record_grad) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return record_grad_; }

  Var constant(Tensor value) { return push(std::move(value), false, {}); }

  /// Binds a model tensor as a leaf. Repeated binds return the same Var.
  Var param(const Tensor& t) {
    if (auto it = bound_.find(&t); it != bound_.end()) return Var(this, it->second);
    Node n;
    n.external = &t;
    n.needs_grad = record_grad_ && t.requires_grad();
    nodes_.push_back(std::move(n));
    const auto id = nodes_.size() - 1;
    bound_.emplace(&t, id);
    return Var(this, id);
  }

  /// Leaf that always tracks gradient, used by checks and tests.
  Var variable(Tensor value) {
    Node n;
    n.owned = std::move(value);
    n.needs_grad = record_grad_;
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  /// Records an op result. The backward closure is dropped when no parent
  /// needs a gradient.
  Var push(Tensor value, bool needs_grad, Backward backward) {
    Node n;
    n.owned = std::move(value);
    n.needs_grad = record_grad_ && needs_grad;
    if (n.needs_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  const Tensor& value(std::size_t id) const {
    const auto& n = nodes_.at(id);
    return n.external ? *n.external : n.owned;
  }
  bool needs_grad(std::size_t id) const { return nodes_.at(id).needs_grad; }

  /// Gradient buffer of a node, allocated on first use.
  std::vector<double>& grad_buffer(std::size_t id) {
    auto& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(value(id).size(), 0.0);
    return n.grad;
  }
  bool has_grad(std::size_t id) const { return !nodes_.at(id).grad.empty(); }

  /// Gradient of the last backward() w.r.t. a node, zeros if none flowed.
  Tensor grad(const Var& v) const {
    const auto& n = nodes_.at(v.id());
    Tensor g(value(v.id()).shape());
    if (!n.grad.empty()) g.values() = n.grad;
    return g;
  }

  /// Gradient w.r.t. a bound parameter; zeros when it is not on the trace.
  Tensor grad_of(const Tensor& param) const {
    auto it = bound_.find(&param);
    if (it == bound_.end()) return Tensor(param.shape());
    return grad(Var(const_cast<Tape*>(this), it->second));
  }

  bool is_bound(const Tensor& param) const { return bound_.count(&param) != 0; }

  void backward(const Var& loss) {
    if (loss.value().size() != 1 || loss.value().rank() != 0) {
      throw ShapeError("backward: loss must be rank-0, got shape " + to_string(loss.shape()));
    }
    for (auto& n : nodes_) n.grad.clear();
    if (!nodes_[loss.id()].needs_grad) return;
    grad_buffer(loss.id())[0] = 1.0;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (n.backward && !n.grad.empty()) n.backward(*this, i);
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor owned;
    const Tensor* external = nullptr;
    std::vector<double> grad;
    bool needs_grad = false;
    Backward backward;
  };

  std::deque<Node> nodes_;  // stable element addresses across push_back
  std::unordered_map<const Tensor*, std::size_t> bound_;
  bool record_grad_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline bool Var::needs_grad() const { return tape_->needs_grad(id_); }

}  // namespace textless
