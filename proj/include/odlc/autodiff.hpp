#pragma once

// Minimal reverse-mode differentiation over rank-1..4 tensors.
//
// A Tape records every differentiable operation in execution order; Var is a
// handle (tape, node id) into it. backward() visits the nodes once in reverse
// order with fan-out gradients summed. Gradients of watched Parameters are
// then accumulated into Parameter::grad.

#define EIGEN_DONT_PARALLELIZE
#include <Eigen/Core>

#include <deque>
#include <map>
#include <memory>
#include <string_view>
#include <unordered_map>

#include "odlc/tensor.hpp"

namespace odlc {

template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
};

/// Ordered, name-unique collection of parameters with stable addresses.
template <class T>
class ParameterSet {
 public:
  ParameterSet() = default;
  ParameterSet(const ParameterSet& o) { *this = o; }
  ParameterSet& operator=(const ParameterSet& o) {
    if (this == &o) return *this;
    params_.clear();
    index_.clear();
    for (const auto& p : o.params_) add(p->name, p->value);
    return *this;
  }
  ParameterSet(ParameterSet&&) noexcept = default;
  ParameterSet& operator=(ParameterSet&&) noexcept = default;

  Parameter<T>& add(std::string name, Tensor<T> value) {
    if (index_.count(name)) throw Error("duplicate parameter name '" + name + "'");
    auto p = std::make_unique<Parameter<T>>();
    p->name = std::move(name);
    p->grad = Tensor<T>(value.shape());
    p->value = std::move(value);
    index_[p->name] = params_.size();
    params_.push_back(std::move(p));
    return *params_.back();
  }

  Parameter<T>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second].get();
  }
  const Parameter<T>* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second].get();
  }
  Parameter<T>& get(const std::string& name) {
    if (auto* p = find(name)) return *p;
    throw Error("unknown parameter '" + name + "'");
  }
  const Parameter<T>& get(const std::string& name) const {
    if (auto* p = find(name)) return *p;
    throw Error("unknown parameter '" + name + "'");
  }

  size_t size() const { return params_.size(); }
  Parameter<T>& operator[](size_t i) { return *params_[i]; }
  const Parameter<T>& operator[](size_t i) const { return *params_[i]; }

  void zero_grad() {
    for (auto& p : params_) p->grad.fill(T(0));
  }

  size_t numel() const {
    size_t n = 0;
    for (const auto& p : params_) n += p->value.size();
    return n;
  }

  template <class U>
  ParameterSet<U> cast() const {
    ParameterSet<U> out;
    for (const auto& p : params_) out.add(p->name, Tensor<U>::cast(p->value));
    return out;
  }

 private:
  std::vector<std::unique_ptr<Parameter<T>>> params_;
  std::map<std::string, size_t> index_;
};

template <class T>
class Tape;

template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor<T>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape(); }
};

template <class T>
class Tape {
 public:
  /// Called with (tape, d loss/d output, output value).
  using Backward = std::function<void(Tape&, const Tensor<T>&, const Tensor<T>&)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var<T> constant(Tensor<T> v) { return push("constant", std::move(v), nullptr, false, nullptr); }

  /// Constant that aliases caller-owned storage; the tensor must outlive the tape.
  Var<T> constant_ref(const Tensor<T>& v) { return push("constant", {}, &v, false, nullptr); }

  /// Input whose gradient can be read back with grad().
  Var<T> leaf(Tensor<T> v) { return push("leaf", std::move(v), nullptr, grad_enabled_, nullptr); }

  /// Trainable parameter; repeated calls for the same parameter share one node.
  Var<T> param(Parameter<T>& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return {this, it->second};
    Var<T> v = push("param", {}, &p.value, grad_enabled_, &p);
    param_nodes_[&p] = v.id;
    return v;
  }

  /// Parameter used read-only: no gradient is ever routed to it.
  Var<T> frozen(const Parameter<T>& p) { return constant_ref(p.value); }

  template <class... Inputs>
  Var<T> record(std::string_view op, Tensor<T> value, Backward bw, Inputs... inputs) {
    bool needs = false;
    if (grad_enabled_) ((needs = needs || nodes_[check(inputs)].needs_grad), ...);
    return push(op, std::move(value), nullptr, needs, nullptr, needs ? std::move(bw) : Backward{});
  }

  const Tensor<T>& value(Var<T> v) const {
    const Node& n = nodes_[check(v)];
    return n.external ? *n.external : n.value;
  }

  bool needs_grad(Var<T> v) const { return nodes_[check(v)].needs_grad; }

  /// Gradient buffer of an input, allocated on first touch; null when the
  /// input does not require a gradient.
  Tensor<T>* grad_slot(Var<T> v) {
    Node& n = nodes_[check(v)];
    if (!n.needs_grad) return nullptr;
    if (n.grad.empty()) n.grad = Tensor<T>(value(v).shape());
    return &n.grad;
  }

  /// d(loss)/d(v) after backward(); zeros if v was not reached.
  Tensor<T> grad(Var<T> v) const {
    const Node& n = nodes_[check(v)];
    return n.grad.empty() ? Tensor<T>(value(v).shape()) : n.grad;
  }

  void backward(Var<T> loss) {
    check(loss);
    if (value(loss).size() != 1)
      throw Error("backward: loss must be scalar, got shape " + shape_str(value(loss).shape()));
    if (backward_done_) throw Error("backward: tape already consumed");
    backward_done_ = true;
    if (!grad_enabled_ || !nodes_[loss.id].needs_grad) return;
    grad_slot(loss)->data()[0] = T(1);
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.grad.empty() || !n.backward) continue;
      ++visits_;
      ++n.visits;
      n.backward(*this, n.grad, n.value);
    }
    for (auto& n : nodes_) {
      if (!n.param || n.grad.empty()) continue;
      auto dst = n.param->grad.data();
      auto src = n.grad.data();
      for (size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    }
  }

  size_t size() const { return nodes_.size(); }
  size_t count(std::string_view op) const {
    return static_cast<size_t>(
        std::count_if(nodes_.begin(), nodes_.end(), [&](const Node& n) { return n.op == op; }));
  }
  size_t backward_visits() const { return visits_; }
  /// Largest number of times any single node ran its backward rule.
  int max_node_visits() const {
    int m = 0;
    for (const auto& n : nodes_) m = std::max(m, n.visits);
    return m;
  }
  std::string_view op_name(Var<T> v) const { return nodes_[check(v)].op; }

 private:
  struct Node {
    std::string_view op;
    Tensor<T> value;
    const Tensor<T>* external = nullptr;
    Tensor<T> grad;
    bool needs_grad = false;
    Parameter<T>* param = nullptr;
    Backward backward;
    int visits = 0;
  };

  int check(Var<T> v) const {
    if (v.tape != this || v.id < 0 || v.id >= static_cast<int>(nodes_.size()))
      throw Error("variable does not belong to this tape");
    return v.id;
  }

  Var<T> push(std::string_view op, Tensor<T> value, const Tensor<T>* ext, bool needs,
              Parameter<T>* p, Backward bw = {}) {
    Node n;
    n.op = op;
    n.value = std::move(value);
    n.external = ext;
    n.needs_grad = needs;
    n.param = p;
    n.backward = std::move(bw);
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  bool grad_enabled_;
  bool backward_done_ = false;
  size_t visits_ = 0;
  std::deque<Node> nodes_;  // stable references across push_back
  std::unordered_map<const Parameter<T>*, int> param_nodes_;
};

}  // namespace odlc
