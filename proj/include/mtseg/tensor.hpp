// Dense tensor values with reverse-mode gradient recording.
//
// A Tensor is a cheap handle onto an immutable value node. When a Tape is
// active, operations append their output nodes in execution order; running
// the tape backwards replays the chain rule, visiting each recorded node
// exactly once. Parameters are leaf nodes with a persistent gradient buffer.
#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mtseg/common.hpp"

namespace mtseg {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until needed; persistent on parameter leaves
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node<T>>> inputs;
  std::function<void(Node<T>&)> backprop;  // pushes this->grad into inputs

  Index numel() const { return static_cast<Index>(value.size()); }

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
  void drop_grad() {
    grad.clear();
    grad.shrink_to_fit();
  }
};

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<T> values) {
    if (mtseg::numel(shape) != static_cast<Index>(values.size()))
      throw DimensionError(str_cat("tensor data has ", values.size(),
                                   " values but shape ", shape_str(shape), " needs ",
                                   mtseg::numel(shape)));
    node_ = std::make_shared<Node<T>>();
    node_->shape = std::move(shape);
    node_->value = std::move(values);
  }

  static Tensor zeros(Shape shape) {
    Index n = mtseg::numel(shape);
    return Tensor(std::move(shape), std::vector<T>(static_cast<std::size_t>(n), T(0)));
  }
  static Tensor full(Shape shape, T v) {
    Index n = mtseg::numel(shape);
    return Tensor(std::move(shape), std::vector<T>(static_cast<std::size_t>(n), v));
  }
  static Tensor ones(Shape shape) { return full(std::move(shape), T(1)); }
  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  static Tensor from_node(NodePtr<T> n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  Index dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  Index numel() const { return node_->numel(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  const std::vector<T>& values() const { return node_->value; }
  T at(Index flat) const { return node_->value[static_cast<std::size_t>(flat)]; }
  T item() const {
    if (numel() != 1)
      throw ContractError(str_cat("item() on non-scalar tensor ", shape_str(shape())));
    return node_->value[0];
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(node_->value.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<U>(node_->value[i]);
    return Tensor<U>(node_->shape, std::move(out));
  }

  NodePtr<T>& node() { return node_; }
  const NodePtr<T>& node() const { return node_; }

 private:
  NodePtr<T> node_;
};

// Ordered record of operations executed while the tape was active.
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(NodePtr<T> n) { nodes_.push_back(std::move(n)); }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<NodePtr<T>>& nodes() const { return nodes_; }
  void clear() { nodes_.clear(); }

  static Tape<T>* active() { return active_; }

  // RAII activation; tape construction is confined to one thread.
  class Scope {
   public:
    explicit Scope(Tape<T>& t) : prev_(active_) { active_ = &t; }
    ~Scope() { active_ = prev_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape<T>* prev_;
  };

 private:
  friend class Scope;
  std::vector<NodePtr<T>> nodes_;
  inline static thread_local Tape<T>* active_ = nullptr;
};

// Learnable leaf: value plus a persistent gradient of identical shape.
template <typename T>
class Parameter {
 public:
  Parameter() = default;

  Parameter(std::string id, Shape shape, std::vector<T> init) : id_(std::move(id)) {
    if (mtseg::numel(shape) != static_cast<Index>(init.size()))
      throw DimensionError(str_cat("parameter ", id_, ": init size ", init.size(),
                                   " does not match shape ", shape_str(shape)));
    node_ = std::make_shared<Node<T>>();
    node_->shape = std::move(shape);
    node_->value = std::move(init);
    node_->requires_grad = true;
    node_->ensure_grad();
  }

  bool defined() const { return node_ != nullptr; }
  const std::string& id() const { return id_; }
  const Shape& shape() const { return node_->shape; }
  Index numel() const { return node_->numel(); }

  Tensor<T> tensor() const { return Tensor<T>::from_node(node_); }

  std::vector<T>& values() { return node_->value; }
  const std::vector<T>& values() const { return node_->value; }
  std::vector<T>& grad() { return node_->grad; }
  const std::vector<T>& grad() const { return node_->grad; }

  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T(0)); }

 private:
  std::string id_;
  NodePtr<T> node_;
};

// Registry of all learnable state, in creation order. Creation order is the
// draw order from the seeded Rng, so identical configs yield identical
// initializations.
template <typename T>
class ParamStore {
 public:
  // Uniform init in ±sqrt(1/fan_in).
  Parameter<T> create(const std::string& id, Shape shape, Index fan_in, Rng& rng) {
    double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
    Index n = mtseg::numel(shape);
    std::vector<T> init(static_cast<std::size_t>(n));
    for (auto& v : init) v = static_cast<T>(rng.uniform(-bound, bound));
    return add(Parameter<T>(id, std::move(shape), std::move(init)));
  }

  Parameter<T> create_const(const std::string& id, Shape shape, T fill) {
    Index n = mtseg::numel(shape);
    return add(Parameter<T>(id, std::move(shape),
                            std::vector<T>(static_cast<std::size_t>(n), fill)));
  }

  const std::vector<Parameter<T>>& all() const { return params_; }
  std::vector<Parameter<T>>& all() { return params_; }

  const Parameter<T>* find(const std::string& id) const {
    auto it = index_.find(id);
    return it == index_.end() ? nullptr : &params_[it->second];
  }
  Parameter<T>* find(const std::string& id) {
    auto it = index_.find(id);
    return it == index_.end() ? nullptr : &params_[it->second];
  }

  Index total_values() const {
    Index n = 0;
    for (const auto& p : params_) n += p.numel();
    return n;
  }

  void zero_grads() {
    for (auto& p : params_) p.zero_grad();
  }

 private:
  Parameter<T> add(Parameter<T> p) {
    if (index_.count(p.id()))
      throw ContractError(str_cat("duplicate parameter id: ", p.id()));
    index_[p.id()] = params_.size();
    params_.push_back(p);
    return p;
  }

  std::vector<Parameter<T>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Reverse-mode sweep from a scalar loss. Every parameter reachable from the
// loss ends up holding d(loss)/d(param); untouched parameters keep zeros.
template <typename T>
void backward(const Tensor<T>& loss, Tape<T>& tape) {
  if (!loss.defined() || loss.numel() != 1)
    throw ContractError(
        str_cat("backward requires a scalar loss, got ",
                loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  loss.node()->ensure_grad();
  loss.node()->grad[0] += T(1);
  const auto& nodes = tape.nodes();
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    Node<T>& n = **it;
    if (!n.grad.empty() && n.backprop) {
      n.backprop(n);
      n.drop_grad();  // outputs are finished; parameter leaves keep theirs
    }
  }
}

// Vanilla SGD: value <- value - lr * grad. Gradients are left untouched.
template <typename T>
void sgd_step(ParamStore<T>& params, double lr) {
  if (!(lr > 0.0)) throw ConfigError(str_cat("sgd_step: learning rate must be positive, got ", lr));
  for (auto& p : params.all()) {
    auto& v = p.values();
    const auto& g = p.grad();
    for (std::size_t i = 0; i < v.size(); ++i)
      v[i] = static_cast<T>(static_cast<double>(v[i]) - lr * static_cast<double>(g[i]));
  }
}

}  // namespace mtseg
