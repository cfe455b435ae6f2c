#pragma once

#include <deque>
#include <functional>
#include <initializer_list>
#include <string>
#include <unordered_map>
#include <vector>

#include "cardiff/param_store.hpp"
#include "cardiff/tensor.hpp"

namespace cardiff::nn {

/// Handle to a value recorded on a Graph.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Reverse-mode tape over the fixed kernel set in ops.hpp. A graph is built
/// for one forward pass and discarded; parameters enter as leaves copied from
/// a ParamStore and their gradients are folded back with accumulate_param_grads.
template <class T>
class Graph {
 public:
  using Backward = std::function<void(const Tensor<T>& out_grad)>;

  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var constant(Tensor<T> v) { return push(std::move(v), false); }
  Var input(Tensor<T> v, bool requires_grad = true) {
    return push(std::move(v), requires_grad && grad_enabled_);
  }

  /// Parameters whose name starts with a frozen prefix enter as constants.
  void freeze_prefix(std::string prefix) { frozen_.push_back(std::move(prefix)); }

  Var param(const ParamStore<T>& store, const std::string& name) {
    if (auto it = param_ids_.find(name); it != param_ids_.end()) return Var{it->second};
    bool trainable = grad_enabled_;
    for (const auto& p : frozen_)
      if (name.rfind(p, 0) == 0) trainable = false;
    Var v = push(store.value(name), trainable);
    param_ids_.emplace(name, v.id);
    params_.emplace_back(name, v.id);
    return v;
  }

  const Tensor<T>& value(Var v) const { return nodes_[std::size_t(v.id)].value; }
  bool requires_grad(Var v) const { return nodes_[std::size_t(v.id)].requires_grad; }
  bool has_grad(Var v) const { return !nodes_[std::size_t(v.id)].grad.empty(); }

  /// Gradient buffer for v, zero-initialised on first access.
  Tensor<T>& grad(Var v) {
    auto& n = nodes_[std::size_t(v.id)];
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

  /// Records an op output. The closure runs during backward() only when some
  /// parent requires a gradient.
  Var record(Tensor<T> out, std::initializer_list<Var> parents, Backward back) {
    bool rg = false;
    if (grad_enabled_)
      for (Var p : parents) rg = rg || requires_grad(p);
    Var v = push(std::move(out), rg);
    if (rg) nodes_.back().back = std::move(back);
    return v;
  }
  Var record(Tensor<T> out, const std::vector<Var>& parents, Backward back) {
    bool rg = false;
    if (grad_enabled_)
      for (Var p : parents) rg = rg || requires_grad(p);
    Var v = push(std::move(out), rg);
    if (rg) nodes_.back().back = std::move(back);
    return v;
  }

  /// Seeds d(root)/d(root) = 1 (root must be a single element) and runs the tape in reverse.
  void backward(Var root) {
    require(value(root).size() == 1, Errc::shape_mismatch, "backward root must be scalar");
    grad(root)[0] = T(1);
    run_backward(root);
  }

  /// Backward with an explicit output gradient (used by gradient checks).
  void backward(Var root, const Tensor<T>& seed) {
    require(seed.size() == value(root).size(), Errc::shape_mismatch, "seed gradient shape");
    grad(root) = seed;
    run_backward(root);
  }

  void accumulate_param_grads(ParamStore<T>& store) const {
    for (const auto& [name, id] : params_) {
      const auto& n = nodes_[std::size_t(id)];
      if (n.grad.empty() || !n.requires_grad) continue;
      auto& g = store.at(name).grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
  }

  std::size_t num_nodes() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    Backward back;
  };

  Var push(Tensor<T> v, bool rg) {
    nodes_.push_back(Node{std::move(v), {}, rg, {}});
    return Var{int(nodes_.size()) - 1};
  }

  void run_backward(Var root) {
    for (int i = root.id; i >= 0; --i) {
      auto& n = nodes_[std::size_t(i)];
      if (n.back && !n.grad.empty()) n.back(n.grad);
    }
  }

  bool grad_enabled_;
  std::deque<Node> nodes_;
  std::vector<std::string> frozen_;
  std::unordered_map<std::string, int> param_ids_;
  std::vector<std::pair<std::string, int>> params_;
};

}  // namespace cardiff::nn
