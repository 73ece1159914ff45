#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "jscc/random.hpp"
#include "jscc/tensor.hpp"

namespace jscc::ad {

enum class Mode { train, eval };

/// What an op sees of the graph while computing its forward value.
struct ExecContext {
  Mode mode = Mode::train;
  /// Key for stochastic nodes, derived from the graph seed and the node id.
  std::uint64_t rng_key = 0;
};

/// A differentiable primitive. Ops are stateless apart from caches they
/// fill during forward and read during backward.
template <class T>
class Op {
 public:
  virtual ~Op() = default;
  virtual std::string_view kind() const = 0;
  virtual Tensor<T> forward(std::span<const Tensor<T>* const> inputs, const ExecContext& ctx) = 0;
  /// Adds d(loss)/d(input_i) into grad_in[i]; entries are null for inputs
  /// that do not need a gradient.
  virtual void backward(std::span<const Tensor<T>* const> inputs, const Tensor<T>& output,
                        std::span<const T> grad_out, std::span<std::vector<T>* const> grad_in) = 0;
};

template <class T>
class Graph;

/// Handle to a node of a Graph.
template <class T>
struct Var {
  using value_type = T;

  Graph<T>* graph = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return graph->value(*this); }
  const Shape& shape() const { return value().shape; }
};

/// Append-only computation graph. Building a node evaluates it immediately;
/// forward() re-evaluates every node in insertion order (which is a
/// topological order by construction) with rebound inputs.
template <class T>
class Graph {
 public:
  explicit Graph(std::uint64_t seed = 0, Mode mode = Mode::train) : seed_(seed), mode_(mode) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Mode mode() const { return mode_; }
  std::uint64_t seed() const { return seed_; }
  std::size_t size() const { return nodes_.size(); }

  /// Named placeholder; rebound by forward().
  Var<T> input(std::string name, Tensor<T> value, bool requires_grad = false) {
    require_finite(value, "input '" + name + "'");
    Node n;
    n.kind = "input";
    n.name = std::move(name);
    n.requires_grad = requires_grad || value.requires_grad;
    n.value = std::move(value);
    return push(std::move(n));
  }

  Var<T> constant(Tensor<T> value) {
    require_finite(value, "constant");
    Node n;
    n.kind = "constant";
    n.value = std::move(value);
    return push(std::move(n));
  }

  /// Binds an externally owned tensor. Its value is re-read on every
  /// forward(); backward() accumulates into its grad slot.
  Var<T> parameter(Tensor<T>& p, std::string name = {}) {
    Node n;
    n.kind = "parameter";
    n.name = std::move(name);
    n.param = &p;
    n.requires_grad = p.requires_grad;
    n.value = p;
    n.value.grad.reset();
    return push(std::move(n));
  }

  Var<T> apply(std::unique_ptr<Op<T>> op, std::vector<Var<T>> inputs) {
    Node n;
    n.kind = std::string(op->kind());
    for (const Var<T>& v : inputs) {
      if (v.graph != this) throw Error("op '" + n.kind + "' given a node from another graph");
      n.inputs.push_back(v.id);
      n.requires_grad = n.requires_grad || nodes_[v.id].requires_grad;
    }
    n.op = std::move(op);
    const std::size_t id = nodes_.size();
    evaluate(n, id);
    return push(std::move(n));
  }

  /// Re-runs every node. Inputs named in `bindings` are replaced first;
  /// unknown names or shape changes are errors.
  void forward(const std::map<std::string, Tensor<T>>& bindings = {}) {
    std::size_t bound = 0;
    for (Node& n : nodes_) {
      if (n.kind != "input") continue;
      auto it = bindings.find(n.name);
      if (it == bindings.end()) continue;
      if (it->second.shape != n.value.shape)
        throw ShapeError("input '" + n.name + "' expects shape " + to_string(n.value.shape) +
                         ", got " + to_string(it->second.shape));
      require_finite(it->second, "input '" + n.name + "'");
      n.value.data = it->second.data;
      ++bound;
    }
    if (bound != bindings.size()) {
      for (const auto& [name, _] : bindings)
        if (!has_input(name)) throw Error("graph has no input named '" + name + "'");
    }
    for (std::size_t id = 0; id < nodes_.size(); ++id) {
      Node& n = nodes_[id];
      if (n.param) {
        n.value.data = n.param->data;
        n.value.shape = n.param->shape;
      } else if (n.op) {
        evaluate(n, id);
      }
    }
  }

  /// Reverse sweep from a scalar node. Every node is visited once; gradients
  /// from multiple consumers are summed.
  void backward(Var<T> output) {
    if (output.graph != this) throw Error("backward on a node from another graph");
    const Node& out = nodes_[output.id];
    if (out.value.size() != 1)
      throw ShapeError("backward requires a scalar output, got shape " + to_string(out.value.shape));
    for (Node& n : nodes_) n.grad.clear();
    nodes_[output.id].grad.assign(1, T{1});

    std::vector<const Tensor<T>*> in_vals;
    std::vector<std::vector<T>*> in_grads;
    for (std::size_t id = output.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.op) {
        in_vals.clear();
        in_grads.clear();
        for (std::size_t in : n.inputs) {
          Node& src = nodes_[in];
          in_vals.push_back(&src.value);
          if (src.requires_grad) {
            if (src.grad.empty()) src.grad.assign(src.value.size(), T{0});
            in_grads.push_back(&src.grad);
          } else {
            in_grads.push_back(nullptr);
          }
        }
        n.op->backward(in_vals, n.value, n.grad, in_grads);
      } else if (n.param) {
        n.param->accumulate_grad(n.grad);
      }
    }
  }

  const Tensor<T>& value(Var<T> v) const { return nodes_.at(v.id).value; }

  /// Gradient of the last backward() output w.r.t. this node; zeros if the
  /// node was not reached.
  Tensor<T> grad(Var<T> v) const {
    const Node& n = nodes_.at(v.id);
    if (n.grad.empty()) return Tensor<T>(n.value.shape);
    return Tensor<T>(n.value.shape, n.grad);
  }

  std::string_view kind(Var<T> v) const { return nodes_.at(v.id).kind; }
  std::vector<std::size_t> inputs_of(Var<T> v) const { return nodes_.at(v.id).inputs; }

  /// Typed access to the op behind a node (e.g. to read a sampler's epsilon).
  template <class OpType>
  const OpType& op(Var<T> v) const {
    const auto* p = dynamic_cast<const OpType*>(nodes_.at(v.id).op.get());
    if (!p) throw Error("node " + std::to_string(v.id) + " is not of the requested op type");
    return *p;
  }

 private:
  struct Node {
    std::string kind;
    std::string name;
    std::vector<std::size_t> inputs;
    Tensor<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    std::unique_ptr<Op<T>> op;
    Tensor<T>* param = nullptr;
  };

  Var<T> push(Node n) {
    nodes_.push_back(std::move(n));
    return Var<T>{this, nodes_.size() - 1};
  }

  void evaluate(Node& n, std::size_t id) {
    std::vector<const Tensor<T>*> in_vals;
    for (std::size_t in : n.inputs) in_vals.push_back(&nodes_[in].value);
    const ExecContext ctx{mode_, hash_combine(seed_, id)};
    try {
      n.value = n.op->forward(in_vals, ctx);
    } catch (const ShapeError& e) {
      throw ShapeError("node " + std::to_string(id) + " (" + n.kind + "): " + e.what());
    }
    if (!all_finite<T>(n.value.data))
      throw NumericError("node " + std::to_string(id) + " (" + n.kind +
                         ") produced a non-finite value");
  }

  bool has_input(const std::string& name) const {
    for (const Node& n : nodes_)
      if (n.kind == "input" && n.name == name) return true;
    return false;
  }

  static void require_finite(const Tensor<T>& t, const std::string& what) {
    if (!all_finite<T>(t.data)) throw NumericError(what + " contains a non-finite value");
  }

  std::uint64_t seed_;
  Mode mode_;
  std::vector<Node> nodes_;
};

}  // namespace jscc::ad
