#pragma once

// Minimal reverse-mode differentiation over dense double tensors.
//
// A Graph is an append-only list of nodes, so insertion order is a valid
// topological order and cycles cannot be expressed. Leaves are either
// inputs (constants) or parameters (differentiated); both are bound by name
// at evaluation time.

#include <cstddef>
#include <functional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "wpl/tensor.hpp"

namespace wpl::ad {

struct NodeId {
  std::size_t index = 0;
  bool operator==(const NodeId&) const = default;
};

enum class Activation { identity, tanh, relu, sigmoid };

std::string_view activation_name(Activation act);
Activation activation_from_name(std::string_view name);

enum class OpKind {
  input,
  parameter,
  matmul,                   // [n,k] x [k,m]
  add,                      // same shape, row-broadcast of a [m] vector, or scalar broadcast
  activation,
  softmax_cross_entropy,    // mean over rows of -sum(t * log softmax(z))
  scale,                    // constant factor
  mul_scalar,               // tensor times a single-element node
  sum_of_squares,
  weighted_sum_of_squares,  // sum w * (x - c)^2 with w, c constant inputs
};

struct Node {
  OpKind kind = OpKind::input;
  std::vector<NodeId> inputs;
  std::string name;  // leaves only
  Activation act = Activation::identity;
  double factor = 1.0;
};

/// Non-owning name -> tensor view used to bind leaves. Referenced tensors
/// must outlive any forward() call that uses the bindings.
class Bindings {
 public:
  Bindings() = default;
  Bindings(const TensorMap& values);  // NOLINT(google-explicit-constructor)

  void bind(const std::string& name, const Tensor& value);
  void bind_all(const TensorMap& values);
  const Tensor* find(const std::string& name) const;

 private:
  std::unordered_map<std::string, const Tensor*> refs_;
};

using Values = std::vector<Tensor>;
using GradientMap = TensorMap;

class Graph {
 public:
  NodeId input(const std::string& name);
  /// Returns the existing node when a parameter of this name was already declared.
  NodeId parameter(const std::string& name);

  NodeId matmul(NodeId a, NodeId b);
  NodeId add(NodeId a, NodeId b);
  NodeId activation(NodeId a, Activation act);
  NodeId softmax_cross_entropy(NodeId logits, NodeId target);
  NodeId scale(NodeId a, double factor);
  NodeId mul_scalar(NodeId a, NodeId scalar);
  NodeId sum_of_squares(NodeId a);
  NodeId weighted_sum_of_squares(NodeId x, NodeId weights, NodeId center);

  std::size_t size() const { return nodes_.size(); }
  const Node& node(NodeId id) const { return nodes_.at(id.index); }
  const std::vector<Node>& nodes() const { return nodes_; }
  std::vector<std::string> parameter_names() const;

 private:
  NodeId push(Node node);
  void check(NodeId id) const;

  std::vector<Node> nodes_;
  std::unordered_map<std::string, NodeId> parameters_;
};

/// Evaluates every node in order. Throws UnboundNodeError, ShapeError, or
/// NumericError when a value is not finite.
Values forward(const Graph& graph, const Bindings& bindings);

/// Gradients of `output` (which must hold a single value) with respect to
/// every parameter it depends on.
GradientMap backward(const Graph& graph, const Values& values, NodeId output);

/// Central-difference gradient estimate, one coordinate at a time.
GradientMap finite_diff_gradient(const std::function<double(const TensorMap&)>& eval,
                                 const TensorMap& params, double epsilon);

}  // namespace wpl::ad
