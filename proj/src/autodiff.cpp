#include "wpl/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "wpl/error.hpp"

namespace wpl::ad {
namespace {

void require_finite(const Tensor& t, const Node& node, std::size_t index) {
  if (!t.all_finite()) {
    throw NumericError("non-finite value at node " + std::to_string(index) +
                       (node.name.empty() ? std::string() : " ('" + node.name + "')"));
  }
}

void require_rank2(const Tensor& t, const char* what) {
  if (t.rank() != 2) throw ShapeError(std::string(what) + " expects a rank-2 tensor, got " + shape_string(t.shape()));
}

enum class AddMode { same, row_broadcast, scalar_broadcast };

AddMode add_mode(const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return AddMode::same;
  if (b.size() == 1) return AddMode::scalar_broadcast;
  if (a.rank() == 2 && b.rank() == 1 && b.shape()[0] == a.shape()[1]) return AddMode::row_broadcast;
  throw ShapeError("add: incompatible shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()));
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul: inner dimensions differ " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  Tensor out(Shape{n, m});
  const double* ad = a.data().data();
  const double* bd = b.data().data();
  double* od = out.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ad[i * k + p];
      const double* brow = bd + p * m;
      double* orow = od + i * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += aip * brow[j];
    }
  }
  return out;
}

// a^T * b for a [k,n], b [k,m] -> [n,m]
Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  const std::size_t k = a.rows(), n = a.cols(), m = b.cols();
  Tensor out(Shape{n, m});
  for (std::size_t p = 0; p < k; ++p) {
    for (std::size_t i = 0; i < n; ++i) {
      const double api = a.data()[p * n + i];
      for (std::size_t j = 0; j < m; ++j) out.data()[i * m + j] += api * b.data()[p * m + j];
    }
  }
  return out;
}

// a * b^T for a [n,m], b [k,m] -> [n,k]
Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  const std::size_t n = a.rows(), m = a.cols(), k = b.rows();
  Tensor out(Shape{n, k});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      double s = 0.0;
      for (std::size_t j = 0; j < m; ++j) s += a.data()[i * m + j] * b.data()[p * m + j];
      out.data()[i * k + p] = s;
    }
  }
  return out;
}

double apply_activation(Activation act, double x) {
  switch (act) {
    case Activation::identity:
      return x;
    case Activation::tanh:
      return std::tanh(x);
    case Activation::relu:
      return x > 0.0 ? x : 0.0;
    case Activation::sigmoid:
      return 1.0 / (1.0 + std::exp(-x));
  }
  return x;
}

// Derivative expressed through input x and output y.
double activation_slope(Activation act, double x, double y) {
  switch (act) {
    case Activation::identity:
      return 1.0;
    case Activation::tanh:
      return 1.0 - y * y;
    case Activation::relu:
      return x > 0.0 ? 1.0 : 0.0;
    case Activation::sigmoid:
      return y * (1.0 - y);
  }
  return 1.0;
}

// Row-wise log-softmax of a rank-2 tensor.
Tensor log_softmax_rows(const Tensor& z) {
  const std::size_t n = z.rows(), c = z.cols();
  Tensor out(Shape{n, c});
  for (std::size_t i = 0; i < n; ++i) {
    double mx = z.at(i, 0);
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, z.at(i, j));
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(z.at(i, j) - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < c; ++j) out.at(i, j) = z.at(i, j) - lse;
  }
  return out;
}

void accumulate(std::vector<Tensor>& grads, std::vector<bool>& has, std::size_t index, Tensor g) {
  if (!has[index]) {
    grads[index] = std::move(g);
    has[index] = true;
    return;
  }
  auto& dst = grads[index].data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g.data()[i];
}

}  // namespace

std::string_view activation_name(Activation act) {
  switch (act) {
    case Activation::identity:
      return "identity";
    case Activation::tanh:
      return "tanh";
    case Activation::relu:
      return "relu";
    case Activation::sigmoid:
      return "sigmoid";
  }
  return "identity";
}

Activation activation_from_name(std::string_view name) {
  if (name == "identity") return Activation::identity;
  if (name == "tanh") return Activation::tanh;
  if (name == "relu") return Activation::relu;
  if (name == "sigmoid") return Activation::sigmoid;
  throw ConfigError("unknown activation '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// Bindings

Bindings::Bindings(const TensorMap& values) { bind_all(values); }

void Bindings::bind(const std::string& name, const Tensor& value) { refs_[name] = &value; }

void Bindings::bind_all(const TensorMap& values) {
  for (const auto& [name, value] : values) refs_[name] = &value;
}

const Tensor* Bindings::find(const std::string& name) const {
  auto it = refs_.find(name);
  return it == refs_.end() ? nullptr : it->second;
}

// ---------------------------------------------------------------------------
// Graph construction

NodeId Graph::push(Node node) {
  for (auto in : node.inputs) check(in);
  nodes_.push_back(std::move(node));
  return NodeId{nodes_.size() - 1};
}

void Graph::check(NodeId id) const {
  if (id.index >= nodes_.size()) throw KeyError("node " + std::to_string(id.index) + " does not exist");
}

namespace {

Node make_node(OpKind kind, std::vector<NodeId> inputs) {
  Node n;
  n.kind = kind;
  n.inputs = std::move(inputs);
  return n;
}

}  // namespace

NodeId Graph::input(const std::string& name) {
  Node n;
  n.kind = OpKind::input;
  n.name = name;
  return push(std::move(n));
}

NodeId Graph::parameter(const std::string& name) {
  if (auto it = parameters_.find(name); it != parameters_.end()) return it->second;
  Node n;
  n.kind = OpKind::parameter;
  n.name = name;
  const NodeId id = push(std::move(n));
  parameters_.emplace(name, id);
  return id;
}

NodeId Graph::matmul(NodeId a, NodeId b) { return push(make_node(OpKind::matmul, {a, b})); }
NodeId Graph::add(NodeId a, NodeId b) { return push(make_node(OpKind::add, {a, b})); }

NodeId Graph::activation(NodeId a, Activation act) {
  Node n = make_node(OpKind::activation, {a});
  n.act = act;
  return push(std::move(n));
}

NodeId Graph::softmax_cross_entropy(NodeId logits, NodeId target) {
  return push(make_node(OpKind::softmax_cross_entropy, {logits, target}));
}

NodeId Graph::scale(NodeId a, double factor) {
  Node n = make_node(OpKind::scale, {a});
  n.factor = factor;
  return push(std::move(n));
}

NodeId Graph::mul_scalar(NodeId a, NodeId scalar) { return push(make_node(OpKind::mul_scalar, {a, scalar})); }
NodeId Graph::sum_of_squares(NodeId a) { return push(make_node(OpKind::sum_of_squares, {a})); }

NodeId Graph::weighted_sum_of_squares(NodeId x, NodeId weights, NodeId center) {
  return push(make_node(OpKind::weighted_sum_of_squares, {x, weights, center}));
}

std::vector<std::string> Graph::parameter_names() const {
  std::vector<std::string> names;
  for (const auto& n : nodes_) {
    if (n.kind == OpKind::parameter) names.push_back(n.name);
  }
  return names;
}

// ---------------------------------------------------------------------------
// Evaluation

Values forward(const Graph& graph, const Bindings& bindings) {
  Values v(graph.size());
  for (std::size_t idx = 0; idx < graph.size(); ++idx) {
    const Node& node = graph.nodes()[idx];
    auto in = [&](std::size_t k) -> const Tensor& { return v[node.inputs[k].index]; };
    switch (node.kind) {
      case OpKind::input:
      case OpKind::parameter: {
        const Tensor* t = bindings.find(node.name);
        if (t == nullptr) throw UnboundNodeError("no binding for '" + node.name + "'");
        v[idx] = *t;
        break;
      }
      case OpKind::matmul:
        v[idx] = matmul(in(0), in(1));
        break;
      case OpKind::add: {
        const Tensor& a = in(0);
        const Tensor& b = in(1);
        Tensor out = a;
        switch (add_mode(a, b)) {
          case AddMode::same:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
            break;
          case AddMode::scalar_broadcast:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[0];
            break;
          case AddMode::row_broadcast: {
            const std::size_t m = b.size();
            for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i % m];
            break;
          }
        }
        v[idx] = std::move(out);
        break;
      }
      case OpKind::activation: {
        Tensor out = in(0);
        for (auto& x : out.data()) x = apply_activation(node.act, x);
        v[idx] = std::move(out);
        break;
      }
      case OpKind::softmax_cross_entropy: {
        const Tensor& z = in(0);
        const Tensor& t = in(1);
        require_rank2(z, "softmax_cross_entropy");
        if (t.shape() != z.shape()) {
          throw ShapeError("softmax_cross_entropy: target " + shape_string(t.shape()) + " vs logits " +
                           shape_string(z.shape()));
        }
        const Tensor logp = log_softmax_rows(z);
        double total = 0.0;
        for (std::size_t i = 0; i < logp.size(); ++i) {
          if (t[i] != 0.0) total -= t[i] * logp[i];
        }
        v[idx] = Tensor::scalar(total / static_cast<double>(z.rows()));
        break;
      }
      case OpKind::scale: {
        Tensor out = in(0);
        for (auto& x : out.data()) x *= node.factor;
        v[idx] = std::move(out);
        break;
      }
      case OpKind::mul_scalar: {
        const Tensor& s = in(1);
        if (!s.is_scalar_like()) throw ShapeError("mul_scalar: second operand must hold one value");
        Tensor out = in(0);
        for (auto& x : out.data()) x *= s[0];
        v[idx] = std::move(out);
        break;
      }
      case OpKind::sum_of_squares: {
        double s = 0.0;
        for (double x : in(0).data()) s += x * x;
        v[idx] = Tensor::scalar(s);
        break;
      }
      case OpKind::weighted_sum_of_squares: {
        const Tensor& x = in(0);
        const Tensor& w = in(1);
        const Tensor& c = in(2);
        if (w.shape() != x.shape() || c.shape() != x.shape()) {
          throw ShapeError("weighted_sum_of_squares: shapes " + shape_string(x.shape()) + ", " +
                           shape_string(w.shape()) + ", " + shape_string(c.shape()) + " differ");
        }
        double s = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
          const double d = x[i] - c[i];
          s += w[i] * d * d;
        }
        v[idx] = Tensor::scalar(s);
        break;
      }
    }
    require_finite(v[idx], node, idx);
  }
  return v;
}

GradientMap backward(const Graph& graph, const Values& values, NodeId output) {
  if (output.index >= graph.size() || values.size() != graph.size()) {
    throw KeyError("backward: values do not belong to this graph");
  }
  if (!values[output.index].is_scalar_like()) {
    throw ShapeError("backward: output node has shape " + shape_string(values[output.index].shape()));
  }

  // Restrict the sweep to ancestors of the output.
  std::vector<bool> reachable(graph.size(), false);
  reachable[output.index] = true;
  for (std::size_t idx = output.index + 1; idx-- > 0;) {
    if (!reachable[idx]) continue;
    for (auto in : graph.nodes()[idx].inputs) reachable[in.index] = true;
  }

  std::vector<Tensor> grads(graph.size());
  std::vector<bool> has(graph.size(), false);
  Tensor seed = values[output.index];
  seed.fill(1.0);
  grads[output.index] = std::move(seed);
  has[output.index] = true;

  GradientMap result;
  for (std::size_t idx = output.index + 1; idx-- > 0;) {
    if (!reachable[idx] || !has[idx]) continue;
    const Node& node = graph.nodes()[idx];
    const Tensor& g = grads[idx];
    auto val = [&](std::size_t k) -> const Tensor& { return values[node.inputs[k].index]; };
    auto target = [&](std::size_t k) { return node.inputs[k].index; };

    switch (node.kind) {
      case OpKind::input:
        break;
      case OpKind::parameter:
        result[node.name] = g;
        break;
      case OpKind::matmul:
        accumulate(grads, has, target(0), matmul_nt(g, val(1)));
        accumulate(grads, has, target(1), matmul_tn(val(0), g));
        break;
      case OpKind::add: {
        const Tensor& a = val(0);
        const Tensor& b = val(1);
        accumulate(grads, has, target(0), g);
        Tensor gb(b.shape(), 0.0);
        switch (add_mode(a, b)) {
          case AddMode::same:
            gb = g;
            break;
          case AddMode::scalar_broadcast:
            for (double x : g.data()) gb[0] += x;
            break;
          case AddMode::row_broadcast: {
            const std::size_t m = b.size();
            for (std::size_t i = 0; i < g.size(); ++i) gb[i % m] += g[i];
            break;
          }
        }
        accumulate(grads, has, target(1), std::move(gb));
        break;
      }
      case OpKind::activation: {
        const Tensor& x = val(0);
        const Tensor& y = values[idx];
        Tensor gx = g;
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] *= activation_slope(node.act, x[i], y[i]);
        accumulate(grads, has, target(0), std::move(gx));
        break;
      }
      case OpKind::softmax_cross_entropy: {
        const Tensor& z = val(0);
        const Tensor& t = val(1);
        const double scale = g[0] / static_cast<double>(z.rows());
        const Tensor logp = log_softmax_rows(z);
        Tensor gz(z.shape());
        Tensor gt(z.shape());
        for (std::size_t i = 0; i < z.rows(); ++i) {
          double tsum = 0.0;
          for (std::size_t j = 0; j < z.cols(); ++j) tsum += t.at(i, j);
          for (std::size_t j = 0; j < z.cols(); ++j) {
            gz.at(i, j) = (std::exp(logp.at(i, j)) * tsum - t.at(i, j)) * scale;
            gt.at(i, j) = -logp.at(i, j) * scale;
          }
        }
        accumulate(grads, has, target(0), std::move(gz));
        accumulate(grads, has, target(1), std::move(gt));
        break;
      }
      case OpKind::scale: {
        Tensor gx = g;
        for (auto& x : gx.data()) x *= node.factor;
        accumulate(grads, has, target(0), std::move(gx));
        break;
      }
      case OpKind::mul_scalar: {
        const Tensor& x = val(0);
        const Tensor& s = val(1);
        Tensor gx = g;
        double gs = 0.0;
        for (std::size_t i = 0; i < gx.size(); ++i) {
          gs += g[i] * x[i];
          gx[i] *= s[0];
        }
        accumulate(grads, has, target(0), std::move(gx));
        Tensor gst(s.shape(), gs);
        accumulate(grads, has, target(1), std::move(gst));
        break;
      }
      case OpKind::sum_of_squares: {
        const Tensor& x = val(0);
        const double two_g = 2.0 * g[0];
        Tensor gx(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) gx[i] = two_g * x[i];
        accumulate(grads, has, target(0), std::move(gx));
        break;
      }
      case OpKind::weighted_sum_of_squares: {
        const Tensor& x = val(0);
        const Tensor& w = val(1);
        const Tensor& c = val(2);
        const double two_g = 2.0 * g[0];
        Tensor gx(x.shape());
        Tensor gw(x.shape());
        Tensor gc(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) {
          const double d = x[i] - c[i];
          gx[i] = (two_g * w[i]) * d;
          gw[i] = g[0] * d * d;
          gc[i] = -gx[i];
        }
        accumulate(grads, has, target(0), std::move(gx));
        accumulate(grads, has, target(1), std::move(gw));
        accumulate(grads, has, target(2), std::move(gc));
        break;
      }
    }
  }
  return result;
}

GradientMap finite_diff_gradient(const std::function<double(const TensorMap&)>& eval, const TensorMap& params,
                                 double epsilon) {
  if (!(epsilon > 0.0)) throw ConfigError("finite_diff_gradient: epsilon must be positive");
  TensorMap work = params;
  GradientMap grads;
  for (auto& [name, tensor] : work) {
    Tensor g(tensor.shape());
    for (std::size_t i = 0; i < tensor.size(); ++i) {
      const double saved = tensor[i];
      tensor[i] = saved + epsilon;
      const double up = eval(work);
      tensor[i] = saved - epsilon;
      const double down = eval(work);
      tensor[i] = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw NumericError("finite_diff_gradient: non-finite evaluation for '" + name + "'");
      }
      g[i] = (up - down) / (2.0 * epsilon);
    }
    grads.emplace(name, std::move(g));
  }
  return grads;
}

}  // namespace wpl::ad
