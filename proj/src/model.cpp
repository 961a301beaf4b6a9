#include "wpl/model.hpp"

#include <cmath>

#include "wpl/error.hpp"

namespace wpl {

Classifier build_classifier(const std::vector<DenseLayer>& layers, ad::Activation hidden) {
  if (layers.empty()) throw ConfigError("classifier needs at least one layer");
  Classifier c;
  auto& g = c.graph;
  ad::NodeId h = g.input("x");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& layer = layers[i];
    if (i > 0 && layers[i - 1].out != layer.in) {
      throw ShapeError("layer '" + layer.name + "' expects " + std::to_string(layer.in) + " inputs but receives " +
                       std::to_string(layers[i - 1].out));
    }
    h = g.add(g.matmul(h, g.parameter(layer.weight())), g.parameter(layer.bias()));
    if (i + 1 < layers.size()) h = g.activation(h, hidden);
    c.params.push_back(layer.weight());
    c.params.push_back(layer.bias());
  }
  c.logits = h;
  c.loss = g.softmax_cross_entropy(h, g.input("y"));
  return c;
}

void reinit_dense(ParameterStore& store, const DenseLayer& layer, Rng& rng) {
  const double s = std::sqrt(6.0 / static_cast<double>(layer.in + layer.out));
  Tensor w(Shape{layer.in, layer.out});
  for (auto& v : w.data()) v = rng.uniform(-s, s);
  store.set(layer.weight(), std::move(w));
  store.set(layer.bias(), Tensor(Shape{layer.out}, 0.0));
}

void init_dense(ParameterStore& store, const DenseLayer& layer, Rng& rng) {
  store.add(layer.weight(), Tensor(Shape{layer.in, layer.out}));
  store.add(layer.bias(), Tensor(Shape{layer.out}));
  reinit_dense(store, layer, rng);
}

std::vector<int> predict(const Classifier& model, const TensorMap& params, const Tensor& x) {
  // forward() evaluates the loss node too, so bind a zero target as wide as the logits.
  const auto& last_bias = params.at(model.params.back());
  const Tensor zero_target(Shape{x.rows(), last_bias.size()}, 0.0);
  ad::Bindings b(params);
  b.bind("x", x);
  b.bind("y", zero_target);
  const auto v = ad::forward(model.graph, b);
  const Tensor& logits = v[model.logits.index];
  std::vector<int> out(logits.rows());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < logits.cols(); ++j) {
      if (logits.at(i, j) > logits.at(i, best)) best = j;
    }
    out[i] = static_cast<int>(best);
  }
  return out;
}

double accuracy(const Classifier& model, const TensorMap& params, const data::Split& split) {
  const auto pred = predict(model, params, split.x);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == split.y[i] ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(pred.size());
}

double mean_loss(const Classifier& model, const TensorMap& params, const data::Split& split) {
  const auto& last_bias = params.at(model.params.back());
  const Tensor target = data::one_hot(split.y, static_cast<int>(last_bias.size()));
  ad::Bindings b(params);
  b.bind("x", split.x);
  b.bind("y", target);
  return ad::forward(model.graph, b)[model.loss.index].item();
}

ad::GradientMap loss_gradient(const Classifier& model, const TensorMap& params, const data::Split& split,
                              int num_classes) {
  const Tensor target = data::one_hot(split.y, num_classes);
  ad::Bindings b(params);
  b.bind("x", split.x);
  b.bind("y", target);
  const auto values = ad::forward(model.graph, b);
  return ad::backward(model.graph, values, model.loss);
}

double clip_global_norm(ad::GradientMap& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& [id, g] : grads) {
    for (double v : g.data()) sq += v * v;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto& [id, g] : grads) {
      for (auto& v : g.data()) v *= scale;
    }
  }
  return norm;
}

void sgd_step(ParameterStore& store, const ad::GradientMap& grads, double learning_rate) {
  for (const auto& [id, g] : grads) {
    Tensor& w = store.get_mutable(id);
    if (w.shape() != g.shape()) throw ShapeError("gradient shape mismatch for '" + id + "'");
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= learning_rate * g[i];
  }
}

}  // namespace wpl
