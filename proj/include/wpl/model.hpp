#pragma once

#include <string>
#include <vector>

#include "wpl/autodiff.hpp"
#include "wpl/dataset.hpp"
#include "wpl/params.hpp"
#include "wpl/random.hpp"

namespace wpl {

/// Fully connected layer with parameters "<name>.W" [in, out] and "<name>.b" [out].
struct DenseLayer {
  std::string name;
  std::size_t in = 0;
  std::size_t out = 0;

  ParamId weight() const { return name + ".W"; }
  ParamId bias() const { return name + ".b"; }
};

/// Feed-forward classifier graph over input "x" and one-hot target "y".
struct Classifier {
  ad::Graph graph;
  ad::NodeId logits;
  ad::NodeId loss;  // mean softmax cross-entropy
  std::vector<ParamId> params;
};

Classifier build_classifier(const std::vector<DenseLayer>& layers, ad::Activation hidden);

/// Uniform(-s, s) weights with s = sqrt(6 / (in + out)), zero bias.
void init_dense(ParameterStore& store, const DenseLayer& layer, Rng& rng);
void reinit_dense(ParameterStore& store, const DenseLayer& layer, Rng& rng);

std::vector<int> predict(const Classifier& model, const TensorMap& params, const Tensor& x);
double accuracy(const Classifier& model, const TensorMap& params, const data::Split& split);
double mean_loss(const Classifier& model, const TensorMap& params, const data::Split& split);

/// Gradient of the mean cross-entropy on `split` w.r.t. every model parameter.
ad::GradientMap loss_gradient(const Classifier& model, const TensorMap& params, const data::Split& split,
                              int num_classes);

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; max_norm <= 0
/// leaves them untouched. Returns the norm before rescaling.
double clip_global_norm(ad::GradientMap& grads, double max_norm);

/// In-place SGD update of every parameter in `grads`.
void sgd_step(ParameterStore& store, const ad::GradientMap& grads, double learning_rate);

}  // namespace wpl
