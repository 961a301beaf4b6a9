#pragma once

// Two-model sequential experiment: train model A, take its anchor and Fisher
// estimate, then train model B (which reuses A's first layers) with or
// without the plasticity penalty while tracking A's accuracy.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "wpl/dataset.hpp"
#include "wpl/fisher.hpp"
#include "wpl/model.hpp"
#include "wpl/wpl_loss.hpp"

namespace wpl::trainer {

enum class Convergence { strict, loose };

struct ExperimentPlan {
  data::SyntheticSpec data;
  /// Hidden widths; A has a_hidden.size() + 1 layers, B has b_hidden.size() + 1.
  std::vector<std::size_t> a_hidden{32, 32, 32};
  std::vector<std::size_t> b_hidden{32, 32, 32, 32, 32};
  /// B's first `shared_layers` layers are A's layers (same parameter ids).
  int shared_layers = 3;
  ad::Activation activation = ad::Activation::relu;

  Convergence convergence = Convergence::strict;
  double loose_fraction = 0.5;

  double learning_rate = 0.1;
  std::size_t batch_size = 32;
  /// Strict stopping: validation loss must improve by min_delta within `patience` evaluations.
  int max_epochs_a = 200;
  int patience = 5;
  double min_delta = 1e-4;
  /// Loose mode checks accuracy every this many steps.
  int loose_eval_steps = 5;

  int epochs_b = 20;
  /// Steps between trajectory points while training B; 0 means once per epoch.
  int eval_every_b = 0;

  /// SGD on the anchor term is stable only while learning_rate * alpha * max F < 2.
  WplConfig wpl{1e-4, AlphaSchedule{AlphaSchedule::Kind::constant, 5.0, 10.0, 0.5, 0, {}}, 1.0, 0};
  std::size_t fisher_samples = 200;
  std::size_t fisher_batch = 1;
  bool fisher_on_validation = true;

  std::uint64_t seed = 0;
};

void validate(const ExperimentPlan& plan, const data::Dataset& dataset);

/// Parameters and graphs for both models over one store.
class TwoModelSetup {
 public:
  TwoModelSetup(const ExperimentPlan& plan, const data::Dataset& dataset);

  const data::Dataset& dataset() const { return *dataset_; }
  ParameterStore& store() { return store_; }
  const ParameterStore& store() const { return store_; }
  const Classifier& model_a() const { return model_a_; }
  const Classifier& model_b() const { return model_b_; }
  const std::vector<DenseLayer>& layers_a() const { return layers_a_; }
  const std::vector<DenseLayer>& layers_b() const { return layers_b_; }
  const std::vector<ParamId>& shared() const { return shared_; }
  const std::vector<ParamId>& a_private() const { return a_private_; }
  const std::vector<ParamId>& b_private() const { return b_private_; }

 private:
  const data::Dataset* dataset_;
  ParameterStore store_;
  std::vector<DenseLayer> layers_a_;
  std::vector<DenseLayer> layers_b_;
  Classifier model_a_;
  Classifier model_b_;
  std::vector<ParamId> shared_;
  std::vector<ParamId> a_private_;
  std::vector<ParamId> b_private_;
};

struct ModelAResult {
  Snapshot anchor;  // all of A's parameters after training
  FisherState fisher;
  double baseline_accuracy = 0.0;
  /// Accuracy a strict run reaches from the same initialisation (loose mode only).
  std::optional<double> strict_accuracy;
  int epochs = 0;
  int steps = 0;
};

struct TrajectoryPoint {
  int step = 0;
  double epoch = 0.0;
  double acc_a = 0.0;
  double acc_b = 0.0;
  WplBreakdown loss;  // most recent training batch
  double alpha = 0.0;
};

struct ForgettingRun {
  double baseline_acc_a = 0.0;
  std::vector<TrajectoryPoint> trajectory;
  double d = 0.0;  // baseline_acc_a - final acc_A
  bool with_wpl = false;
  int shared_layers = 0;
  /// L2 norm of the shared-weight update at every step.
  std::vector<double> shared_step_norms;
  /// L2 distance of the shared weights from A's anchor after every step.
  std::vector<double> shared_drift;
};

/// Mean squared mini-batch gradient of A's loss w.r.t. the shared parameters.
TensorMap estimate_fisher(const ExperimentPlan& plan, const TwoModelSetup& setup);

ModelAResult train_model_a(const ExperimentPlan& plan, TwoModelSetup& setup);

/// Resets shared weights to the anchor, re-initialises B's private layers from
/// the plan seed and trains B for plan.epochs_b epochs.
ForgettingRun train_model_b(const ExperimentPlan& plan, TwoModelSetup& setup, const ModelAResult& a, bool use_wpl);

/// (d_plain - d_wpl) / d_plain, or nullopt when the plain run did not forget.
std::optional<double> reduction_rate(const ForgettingRun& plain, const ForgettingRun& wpl);

struct TwoModelResult {
  ModelAResult model_a;
  ForgettingRun plain;
  ForgettingRun wpl;
  std::optional<double> reduction;
};

TwoModelResult run_two_model(const ExperimentPlan& plan, const data::Dataset& dataset);

struct SweepEntry {
  int shared_layers = 0;
  ForgettingRun run;
  /// Every parameter of A is bit-identical before and after B's training.
  bool a_unchanged = false;
};

/// One plain run per shared-layer count, all starting from the same trained A.
std::vector<SweepEntry> shared_proportion_sweep(const ExperimentPlan& plan, const data::Dataset& dataset,
                                                const std::vector<int>& counts);

}  // namespace wpl::trainer
