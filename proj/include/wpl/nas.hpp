#pragma once

// Weight-sharing architecture search over a small feed-forward cell.
//
// Each of the N nodes applies one activation to W x + b, where x is the
// output of a chosen predecessor (the input or an earlier node). The weights
// live on (predecessor, node) edge slots in one supernet store, so two
// architectures share exactly the slots they both select. The classifier head
// reads the mean of all nodes that no other node consumes.

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "wpl/dataset.hpp"
#include "wpl/fisher.hpp"
#include "wpl/model.hpp"
#include "wpl/wpl_loss.hpp"

namespace wpl::nas {

inline constexpr std::array<ad::Activation, 4> kOps{ad::Activation::identity, ad::Activation::tanh,
                                                    ad::Activation::relu, ad::Activation::sigmoid};

struct SearchSpace {
  int nodes = 4;
  std::size_t hidden = 32;
  std::size_t features = 2;
  int num_classes = 4;

  /// Decisions alternate (op of node i, predecessor of node i).
  std::size_t num_decisions() const { return 2 * static_cast<std::size_t>(nodes); }
  std::size_t num_choices(std::size_t decision) const;
};

void validate(const SearchSpace& space);

/// pred == 0 selects the input; pred == j selects node j - 1.
struct NodeChoice {
  int op = 0;
  int pred = 0;
  bool operator==(const NodeChoice&) const = default;
};

struct ArchSpec {
  std::vector<NodeChoice> nodes;
  bool operator==(const ArchSpec&) const = default;
  /// Flat decision vector in SearchSpace order.
  std::vector<std::size_t> decisions() const;
  static ArchSpec from_decisions(const std::vector<std::size_t>& decisions);
  std::string to_string() const;
};

void validate(const SearchSpace& space, const ArchSpec& arch);

ParamId edge_weight(int pred, int node);
ParamId edge_bias(int pred, int node);
inline const ParamId kHeadWeight = "head.W";
inline const ParamId kHeadBias = "head.b";

/// Supernet parameters an architecture reads, in graph order.
std::vector<ParamId> arch_params(const SearchSpace& space, const ArchSpec& arch);
/// Nodes whose output no other node consumes.
std::vector<int> loose_ends(const ArchSpec& arch);

/// Every edge slot and the head, plus a cache of per-architecture graphs.
class Supernet {
 public:
  Supernet(const SearchSpace& space, std::uint64_t seed);

  const SearchSpace& space() const { return space_; }
  ParameterStore& store() { return store_; }
  const ParameterStore& store() const { return store_; }
  const Classifier& model(const ArchSpec& arch);

 private:
  SearchSpace space_;
  ParameterStore store_;
  std::map<std::string, std::unique_ptr<Classifier>> cache_;
};

struct Sample {
  ArchSpec arch;
  double log_prob = 0.0;
};

struct ControllerConfig {
  double learning_rate = 0.05;
  double baseline_decay = 0.95;
};

/// Independent categorical policy per decision, trained with REINFORCE.
class Controller {
 public:
  Controller(const SearchSpace& space, ControllerConfig cfg = {});

  const std::vector<std::vector<double>>& logits() const { return logits_; }
  std::vector<std::vector<double>>& logits() { return logits_; }
  std::vector<double> probabilities(std::size_t decision) const;
  double baseline() const { return baseline_; }
  /// False until the first update seeds the baseline with that batch's mean reward.
  bool has_baseline() const { return has_baseline_; }
  void set_baseline(double value) {
    baseline_ = value;
    has_baseline_ = true;
  }
  const ControllerConfig& config() const { return cfg_; }
  /// Highest-probability choice for every decision.
  ArchSpec argmax() const;

 private:
  ControllerConfig cfg_;
  std::vector<std::vector<double>> logits_;
  double baseline_ = 0.0;
  bool has_baseline_ = false;
};

Sample sample_architecture(const Controller& controller, Rng& rng);

/// logits += lr * sum_i (reward_i - baseline) * grad log p(sample_i), then the
/// baseline moves toward the mean reward by the EMA decay. Returns the L2
/// norm of the logit update.
double controller_update(Controller& controller, const std::vector<std::pair<double, Sample>>& rewards);

struct SearchConfig {
  SearchSpace space;
  int archs_per_epoch = 8;   // M
  int batches_per_arch = 20;  // B
  int epochs = 30;            // E
  std::size_t batch_size = 32;
  double learning_rate = 0.1;
  /// Global gradient-norm bound per supernet step; <= 0 disables clipping.
  double grad_clip = 5.0;
  bool use_wpl = true;
  WplConfig wpl;
  double fisher_eta = 0.9;
  int flush_period = 3;
  std::size_t fisher_batch = 64;
  /// Leading validation rows for err1/err2; the following rows form the reward batch.
  std::size_t eval_rows = 250;
  std::size_t reward_rows = 250;
  ControllerConfig controller;
  std::uint64_t seed = 0;
};

/// Defaults: warm-up 3, alpha 1e4 stepped down 10x halfway through the budget.
SearchConfig default_search_config();
void validate(const SearchConfig& cfg, const data::Dataset& dataset);

/// Shared state of one search run.
struct SearchContext {
  SearchContext(const SearchConfig& cfg, const data::Dataset& dataset);

  SearchConfig cfg;  // space sized to the dataset, alpha budget filled in
  const data::Dataset* dataset;
  Supernet supernet;
  FisherState fisher;
  data::Split eval_batch;
  data::Split reward_batch;
  Rng batch_rng;
  Rng fisher_rng;
};

double error_rate(Supernet& net, const ArchSpec& arch, const data::Split& split);

/// Trains `arch` on B mini-batches, returns its error on the eval batch, then
/// refreshes the Fisher buffer (post warm-up only) and the anchor snapshot.
double train_sampled(SearchContext& ctx, const ArchSpec& arch, int epoch);

struct ArchRecord {
  ArchSpec arch;
  double err1 = 0.0;
  double err2 = 0.0;
};

struct EpochForgettingStats {
  std::vector<ArchRecord> archs;
  double mean_diff = 0.0;
  /// Mean over the (up to) 5 architectures with the lowest err1.
  double top5_diff = 0.0;
  double max_diff = 0.0;
};

/// Recomputes the aggregates from `archs`. Ties in err1 keep sampling order.
EpochForgettingStats aggregate(std::vector<ArchRecord> archs);

/// Measures err2 for each record on the eval batch and aggregates.
EpochForgettingStats epoch_end_eval(SearchContext& ctx, std::vector<ArchRecord> records);

struct EpochLog {
  int epoch = 0;
  EpochForgettingStats stats;
  double mean_reward = 0.0;
  double alpha = 0.0;
  bool fisher_flushed = false;
};

struct SearchResult {
  ArchSpec best;
  double best_accuracy = 0.0;
  std::vector<EpochLog> epochs;
  std::vector<double> reward_trace;  // mean reward per epoch
};

SearchResult search(const SearchConfig& cfg, const data::Dataset& dataset);

}  // namespace wpl::nas
