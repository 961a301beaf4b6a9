#pragma once

#include <string>
#include <utility>
#include <vector>

#include "wpl/autodiff.hpp"
#include "wpl/fisher.hpp"

namespace wpl {

/// Anchor-strength schedule over epochs. Always 0 before `warmup_epochs`.
struct AlphaSchedule {
  enum class Kind { step, constant, piecewise };

  Kind kind = Kind::step;
  double alpha0 = 1.0;
  /// step: alpha0 / decay_factor once `decay_at` of the post-warm-up budget has elapsed.
  double decay_factor = 10.0;
  double decay_at = 0.5;
  /// Total epochs including warm-up; the step schedule needs it to locate the halfway point.
  int total_epochs = 0;
  /// piecewise: (post-warm-up epoch, alpha) breakpoints, held constant until the next one.
  std::vector<std::pair<int, double>> points;
};

struct WplConfig {
  double lambda = 1e-4;
  AlphaSchedule alpha;
  double sigma2 = 1.0;
  int warmup_epochs = 0;
};

void validate(const WplConfig& cfg);
double alpha_at(const WplConfig& cfg, int epoch);

/// The three terms of the loss and their sum, accumulated as (task + l2) + anchor.
struct WplBreakdown {
  double task_loss = 0.0;
  double l2_term = 0.0;
  double anchor_term = 0.0;
  double total = 0.0;
};

/// Appends the plasticity loss to a graph:
///
///   total = task + (lambda/2)(|theta_s|^2 + |theta_2|^2) + (alpha/2) sum F (theta_s - anchor)^2
///
/// With `with_anchor` false the last term is omitted entirely, giving the plain
/// L2-regularised objective used for baselines.
class WplLoss {
 public:
  WplLoss(ad::Graph& graph, ad::NodeId task_loss, std::vector<ParamId> theta2, std::vector<ParamId> theta_s,
          bool with_anchor = true);

  ad::NodeId total() const { return total_; }
  ad::NodeId task() const { return task_; }
  ad::NodeId l2() const { return l2_; }
  bool with_anchor() const { return with_anchor_; }
  const std::vector<ParamId>& theta_s() const { return theta_s_; }
  const std::vector<ParamId>& theta2() const { return theta2_; }

  /// Binds lambda, alpha(epoch), F and the anchor. Shared ids without a Fisher
  /// entry get zero weight. Throws on a coverage gap or negative coefficient.
  /// `bindings` keeps references into this object and `fisher`.
  void bind(ad::Bindings& bindings, const FisherState& fisher, const WplConfig& cfg, int epoch);
  /// Same, with an explicit alpha instead of the schedule.
  void bind_alpha(ad::Bindings& bindings, const FisherState& fisher, double lambda, double alpha);

  WplBreakdown breakdown(const ad::Values& values) const;

  static std::string fisher_input(const ParamId& id) { return "wpl.fisher:" + id; }
  static std::string anchor_input(const ParamId& id) { return "wpl.anchor:" + id; }

 private:
  std::vector<ParamId> theta2_;
  std::vector<ParamId> theta_s_;
  bool with_anchor_;
  ad::NodeId task_;
  ad::NodeId l2_;
  ad::NodeId anchor_{};
  ad::NodeId total_;
  Tensor half_lambda_ = Tensor::scalar(0.0);
  Tensor half_alpha_ = Tensor::scalar(0.0);
  TensorMap zeros_;
};

}  // namespace wpl
