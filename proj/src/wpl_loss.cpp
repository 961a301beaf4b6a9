#include "wpl/wpl_loss.hpp"

#include <cmath>
#include <optional>

#include "wpl/error.hpp"

namespace wpl {

void validate(const WplConfig& cfg) {
  if (!(cfg.lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
  if (!(cfg.sigma2 > 0.0)) throw ConfigError("sigma2 must be > 0");
  if (cfg.warmup_epochs < 0) throw ConfigError("warmup_epochs must be >= 0");
  const auto& a = cfg.alpha;
  if (!(a.alpha0 >= 0.0)) throw ConfigError("alpha0 must be >= 0");
  if (!(a.decay_factor > 0.0)) throw ConfigError("alpha decay_factor must be > 0");
  if (!(a.decay_at >= 0.0 && a.decay_at <= 1.0)) throw ConfigError("alpha decay_at must lie in [0, 1]");
  for (const auto& [epoch, value] : a.points) {
    if (epoch < 0 || !(value >= 0.0)) throw ConfigError("alpha breakpoints need epoch >= 0 and alpha >= 0");
  }
}

double alpha_at(const WplConfig& cfg, int epoch) {
  if (epoch < cfg.warmup_epochs) return 0.0;
  const int post = epoch - cfg.warmup_epochs;
  const auto& a = cfg.alpha;
  switch (a.kind) {
    case AlphaSchedule::Kind::constant:
      return a.alpha0;
    case AlphaSchedule::Kind::step: {
      const int budget = a.total_epochs - cfg.warmup_epochs;
      if (budget <= 0) return a.alpha0;
      return post < a.decay_at * budget ? a.alpha0 : a.alpha0 / a.decay_factor;
    }
    case AlphaSchedule::Kind::piecewise: {
      double value = a.alpha0;
      for (const auto& [start, v] : a.points) {
        if (start <= post) value = v;
      }
      return value;
    }
  }
  return a.alpha0;
}

WplLoss::WplLoss(ad::Graph& graph, ad::NodeId task_loss, std::vector<ParamId> theta2, std::vector<ParamId> theta_s,
                 bool with_anchor)
    : theta2_(std::move(theta2)), theta_s_(std::move(theta_s)), with_anchor_(with_anchor && !theta_s_.empty()),
      task_(task_loss) {
  if (theta2_.empty() && theta_s_.empty()) throw KeyError("plasticity loss needs at least one parameter");

  std::optional<ad::NodeId> squares;
  auto append = [&](std::optional<ad::NodeId>& acc, ad::NodeId term) {
    acc = acc ? graph.add(*acc, term) : term;
  };
  for (const auto& id : theta_s_) append(squares, graph.sum_of_squares(graph.parameter(id)));
  for (const auto& id : theta2_) append(squares, graph.sum_of_squares(graph.parameter(id)));
  l2_ = graph.mul_scalar(*squares, graph.input("wpl.half_lambda"));
  total_ = graph.add(task_, l2_);

  if (with_anchor_) {
    std::optional<ad::NodeId> weighted;
    for (const auto& id : theta_s_) {
      append(weighted, graph.weighted_sum_of_squares(graph.parameter(id), graph.input(fisher_input(id)),
                                                     graph.input(anchor_input(id))));
    }
    anchor_ = graph.mul_scalar(*weighted, graph.input("wpl.half_alpha"));
    total_ = graph.add(total_, anchor_);
  }
}

void WplLoss::bind(ad::Bindings& bindings, const FisherState& fisher, const WplConfig& cfg, int epoch) {
  if (epoch < 0) throw ConfigError("epoch must be >= 0");
  bind_alpha(bindings, fisher, cfg.lambda, alpha_at(cfg, epoch));
}

void WplLoss::bind_alpha(ad::Bindings& bindings, const FisherState& fisher, double lambda, double alpha) {
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
  if (!(alpha >= 0.0)) throw ConfigError("alpha must be >= 0");
  half_lambda_[0] = 0.5 * lambda;
  bindings.bind("wpl.half_lambda", half_lambda_);
  if (!with_anchor_) return;

  half_alpha_[0] = 0.5 * alpha;
  bindings.bind("wpl.half_alpha", half_alpha_);
  if (!fisher.has_anchor()) throw KeyError("plasticity loss requires an anchor snapshot");
  const Snapshot& anchor = fisher.anchor();
  for (const auto& id : theta_s_) {
    if (!anchor.contains(id)) throw KeyError("anchor snapshot does not cover shared parameter '" + id + "'");
    const Tensor& center = anchor.get(id);
    bindings.bind(anchor_input(id), center);
    auto it = fisher.fisher().find(id);
    if (it != fisher.fisher().end()) {
      bindings.bind(fisher_input(id), it->second);
    } else {
      auto z = zeros_.find(id);
      if (z == zeros_.end() || z->second.shape() != center.shape()) {
        z = zeros_.insert_or_assign(id, Tensor(center.shape(), 0.0)).first;
      }
      bindings.bind(fisher_input(id), z->second);
    }
  }
}

WplBreakdown WplLoss::breakdown(const ad::Values& values) const {
  WplBreakdown b;
  b.task_loss = values.at(task_.index).item();
  b.l2_term = values.at(l2_.index).item();
  b.anchor_term = with_anchor_ ? values.at(anchor_.index).item() : 0.0;
  b.total = (b.task_loss + b.l2_term) + b.anchor_term;
  return b;
}

}  // namespace wpl
