#pragma once

#include <filesystem>
#include <optional>

#include "wpl/autodiff.hpp"
#include "wpl/params.hpp"

namespace wpl {

/// Elementwise square of every gradient tensor.
TensorMap fisher_from_gradients(const ad::GradientMap& grads);

/// Diagonal Fisher estimate over shared parameters together with the anchor
/// snapshot the plasticity penalty pulls toward.
///
/// Invariants: every F entry is >= 0, F keys are covered by the anchor once
/// one is set, eta lies in [0, 1].
class FisherState {
 public:
  FisherState(double eta = 0.9, int flush_period = 3, int last_flush_epoch = 0);

  double eta() const { return eta_; }
  int flush_period() const { return flush_period_; }
  int last_flush_epoch() const { return last_flush_epoch_; }
  const TensorMap& fisher() const { return fisher_; }
  bool has_anchor() const { return anchor_.has_value(); }
  const Snapshot& anchor() const;

  /// F <- (1 - eta) F + eta * fresh, per element. Ids missing from F start at 0;
  /// ids missing from `fresh` are left alone.
  void momentum_update(const TensorMap& fresh);

  /// Replaces F outright (single-shot estimate from a converged model).
  void assign(TensorMap fisher);

  /// Zeroes F when `epoch - last_flush_epoch >= flush_period`. Returns true if it fired.
  bool maybe_flush(int epoch);

  void set_anchor(Snapshot snapshot);

  void save(const std::filesystem::path& path) const;
  static FisherState load(const std::filesystem::path& path);

 private:
  void check_coverage(const Snapshot& snapshot, const TensorMap& fisher) const;

  TensorMap fisher_;
  std::optional<Snapshot> anchor_;
  double eta_;
  int flush_period_;
  int last_flush_epoch_;
};

}  // namespace wpl
