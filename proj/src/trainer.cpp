#include "wpl/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "wpl/error.hpp"

namespace wpl::trainer {
namespace {

// Independent RNG streams so that changing one phase never perturbs another.
enum Stream : std::uint64_t { kInitA = 1, kBatchesA = 2, kInitB = 3, kBatchesB = 4 };

std::vector<DenseLayer> make_layers(const std::string& prefix, std::size_t in, const std::vector<std::size_t>& hidden,
                                    std::size_t out) {
  std::vector<DenseLayer> layers;
  std::size_t prev = in;
  for (std::size_t i = 0; i <= hidden.size(); ++i) {
    const std::size_t width = i < hidden.size() ? hidden[i] : out;
    layers.push_back({prefix + "." + std::to_string(i), prev, width});
    prev = width;
  }
  return layers;
}

std::vector<ParamId> ids_of(const std::vector<DenseLayer>& layers, std::size_t begin, std::size_t end) {
  std::vector<ParamId> ids;
  for (std::size_t i = begin; i < end; ++i) {
    ids.push_back(layers[i].weight());
    ids.push_back(layers[i].bias());
  }
  return ids;
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch)));
  }
  return out;
}

/// One SGD step on a graph holding a WplLoss. Returns the loss breakdown.
WplBreakdown train_step(const ad::Graph& graph, const WplLoss& loss, ad::Bindings bindings, ParameterStore& store,
                        const data::Split& batch, int num_classes, double lr, ad::GradientMap* grads_out = nullptr) {
  const Tensor target = data::one_hot(batch.y, num_classes);
  bindings.bind_all(store.values());
  bindings.bind("x", batch.x);
  bindings.bind("y", target);
  const auto values = ad::forward(graph, bindings);
  auto grads = ad::backward(graph, values, loss.total());
  sgd_step(store, grads, lr);
  if (grads_out) *grads_out = std::move(grads);
  return loss.breakdown(values);
}

struct AState {
  double accuracy = 0.0;
  int epochs = 0;
  int steps = 0;
};

/// Strict training of A, or loose training up to `stop_accuracy` when given.
AState run_a(const ExperimentPlan& plan, TwoModelSetup& setup, std::optional<double> stop_accuracy) {
  const auto& ds = setup.dataset();
  Classifier train = setup.model_a();
  std::vector<ParamId> all = train.params;
  WplLoss loss(train.graph, train.loss, all, {}, false);
  FisherState unused;
  ad::Bindings wpl_bindings;
  loss.bind_alpha(wpl_bindings, unused, plan.wpl.lambda, 0.0);

  Rng rng(derive_seed(plan.seed, kBatchesA));
  AState st;
  double best = std::numeric_limits<double>::infinity();
  int stale = 0;
  for (int epoch = 0; epoch < plan.max_epochs_a; ++epoch) {
    for (const auto& idx : epoch_batches(ds.train.size(), plan.batch_size, rng)) {
      train_step(train.graph, loss, wpl_bindings, setup.store(), data::gather(ds.train, idx), ds.num_classes,
                 plan.learning_rate);
      ++st.steps;
      if (stop_accuracy && st.steps % plan.loose_eval_steps == 0) {
        st.accuracy = accuracy(setup.model_a(), setup.store().values(), ds.validation);
        if (st.accuracy >= *stop_accuracy) {
          st.epochs = epoch + 1;
          return st;
        }
      }
    }
    st.epochs = epoch + 1;
    if (!stop_accuracy) {
      const double v = mean_loss(setup.model_a(), setup.store().values(), ds.validation);
      if (v < best - plan.min_delta) {
        best = v;
        stale = 0;
      } else if (++stale >= plan.patience) {
        break;
      }
    }
  }
  if (stop_accuracy) {
    throw ConfigError("loose target accuracy " + std::to_string(*stop_accuracy) + " not reached within " +
                      std::to_string(plan.max_epochs_a) + " epochs");
  }
  st.accuracy = accuracy(setup.model_a(), setup.store().values(), ds.validation);
  return st;
}

void reinit(TwoModelSetup& setup, const std::vector<DenseLayer>& layers, std::size_t begin, std::size_t end,
            Rng& rng) {
  for (std::size_t i = begin; i < end; ++i) reinit_dense(setup.store(), layers[i], rng);
}

double l2_norm_diff(const ParameterStore& store, const TensorMap& before, const std::vector<ParamId>& ids) {
  double s = 0.0;
  for (const auto& id : ids) {
    const Tensor& now = store.get(id);
    const Tensor& was = before.at(id);
    for (std::size_t i = 0; i < now.size(); ++i) {
      const double d = now[i] - was[i];
      s += d * d;
    }
  }
  return std::sqrt(s);
}

}  // namespace

void validate(const ExperimentPlan& plan, const data::Dataset& dataset) {
  data::validate(dataset);
  validate(plan.wpl);
  const auto depth_a = static_cast<int>(plan.a_hidden.size()) + 1;
  const auto depth_b = static_cast<int>(plan.b_hidden.size()) + 1;
  if (plan.shared_layers < 0 || plan.shared_layers > std::min(depth_a, depth_b)) {
    throw ConfigError("shared_layers must lie in [0, " + std::to_string(std::min(depth_a, depth_b)) + "]");
  }
  const auto k = static_cast<std::size_t>(dataset.num_classes);
  const auto a = make_layers("A", dataset.features(), plan.a_hidden, k);
  const auto b = make_layers("B", dataset.features(), plan.b_hidden, k);
  for (std::size_t i = 0; i < static_cast<std::size_t>(plan.shared_layers); ++i) {
    if (a[i].in != b[i].in || a[i].out != b[i].out) {
      throw ConfigError("shared layer " + std::to_string(i) + " is " + std::to_string(a[i].in) + "x" +
                        std::to_string(a[i].out) + " in A but " + std::to_string(b[i].in) + "x" +
                        std::to_string(b[i].out) + " in B");
    }
  }
  if (!(plan.loose_fraction > 0.0 && plan.loose_fraction <= 1.0)) {
    throw ConfigError("loose_fraction must lie in (0, 1]");
  }
  if (!(plan.learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
  if (plan.batch_size == 0) throw ConfigError("batch_size must be > 0");
  if (plan.max_epochs_a < 1 || plan.patience < 1 || plan.loose_eval_steps < 1) {
    throw ConfigError("max_epochs_a, patience and loose_eval_steps must be >= 1");
  }
  if (plan.epochs_b < 1 || plan.eval_every_b < 0) throw ConfigError("epochs_b must be >= 1, eval_every_b >= 0");
  if (plan.fisher_samples == 0 || plan.fisher_batch == 0) throw ConfigError("fisher_samples and fisher_batch must be > 0");
}

TwoModelSetup::TwoModelSetup(const ExperimentPlan& plan, const data::Dataset& dataset) : dataset_(&dataset) {
  validate(plan, dataset);
  const auto k = static_cast<std::size_t>(dataset.num_classes);
  const auto shared = static_cast<std::size_t>(plan.shared_layers);
  layers_a_ = make_layers("A", dataset.features(), plan.a_hidden, k);
  layers_b_ = make_layers("B", dataset.features(), plan.b_hidden, k);
  for (std::size_t i = 0; i < shared; ++i) layers_b_[i] = layers_a_[i];

  Rng init_a(derive_seed(plan.seed, kInitA));
  for (const auto& layer : layers_a_) init_dense(store_, layer, init_a);
  Rng init_b(derive_seed(plan.seed, kInitB));
  for (std::size_t i = shared; i < layers_b_.size(); ++i) init_dense(store_, layers_b_[i], init_b);

  model_a_ = build_classifier(layers_a_, plan.activation);
  model_b_ = build_classifier(layers_b_, plan.activation);
  store_.register_model("A", model_a_.params);
  store_.register_model("B", model_b_.params);
  shared_ = ids_of(layers_a_, 0, shared);
  a_private_ = ids_of(layers_a_, shared, layers_a_.size());
  b_private_ = ids_of(layers_b_, shared, layers_b_.size());
}

TensorMap estimate_fisher(const ExperimentPlan& plan, const TwoModelSetup& setup) {
  const auto& ds = setup.dataset();
  const data::Split source = data::head(plan.fisher_on_validation ? ds.validation : ds.train, plan.fisher_samples);
  TensorMap sum;
  for (const auto& id : setup.shared()) sum.emplace(id, Tensor(setup.store().get(id).shape(), 0.0));
  std::size_t batches = 0;
  for (std::size_t start = 0; start < source.size(); start += plan.fisher_batch) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(source.size(), start + plan.fisher_batch); ++i) idx.push_back(i);
    const auto grads = loss_gradient(setup.model_a(), setup.store().values(), data::gather(source, idx),
                                     ds.num_classes);
    for (auto& [id, acc] : sum) {
      const Tensor& g = grads.at(id);
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i] * g[i];
    }
    ++batches;
  }
  for (auto& [id, acc] : sum) {
    for (auto& v : acc.data()) v /= static_cast<double>(batches);
  }
  return sum;
}

ModelAResult train_model_a(const ExperimentPlan& plan, TwoModelSetup& setup) {
  ModelAResult r;
  const Snapshot initial = setup.store().take_snapshot(setup.model_a().params, "A", 0);
  AState st = run_a(plan, setup, std::nullopt);
  if (plan.convergence == Convergence::loose) {
    r.strict_accuracy = st.accuracy;
    setup.store().restore(initial);
    st = run_a(plan, setup, plan.loose_fraction * st.accuracy);
  }
  r.baseline_accuracy = st.accuracy;
  r.epochs = st.epochs;
  r.steps = st.steps;
  r.anchor = setup.store().take_snapshot(setup.model_a().params, "A", st.epochs);
  if (!setup.shared().empty()) {
    r.fisher.assign(estimate_fisher(plan, setup));
    r.fisher.set_anchor(r.anchor);
  }
  return r;
}

ForgettingRun train_model_b(const ExperimentPlan& plan, TwoModelSetup& setup, const ModelAResult& a, bool use_wpl) {
  const auto& ds = setup.dataset();
  setup.store().restore(a.anchor);
  Rng init_b(derive_seed(plan.seed, kInitB));
  reinit(setup, setup.layers_b(), setup.shared().size() / 2, setup.layers_b().size(), init_b);

  Classifier train = setup.model_b();
  WplLoss loss(train.graph, train.loss, setup.b_private(), setup.shared(), use_wpl);
  ad::Bindings wpl_bindings;

  ForgettingRun run;
  run.baseline_acc_a = a.baseline_accuracy;
  run.with_wpl = use_wpl;
  run.shared_layers = static_cast<int>(setup.shared().size() / 2);

  Rng rng(derive_seed(plan.seed, kBatchesB));
  const std::size_t per_epoch = (ds.train.size() + plan.batch_size - 1) / plan.batch_size;
  const auto interval = plan.eval_every_b > 0 ? static_cast<std::size_t>(plan.eval_every_b) : per_epoch;

  auto record = [&](int step, const WplBreakdown& b, double alpha) {
    TrajectoryPoint p;
    p.step = step;
    p.epoch = static_cast<double>(step) / static_cast<double>(per_epoch);
    p.acc_a = accuracy(setup.model_a(), setup.store().values(), ds.validation);
    p.acc_b = accuracy(setup.model_b(), setup.store().values(), ds.validation);
    p.loss = b;
    p.alpha = alpha;
    run.trajectory.push_back(p);
  };
  record(0, WplBreakdown{}, 0.0);

  int step = 0;
  for (int epoch = 0; epoch < plan.epochs_b; ++epoch) {
    const double alpha = use_wpl ? alpha_at(plan.wpl, epoch) : 0.0;
    loss.bind_alpha(wpl_bindings, a.fisher, plan.wpl.lambda, alpha);
    for (const auto& idx : epoch_batches(ds.train.size(), plan.batch_size, rng)) {
      const TensorMap before = setup.store().take_snapshot(setup.shared()).values();
      const WplBreakdown b = train_step(train.graph, loss, wpl_bindings, setup.store(), data::gather(ds.train, idx),
                                        ds.num_classes, plan.learning_rate);
      run.shared_step_norms.push_back(l2_norm_diff(setup.store(), before, setup.shared()));
      run.shared_drift.push_back(l2_norm_diff(setup.store(), a.anchor.values(), setup.shared()));
      ++step;
      if (static_cast<std::size_t>(step) % interval == 0) record(step, b, alpha);
    }
  }
  if (static_cast<std::size_t>(run.trajectory.back().step) != static_cast<std::size_t>(step)) {
    record(step, run.trajectory.back().loss, run.trajectory.back().alpha);
  }
  run.d = run.baseline_acc_a - run.trajectory.back().acc_a;
  return run;
}

std::optional<double> reduction_rate(const ForgettingRun& plain, const ForgettingRun& wpl) {
  if (!(plain.d > 0.0)) return std::nullopt;
  return (plain.d - wpl.d) / plain.d;
}

TwoModelResult run_two_model(const ExperimentPlan& plan, const data::Dataset& dataset) {
  TwoModelSetup setup(plan, dataset);
  TwoModelResult r;
  r.model_a = train_model_a(plan, setup);
  r.plain = train_model_b(plan, setup, r.model_a, false);
  r.wpl = train_model_b(plan, setup, r.model_a, true);
  r.reduction = reduction_rate(r.plain, r.wpl);
  return r;
}

std::vector<SweepEntry> shared_proportion_sweep(const ExperimentPlan& plan, const data::Dataset& dataset,
                                                const std::vector<int>& counts) {
  if (counts.empty()) throw ConfigError("sweep needs at least one shared-layer count");
  ExperimentPlan base = plan;
  base.shared_layers = 0;
  TwoModelSetup reference(base, dataset);
  const ModelAResult trained = train_model_a(base, reference);

  std::vector<SweepEntry> out;
  for (int count : counts) {
    ExperimentPlan p = plan;
    p.shared_layers = count;
    TwoModelSetup setup(p, dataset);
    ModelAResult a;
    a.anchor = trained.anchor;
    a.baseline_accuracy = trained.baseline_accuracy;
    a.fisher.set_anchor(trained.anchor);
    SweepEntry e;
    e.shared_layers = count;
    e.run = train_model_b(p, setup, a, false);
    e.a_unchanged = setup.store().take_snapshot(setup.model_a().params).values() == trained.anchor.values();
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace wpl::trainer
