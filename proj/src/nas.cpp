#include "wpl/nas.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "wpl/error.hpp"

namespace wpl::nas {
namespace {

enum Stream : std::uint64_t { kInit = 1, kBatches = 2, kPolicy = 3, kFisher = 4 };

std::size_t edge_input_width(const SearchSpace& space, int pred) {
  return pred == 0 ? space.features : space.hidden;
}

DenseLayer edge_layer(const SearchSpace& space, int pred, int node) {
  return {"edge." + std::to_string(pred) + "_" + std::to_string(node), edge_input_width(space, pred), space.hidden};
}

data::Split sample_rows(const data::Split& split, std::size_t count, Rng& rng) {
  std::vector<std::size_t> idx(count);
  for (auto& i : idx) i = rng.index(split.size());
  return data::gather(split, idx);
}

data::Split rows(const data::Split& split, std::size_t begin, std::size_t count) {
  std::vector<std::size_t> idx(count);
  std::iota(idx.begin(), idx.end(), begin);
  return data::gather(split, idx);
}

std::vector<ParamId> all_ids(const ParameterStore& store) {
  std::vector<ParamId> ids;
  for (const auto& [id, _] : store.values()) ids.push_back(id);
  return ids;
}

SearchConfig complete(SearchConfig cfg, const data::Dataset& dataset) {
  cfg.space.features = dataset.features();
  cfg.space.num_classes = dataset.num_classes;
  if (cfg.wpl.alpha.total_epochs == 0) cfg.wpl.alpha.total_epochs = cfg.epochs;
  validate(cfg, dataset);
  return cfg;
}

}  // namespace

std::size_t SearchSpace::num_choices(std::size_t decision) const {
  if (decision >= num_decisions()) throw KeyError("decision index " + std::to_string(decision) + " out of range");
  return decision % 2 == 0 ? kOps.size() : decision / 2 + 1;
}

void validate(const SearchSpace& space) {
  if (space.nodes < 1) throw ConfigError("search space needs at least one node");
  if (space.hidden == 0 || space.features == 0) throw ConfigError("search space widths must be positive");
  if (space.num_classes < 2) throw ConfigError("search space needs at least two classes");
}

std::vector<std::size_t> ArchSpec::decisions() const {
  std::vector<std::size_t> out;
  for (const auto& n : nodes) {
    out.push_back(static_cast<std::size_t>(n.op));
    out.push_back(static_cast<std::size_t>(n.pred));
  }
  return out;
}

ArchSpec ArchSpec::from_decisions(const std::vector<std::size_t>& decisions) {
  if (decisions.size() % 2 != 0) throw ConfigError("decision vector must hold (op, predecessor) pairs");
  ArchSpec a;
  for (std::size_t i = 0; i < decisions.size(); i += 2) {
    a.nodes.push_back({static_cast<int>(decisions[i]), static_cast<int>(decisions[i + 1])});
  }
  return a;
}

std::string ArchSpec::to_string() const {
  std::string s;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (i) s += ' ';
    s += std::string(ad::activation_name(kOps.at(static_cast<std::size_t>(nodes[i].op)))) + "<-" +
         (nodes[i].pred == 0 ? std::string("x") : "n" + std::to_string(nodes[i].pred - 1));
  }
  return s;
}

void validate(const SearchSpace& space, const ArchSpec& arch) {
  validate(space);
  if (arch.nodes.size() != static_cast<std::size_t>(space.nodes)) {
    throw ConfigError("architecture has " + std::to_string(arch.nodes.size()) + " nodes, space has " +
                      std::to_string(space.nodes));
  }
  for (std::size_t i = 0; i < arch.nodes.size(); ++i) {
    const auto& n = arch.nodes[i];
    if (n.op < 0 || static_cast<std::size_t>(n.op) >= kOps.size()) {
      throw ConfigError("node " + std::to_string(i) + ": op index out of range");
    }
    if (n.pred < 0 || n.pred > static_cast<int>(i)) {
      throw ConfigError("node " + std::to_string(i) + ": predecessor must be the input or an earlier node");
    }
  }
}

ParamId edge_weight(int pred, int node) { return "edge." + std::to_string(pred) + "_" + std::to_string(node) + ".W"; }
ParamId edge_bias(int pred, int node) { return "edge." + std::to_string(pred) + "_" + std::to_string(node) + ".b"; }

std::vector<ParamId> arch_params(const SearchSpace& space, const ArchSpec& arch) {
  validate(space, arch);
  std::vector<ParamId> ids;
  for (std::size_t i = 0; i < arch.nodes.size(); ++i) {
    ids.push_back(edge_weight(arch.nodes[i].pred, static_cast<int>(i)));
    ids.push_back(edge_bias(arch.nodes[i].pred, static_cast<int>(i)));
  }
  ids.push_back(kHeadWeight);
  ids.push_back(kHeadBias);
  return ids;
}

std::vector<int> loose_ends(const ArchSpec& arch) {
  std::set<int> consumed;
  for (const auto& n : arch.nodes) {
    if (n.pred > 0) consumed.insert(n.pred - 1);
  }
  std::vector<int> out;
  for (int i = 0; i < static_cast<int>(arch.nodes.size()); ++i) {
    if (!consumed.count(i)) out.push_back(i);
  }
  return out;
}

Supernet::Supernet(const SearchSpace& space, std::uint64_t seed) : space_(space) {
  validate(space);
  Rng rng(derive_seed(seed, kInit));
  for (int node = 0; node < space.nodes; ++node) {
    for (int pred = 0; pred <= node; ++pred) init_dense(store_, edge_layer(space, pred, node), rng);
  }
  init_dense(store_, {"head", space.hidden, static_cast<std::size_t>(space.num_classes)}, rng);
}

const Classifier& Supernet::model(const ArchSpec& arch) {
  const std::string key = arch.to_string();
  auto it = cache_.find(key);
  if (it != cache_.end()) return *it->second;

  auto c = std::make_unique<Classifier>();
  c->params = arch_params(space_, arch);
  auto& g = c->graph;
  const ad::NodeId x = g.input("x");
  std::vector<ad::NodeId> out;
  for (std::size_t i = 0; i < arch.nodes.size(); ++i) {
    const auto& n = arch.nodes[i];
    const ad::NodeId src = n.pred == 0 ? x : out[static_cast<std::size_t>(n.pred - 1)];
    const int node = static_cast<int>(i);
    const ad::NodeId pre =
        g.add(g.matmul(src, g.parameter(edge_weight(n.pred, node))), g.parameter(edge_bias(n.pred, node)));
    out.push_back(g.activation(pre, kOps[static_cast<std::size_t>(n.op)]));
  }
  const auto ends = loose_ends(arch);
  ad::NodeId sum = out[static_cast<std::size_t>(ends.front())];
  for (std::size_t i = 1; i < ends.size(); ++i) sum = g.add(sum, out[static_cast<std::size_t>(ends[i])]);
  if (ends.size() > 1) sum = g.scale(sum, 1.0 / static_cast<double>(ends.size()));
  c->logits = g.add(g.matmul(sum, g.parameter(kHeadWeight)), g.parameter(kHeadBias));
  c->loss = g.softmax_cross_entropy(c->logits, g.input("y"));
  return *cache_.emplace(key, std::move(c)).first->second;
}

Controller::Controller(const SearchSpace& space, ControllerConfig cfg) : cfg_(cfg) {
  validate(space);
  if (!(cfg.learning_rate >= 0.0)) throw ConfigError("controller learning rate must be >= 0");
  if (!(cfg.baseline_decay >= 0.0 && cfg.baseline_decay <= 1.0)) {
    throw ConfigError("controller baseline decay must lie in [0, 1]");
  }
  for (std::size_t d = 0; d < space.num_decisions(); ++d) logits_.emplace_back(space.num_choices(d), 0.0);
}

std::vector<double> Controller::probabilities(std::size_t decision) const {
  const auto& z = logits_.at(decision);
  const double m = *std::max_element(z.begin(), z.end());
  std::vector<double> p(z.size());
  double total = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) total += p[i] = std::exp(z[i] - m);
  for (auto& v : p) v /= total;
  return p;
}

ArchSpec Controller::argmax() const {
  std::vector<std::size_t> choice;
  for (const auto& z : logits_) {
    choice.push_back(static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin()));
  }
  return ArchSpec::from_decisions(choice);
}

Sample sample_architecture(const Controller& controller, Rng& rng) {
  std::vector<std::size_t> choice;
  double log_prob = 0.0;
  for (std::size_t d = 0; d < controller.logits().size(); ++d) {
    const auto p = controller.probabilities(d);
    const std::size_t c = rng.categorical(p);
    choice.push_back(c);
    log_prob += std::log(p[c]);
  }
  return {ArchSpec::from_decisions(choice), log_prob};
}

double controller_update(Controller& controller, const std::vector<std::pair<double, Sample>>& rewards) {
  if (rewards.empty()) return 0.0;
  double mean = 0.0;
  for (const auto& [r, _] : rewards) mean += r;
  mean /= static_cast<double>(rewards.size());
  if (!controller.has_baseline()) controller.set_baseline(mean);

  auto& logits = controller.logits();
  std::vector<std::vector<double>> delta;
  for (const auto& z : logits) delta.emplace_back(z.size(), 0.0);
  for (const auto& [reward, sample] : rewards) {
    const double adv = reward - controller.baseline();
    const auto choice = sample.arch.decisions();
    if (choice.size() != logits.size()) throw ConfigError("sample does not match the controller's decisions");
    for (std::size_t d = 0; d < logits.size(); ++d) {
      const auto p = controller.probabilities(d);
      for (std::size_t c = 0; c < p.size(); ++c) delta[d][c] += adv * ((c == choice[d] ? 1.0 : 0.0) - p[c]);
    }
  }
  const double lr = controller.config().learning_rate;
  double norm2 = 0.0;
  for (std::size_t d = 0; d < logits.size(); ++d) {
    for (std::size_t c = 0; c < logits[d].size(); ++c) {
      const double step = lr * delta[d][c];
      logits[d][c] += step;
      norm2 += step * step;
    }
  }
  const double decay = controller.config().baseline_decay;
  controller.set_baseline(decay * controller.baseline() + (1.0 - decay) * mean);
  return std::sqrt(norm2);
}

SearchConfig default_search_config() {
  SearchConfig cfg;
  cfg.wpl.warmup_epochs = 3;
  cfg.wpl.alpha.kind = AlphaSchedule::Kind::step;
  // The Fisher buffer holds squared mean-batch gradients, which are O(1e-5) here.
  cfg.wpl.alpha.alpha0 = 1e4;
  cfg.wpl.alpha.total_epochs = cfg.epochs;
  return cfg;
}

void validate(const SearchConfig& cfg, const data::Dataset& dataset) {
  data::validate(dataset);
  validate(cfg.space);
  validate(cfg.wpl);
  if (cfg.space.features != dataset.features() || cfg.space.num_classes != dataset.num_classes) {
    throw ConfigError("search space does not match the dataset's features or classes");
  }
  if (cfg.archs_per_epoch < 1 || cfg.batches_per_arch < 0 || cfg.epochs < 1) {
    throw ConfigError("need archs_per_epoch >= 1, batches_per_arch >= 0, epochs >= 1");
  }
  if (cfg.batch_size == 0 || cfg.fisher_batch == 0) throw ConfigError("batch sizes must be positive");
  if (std::isnan(cfg.grad_clip)) throw ConfigError("grad_clip must be a number");
  if (!(cfg.learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
  if (cfg.eval_rows == 0 || cfg.reward_rows == 0 || cfg.eval_rows + cfg.reward_rows > dataset.validation.size()) {
    throw ConfigError("eval_rows + reward_rows must be positive and fit in the validation split");
  }
}

SearchContext::SearchContext(const SearchConfig& config, const data::Dataset& data)
    : cfg(complete(config, data)),
      dataset(&data),
      supernet(cfg.space, cfg.seed),
      fisher(cfg.fisher_eta, cfg.flush_period, cfg.wpl.warmup_epochs - cfg.flush_period),
      eval_batch(rows(data.validation, 0, cfg.eval_rows)),
      reward_batch(rows(data.validation, cfg.eval_rows, cfg.reward_rows)),
      batch_rng(derive_seed(cfg.seed, kBatches)),
      fisher_rng(derive_seed(cfg.seed, kFisher)) {
  fisher.set_anchor(supernet.store().take_snapshot(all_ids(supernet.store()), "init", 0));
}

double error_rate(Supernet& net, const ArchSpec& arch, const data::Split& split) {
  return 1.0 - accuracy(net.model(arch), net.store().values(), split);
}

double train_sampled(SearchContext& ctx, const ArchSpec& arch, int epoch) {
  const auto& cfg = ctx.cfg;
  const auto& ds = *ctx.dataset;
  auto& store = ctx.supernet.store();
  const Classifier& model = ctx.supernet.model(arch);

  if (cfg.batches_per_arch > 0) {
    Classifier train = model;
    WplLoss loss(train.graph, train.loss, {}, train.params, cfg.use_wpl);
    ad::Bindings bindings;
    loss.bind_alpha(bindings, ctx.fisher, cfg.wpl.lambda, cfg.use_wpl ? alpha_at(cfg.wpl, epoch) : 0.0);
    bindings.bind_all(store.values());
    for (int b = 0; b < cfg.batches_per_arch; ++b) {
      const data::Split batch = sample_rows(ds.train, cfg.batch_size, ctx.batch_rng);
      const Tensor target = data::one_hot(batch.y, ds.num_classes);
      bindings.bind("x", batch.x);
      bindings.bind("y", target);
      const auto values = ad::forward(train.graph, bindings);
      auto grads = ad::backward(train.graph, values, loss.total());
      clip_global_norm(grads, cfg.grad_clip);
      sgd_step(store, grads, cfg.learning_rate);
    }
  }
  const double err1 = error_rate(ctx.supernet, arch, ctx.eval_batch);

  if (cfg.use_wpl && epoch >= cfg.wpl.warmup_epochs) {
    const data::Split batch = sample_rows(ds.train, cfg.fisher_batch, ctx.fisher_rng);
    ctx.fisher.momentum_update(fisher_from_gradients(loss_gradient(model, store.values(), batch, ds.num_classes)));
  }
  ctx.fisher.set_anchor(store.take_snapshot(all_ids(store), arch.to_string(), epoch));
  return err1;
}

EpochForgettingStats aggregate(std::vector<ArchRecord> archs) {
  EpochForgettingStats s;
  s.archs = std::move(archs);
  const std::size_t n = s.archs.size();
  if (n == 0) return s;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return s.archs[a].err1 < s.archs[b].err1; });
  double total = 0.0;
  s.max_diff = s.archs[0].err2 - s.archs[0].err1;
  for (const auto& r : s.archs) {
    const double d = r.err2 - r.err1;
    total += d;
    s.max_diff = std::max(s.max_diff, d);
  }
  s.mean_diff = total / static_cast<double>(n);
  const std::size_t top = std::min<std::size_t>(5, n);
  double top_total = 0.0;
  for (std::size_t i = 0; i < top; ++i) top_total += s.archs[order[i]].err2 - s.archs[order[i]].err1;
  s.top5_diff = top_total / static_cast<double>(top);
  return s;
}

EpochForgettingStats epoch_end_eval(SearchContext& ctx, std::vector<ArchRecord> records) {
  for (auto& r : records) r.err2 = error_rate(ctx.supernet, r.arch, ctx.eval_batch);
  return aggregate(std::move(records));
}

SearchResult search(const SearchConfig& config, const data::Dataset& dataset) {
  SearchContext ctx(config, dataset);
  const auto& cfg = ctx.cfg;
  Controller controller(cfg.space, cfg.controller);
  Rng policy(derive_seed(cfg.seed, kPolicy));
  SearchResult result;
  std::vector<Sample> last;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    EpochLog log;
    log.epoch = epoch;
    log.alpha = cfg.use_wpl ? alpha_at(cfg.wpl, epoch) : 0.0;
    log.fisher_flushed = cfg.use_wpl && epoch >= cfg.wpl.warmup_epochs && ctx.fisher.maybe_flush(epoch);

    std::vector<Sample> samples;
    std::vector<ArchRecord> records;
    for (int m = 0; m < cfg.archs_per_epoch; ++m) {
      samples.push_back(sample_architecture(controller, policy));
      records.push_back({samples.back().arch, train_sampled(ctx, samples.back().arch, epoch), 0.0});
    }
    log.stats = epoch_end_eval(ctx, std::move(records));

    std::vector<std::pair<double, Sample>> rewards;
    for (const auto& s : samples) {
      const double r = 1.0 - error_rate(ctx.supernet, s.arch, ctx.reward_batch);
      log.mean_reward += r;
      rewards.emplace_back(r, s);
    }
    log.mean_reward /= static_cast<double>(samples.size());
    controller_update(controller, rewards);
    result.reward_trace.push_back(log.mean_reward);
    result.epochs.push_back(std::move(log));
    last = std::move(samples);
  }

  std::vector<ArchSpec> candidates{controller.argmax()};
  for (const auto& s : last) candidates.push_back(s.arch);
  result.best_accuracy = -1.0;
  for (const auto& arch : candidates) {
    const double acc = accuracy(ctx.supernet.model(arch), ctx.supernet.store().values(), dataset.validation);
    if (acc > result.best_accuracy) {
      result.best_accuracy = acc;
      result.best = arch;
    }
  }
  return result;
}

}  // namespace wpl::nas
