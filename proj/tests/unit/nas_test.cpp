#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "test_support.hpp"
#include "wpl/error.hpp"
#include "wpl/nas.hpp"

namespace wpl::nas {
namespace {

data::Dataset small_dataset(std::uint64_t seed = 0) {
  data::SyntheticSpec spec;
  spec.per_class = 100;
  spec.val_per_class = 50;
  return data::make_synthetic(spec, seed);
}

SearchConfig small_config() {
  SearchConfig cfg = default_search_config();
  cfg.space.hidden = 8;
  cfg.archs_per_epoch = 3;
  cfg.batches_per_arch = 5;
  cfg.epochs = 6;
  cfg.eval_rows = 100;
  cfg.reward_rows = 100;
  cfg.fisher_batch = 16;
  return cfg;
}

ArchSpec arch(std::vector<NodeChoice> nodes) { return ArchSpec{std::move(nodes)}; }

TEST(ArchSpec, DecisionsRoundTripAndValidate) {
  const ArchSpec a = arch({{1, 0}, {2, 1}, {0, 1}, {3, 3}});
  EXPECT_EQ(a.decisions(), (std::vector<std::size_t>{1, 0, 2, 1, 0, 1, 3, 3}));
  EXPECT_EQ(ArchSpec::from_decisions(a.decisions()), a);
  SearchSpace space;
  EXPECT_NO_THROW(validate(space, a));
  EXPECT_THROW(validate(space, arch({{1, 0}, {2, 2}, {0, 1}, {3, 3}})), ConfigError);
  EXPECT_THROW(validate(space, arch({{4, 0}, {2, 1}, {0, 1}, {3, 3}})), ConfigError);
  EXPECT_THROW(validate(space, arch({{1, 0}})), ConfigError);
  EXPECT_THROW(ArchSpec::from_decisions({1, 0, 2}), ConfigError);
  EXPECT_EQ(space.num_choices(0), 4u);
  EXPECT_EQ(space.num_choices(1), 1u);
  EXPECT_EQ(space.num_choices(7), 4u);
}

TEST(ArchSpec, LooseEndsAreUnconsumedNodes) {
  EXPECT_EQ(loose_ends(arch({{0, 0}, {0, 1}, {0, 1}, {0, 2}})), (std::vector<int>{2, 3}));
  EXPECT_EQ(loose_ends(arch({{0, 0}, {0, 1}, {0, 2}, {0, 3}})), (std::vector<int>{3}));
  EXPECT_EQ(loose_ends(arch({{0, 0}, {0, 0}, {0, 0}, {0, 0}})), (std::vector<int>{0, 1, 2, 3}));
}

TEST(Supernet, ArchitecturesShareExactlyTheirCommonEdgeSlots) {
  const SearchSpace space{4, 8, 2, 4};
  const ArchSpec x = arch({{1, 0}, {2, 1}, {0, 1}, {3, 3}});
  const ArchSpec y = arch({{3, 0}, {1, 0}, {0, 1}, {2, 1}});
  const auto px = arch_params(space, x);
  const auto py = arch_params(space, y);
  ParamSet common;
  for (const auto& id : px) {
    if (std::find(py.begin(), py.end(), id) != py.end()) common.insert(id);
  }
  EXPECT_EQ(common, (ParamSet{edge_weight(0, 0), edge_bias(0, 0), edge_weight(1, 2), edge_bias(1, 2), kHeadWeight,
                              kHeadBias}));
  Supernet net(space, 0);
  for (const auto& id : px) EXPECT_TRUE(net.store().contains(id)) << id;
  // One slot per (predecessor, node) pair plus the head.
  EXPECT_EQ(net.store().size(), 2u * (1 + 2 + 3 + 4) + 2u);
}

TEST(Controller, UniformLogitsSampleUniformly) {
  Controller c(SearchSpace{});
  Rng rng(1);
  std::vector<int> counts(4, 0);
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) ++counts[sample_architecture(c, rng).arch.nodes[0].op];
  double chi2 = 0.0;
  for (int n : counts) chi2 += (n - draws / 4.0) * (n - draws / 4.0) / (draws / 4.0);
  // 99th percentile of chi-square with 3 degrees of freedom.
  EXPECT_LT(chi2, 11.345) << counts[0] << " " << counts[1] << " " << counts[2] << " " << counts[3];
}

TEST(Controller, DominantLogitIsAlmostAlwaysTaken) {
  Controller c(SearchSpace{});
  c.logits()[2][3] = 20.0;
  Rng rng(2);
  int hits = 0;
  for (int i = 0; i < 10000; ++i) hits += sample_architecture(c, rng).arch.nodes[1].op == 3;
  EXPECT_GE(hits, 9990);
}

TEST(Controller, FixedSeedGivesIdenticalSamples) {
  Controller c(SearchSpace{});
  c.logits()[0] = {0.3, -1.0, 2.0, 0.0};
  Rng r1(9), r2(9);
  for (int i = 0; i < 100; ++i) {
    const Sample a = sample_architecture(c, r1);
    const Sample b = sample_architecture(c, r2);
    EXPECT_EQ(a.arch, b.arch);
    EXPECT_EQ(a.log_prob, b.log_prob);
  }
}

TEST(Controller, RewardsEqualToTheBaselineLeaveLogitsUntouched) {
  Controller c(SearchSpace{});
  Rng rng(3);
  c.set_baseline(0.7);
  std::vector<std::pair<double, Sample>> batch;
  for (int i = 0; i < 5; ++i) batch.emplace_back(0.7, sample_architecture(c, rng));
  const auto before = c.logits();
  EXPECT_EQ(controller_update(c, batch), 0.0);
  EXPECT_EQ(c.logits(), before);
}

TEST(Controller, ConstantRewardsStopMovingOnceTheBaselineIsSeeded) {
  Controller c(SearchSpace{});
  Rng rng(4);
  for (int step = 0; step < 10; ++step) {
    std::vector<std::pair<double, Sample>> batch;
    for (int i = 0; i < 4; ++i) batch.emplace_back(0.5, sample_architecture(c, rng));
    EXPECT_LE(controller_update(c, batch), 1e-6);
  }
  EXPECT_EQ(c.baseline(), 0.5);
}

TEST(Controller, TwoArmedBanditLearnsTheRewardedArm) {
  std::vector<int> first_hit;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Controller c(SearchSpace{1, 8, 2, 4});
    // Arms 2 and 3 are effectively removed, leaving a two-armed bandit on arms 0 and 1.
    c.logits()[0][2] = c.logits()[0][3] = -1e3;
    Rng rng(seed);
    int hit = -1;
    for (int update = 1; update <= 400 && hit < 0; ++update) {
      const Sample s = sample_architecture(c, rng);
      controller_update(c, {{s.arch.nodes[0].op == 0 ? 1.0 : 0.0, s}});
      if (c.probabilities(0)[0] > 0.9) hit = update;
    }
    first_hit.push_back(hit < 0 ? 1 << 20 : hit);
  }
  std::sort(first_hit.begin(), first_hit.end());
  EXPECT_LE(first_hit[2], 200) << "median first update above 0.9";
}

TEST(ControllerProperty, ProbabilitiesStayNormalisedUnderRandomUpdates) {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    Controller c(SearchSpace{static_cast<int>(test::random_dim(rng, 1, 4)), 8, 2, 4},
                 ControllerConfig{rng.uniform(0.0, 2.0), rng.uniform()});
    for (int step = 0; step < 20; ++step) {
      std::vector<std::pair<double, Sample>> batch;
      for (std::size_t i = 0; i < test::random_dim(rng, 1, 4); ++i) {
        batch.emplace_back(rng.uniform(-5.0, 5.0), sample_architecture(c, rng));
      }
      controller_update(c, batch);
    }
    for (std::size_t d = 0; d < c.logits().size(); ++d) {
      const auto p = c.probabilities(d);
      double sum = 0.0;
      for (double v : p) {
        ASSERT_TRUE(std::isfinite(v));
        ASSERT_GE(v, 0.0);
        sum += v;
      }
      EXPECT_NEAR(sum, 1.0, 1e-12);
    }
  }
}

TEST(Aggregate, WorkedExamples) {
  const ArchSpec a = arch({{0, 0}});
  auto one = aggregate({{a, 0.2, 0.5}});
  EXPECT_NEAR(one.mean_diff, 0.3, 1e-15);
  EXPECT_NEAR(one.max_diff, 0.3, 1e-15);
  EXPECT_NEAR(one.top5_diff, 0.3, 1e-15);
  auto two = aggregate({{a, 0.3, 0.4}, {a, 0.3, 0.2}});
  EXPECT_NEAR(two.mean_diff, 0.0, 1e-15);
  EXPECT_NEAR(two.max_diff, 0.1, 1e-15);
  auto same = aggregate({{a, 0.25, 0.25}, {a, 0.5, 0.5}});
  EXPECT_EQ(same.mean_diff, 0.0);
  EXPECT_EQ(same.top5_diff, 0.0);
  EXPECT_EQ(same.max_diff, 0.0);
}

TEST(AggregateProperty, AggregatesAreRecomputableFromTheList) {
  Rng rng(6);
  const ArchSpec a = arch({{0, 0}});
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<ArchRecord> records;
    const std::size_t n = test::random_dim(rng, 1, 9);
    for (std::size_t i = 0; i < n; ++i) {
      // Coarse errors so that ties in err1 occur.
      records.push_back({a, static_cast<double>(rng.index(5)) / 4.0, rng.uniform()});
    }
    const auto s = aggregate(records);
    ASSERT_EQ(s.archs.size(), n);
    std::vector<double> diffs;
    for (const auto& r : records) diffs.push_back(r.err2 - r.err1);
    EXPECT_NEAR(s.mean_diff, std::accumulate(diffs.begin(), diffs.end(), 0.0) / static_cast<double>(n), 1e-12);
    EXPECT_EQ(s.max_diff, *std::max_element(diffs.begin(), diffs.end()));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](auto i, auto j) { return records[i].err1 < records[j].err1; });
    const std::size_t top = std::min<std::size_t>(5, n);
    double t = 0.0;
    for (std::size_t i = 0; i < top; ++i) t += diffs[order[i]];
    EXPECT_NEAR(s.top5_diff, t / static_cast<double>(top), 1e-12);
  }
}

TEST(TrainSampled, ZeroBatchesLeaveWeightsAndErrorUntouched) {
  const auto ds = small_dataset();
  SearchConfig cfg = small_config();
  cfg.batches_per_arch = 0;
  cfg.use_wpl = false;
  SearchContext ctx(cfg, ds);
  const ArchSpec x = arch({{1, 0}, {2, 1}, {0, 1}, {3, 3}});
  const TensorMap before = ctx.supernet.store().values();
  const double pre = error_rate(ctx.supernet, x, ctx.eval_batch);
  EXPECT_EQ(train_sampled(ctx, x, 0), pre);
  EXPECT_EQ(ctx.supernet.store().values(), before);
}

TEST(TrainSampled, WarmupEpochMatchesAnUnregularisedStep) {
  const auto ds = small_dataset();
  SearchConfig with = small_config();
  SearchConfig without = with;
  without.use_wpl = false;
  SearchContext a(with, ds), b(without, ds);
  const ArchSpec x = arch({{1, 0}, {2, 1}, {0, 1}, {3, 3}});
  ASSERT_GT(with.wpl.warmup_epochs, 0);
  EXPECT_EQ(train_sampled(a, x, 0), train_sampled(b, x, 0));
  EXPECT_EQ(a.supernet.store().values(), b.supernet.store().values());
}

TEST(TrainSampled, OnlyWeightsInTheTrainedSubgraphMove) {
  const auto ds = small_dataset();
  SearchConfig cfg = small_config();
  cfg.use_wpl = false;
  SearchContext ctx(cfg, ds);
  const ArchSpec x = arch({{1, 0}, {2, 1}, {0, 1}, {3, 3}});
  const ArchSpec y = arch({{3, 0}, {1, 0}, {0, 1}, {2, 1}});
  train_sampled(ctx, x, 0);
  const TensorMap after_x = ctx.supernet.store().values();
  train_sampled(ctx, y, 0);
  const auto py = arch_params(ctx.cfg.space, y);
  for (const auto& [id, value] : ctx.supernet.store().values()) {
    const bool in_y = std::find(py.begin(), py.end(), id) != py.end();
    EXPECT_EQ(value != after_x.at(id), in_y) << id;
  }
}

TEST(TrainSampled, TrainingAnOverlappingArchitectureRaisesTheFirstOnesError) {
  const ArchSpec x = arch({{1, 0}, {1, 1}, {1, 2}, {1, 3}});
  const ArchSpec y = arch({{2, 0}, {2, 1}, {2, 2}, {2, 3}});
  std::vector<double> rises;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto ds = small_dataset(seed);
    SearchConfig cfg = small_config();
    cfg.use_wpl = false;
    cfg.batches_per_arch = 50;
    cfg.seed = seed;
    SearchContext ctx(cfg, ds);
    const double err1 = train_sampled(ctx, x, 0);
    train_sampled(ctx, y, 0);
    rises.push_back(error_rate(ctx.supernet, x, ctx.eval_batch) - err1);
  }
  std::sort(rises.begin(), rises.end());
  EXPECT_GT(rises[2], 0.0);
}

TEST(Search, SingleArchitecturePerEpochShowsNoForgetting) {
  const auto ds = small_dataset();
  SearchConfig cfg = small_config();
  cfg.archs_per_epoch = 1;
  const auto r = search(cfg, ds);
  for (const auto& e : r.epochs) {
    EXPECT_EQ(e.stats.mean_diff, 0.0);
    EXPECT_EQ(e.stats.top5_diff, 0.0);
    EXPECT_EQ(e.stats.max_diff, 0.0);
  }
}

TEST(Search, ZeroAlphaIsBitIdenticalToNoRegulariser) {
  const auto ds = small_dataset();
  SearchConfig zero = small_config();
  zero.wpl.alpha.alpha0 = 0.0;
  SearchConfig off = small_config();
  off.use_wpl = false;
  const auto a = search(zero, ds);
  const auto b = search(off, ds);
  EXPECT_EQ(a.reward_trace, b.reward_trace);
  EXPECT_EQ(a.best, b.best);
  EXPECT_EQ(a.best_accuracy, b.best_accuracy);
  ASSERT_EQ(a.epochs.size(), b.epochs.size());
  for (std::size_t i = 0; i < a.epochs.size(); ++i) {
    ASSERT_EQ(a.epochs[i].stats.archs.size(), b.epochs[i].stats.archs.size());
    for (std::size_t k = 0; k < a.epochs[i].stats.archs.size(); ++k) {
      EXPECT_EQ(a.epochs[i].stats.archs[k].arch, b.epochs[i].stats.archs[k].arch);
      EXPECT_EQ(a.epochs[i].stats.archs[k].err1, b.epochs[i].stats.archs[k].err1);
      EXPECT_EQ(a.epochs[i].stats.archs[k].err2, b.epochs[i].stats.archs[k].err2);
    }
  }
}

TEST(Search, FisherFlushesEveryPeriodFromTheEndOfWarmup) {
  const auto ds = small_dataset();
  SearchConfig cfg = small_config();
  cfg.epochs = 13;
  cfg.archs_per_epoch = 1;
  cfg.batches_per_arch = 1;
  ASSERT_EQ(cfg.wpl.warmup_epochs, 3);
  const auto r = search(cfg, ds);
  std::vector<int> flushed;
  for (const auto& e : r.epochs) {
    if (e.fisher_flushed) flushed.push_back(e.epoch);
    EXPECT_EQ(e.alpha, alpha_at(SearchContext(cfg, ds).cfg.wpl, e.epoch));
  }
  EXPECT_EQ(flushed, (std::vector<int>{3, 6, 9, 12}));
}

TEST(Search, DeterministicInSeed) {
  const auto ds = small_dataset();
  const auto a = search(small_config(), ds);
  const auto b = search(small_config(), ds);
  EXPECT_EQ(a.reward_trace, b.reward_trace);
  EXPECT_EQ(a.best, b.best);
}

TEST(SearchConfig, Validation) {
  const auto ds = small_dataset();
  auto expect_error = [&](auto mutate) {
    SearchConfig cfg = small_config();
    mutate(cfg);
    EXPECT_THROW(search(cfg, ds), ConfigError);
  };
  expect_error([](SearchConfig& c) { c.archs_per_epoch = 0; });
  expect_error([](SearchConfig& c) { c.batches_per_arch = -1; });
  expect_error([](SearchConfig& c) { c.eval_rows = 1000; });
  expect_error([](SearchConfig& c) { c.batch_size = 0; });
  expect_error([](SearchConfig& c) { c.grad_clip = std::nan(""); });
  expect_error([](SearchConfig& c) { c.space.nodes = 0; });
}

}  // namespace
}  // namespace wpl::nas
