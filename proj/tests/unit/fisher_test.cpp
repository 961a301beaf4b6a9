#include <gtest/gtest.h>

#include <filesystem>

#include "test_support.hpp"
#include "wpl/error.hpp"
#include "wpl/fisher.hpp"

namespace wpl {
namespace {

TensorMap single(const std::string& id, std::vector<double> v) { return {{id, Tensor::vector(std::move(v))}}; }

TEST(FisherFromGradients, SquaresElementwise) {
  const auto f = fisher_from_gradients(single("g", {2.0, -3.0, 0.0}));
  EXPECT_EQ(f.at("g"), Tensor::vector({4.0, 9.0, 0.0}));
  EXPECT_THROW(fisher_from_gradients(single("g", {NAN})), NumericError);
}

TEST(FisherMomentum, RecurrenceIsExactForBoundaryAndDefaultEta) {
  for (double eta : {0.0, 0.9, 1.0}) {
    SCOPED_TRACE(eta);
    Rng rng(static_cast<std::uint64_t>(eta * 10) + 1);
    FisherState s(eta);
    s.assign(single("w", {0.5, 1.25, 3.0}));
    TensorMap prev = s.fisher();
    for (int step = 0; step < 20; ++step) {
      const Tensor g = test::random_tensor(rng, {3}, -3.0, 3.0);
      const TensorMap fresh = fisher_from_gradients({{"w", g}});
      s.momentum_update(fresh);
      for (std::size_t i = 0; i < 3; ++i) {
        const double expect = (1.0 - eta) * prev.at("w")[i] + eta * (g[i] * g[i]);
        EXPECT_EQ(s.fisher().at("w")[i], expect);
      }
      prev = s.fisher();
    }
  }
}

TEST(FisherMomentum, KnownValues) {
  FisherState s(0.9);
  s.momentum_update(single("w", {4.0}));
  EXPECT_EQ(s.fisher().at("w")[0], 3.6);

  FisherState frozen(0.0);
  frozen.assign(single("w", {2.0}));
  frozen.momentum_update(single("w", {100.0}));
  EXPECT_EQ(frozen.fisher().at("w")[0], 2.0);

  FisherState replace(1.0);
  replace.assign(single("w", {2.0}));
  replace.momentum_update(single("w", {7.0}));
  EXPECT_EQ(replace.fisher().at("w")[0], 7.0);
}

TEST(FisherMomentum, AbsentIdsKeepTheirValueAndShapesMustMatch) {
  FisherState s(0.5);
  s.assign({{"a", Tensor::vector({1.0})}, {"b", Tensor::vector({2.0})}});
  s.momentum_update(single("a", {3.0}));
  EXPECT_EQ(s.fisher().at("a")[0], 2.0);
  EXPECT_EQ(s.fisher().at("b")[0], 2.0);
  EXPECT_THROW(s.momentum_update(single("a", {1.0, 2.0})), ShapeError);
}

TEST(FisherFlush, FiresEveryPeriod) {
  FisherState s(0.9, 3, 0);
  for (int epoch = 0; epoch <= 12; ++epoch) {
    s.momentum_update(single("w", {1.0}));
    const bool fired = s.maybe_flush(epoch);
    EXPECT_EQ(fired, epoch > 0 && epoch % 3 == 0) << "epoch " << epoch;
    if (fired) {
      EXPECT_EQ(s.fisher().at("w")[0], 0.0);
      EXPECT_EQ(s.last_flush_epoch(), epoch);
      EXPECT_FALSE(s.maybe_flush(epoch));
    }
  }
}

TEST(FisherFlush, EpochTwoDoesNotFireAndRepeatedCallsAreNoOps) {
  FisherState s(0.9, 3, 0);
  s.assign(single("w", {5.0}));
  EXPECT_FALSE(s.maybe_flush(2));
  EXPECT_EQ(s.fisher().at("w")[0], 5.0);
  EXPECT_TRUE(s.maybe_flush(3));
  const TensorMap zeroed = s.fisher();
  EXPECT_FALSE(s.maybe_flush(3));
  EXPECT_EQ(s.fisher(), zeroed);
}

TEST(FisherAnchor, CoverageAndIdempotence) {
  FisherState s;
  s.assign(single("w", {1.0}));
  EXPECT_THROW(s.anchor(), KeyError);
  EXPECT_THROW(s.set_anchor(Snapshot({{"other", Tensor::vector({0.0})}}, "A", 0)), KeyError);
  const Snapshot snap({{"w", Tensor::vector({0.5})}, {"x", Tensor::vector({1.0})}}, "A", 3);
  s.set_anchor(snap);
  const TensorMap f = s.fisher();
  s.set_anchor(snap);
  EXPECT_EQ(s.anchor().values(), snap.values());
  EXPECT_EQ(s.fisher(), f);
  EXPECT_THROW(s.momentum_update(single("uncovered", {1.0})), KeyError);
}

TEST(FisherState, ConstructorValidation) {
  EXPECT_THROW(FisherState(-0.1), ConfigError);
  EXPECT_THROW(FisherState(1.5), ConfigError);
  EXPECT_THROW(FisherState(0.5, 0), ConfigError);
  FisherState s;
  EXPECT_THROW(s.assign(single("w", {-1.0})), NumericError);
}

TEST(FisherProperty, NonnegativeUnderArbitraryOperationSequences) {
  Rng rng(99);
  for (int trial = 0; trial < 100; ++trial) {
    FisherState s(rng.uniform(), static_cast<int>(test::random_dim(rng, 1, 4)), 0);
    for (int op = 0; op < 30; ++op) {
      switch (rng.index(3)) {
        case 0:
          s.momentum_update(fisher_from_gradients({{"p", test::random_tensor(rng, {4}, -5.0, 5.0)}}));
          break;
        case 1:
          s.maybe_flush(op);
          break;
        default:
          s.assign(fisher_from_gradients({{"p", test::random_tensor(rng, {4}, -5.0, 5.0)}}));
          break;
      }
      for (const auto& [_, f] : s.fisher()) {
        for (double v : f.data()) ASSERT_GE(v, 0.0);
      }
    }
  }
}

TEST(FisherFile, RoundTrip) {
  FisherState s(0.9, 3, -2);
  s.set_anchor(Snapshot({{"w", Tensor::vector({0.25, -1.0})}}, "A", 1));
  s.momentum_update(single("w", {0.1, 0.3}));
  const auto path = std::filesystem::temp_directory_path() / "wpl_fisher_test.bin";
  s.save(path);
  const FisherState back = FisherState::load(path);
  EXPECT_EQ(back.eta(), s.eta());
  EXPECT_EQ(back.flush_period(), 3);
  EXPECT_EQ(back.last_flush_epoch(), -2);
  EXPECT_EQ(back.fisher(), s.fisher());
  EXPECT_EQ(back.anchor().values(), s.anchor().values());
}

}  // namespace
}  // namespace wpl
