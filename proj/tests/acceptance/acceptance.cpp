// End-to-end acceptance run: one PASS/FAIL line per criterion, exit status 1
// when any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>

#include "gradcheck_cases.hpp"
#include "test_support.hpp"
#include "wpl/error.hpp"
#include "wpl/experiment.hpp"
#include "wpl/fisher.hpp"
#include "wpl/laplace.hpp"
#include "wpl/nas.hpp"
#include "wpl/params.hpp"
#include "wpl/trainer.hpp"
#include "wpl/wpl_loss.hpp"

namespace {

using namespace wpl;
namespace fs = std::filesystem;

// Tolerances and budgets.
constexpr int kGradInstances = 100;
constexpr double kGradRel = 1e-6;
constexpr double kGradAbs = 1e-8;
constexpr double kGradSeconds = 60.0;
constexpr double kAnchorUlps = 4.0;
constexpr double kLogATolerance = 1e-6;
constexpr double kIdentityTolerance = 1e-10;
constexpr double kLaplaceSeconds = 120.0;
constexpr double kFactorizationTolerance = 1e-6;
constexpr double kCounterexampleMin = 1e-2;
constexpr int kSchurCases = 100;
constexpr double kMinMedianForgetting = 0.05;
constexpr double kMinMedianReduction = 0.5;
constexpr double kTwoModelSeconds = 300.0;
constexpr int kNasMeanLowerMin = 4;
constexpr int kNasMaxLowerMin = 3;
constexpr double kNasSeconds = 900.0;
const std::vector<std::uint64_t> kSeeds{0, 1, 2, 3, 4};
const std::vector<int> kSweepCounts{0, 1, 2, 3};

struct Outcome {
  bool pass = false;
  std::string detail;
};

class Timer {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(3);
  s << v;
  return s.str();
}

std::string fmt_list(const std::vector<double>& v) {
  std::string out = "[";
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? " " : "") + fmt(v[i]);
  return out + "]";
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Outcome gradient_correctness() {
  Timer t;
  double worst = 0.0;
  int checked = 0;
  for (const auto& [name, make] : test::gradcheck_cases()) {
    Rng rng(1000 + static_cast<std::uint64_t>(checked));
    for (int i = 0; i < kGradInstances; ++i, ++checked) {
      const auto in = make(rng);
      const auto analytic = test::analytic_gradient(in.graph, in.out, in.params, in.inputs);
      const auto numeric = test::numeric_gradient(in.graph, in.out, in.params, in.inputs);
      const auto cmp = test::compare_gradients(analytic, numeric, kGradRel, kGradAbs);
      worst = std::max(worst, cmp.worst_relative);
      if (!cmp.ok) return {false, name + " instance " + std::to_string(i) + ": " + cmp.detail};
    }
  }
  const double s = t.seconds();
  return {s < kGradSeconds, std::to_string(checked) + " instances, worst relative error above the absolute floor " + fmt(worst) + ", " +
                                fmt(s) + " s"};
}

Outcome wpl_analytic_gradient() {
  Rng rng(7);
  double worst_ulps = 0.0;
  bool identity = true;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = test::random_dim(rng, 1, 8);
    ad::Graph g;
    const ad::NodeId task = g.scale(g.sum_of_squares(g.parameter("t")), 0.5);
    WplLoss loss(g, task, {"t"}, {"s"});
    const Tensor s = test::random_tensor(rng, {n});
    const Tensor f = test::random_tensor(rng, {n}, 0.0, 3.0);
    const Tensor c = test::random_tensor(rng, {n});
    const double alpha = rng.uniform(0.0, 50.0);
    FisherState fisher;
    fisher.set_anchor(Snapshot({{"s", c}}, "A", 0));
    fisher.assign({{"s", f}});
    const TensorMap params{{"s", s}, {"t", test::random_tensor(rng, {2})}};

    // lambda = 0 isolates the anchor term in d/ds.
    ad::Bindings b;
    loss.bind_alpha(b, fisher, 0.0, alpha);
    b.bind_all(params);
    const auto grads = ad::backward(g, ad::forward(g, b), loss.total());
    for (std::size_t i = 0; i < n; ++i) {
      const double expect = alpha * f[i] * (s[i] - c[i]);
      const double diff = std::abs(grads.at("s")[i] - expect);
      const double ulp = std::numeric_limits<double>::epsilon() * std::abs(expect);
      worst_ulps = std::max(worst_ulps, ulp > 0 ? diff / ulp : (diff > 0 ? 1e300 : 0.0));
    }

    ad::Bindings full;
    loss.bind_alpha(full, fisher, rng.uniform(0.0, 0.1), alpha);
    full.bind_all(params);
    const auto values = ad::forward(g, full);
    const auto br = loss.breakdown(values);
    identity = identity && br.total == (br.task_loss + br.l2_term) + br.anchor_term &&
               br.total == values[loss.total().index].item();
  }
  return {worst_ulps <= kAnchorUlps && identity,
          "anchor gradient within " + fmt(worst_ulps) + " ulp, breakdown identity " + (identity ? "exact" : "broken")};
}

struct LaplaceRun {
  cli::LaplaceReport report;
  double seconds = 0.0;
};

const LaplaceRun& laplace_run() {
  static const LaplaceRun run = [] {
    Timer t;
    cli::LaplaceSuite suite;
    LaplaceRun r;
    r.report = cli::verify_laplace(suite, 0);
    r.seconds = t.seconds();
    return r;
  }();
  return run;
}

Outcome marginal_oracle() {
  const auto& r = laplace_run();
  const bool ok = r.report.log_a_cases >= 100 && r.report.max_log_a_error <= kLogATolerance &&
                  r.report.max_identity_error <= kIdentityTolerance && r.seconds < kLaplaceSeconds;
  return {ok, std::to_string(r.report.log_a_cases) + " closed-form vs grid cases, max log error " +
                  fmt(r.report.max_log_a_error) + ", completed-square max error " +
                  fmt(r.report.max_identity_error) + ", " + fmt(r.seconds) + " s"};
}

Outcome factorization() {
  const auto& r = laplace_run().report;
  return {r.factorization_deviation <= kFactorizationTolerance && r.counterexample_deviation > kCounterexampleMin,
          "factorised deviation " + fmt(r.factorization_deviation) + ", coupled counterexample " +
              fmt(r.counterexample_deviation)};
}

Outcome schur_properties() {
  using laplace::Matrix;
  Rng rng(11);
  double min_eig = std::numeric_limits<double>::infinity();
  double asym = 0.0;
  bool exact = true;
  for (int c = 0; c < kSchurCases; ++c) {
    const int p1 = 1 + static_cast<int>(rng.index(4));
    const int ps = 1 + static_cast<int>(rng.index(4));
    const int p = p1 + ps;
    Matrix a(p, p);
    for (int i = 0; i < p; ++i) {
      for (int k = 0; k < p; ++k) a(i, k) = rng.normal();
    }
    const Matrix h = a.transpose() * a + 0.1 * Matrix::Identity(p, p);
    const auto blocks = laplace::BlockHessian::partition(0.5 * (h + h.transpose()), p1);
    const Matrix omega = laplace::schur_omega(blocks);
    asym = std::max(asym, (omega - omega.transpose()).cwiseAbs().maxCoeff());
    const Eigen::SelfAdjointEigenSolver<Matrix> eig(0.5 * (omega + omega.transpose()));
    min_eig = std::min(min_eig, eig.eigenvalues().minCoeff());

    laplace::BlockHessian uncoupled = blocks;
    uncoupled.h1s.setZero();
    uncoupled.hs1.setZero();
    exact = exact && laplace::schur_omega(uncoupled) == uncoupled.hss;
  }
  return {min_eig > 0.0 && asym <= 1e-10 && exact,
          "min eigenvalue " + fmt(min_eig) + ", max asymmetry " + fmt(asym) + ", uncoupled case " +
              (exact ? "exact" : "inexact")};
}

Outcome fisher_mechanics() {
  bool recurrence = true;
  for (double eta : {0.0, 0.9, 1.0}) {
    Rng rng(3);
    FisherState s(eta);
    s.assign({{"w", test::random_tensor(rng, {5}, 0.0, 2.0)}});
    for (int step = 0; step < 50; ++step) {
      const TensorMap prev = s.fisher();
      const Tensor g = test::random_tensor(rng, {5}, -3.0, 3.0);
      s.momentum_update(fisher_from_gradients({{"w", g}}));
      for (std::size_t i = 0; i < 5; ++i) {
        recurrence = recurrence && s.fisher().at("w")[i] == (1.0 - eta) * prev.at("w")[i] + eta * (g[i] * g[i]);
      }
    }
  }

  std::vector<int> fired;
  FisherState sched(0.9, 3, 0);
  for (int epoch = 0; epoch <= 15; ++epoch) {
    sched.momentum_update({{"w", Tensor::vector({1.0})}});
    if (sched.maybe_flush(epoch)) fired.push_back(epoch);
  }
  const bool schedule = fired == std::vector<int>{3, 6, 9, 12, 15};

  bool nonnegative = true;
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    FisherState s(rng.uniform(), 1 + static_cast<int>(rng.index(4)), 0);
    for (int op = 0; op < 40; ++op) {
      const auto g = fisher_from_gradients({{"p", test::random_tensor(rng, {4}, -5.0, 5.0)}});
      switch (rng.index(3)) {
        case 0: s.momentum_update(g); break;
        case 1: s.maybe_flush(op); break;
        default: s.assign(g); break;
      }
      for (const auto& [_, f] : s.fisher()) {
        for (double v : f.data()) nonnegative = nonnegative && v >= 0.0;
      }
    }
  }
  return {recurrence && schedule && nonnegative, std::string("recurrence ") + (recurrence ? "exact" : "inexact") +
                                                     ", flush schedule " + (schedule ? "as expected" : "wrong") +
                                                     ", nonnegativity " + (nonnegative ? "held" : "violated")};
}

Outcome two_model_forgetting() {
  Timer t;
  std::vector<double> d_plain, d_wpl, reductions;
  const cli::RunConfig defaults;
  for (auto seed : kSeeds) {
    const data::Dataset ds = cli::load_dataset(defaults.data, seed);
    trainer::ExperimentPlan plan = defaults.plan;
    plan.seed = seed;
    const auto r = trainer::run_two_model(plan, ds);
    d_plain.push_back(r.plain.d);
    d_wpl.push_back(r.wpl.d);
    if (r.reduction) reductions.push_back(*r.reduction);
  }
  const double md = cli::median(d_plain);
  const bool have_reduction = reductions.size() * 2 > kSeeds.size();
  const double mr = have_reduction ? cli::median(reductions) : std::nan("");
  const double s = t.seconds();
  return {md >= kMinMedianForgetting && have_reduction && mr >= kMinMedianReduction && s < kTwoModelSeconds,
          "median d plain " + fmt(md) + " " + fmt_list(d_plain) + ", wpl " + fmt_list(d_wpl) +
              ", median reduction " + (have_reduction ? fmt(mr) : std::string("undefined")) + " over " +
              std::to_string(reductions.size()) + " seeds, " + fmt(s) + " s"};
}

Outcome shared_proportion_sweep() {
  const cli::RunConfig defaults;
  std::vector<std::vector<double>> d(kSweepCounts.size());
  bool unchanged = true;
  for (auto seed : kSeeds) {
    const data::Dataset ds = cli::load_dataset(defaults.data, seed);
    trainer::ExperimentPlan plan = defaults.plan;
    plan.seed = seed;
    const auto entries = trainer::shared_proportion_sweep(plan, ds, kSweepCounts);
    for (std::size_t i = 0; i < entries.size(); ++i) {
      d[i].push_back(entries[i].run.d);
      if (entries[i].shared_layers == 0) unchanged = unchanged && entries[i].a_unchanged;
    }
  }
  std::vector<double> medians;
  for (const auto& v : d) medians.push_back(cli::median(v));
  bool monotone = true;
  for (std::size_t i = 1; i < medians.size(); ++i) monotone = monotone && medians[i] >= medians[i - 1];
  return {monotone && unchanged, "median d by shared count " + fmt_list(medians) + ", unshared A " +
                                     (unchanged ? "bit-unchanged" : "modified")};
}

struct NasSummary {
  double mean_diff = 0.0;
  double max_diff = 0.0;
};

NasSummary post_warmup(const nas::SearchResult& r, int warmup) {
  NasSummary s;
  int n = 0;
  for (const auto& e : r.epochs) {
    if (e.epoch < warmup) continue;
    s.mean_diff += e.stats.mean_diff;
    s.max_diff += e.stats.max_diff;
    ++n;
  }
  s.mean_diff /= n;
  s.max_diff /= n;
  return s;
}

bool same_search(const nas::SearchResult& a, const nas::SearchResult& b) {
  if (a.reward_trace != b.reward_trace || !(a.best == b.best) || a.epochs.size() != b.epochs.size()) return false;
  for (std::size_t i = 0; i < a.epochs.size(); ++i) {
    const auto& x = a.epochs[i].stats.archs;
    const auto& y = b.epochs[i].stats.archs;
    if (x.size() != y.size()) return false;
    for (std::size_t k = 0; k < x.size(); ++k) {
      if (!(x[k].arch == y[k].arch) || x[k].err1 != y[k].err1 || x[k].err2 != y[k].err2) return false;
    }
  }
  return true;
}

Outcome nas_forgetting(std::string& crossover_note) {
  Timer t;
  const cli::RunConfig defaults;
  const int warmup = defaults.search.wpl.warmup_epochs;
  int mean_lower = 0, max_lower = 0;
  std::vector<double> plain_mean, wpl_mean;
  std::vector<std::vector<double>> rewards_plain, rewards_wpl;
  for (auto seed : kSeeds) {
    const data::Dataset ds = cli::load_dataset(defaults.data, seed);
    nas::SearchConfig cfg = defaults.search;
    cfg.seed = seed;
    cfg.use_wpl = false;
    const auto plain = nas::search(cfg, ds);
    cfg.use_wpl = true;
    const auto wpl = nas::search(cfg, ds);
    const auto sp = post_warmup(plain, warmup);
    const auto sw = post_warmup(wpl, warmup);
    mean_lower += sw.mean_diff < sp.mean_diff;
    max_lower += sw.max_diff < sp.max_diff;
    plain_mean.push_back(sp.mean_diff);
    wpl_mean.push_back(sw.mean_diff);
    rewards_plain.push_back(plain.reward_trace);
    rewards_wpl.push_back(wpl.reward_trace);
  }

  const data::Dataset ds = cli::load_dataset(defaults.data, 0);
  nas::SearchConfig zero = defaults.search;
  zero.wpl.alpha.alpha0 = 0.0;
  nas::SearchConfig off = defaults.search;
  off.use_wpl = false;
  const bool identical = same_search(nas::search(zero, ds), nas::search(off, ds));

  // Seed-median reward per epoch, WPL minus plain, averaged over each half of the run.
  const std::size_t epochs = rewards_plain.front().size();
  double first = 0.0, second = 0.0;
  for (std::size_t e = 0; e < epochs; ++e) {
    std::vector<double> p, w;
    for (std::size_t s = 0; s < kSeeds.size(); ++s) {
      p.push_back(rewards_plain[s][e]);
      w.push_back(rewards_wpl[s][e]);
    }
    (e < epochs / 2 ? first : second) += cli::median(w) - cli::median(p);
  }
  first /= static_cast<double>(epochs / 2);
  second /= static_cast<double>(epochs - epochs / 2);
  crossover_note = "reward crossover (reported only): median WPL minus plain reward " + fmt(first) +
                   " in the first half, " + fmt(second) + " in the second half";

  const double s = t.seconds();
  return {mean_lower >= kNasMeanLowerMin && max_lower >= kNasMaxLowerMin && identical && s < kNasSeconds,
          "mean diff lower with WPL in " + std::to_string(mean_lower) + "/5 seeds (plain " + fmt_list(plain_mean) +
              ", wpl " + fmt_list(wpl_mean) + "), max diff lower in " + std::to_string(max_lower) +
              "/5, zero-alpha path " + (identical ? "bit-identical" : "differs") + ", " + fmt(s) + " s"};
}

Outcome determinism_and_formats() {
  const fs::path root = fs::temp_directory_path() / "wpl_acceptance";
  fs::remove_all(root);
  auto config = [&](const std::string& dir) {
    cli::RunConfig cfg;
    cfg.seeds = {0, 1};
    cfg.out_dir = root / dir;
    cfg.data.synthetic.per_class = 100;
    cfg.data.synthetic.val_per_class = 40;
    cfg.plan.epochs_b = 3;
    return cfg;
  };
  std::ostringstream log;
  const int s1 = cli::run(config("a"), log);
  const int s2 = cli::run(config("b"), log);
  bool csv_identical = s1 == 0 && s2 == 0;
  int csvs = 0;
  for (const auto& e : fs::directory_iterator(root / "a")) {
    if (e.path().extension() != ".csv") continue;
    ++csvs;
    csv_identical = csv_identical && slurp(e.path()) == slurp(root / "b" / e.path().filename());
  }
  csv_identical = csv_identical && csvs == 4;

  data::IdxArray idx;
  idx.magic = data::kIdxImagesMagic;
  idx.dims = {2, 3, 3};
  for (int i = 0; i < 18; ++i) idx.bytes.push_back(static_cast<std::uint8_t>(i * 14));
  data::write_idx(root / "fixture.idx", idx);
  const std::string original = slurp(root / "fixture.idx");
  data::write_idx(root / "fixture2.idx", data::read_idx(root / "fixture.idx"));
  const bool idx_ok = original == slurp(root / "fixture2.idx") && original.size() == 4 + 12 + 18;

  ParameterStore store;
  Rng rng(9);
  store.add("w", test::random_tensor(rng, {5, 3}, -1e3, 1e3));
  store.add("edge", Tensor::vector({-0.0, std::numeric_limits<double>::denorm_min(),
                                    std::numeric_limits<double>::max()}));
  store.save(root / "store.bin");
  const ParameterStore back = ParameterStore::load(root / "store.bin");
  bool store_ok = back.size() == store.size();
  for (const auto& [id, v] : store.values()) {
    store_ok = store_ok && back.contains(id) && back.get(id).shape() == v.shape() &&
               std::memcmp(back.get(id).data().data(), v.data().data(), v.size() * sizeof(double)) == 0;
  }
  return {csv_identical && idx_ok && store_ok, std::to_string(csvs) + " CSVs " +
                                                   (csv_identical ? "byte-identical" : "differ") + ", IDX " +
                                                   (idx_ok ? "round-trips" : "differs") + ", parameter store " +
                                                   (store_ok ? "bit-exact" : "differs")};
}

}  // namespace

int main() {
  std::string crossover;
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient correctness", gradient_correctness},
      {"anchor gradient and loss breakdown", wpl_analytic_gradient},
      {"closed-form marginal against grid integration", marginal_oracle},
      {"posterior factorisation", factorization},
      {"Schur complement properties", schur_properties},
      {"Fisher buffer mechanics", fisher_mechanics},
      {"two-model forgetting and its reduction", two_model_forgetting},
      {"shared-proportion sweep", shared_proportion_sweep},
      {"search forgetting with and without the penalty", [&] { return nas_forgetting(crossover); }},
      {"determinism and file formats", determinism_and_formats},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failures += o.pass ? 0 : 1;
    std::cout << "criterion " << i + 1 << " " << (o.pass ? "PASS" : "FAIL") << " " << criteria[i].first << ": "
              << o.detail << std::endl;
  }
  if (!crossover.empty()) std::cout << crossover << std::endl;
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
