#include "wpl/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <map>
#include <mutex>
#include <numbers>
#include <ostream>
#include <set>
#include <thread>

#include "wpl/error.hpp"

#ifndef WPL_VERSION
#define WPL_VERSION "unknown"
#endif

namespace wpl::cli {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

/// Reads keys from one JSON object and rejects any it did not consume.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    used_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where(key) + ": " + e.what());
    }
  }

  const json* child(const char* key) {
    used_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  std::string where(const std::string& key = {}) const {
    const std::string p = path_.empty() ? key : (key.empty() ? path_ : path_ + "." + key);
    return "config key '" + (p.empty() ? std::string("<root>") : p) + "'";
  }

  void finish() const {
    for (const auto& [key, _] : j_.items()) {
      if (!used_.count(key)) throw ConfigError("unknown " + where(key));
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

AlphaSchedule::Kind schedule_from_name(const std::string& s) {
  if (s == "step") return AlphaSchedule::Kind::step;
  if (s == "constant") return AlphaSchedule::Kind::constant;
  if (s == "piecewise") return AlphaSchedule::Kind::piecewise;
  throw ConfigError("unknown alpha schedule '" + s + "'");
}

std::string schedule_name(AlphaSchedule::Kind k) {
  switch (k) {
    case AlphaSchedule::Kind::step:
      return "step";
    case AlphaSchedule::Kind::constant:
      return "constant";
    case AlphaSchedule::Kind::piecewise:
      return "piecewise";
  }
  return "step";
}

void read_wpl(const json& j, const std::string& path, WplConfig& w) {
  Reader r(j, path);
  r.get("lambda", w.lambda);
  r.get("sigma2", w.sigma2);
  r.get("warmup_epochs", w.warmup_epochs);
  if (const json* a = r.child("alpha")) {
    if (a->is_number()) {
      w.alpha.alpha0 = a->get<double>();
    } else {
      Reader ar(*a, path + ".alpha");
      std::string kind = schedule_name(w.alpha.kind);
      ar.get("kind", kind);
      w.alpha.kind = schedule_from_name(kind);
      ar.get("alpha0", w.alpha.alpha0);
      ar.get("decay_factor", w.alpha.decay_factor);
      ar.get("decay_at", w.alpha.decay_at);
      ar.get("total_epochs", w.alpha.total_epochs);
      ar.get("points", w.alpha.points);
      ar.finish();
    }
  }
  r.finish();
}

json wpl_json(const WplConfig& w) {
  return {{"lambda", w.lambda},
          {"sigma2", w.sigma2},
          {"warmup_epochs", w.warmup_epochs},
          {"alpha",
           {{"kind", schedule_name(w.alpha.kind)},
            {"alpha0", w.alpha.alpha0},
            {"decay_factor", w.alpha.decay_factor},
            {"decay_at", w.alpha.decay_at},
            {"total_epochs", w.alpha.total_epochs},
            {"points", w.alpha.points}}}};
}

void read_plan(const json& j, trainer::ExperimentPlan& p) {
  Reader r(j, "two_model");
  r.get("a_hidden", p.a_hidden);
  r.get("b_hidden", p.b_hidden);
  r.get("shared_layers", p.shared_layers);
  std::string act(ad::activation_name(p.activation));
  r.get("activation", act);
  p.activation = ad::activation_from_name(act);
  std::string conv = p.convergence == trainer::Convergence::strict ? "strict" : "loose";
  r.get("convergence", conv);
  if (conv != "strict" && conv != "loose") throw ConfigError("convergence must be 'strict' or 'loose'");
  p.convergence = conv == "strict" ? trainer::Convergence::strict : trainer::Convergence::loose;
  r.get("loose_fraction", p.loose_fraction);
  r.get("learning_rate", p.learning_rate);
  r.get("batch_size", p.batch_size);
  r.get("max_epochs_a", p.max_epochs_a);
  r.get("patience", p.patience);
  r.get("min_delta", p.min_delta);
  r.get("loose_eval_steps", p.loose_eval_steps);
  r.get("epochs_b", p.epochs_b);
  r.get("eval_every_b", p.eval_every_b);
  r.get("fisher_samples", p.fisher_samples);
  r.get("fisher_batch", p.fisher_batch);
  r.get("fisher_on_validation", p.fisher_on_validation);
  if (const json* w = r.child("wpl")) read_wpl(*w, "two_model.wpl", p.wpl);
  r.finish();
}

json plan_json(const trainer::ExperimentPlan& p) {
  return {{"a_hidden", p.a_hidden},
          {"b_hidden", p.b_hidden},
          {"shared_layers", p.shared_layers},
          {"activation", std::string(ad::activation_name(p.activation))},
          {"convergence", p.convergence == trainer::Convergence::strict ? "strict" : "loose"},
          {"loose_fraction", p.loose_fraction},
          {"learning_rate", p.learning_rate},
          {"batch_size", p.batch_size},
          {"max_epochs_a", p.max_epochs_a},
          {"patience", p.patience},
          {"min_delta", p.min_delta},
          {"loose_eval_steps", p.loose_eval_steps},
          {"epochs_b", p.epochs_b},
          {"eval_every_b", p.eval_every_b},
          {"fisher_samples", p.fisher_samples},
          {"fisher_batch", p.fisher_batch},
          {"fisher_on_validation", p.fisher_on_validation},
          {"wpl", wpl_json(p.wpl)}};
}

void read_search(const json& j, nas::SearchConfig& s) {
  Reader r(j, "nas");
  r.get("nodes", s.space.nodes);
  r.get("hidden", s.space.hidden);
  r.get("archs_per_epoch", s.archs_per_epoch);
  r.get("batches_per_arch", s.batches_per_arch);
  r.get("epochs", s.epochs);
  r.get("batch_size", s.batch_size);
  r.get("learning_rate", s.learning_rate);
  r.get("grad_clip", s.grad_clip);
  r.get("fisher_eta", s.fisher_eta);
  r.get("flush_period", s.flush_period);
  r.get("fisher_batch", s.fisher_batch);
  r.get("eval_rows", s.eval_rows);
  r.get("reward_rows", s.reward_rows);
  r.get("controller_lr", s.controller.learning_rate);
  r.get("baseline_decay", s.controller.baseline_decay);
  if (const json* w = r.child("wpl")) read_wpl(*w, "nas.wpl", s.wpl);
  r.finish();
}

json search_json(const nas::SearchConfig& s) {
  return {{"nodes", s.space.nodes},
          {"hidden", s.space.hidden},
          {"archs_per_epoch", s.archs_per_epoch},
          {"batches_per_arch", s.batches_per_arch},
          {"epochs", s.epochs},
          {"batch_size", s.batch_size},
          {"learning_rate", s.learning_rate},
          {"grad_clip", s.grad_clip},
          {"fisher_eta", s.fisher_eta},
          {"flush_period", s.flush_period},
          {"fisher_batch", s.fisher_batch},
          {"eval_rows", s.eval_rows},
          {"reward_rows", s.reward_rows},
          {"controller_lr", s.controller.learning_rate},
          {"baseline_decay", s.controller.baseline_decay},
          {"wpl", wpl_json(s.wpl)}};
}

void read_data(const json& j, DataSource& d) {
  Reader r(j, "data");
  std::string kind = data::kind_name(d.synthetic.kind);
  r.get("kind", kind);
  d.synthetic.kind = data::kind_from_name(kind);
  r.get("classes", d.synthetic.classes);
  r.get("per_class", d.synthetic.per_class);
  r.get("val_per_class", d.synthetic.val_per_class);
  r.get("noise", d.synthetic.noise);
  if (const json* s = r.child("seed"); s && !s->is_null()) d.seed = s->get<std::uint64_t>();
  if (const json* idx = r.child("idx"); idx && !idx->is_null()) {
    Reader ir(*idx, "data.idx");
    IdxPaths p;
    std::string ti, tl, vi, vl;
    ir.get("train_images", ti);
    ir.get("train_labels", tl);
    ir.get("val_images", vi);
    ir.get("val_labels", vl);
    ir.get("train_limit", p.train_limit);
    ir.get("val_limit", p.val_limit);
    ir.finish();
    p.train_images = ti;
    p.train_labels = tl;
    p.val_images = vi;
    p.val_labels = vl;
    d.idx = p;
  }
  r.finish();
}

json data_json(const DataSource& d) {
  json j{{"kind", data::kind_name(d.synthetic.kind)},
         {"classes", d.synthetic.classes},
         {"per_class", d.synthetic.per_class},
         {"val_per_class", d.synthetic.val_per_class},
         {"noise", d.synthetic.noise},
         {"seed", d.seed ? json(*d.seed) : json(nullptr)},
         {"idx", nullptr}};
  if (d.idx) {
    j["idx"] = {{"train_images", d.idx->train_images.string()}, {"train_labels", d.idx->train_labels.string()},
                {"val_images", d.idx->val_images.string()},     {"val_labels", d.idx->val_labels.string()},
                {"train_limit", d.idx->train_limit},            {"val_limit", d.idx->val_limit}};
  }
  return j;
}

void read_laplace(const json& j, LaplaceSuite& s) {
  Reader r(j, "laplace");
  r.get("quadratic_models", s.quadratic_models);
  r.get("thetas_per_model", s.thetas_per_model);
  r.get("log_a_tolerance", s.log_a_tolerance);
  r.get("factorization_tolerance", s.factorization_tolerance);
  r.get("counterexample_threshold", s.counterexample_threshold);
  r.get("quadratic_identity_cases", s.quadratic_identity_cases);
  r.get("identity_tolerance", s.identity_tolerance);
  r.finish();
}

json laplace_json(const LaplaceSuite& s) {
  return {{"quadratic_models", s.quadratic_models},
          {"thetas_per_model", s.thetas_per_model},
          {"log_a_tolerance", s.log_a_tolerance},
          {"factorization_tolerance", s.factorization_tolerance},
          {"counterexample_threshold", s.counterexample_threshold},
          {"quadratic_identity_cases", s.quadratic_identity_cases},
          {"identity_tolerance", s.identity_tolerance}};
}

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::string seed_tag(std::uint64_t seed) { return "seed" + std::to_string(seed); }

/// Collects output names and log lines from concurrent jobs.
class Outputs {
 public:
  Outputs(fs::path dir, std::ostream& log) : dir_(std::move(dir)), log_(log) {}

  fs::path path(const std::string& name) {
    std::lock_guard lock(mu_);
    names_.insert(name);
    return dir_ / name;
  }
  void log(const std::string& line) {
    std::lock_guard lock(mu_);
    log_ << line << '\n' << std::flush;
  }
  std::vector<std::string> names() const {
    std::lock_guard lock(mu_);
    return {names_.begin(), names_.end()};
  }

 private:
  fs::path dir_;
  std::ostream& log_;
  mutable std::mutex mu_;
  std::set<std::string> names_;
};

json summarize_two_model(const RunConfig& cfg, const std::vector<std::optional<trainer::TwoModelResult>>& results,
                         const std::vector<std::optional<trainer::ModelAResult>>& a_only,
                         const std::vector<std::optional<trainer::ForgettingRun>>& plain_only) {
  json seeds = json::array();
  std::vector<double> d_plain, d_wpl, reductions;
  for (std::size_t i = 0; i < cfg.seeds.size(); ++i) {
    json s{{"seed", cfg.seeds[i]}};
    if (results[i]) {
      const auto& r = *results[i];
      s["baseline_acc_a"] = r.model_a.baseline_accuracy;
      s["strict_acc_a"] = optional_json(r.model_a.strict_accuracy);
      s["epochs_a"] = r.model_a.epochs;
      s["d_plain"] = r.plain.d;
      s["d_wpl"] = r.wpl.d;
      s["final_acc_b_plain"] = r.plain.trajectory.back().acc_b;
      s["final_acc_b_wpl"] = r.wpl.trajectory.back().acc_b;
      s["reduction_rate"] = r.reduction ? json(*r.reduction) : json("not applicable");
      d_plain.push_back(r.plain.d);
      d_wpl.push_back(r.wpl.d);
      if (r.reduction) reductions.push_back(*r.reduction);
    } else if (a_only[i] && plain_only[i]) {
      s["baseline_acc_a"] = a_only[i]->baseline_accuracy;
      s["strict_acc_a"] = optional_json(a_only[i]->strict_accuracy);
      s["epochs_a"] = a_only[i]->epochs;
      s["d_plain"] = plain_only[i]->d;
      s["final_acc_b_plain"] = plain_only[i]->trajectory.back().acc_b;
      d_plain.push_back(plain_only[i]->d);
    } else {
      s["failed"] = true;
    }
    seeds.push_back(s);
  }
  json out{{"command", "two-model"}, {"seeds", seeds}};
  out["median_d_plain"] = d_plain.empty() ? json(nullptr) : json(median(d_plain));
  out["median_d_wpl"] = d_wpl.empty() ? json(nullptr) : json(median(d_wpl));
  out["median_reduction_rate"] = reductions.empty() ? json(nullptr) : json(median(reductions));
  return out;
}

int run_two_model(const RunConfig& cfg, Outputs& out, std::vector<std::string>& errors, unsigned workers) {
  const std::size_t n = cfg.seeds.size();
  std::vector<std::optional<trainer::TwoModelResult>> results(n);
  std::vector<std::optional<trainer::ModelAResult>> a_only(n);
  std::vector<std::optional<trainer::ForgettingRun>> plain_only(n);
  std::vector<std::function<void()>> jobs;
  for (std::size_t i = 0; i < n; ++i) {
    jobs.emplace_back([&, i] {
      const auto seed = cfg.seeds[i];
      const data::Dataset ds = load_dataset(cfg.data, seed);
      trainer::ExperimentPlan plan = cfg.plan;
      plan.seed = seed;
      if (cfg.use_wpl) {
        results[i] = trainer::run_two_model(plan, ds);
        write_run_csv(out.path("two_model_" + seed_tag(seed) + "_plain.csv"), results[i]->plain);
        write_run_csv(out.path("two_model_" + seed_tag(seed) + "_wpl.csv"), results[i]->wpl);
        out.log("two-model " + seed_tag(seed) + ": d_plain=" + format_double(results[i]->plain.d) +
                " d_wpl=" + format_double(results[i]->wpl.d));
      } else {
        trainer::TwoModelSetup setup(plan, ds);
        a_only[i] = trainer::train_model_a(plan, setup);
        plain_only[i] = trainer::train_model_b(plan, setup, *a_only[i], false);
        write_run_csv(out.path("two_model_" + seed_tag(seed) + "_plain.csv"), *plain_only[i]);
        out.log("two-model " + seed_tag(seed) + ": d_plain=" + format_double(plain_only[i]->d));
      }
    });
  }
  errors = run_jobs(jobs, workers);
  write_json(out.path("summary.json"), summarize_two_model(cfg, results, a_only, plain_only));
  return errors.empty() ? 0 : 1;
}

int run_sweep(const RunConfig& cfg, Outputs& out, std::vector<std::string>& errors, unsigned workers) {
  const std::size_t n = cfg.seeds.size();
  std::vector<std::optional<std::vector<trainer::SweepEntry>>> results(n);
  std::vector<std::function<void()>> jobs;
  for (std::size_t i = 0; i < n; ++i) {
    jobs.emplace_back([&, i] {
      const auto seed = cfg.seeds[i];
      const data::Dataset ds = load_dataset(cfg.data, seed);
      trainer::ExperimentPlan plan = cfg.plan;
      plan.seed = seed;
      results[i] = trainer::shared_proportion_sweep(plan, ds, cfg.sweep_counts);
      for (const auto& e : *results[i]) {
        write_run_csv(out.path("sweep_" + seed_tag(seed) + "_shared" + std::to_string(e.shared_layers) + ".csv"),
                      e.run);
      }
      out.log("sweep " + seed_tag(seed) + " done");
    });
  }
  errors = run_jobs(jobs, workers);

  std::ofstream table(out.path("sweep.csv"));
  table << "seed,shared_layers,d,a_unchanged\n";
  std::map<int, std::vector<double>> by_count;
  for (std::size_t i = 0; i < n; ++i) {
    if (!results[i]) continue;
    for (const auto& e : *results[i]) {
      table << cfg.seeds[i] << ',' << e.shared_layers << ',' << format_double(e.run.d) << ','
            << (e.a_unchanged ? 1 : 0) << '\n';
      by_count[e.shared_layers].push_back(e.run.d);
    }
  }
  json medians = json::array();
  std::vector<double> med;
  for (int c : cfg.sweep_counts) {
    if (!by_count.count(c)) continue;
    med.push_back(median(by_count[c]));
    medians.push_back({{"shared_layers", c}, {"median_d", med.back()}});
  }
  const bool nondecreasing = std::is_sorted(med.begin(), med.end());
  write_json(out.path("summary.json"),
             {{"command", "sweep"}, {"median_d", medians}, {"median_d_nondecreasing", nondecreasing}});
  return errors.empty() ? 0 : 1;
}

struct NasSeedSummary {
  double post_mean_diff = 0.0;
  double post_max_diff = 0.0;
};

NasSeedSummary summarize_search(const nas::SearchResult& r, int warmup) {
  NasSeedSummary s;
  int count = 0;
  for (const auto& e : r.epochs) {
    if (e.epoch < warmup) continue;
    s.post_mean_diff += e.stats.mean_diff;
    s.post_max_diff += e.stats.max_diff;
    ++count;
  }
  if (count > 0) {
    s.post_mean_diff /= count;
    s.post_max_diff /= count;
  }
  return s;
}

int run_nas(const RunConfig& cfg, Outputs& out, std::vector<std::string>& errors, unsigned workers) {
  const std::size_t n = cfg.seeds.size();
  std::vector<bool> variants{false};
  if (cfg.use_wpl) variants.push_back(true);
  std::vector<std::vector<std::optional<nas::SearchResult>>> results(n, std::vector<std::optional<nas::SearchResult>>(2));
  std::vector<std::function<void()>> jobs;
  for (std::size_t i = 0; i < n; ++i) {
    for (bool wpl : variants) {
      jobs.emplace_back([&, i, wpl] {
        const auto seed = cfg.seeds[i];
        const data::Dataset ds = load_dataset(cfg.data, seed);
        nas::SearchConfig sc = cfg.search;
        sc.seed = seed;
        sc.use_wpl = wpl;
        auto& slot = results[i][wpl ? 1 : 0];
        slot = nas::search(sc, ds);
        const std::string tag = "nas_" + seed_tag(seed) + (wpl ? "_wpl" : "_plain");
        write_nas_csv(out.path(tag + ".csv"), *slot);
        json best{{"decisions", slot->best.decisions()},
                  {"description", slot->best.to_string()},
                  {"validation_accuracy", slot->best_accuracy},
                  {"seed", seed},
                  {"use_wpl", wpl}};
        write_json(out.path(tag + "_best.json"), best);
        out.log(tag + ": best accuracy " + format_double(slot->best_accuracy));
      });
    }
  }
  errors = run_jobs(jobs, workers);

  const int warmup = cfg.search.wpl.warmup_epochs;
  json seeds = json::array();
  int mean_lower = 0, max_lower = 0, paired = 0;
  std::vector<std::vector<double>> rewards(2);
  for (std::size_t i = 0; i < n; ++i) {
    json s{{"seed", cfg.seeds[i]}};
    std::optional<NasSeedSummary> sum[2];
    for (int v = 0; v < 2; ++v) {
      if (!results[i][static_cast<std::size_t>(v)]) continue;
      const auto& r = *results[i][static_cast<std::size_t>(v)];
      sum[v] = summarize_search(r, warmup);
      const char* name = v ? "wpl" : "plain";
      s[name] = {{"post_warmup_mean_diff", sum[v]->post_mean_diff},
                 {"post_warmup_max_diff", sum[v]->post_max_diff},
                 {"reward_trace", r.reward_trace},
                 {"best_accuracy", r.best_accuracy}};
    }
    if (sum[0] && sum[1]) {
      ++paired;
      mean_lower += sum[1]->post_mean_diff < sum[0]->post_mean_diff ? 1 : 0;
      max_lower += sum[1]->post_max_diff < sum[0]->post_max_diff ? 1 : 0;
    }
    seeds.push_back(s);
  }

  // Median reward per epoch across seeds for each variant, then half averages.
  json crossover = nullptr;
  if (paired > 0) {
    std::vector<double> diff;
    for (int e = 0; e < cfg.search.epochs; ++e) {
      std::vector<double> p, w;
      for (std::size_t i = 0; i < n; ++i) {
        if (!results[i][0] || !results[i][1]) continue;
        p.push_back(results[i][0]->reward_trace[static_cast<std::size_t>(e)]);
        w.push_back(results[i][1]->reward_trace[static_cast<std::size_t>(e)]);
      }
      diff.push_back(median(w) - median(p));
    }
    const std::size_t half = diff.size() / 2;
    double first = 0.0, second = 0.0;
    for (std::size_t e = 0; e < diff.size(); ++e) (e < half ? first : second) += diff[e];
    first /= static_cast<double>(std::max<std::size_t>(half, 1));
    second /= static_cast<double>(std::max<std::size_t>(diff.size() - half, 1));
    crossover = {{"median_reward_diff_wpl_minus_plain", diff},
                 {"first_half_mean", first},
                 {"second_half_mean", second},
                 {"lower_early_higher_late", first < 0.0 && second > 0.0}};
  }
  write_json(out.path("summary.json"), {{"command", "nas"},
                                        {"seeds", seeds},
                                        {"paired_seeds", paired},
                                        {"seeds_mean_diff_lower_with_wpl", mean_lower},
                                        {"seeds_max_diff_lower_with_wpl", max_lower},
                                        {"reward_crossover", crossover}});
  return errors.empty() ? 0 : 1;
}

int run_laplace(const RunConfig& cfg, Outputs& out, std::vector<std::string>& errors, unsigned workers) {
  std::vector<std::optional<LaplaceReport>> reports(cfg.seeds.size());
  std::vector<std::function<void()>> jobs;
  for (std::size_t i = 0; i < cfg.seeds.size(); ++i) {
    jobs.emplace_back([&, i] {
      reports[i] = verify_laplace(cfg.laplace, cfg.seeds[i]);
      write_json(out.path("laplace_" + seed_tag(cfg.seeds[i]) + ".json"), reports[i]->to_json());
      out.log("verify-laplace " + seed_tag(cfg.seeds[i]) + (reports[i]->passed ? ": pass" : ": FAIL"));
    });
  }
  errors = run_jobs(jobs, workers);
  bool all = errors.empty();
  for (const auto& r : reports) all = all && r && r->passed;
  return all ? 0 : 1;
}

std::string utc_timestamp() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

std::string command_name(Command c) {
  switch (c) {
    case Command::two_model:
      return "two-model";
    case Command::sweep:
      return "sweep";
    case Command::nas:
      return "nas";
    case Command::verify_laplace:
      return "verify-laplace";
  }
  return "two-model";
}

Command command_from_name(const std::string& name) {
  for (Command c : {Command::two_model, Command::sweep, Command::nas, Command::verify_laplace}) {
    if (command_name(c) == name) return c;
  }
  throw ConfigError("unknown command '" + name + "'");
}

RunConfig parse_config(const json& j) {
  RunConfig cfg;
  Reader r(j, "");
  std::string command = command_name(cfg.command);
  r.get("command", command);
  cfg.command = command_from_name(command);
  r.get("seeds", cfg.seeds);
  std::string out = cfg.out_dir.string();
  r.get("out", out);
  cfg.out_dir = out;
  r.get("use_wpl", cfg.use_wpl);
  if (const json* d = r.child("data")) read_data(*d, cfg.data);
  if (const json* p = r.child("two_model")) read_plan(*p, cfg.plan);
  if (const json* s = r.child("sweep")) {
    Reader sr(*s, "sweep");
    sr.get("counts", cfg.sweep_counts);
    sr.finish();
  }
  if (const json* s = r.child("nas")) read_search(*s, cfg.search);
  if (const json* l = r.child("laplace")) read_laplace(*l, cfg.laplace);
  r.finish();
  return cfg;
}

RunConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path.string() + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return parse_config(j);
}

json to_json(const RunConfig& cfg) {
  return {{"command", command_name(cfg.command)},
          {"seeds", cfg.seeds},
          {"out", cfg.out_dir.string()},
          {"use_wpl", cfg.use_wpl},
          {"data", data_json(cfg.data)},
          {"two_model", plan_json(cfg.plan)},
          {"sweep", {{"counts", cfg.sweep_counts}}},
          {"nas", search_json(cfg.search)},
          {"laplace", laplace_json(cfg.laplace)}};
}

void validate(const RunConfig& cfg) {
  if (cfg.seeds.empty()) throw ConfigError("seeds must not be empty");
  if (cfg.data.idx) {
    for (const auto* p : {&cfg.data.idx->train_images, &cfg.data.idx->train_labels, &cfg.data.idx->val_images,
                          &cfg.data.idx->val_labels}) {
      if (!fs::exists(*p)) throw ConfigError("data file '" + p->string() + "' does not exist");
    }
  }
  validate(cfg.plan.wpl);
  validate(cfg.search.wpl);
  if (cfg.command == Command::sweep && cfg.sweep_counts.empty()) throw ConfigError("sweep counts must not be empty");
  if (cfg.laplace.quadratic_models < 1 || cfg.laplace.thetas_per_model < 1) {
    throw ConfigError("laplace suite needs at least one model and one theta");
  }
}

data::Dataset load_dataset(const DataSource& source, std::uint64_t run_seed) {
  data::Dataset ds;
  if (source.idx) {
    const auto& p = *source.idx;
    ds.train = data::load_idx(p.train_images, p.train_labels);
    ds.validation = data::load_idx(p.val_images, p.val_labels);
    if (p.train_limit) ds.train = data::head(ds.train, p.train_limit);
    if (p.val_limit) ds.validation = data::head(ds.validation, p.val_limit);
    int max_label = 0;
    for (int y : ds.train.y) max_label = std::max(max_label, y);
    for (int y : ds.validation.y) max_label = std::max(max_label, y);
    ds.num_classes = max_label + 1;
  } else {
    ds = data::make_synthetic(source.synthetic, source.seed.value_or(run_seed));
  }
  data::validate(ds);
  return ds;
}

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  // The C locale is never changed, but guard against a foreign decimal separator.
  for (char* c = buf; *c; ++c) {
    if (*c == ',') *c = '.';
  }
  return buf;
}

void write_run_csv(const fs::path& path, const trainer::ForgettingRun& run) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out << "step,acc_A,acc_B,loss_total,loss_task,loss_l2,loss_anchor,alpha,epoch\n";
  for (const auto& p : run.trajectory) {
    out << p.step << ',' << format_double(p.acc_a) << ',' << format_double(p.acc_b) << ','
        << format_double(p.loss.total) << ',' << format_double(p.loss.task_loss) << ','
        << format_double(p.loss.l2_term) << ',' << format_double(p.loss.anchor_term) << ','
        << format_double(p.alpha) << ',' << format_double(p.epoch) << '\n';
  }
}

void write_nas_csv(const fs::path& path, const nas::SearchResult& result) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out << "epoch,mean_diff,top5_diff,max_diff,mean_reward,alpha,fisher_flushed\n";
  for (const auto& e : result.epochs) {
    out << e.epoch << ',' << format_double(e.stats.mean_diff) << ',' << format_double(e.stats.top5_diff) << ','
        << format_double(e.stats.max_diff) << ',' << format_double(e.mean_reward) << ',' << format_double(e.alpha)
        << ',' << (e.fisher_flushed ? 1 : 0) << '\n';
  }
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out << j.dump(2) << '\n';
}

double median(std::vector<double> values) {
  if (values.empty()) throw ConfigError("median of an empty sample");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

laplace::LaplaceModel random_quadratic_model(Rng& rng, int p1, int ps) {
  const int p = p1 + ps;
  laplace::Matrix a(p, p);
  for (int i = 0; i < p; ++i) {
    for (int k = 0; k < p; ++k) a(i, k) = rng.normal();
  }
  const laplace::Matrix q = a.transpose() * a / p + 0.5 * laplace::Matrix::Identity(p, p);
  laplace::Vector mean(p);
  for (int i = 0; i < p; ++i) mean[i] = rng.normal();
  const double offset = rng.normal();
  const double sigma2 = rng.uniform(0.5, 2.0);
  return laplace::make_quadratic_model(0.5 * (q + q.transpose()), mean, offset, sigma2, p1);
}

json LaplaceReport::to_json() const {
  return {{"marginal_log_a_max_error", max_log_a_error},
          {"marginal_log_a_cases", log_a_cases},
          {"quadratic_identity_max_error", max_identity_error},
          {"factorization_deviation", factorization_deviation},
          {"counterexample_deviation", counterexample_deviation},
          {"passed", passed}};
}

LaplaceReport verify_laplace(const LaplaceSuite& suite, std::uint64_t seed) {
  using laplace::Matrix;
  using laplace::Vector;
  LaplaceReport rep;
  Rng rng(seed);

  // Marginal over the private block: closed form against grid integration.
  const std::vector<std::pair<int, int>> shapes{{1, 1}, {1, 2}, {2, 1}, {2, 2}, {3, 1}, {3, 2}};
  for (int m = 0; m < suite.quadratic_models; ++m) {
    const auto [p1, ps] = shapes[static_cast<std::size_t>(m) % shapes.size()];
    const auto model = random_quadratic_model(rng, p1, ps);
    laplace::check_stationary(model);
    const auto blocks = laplace::BlockHessian::partition(laplace::negative_hessian_lp(model), p1);
    // The trapezoid rule is spectrally accurate for these integrands, so
    // coarser grids suffice in higher dimensions.
    laplace::GridSpec grid{12.0, p1 == 1 ? 2000 : (p1 == 2 ? 400 : 100), 1e-12};
    for (int t = 0; t < suite.thetas_per_model; ++t) {
      Vector ts = model.mle.tail(ps);
      for (int i = 0; i < ps; ++i) ts[i] += 0.5 * rng.normal();
      const double err = std::abs(laplace::closed_form_log_a(model, blocks, ts) -
                                  laplace::brute_force_log_a(model, ts, grid));
      rep.max_log_a_error = std::max(rep.max_log_a_error, err);
      ++rep.log_a_cases;
    }
  }

  // Completing the square in the private block.
  for (int c = 0; c < suite.quadratic_identity_cases; ++c) {
    const int p1 = 1 + static_cast<int>(rng.index(4));
    const int ps = 1 + static_cast<int>(rng.index(3));
    const int p = p1 + ps;
    Matrix a(p, p);
    for (int i = 0; i < p; ++i) {
      for (int k = 0; k < p; ++k) a(i, k) = rng.normal();
    }
    const Matrix h = a.transpose() * a + 0.1 * Matrix::Identity(p, p);
    const auto blocks = laplace::BlockHessian::partition(0.5 * (h + h.transpose()), p1);
    Vector u(p1), v(ps);
    for (int i = 0; i < p1; ++i) u[i] = rng.normal();
    for (int i = 0; i < ps; ++i) v[i] = rng.normal();
    const double direct = laplace::quadratic_form(blocks, u, v);
    const double completed = laplace::completed_square_form(blocks, u, v);
    rep.max_identity_error =
        std::max(rep.max_identity_error, std::abs(direct - completed) / std::max(1.0, std::abs(direct)));
  }

  // Factorisation of the joint posterior on a tiny model, and a coupled counterexample.
  auto log_sigmoid = [](double z) { return z >= 0 ? -std::log1p(std::exp(-z)) : z - std::log1p(std::exp(z)); };
  laplace::PairModel pair;
  pair.p1 = 1;
  pair.p2 = 1;
  pair.ps = 2;
  pair.sigma2 = 1.0;
  pair.log_likelihood = [&](const Vector& t1, const Vector& t2, const Vector& ts) {
    const double a = t1[0] - 0.7 * ts[0];
    const double b = t2[0] + 0.4 * ts[1];
    return -0.5 * 1.5 * a * a + log_sigmoid(t1[0] + ts[1]) - 0.5 * 0.8 * b * b + log_sigmoid(0.5 * ts[0] - t2[0]);
  };
  laplace::FactorizationGrid fgrid;
  rep.factorization_deviation = laplace::verify_factorization(pair, fgrid).deviation;
  laplace::PairModel coupled = pair;
  coupled.log_likelihood = [&](const Vector& t1, const Vector& t2, const Vector& ts) {
    return pair.log_likelihood(t1, t2, ts) + 0.8 * t1[0] * t2[0];
  };
  rep.counterexample_deviation = laplace::verify_factorization(coupled, fgrid).deviation;

  rep.passed = rep.max_log_a_error <= suite.log_a_tolerance && rep.max_identity_error <= suite.identity_tolerance &&
               rep.factorization_deviation <= suite.factorization_tolerance &&
               rep.counterexample_deviation > suite.counterexample_threshold;
  return rep;
}

unsigned worker_count() {
  if (const char* env = std::getenv("WPL_LAB_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<unsigned>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

std::vector<std::string> run_jobs(const std::vector<std::function<void()>>& jobs, unsigned workers) {
  std::vector<std::string> errors;
  std::mutex mu;
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < jobs.size();) {
      try {
        jobs[i]();
      } catch (const std::exception& e) {
        std::lock_guard lock(mu);
        errors.push_back("job " + std::to_string(i) + ": " + e.what());
      }
    }
  };
  const auto count = std::min<std::size_t>(std::max(1u, workers), jobs.size());
  if (count <= 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (std::size_t t = 0; t < count; ++t) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }
  std::sort(errors.begin(), errors.end());
  return errors;
}

int run(const RunConfig& cfg, std::ostream& log) {
  validate(cfg);
  fs::create_directories(cfg.out_dir);
  const auto start = std::chrono::steady_clock::now();
  const std::string started = utc_timestamp();
  Outputs out(cfg.out_dir, log);
  std::vector<std::string> errors;
  const unsigned workers = worker_count();
  int status = 0;
  switch (cfg.command) {
    case Command::two_model:
      status = run_two_model(cfg, out, errors, workers);
      break;
    case Command::sweep:
      status = run_sweep(cfg, out, errors, workers);
      break;
    case Command::nas:
      status = run_nas(cfg, out, errors, workers);
      break;
    case Command::verify_laplace:
      status = run_laplace(cfg, out, errors, workers);
      break;
  }
  for (const auto& e : errors) log << "error: " << e << '\n';
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  write_json(cfg.out_dir / "manifest.json", {{"tool", "wpl-lab"},
                                             {"version", WPL_VERSION},
                                             {"command", command_name(cfg.command)},
                                             {"config", to_json(cfg)},
                                             {"started_at", started},
                                             {"wall_clock_seconds", seconds},
                                             {"workers", workers},
                                             {"outputs", out.names()},
                                             {"partial", !errors.empty()},
                                             {"errors", errors},
                                             {"exit_status", status}});
  return status;
}

}  // namespace wpl::cli
