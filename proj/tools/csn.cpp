// SPDX-License-Identifier: Apache-2.0
// csn: train, evaluate, benchmark, gradient-check and ablate CSN models.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "csn/diagnostics.hpp"
#include "csn/ops.hpp"
#include "csn/tensor_io.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace csn;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFail = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("config", c.config_path, "run config (key = value lines)")->required();
  cmd->add_option("--set", c.overrides, "override a config key, key=value (repeatable)");
  cmd->add_option("--seed", c.seed, "run seed; falls back to $CSN_SEED, then the config's seed")
      ->envname("CSN_SEED");
}

Config load_config(const Common& c) {
  Config cfg = Config::load(c.config_path);
  for (const auto& kv : c.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (c.seed) cfg.set("seed", std::to_string(*c.seed));
  return cfg;
}

std::uint64_t run_seed(const Config& resolved) {
  const auto s = resolved.get_int("seed");
  if (s < 0) throw ConfigError("config key 'seed': must be non-negative");
  return std::uint64_t(s);
}

// --- train ------------------------------------------------------------------

struct TrainArgs {
  Common common;
  std::string out = "run";
  std::optional<std::size_t> episodes;
  bool no_timing = false;
};

int cmd_train(const TrainArgs& a) {
  Config cfg = load_config(a.common);
  if (a.episodes) cfg.set("train.episodes", std::to_string(*a.episodes));
  const Config r = resolve(cfg);
  const std::uint64_t seed = run_seed(r);
  const ModelSpec spec = model_spec_from_config(r);
  TrainerConfig tc = trainer_config(r, seed);
  tc.record_timing = !a.no_timing;
  const auto source = make_source(r);

  const fs::path out(a.out);
  fs::create_directories(out);
  {
    std::ofstream rc(out / "resolved.config");
    rc << r.to_text({});
  }
  CSNModel model(spec, seed);
  save_model(model, out / "best.model");

  std::ofstream metrics(out / "metrics.jsonl", std::ios::trunc);
  TrainHooks hooks;
  hooks.on_record = [&](const MetricsRecord& rec) { metrics << to_json(rec) << '\n' << std::flush; };
  hooks.on_checkpoint = [&](const CSNModel& m, std::size_t) { save_model(m, out / "best.model"); };
  const TrainResult result = train(model, *source, tc, hooks);
  // Without a validation pass the final parameters are the result.
  if (result.best_val_accuracy < 0.0) save_model(model, out / "best.model");

  nlohmann::ordered_json summary;
  summary["episodes"] = result.episodes;
  summary["best_val_accuracy"] = result.best_val_accuracy < 0.0 ? nlohmann::ordered_json()
                                                                : nlohmann::ordered_json(result.best_val_accuracy);
  summary["best_episode"] = result.best_episode;
  summary["out"] = out.string();
  std::cout << summary.dump() << '\n';
  return kExitOk;
}

// --- eval -------------------------------------------------------------------

struct EvalArgs {
  std::string model_path;
  Common common;
  std::optional<std::size_t> episodes;
  std::string split = "test";
  bool no_timing = false;
};

int cmd_eval(const EvalArgs& a) {
  Config cfg = load_config(a.common);
  if (a.episodes) cfg.set("eval.episodes", std::to_string(*a.episodes));
  const Config r = resolve(cfg);
  std::unique_ptr<CSNModel> model;
  try {
    model = load_model(a.model_path);
  } catch (const LoadError& e) {
    throw ConfigError(std::string("cannot load model: ") + e.what());
  }
  check_model_compatible(model->spec(), model_spec_from_config(r));
  const auto source = make_source(r);
  const EvalReport report = evaluate(*model, *source, parse_split(a.split),
                                     r.get_size("eval.episodes"), episode_shape(r), run_seed(r));
  std::cout << to_json(report, !a.no_timing) << '\n';
  return kExitOk;
}

// --- bench ------------------------------------------------------------------

struct BenchArgs {
  Common common;
  std::string mode = "both";
  std::size_t episodes = 100;
  std::size_t warmup = 10;
};

int cmd_bench(const BenchArgs& a) {
  const Config base = load_config(a.common);
  std::vector<std::string> modes;
  if (a.mode == "both") {
    modes = {"grad", "df"};
  } else if (a.mode == "grad" || a.mode == "df") {
    modes = {a.mode};
  } else {
    throw ConfigError("--mode expects grad, df or both, got '" + a.mode + "'");
  }
  std::printf("%-5s %10s %10s %12s %12s %14s\n", "mode", "median_ms", "p95_ms", "extract_med",
              "extract_p95", "backward/task");
  std::vector<TimingStats> stats;
  for (const auto& mode : modes) {
    Config cfg = base;
    cfg.set("cond.mode", mode);
    const Config r = resolve(cfg);
    const std::uint64_t seed = run_seed(r);
    const CSNModel model(model_spec_from_config(r), seed);
    const auto source = make_source(r);
    // Same episode seeds for every mode: a paired comparison.
    const TimingStats s = bench_episodes(model, *source, episode_shape(r), a.episodes,
                                         derive_seed(seed, 4), a.warmup);
    std::printf("%-5s %10.3f %10.3f %12.3f %12.3f %14.2f\n", mode.c_str(), s.median_ms, s.p95_ms,
                s.median_extract_ms, s.p95_extract_ms, s.extract_backward);
    stats.push_back(s);
  }
  if (stats.size() == 2 && stats[1].median_ms > 0.0) {
    std::printf("grad/df median ratio %.3f\n", stats[0].median_ms / stats[1].median_ms);
  }
  return kExitOk;
}

// --- gradcheck --------------------------------------------------------------

struct GradcheckArgs {
  Common common;
  std::size_t samples = 20;
  double tolerance = 1e-4;
  std::string fault_op;
};

int cmd_gradcheck(const GradcheckArgs& a) {
  const Config r = resolve(load_config(a.common));
  const std::uint64_t seed = run_seed(r);
  if (!a.fault_op.empty()) ops::inject_backward_fault(a.fault_op);

  bool ok = true;
  for (const auto& op : check_primitive_ops(derive_seed(seed, 5))) {
    if (op.max_rel_error >= 1e-5) {
      std::printf("op %-24s %.3e  FAIL\n", op.op.c_str(), op.max_rel_error);
      ok = false;
    }
  }

  CSNModel model(model_spec_from_config(r), seed);
  const auto source = make_source(r);
  const EpisodeShape shape = episode_shape(r);
  Rng rng(derive_seed(seed, 6));
  const Episode ep = sample_episode(*source, Split::Train, shape.ways, shape.shots, shape.queries, rng);
  const PipelineCheck check = check_episode_gradients(model, ep, a.samples, seed);
  for (const auto& g : check.groups) {
    const bool pass = g.result.max_rel_error < a.tolerance;
    std::printf("%-24s %.3e  %s\n", g.group.c_str(), g.result.max_rel_error, pass ? "ok" : "FAIL");
  }
  ok = ok && check.passed(a.tolerance);
  std::printf("worst %s %.3e: %s\n", check.worst_group.c_str(), check.worst, ok ? "PASS" : "FAIL");
  return ok ? kExitOk : kExitFail;
}

// --- ablate -----------------------------------------------------------------

struct AblateArgs {
  Common common;
  std::string grid;
  std::string out;
};

std::vector<std::string> read_grid(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read grid file " + path.string());
  std::vector<std::string> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    std::istringstream words(line);
    std::string word, joined;
    while (words >> word) joined += (joined.empty() ? "" : " ") + word;
    if (!joined.empty()) rows.push_back(joined);
  }
  if (rows.empty()) throw ConfigError("grid file " + path.string() + " lists no combinations");
  return rows;
}

int cmd_ablate(const AblateArgs& a) {
  const Config base = load_config(a.common);
  const auto rows = read_grid(a.grid);
  std::vector<Config> configs;
  for (const auto& row : rows) {
    Config cfg = base;
    std::istringstream words(row);
    std::string kv;
    while (words >> kv) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("grid row '" + row + "': expected key=value");
      cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    configs.push_back(resolve(cfg));
    model_spec_from_config(configs.back());  // reject bad rows before any training
  }

  std::ofstream file;
  if (!a.out.empty()) file.open(a.out, std::ios::trunc);
  std::ostream& csv = a.out.empty() ? std::cout : file;
  csv << "combination,mean,ci95,std,episodes\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const Config& r = configs[i];
    const std::uint64_t seed = run_seed(r);
    CSNModel model(model_spec_from_config(r), seed);
    const auto source = make_source(r);
    TrainerConfig tc = trainer_config(r, seed);
    tc.record_timing = false;
    train(model, *source, tc);
    const EvalReport rep = evaluate(model, *source, Split::Test, r.get_size("eval.episodes"),
                                    episode_shape(r), seed);
    csv << '"' << rows[i] << "\"," << rep.mean << ',' << rep.ci95 << ',' << rep.std << ','
        << rep.episodes << '\n'
        << std::flush;
  }
  return kExitOk;
}

template <typename F>
int guarded(F&& f) {
  try {
    return f();
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const SamplerError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure in " << e.op() << ": " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFail;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Conditionally shifted neurons: meta-learning on few-shot episodes"};
  app.require_subcommand(1);

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "meta-train a model; writes metrics.jsonl, best.model, resolved.config");
  add_common(train_cmd, train_args.common);
  train_cmd->add_option("--out", train_args.out, "output directory")->capture_default_str();
  train_cmd->add_option("--episodes", train_args.episodes, "override train.episodes");
  train_cmd->add_flag("--no-timing", train_args.no_timing,
                      "write zero timing and timestamp fields (byte-comparable metrics)");

  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a saved model; prints a JSON report");
  eval_cmd->add_option("model", eval_args.model_path, "model file")->required();
  add_common(eval_cmd, eval_args.common);
  eval_cmd->add_option("--episodes", eval_args.episodes, "override eval.episodes");
  eval_cmd->add_option("--split", eval_args.split, "train | val | test")->capture_default_str();
  eval_cmd->add_flag("--no-timing", eval_args.no_timing, "report ms_per_episode as 0");

  BenchArgs bench_args;
  auto* bench_cmd = app.add_subcommand("bench", "time describe+predict per task in grad and df modes");
  add_common(bench_cmd, bench_args.common);
  bench_cmd->add_option("--mode", bench_args.mode, "grad | df | both")->capture_default_str();
  bench_cmd->add_option("--episodes", bench_args.episodes, "timed episodes per mode")->capture_default_str();
  bench_cmd->add_option("--warmup", bench_args.warmup, "untimed leading episodes")->capture_default_str();

  GradcheckArgs gc_args;
  auto* gc_cmd = app.add_subcommand("gradcheck", "finite-difference check of episode_loss gradients");
  add_common(gc_cmd, gc_args.common);
  gc_cmd->add_option("--samples", gc_args.samples, "coordinates per parameter")->capture_default_str();
  gc_cmd->add_option("--tolerance", gc_args.tolerance, "pass threshold on relative error")->capture_default_str();
  gc_cmd->add_option("--inject-fault", gc_args.fault_op,
                     "negative control: corrupt the backward rule of this op");

  AblateArgs ab_args;
  auto* ab_cmd = app.add_subcommand("ablate", "train and evaluate every grid row; CSV summary");
  add_common(ab_cmd, ab_args.common);
  ab_cmd->add_option("--grid", ab_args.grid, "grid file: one combination of key=value words per line")
      ->required();
  ab_cmd->add_option("--out", ab_args.out, "CSV path (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  if (*train_cmd) return guarded([&] { return cmd_train(train_args); });
  if (*eval_cmd) return guarded([&] { return cmd_eval(eval_args); });
  if (*bench_cmd) return guarded([&] { return cmd_bench(bench_args); });
  if (*gc_cmd) return guarded([&] { return cmd_gradcheck(gc_args); });
  if (*ab_cmd) return guarded([&] { return cmd_ablate(ab_args); });
  return kExitFail;
}
