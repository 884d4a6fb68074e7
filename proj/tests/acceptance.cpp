// SPDX-License-Identifier: Apache-2.0
// Acceptance suite: one PASS/FAIL line per criterion, exit status 0 iff all pass.
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "csn/diagnostics.hpp"
#include "csn/glyphs.hpp"

using namespace csn;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;
  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << "[failed: " << what << "] ";
    }
  }
};

fs::path g_glyphs;
bool g_verbose = false;

void note(const std::string& s) {
  if (g_verbose) std::fprintf(stderr, "  %s\n", s.c_str());
}

Config cfg(const std::string& text) {
  Config c = Config::parse(text);
  if (!g_glyphs.empty()) c.set("data.omniglot.dir", g_glyphs.string());
  return resolve(c);
}

std::string with(std::string base, const std::string& extra) { return base + "\n" + extra + "\n"; }

struct RunResult {
  EvalReport report;
  double seconds = 0.0;
};

/// Trains from scratch under `text` and evaluates on 400 test episodes.
RunResult train_eval(const std::string& text, std::size_t eval_queries = 0) {
  const auto t0 = std::chrono::steady_clock::now();
  const Config r = cfg(text);
  const std::uint64_t seed = std::uint64_t(r.get_int("seed"));
  const auto source = make_source(r);
  CSNModel model(model_spec_from_config(r), seed);
  TrainerConfig tc = trainer_config(r, seed);
  tc.record_timing = false;
  train(model, *source, tc);
  EpisodeShape shape = episode_shape(r);
  if (eval_queries != 0) shape.queries = eval_queries;
  RunResult out;
  out.report = evaluate(model, *source, Split::Test, 400, shape, derive_seed(seed, 0xE7));
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::string oneline = text;
  std::replace(oneline.begin(), oneline.end(), '\n', ' ');
  note(oneline + "=> " + to_json(out.report, false) + " in " + std::to_string(out.seconds) + " s");
  return out;
}

double standard_error(const EvalReport& r) { return r.std / std::sqrt(double(r.episodes)); }

/// A is at least B at the 95% level: the difference is not significantly negative.
bool not_worse(const EvalReport& a, const EvalReport& b) {
  const double se = std::hypot(standard_error(a), standard_error(b));
  return a.mean - b.mean >= -1.96 * se;
}

// Small architectures for the gradient oracle and the exactness properties.
const char* const kSmallFFN = "model.hidden = 16,16";
const char* const kSmallCNN =
    "data.source = omniglot\ndata.omniglot.image_size = 8\nmodel.arch = adacnn\nmodel.filters = 4\n"
    "model.conv_layers = 2";
const char* const kOneResBlock =
    "data.source = omniglot\ndata.omniglot.image_size = 8\nmodel.arch = adaresnet\nmodel.res_filters = 8\n"
    "model.res_divisor = 1\nmodel.hidden = none";
const char* const kSmallLSTM =
    "data.source = cloze\ndata.cloze.length = 3\nmodel.arch = adalstm\nmodel.lstm_hidden = 16\n"
    "model.embed_dim = 8";
const char* const kSmallLSTMFFN =
    "data.source = cloze\ndata.cloze.length = 3\nmodel.arch = lstm_adaffn\nmodel.lstm_hidden = 16\n"
    "model.embed_dim = 8\nmodel.hidden = 16";

const std::vector<std::pair<std::string, std::string>>& architectures() {
  static const std::vector<std::pair<std::string, std::string>> a = {
      {"adaffn", kSmallFFN},   {"adacnn", kSmallCNN},       {"adaresnet", kOneResBlock},
      {"adalstm", kSmallLSTM}, {"lstm_adaffn", kSmallLSTMFFN}};
  return a;
}

Episode sample(const Config& r, const TaskSource& source, std::uint64_t seed, Split split = Split::Train) {
  const EpisodeShape s = episode_shape(r);
  Rng rng(seed);
  return sample_episode(source, split, s.ways, s.shots, s.queries, rng);
}

// 1. Gradient oracle over architectures, conditioning and attention modes.
void criterion1(Outcome& o) {
  const char* const modes[] = {
      "cond.mode = grad\nmemory.attention = soft", "cond.mode = grad\nmemory.attention = hard",
      "cond.mode = df\nmemory.attention = soft",   "cond.mode = df\nmemory.attention = hard",
      "cond.mode = df\ncond.stop_grad = false",
  };
  constexpr std::uint64_t kSeed = 1;
  double worst = 0.0;
  std::string worst_at;
  for (const auto& [name, arch] : architectures()) {
    if (name == "lstm_adaffn") continue;
    for (const char* mode : modes) {
      const Config r = cfg(with(with(arch, mode), "episode.queries = 5\nmemory.key_dim = 16\nmemory.key_hidden = 16\n"
                                                  "seed = 1"));
      const auto source = make_source(r);
      CSNModel model(model_spec_from_config(r), kSeed);
      const PipelineCheck check = check_episode_gradients(model, sample(r, *source, kSeed), 20, kSeed);
      std::string m(mode);
      std::replace(m.begin(), m.end(), '\n', ' ');
      note(name + " [" + m + "] worst " + check.worst_group + " " + std::to_string(check.worst));
      if (check.worst > worst) {
        worst = check.worst;
        worst_at = name + " [" + m + "] " + check.worst_group;
      }
      o.require(check.passed(1e-4), name + " [" + m + "]");
    }
  }
  for (const auto& op : check_primitive_ops(kSeed)) o.require(op.max_rel_error < 1e-5, "op " + op.op);
  o.detail << "20 configurations, worst rel. error " << worst << " at " << worst_at;
}

// 2. Zero value output reduces every architecture to the unadapted network.
void criterion2(Outcome& o) {
  double worst = 0.0;
  std::size_t runs = 0;
  for (const auto& [name, arch] : architectures()) {
    for (const char* shift : {"normalized", "raw_additive", "pre_activation"}) {
      for (const char* cond : {"grad", "df"}) {
        const Config r = cfg(with(arch, std::string("ablation.shift_mode = ") + shift + "\ncond.mode = " + cond));
        const auto source = make_source(r);
        CSNModel model(model_spec_from_config(r), 5);
        for (Parameter* p : model.value_function()->output_parameters()) {
          for (double& v : p->value.data()) v = 0.0;
        }
        for (std::uint64_t e = 0; e < 5; ++e) {
          const Episode ep = sample(r, *source, e, Split::Test);
          const Tensor adapted = model.predict(ep.support_x, ep.support_y, ep.query_x);
          Tape tape(TapeOptions{.track_params = false});
          const Tensor plain = ops::softmax(model.predict_logits(tape, nullptr, ep.query_x)).value();
          worst = std::max(worst, max_abs_diff(adapted, plain));
          ++runs;
        }
      }
    }
  }
  o.require(worst <= 1e-12, "divergence above 1e-12");
  o.detail << runs << " episodes over 5 architectures x 3 shift modes x 2 conditioning modes, max divergence "
           << worst;
}

// 3. Preprocessing continuity and boundedness.
void criterion3(Outcome& o) {
  const double p = 7.0, edge = std::exp(-p);
  double gap = 0.0;
  for (double sign : {1.0, -1.0}) {
    const double g = sign * edge;
    const auto at = preprocess_gradient(g, p);
    const std::pair<double, double> large{std::log(std::abs(g)) / p, sign};
    const std::pair<double, double> small{-1.0, std::exp(p) * g};
    for (const auto& branch : {large, small}) {
      gap = std::max({gap, std::abs(at.first - branch.first), std::abs(at.second - branch.second)});
    }
    gap = std::max({gap, std::abs(large.first - small.first), std::abs(large.second - small.second)});
    // Just below and above the edge.
    const auto below = preprocess_gradient(std::nextafter(g, 0.0), p);
    gap = std::max({gap, std::abs(below.first - at.first), std::abs(below.second - at.second)});
  }
  o.require(gap <= 1e-12, "branches disagree at the boundary");

  Rng rng(3);
  std::size_t large_branch = 0, violations = 0;
  for (int i = 0; i < 1'000'000; ++i) {
    const double g = (rng.bernoulli(0.5) ? 1.0 : -1.0) * std::exp(rng.uniform(-12.0, 12.0));
    const auto [a, b] = preprocess_gradient(g, p);
    if (!std::isfinite(a) || !std::isfinite(b)) ++violations;
    if (std::abs(g) >= edge) {
      ++large_branch;
      if (b < -1.0 || b > 1.0) ++violations;
    } else if (a != -1.0) {
      ++violations;
    }
  }
  o.require(violations == 0, std::to_string(violations) + " out-of-range values");
  o.detail << "boundary gap " << gap << "; " << large_branch << " of 1e6 inputs on the large branch, "
           << violations << " violations";
}

// 4. Direct feedback at the output layer equals the backpropagated gradient.
void criterion4(Outcome& o) {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Config r = cfg("model.hidden = none");
    const auto source = make_source(r);
    CSNModel model(model_spec_from_config(r), seed);
    const Episode ep = sample(r, *source, seed);
    const ConditioningInfo df = extract_df_info(model.network(), ep.support_x, ep.support_y);
    const std::size_t c = model.spec().net.classes;
    for (std::size_t i = 0; i < ep.support_x.dim(0); ++i) {
      Tape tape;
      const NetForward f = model.network().forward(tape, ep.support_x.slice_rows(i, i + 1));
      tape.backward(ops::cross_entropy(ops::softmax(f.logits), tape.constant(ep.support_y.slice_rows(i, i + 1))));
      const Tensor grad = tape.grad(f.preacts.back());
      for (std::size_t unit = 0; unit < c; ++unit) {
        for (std::size_t k = 0; k < c; ++k) {
          worst = std::max(worst, std::abs(df.values[(i * df.width + unit) * c + k] - grad[k]));
        }
      }
    }
  }
  o.require(worst <= 1e-10, "DF differs from the tape gradient");
  o.detail << "20 softmax classifiers x 5 examples, max |DF - dL/da_T| = " << worst;
}

// 5. Permuting the description changes no prediction.
void criterion5(Outcome& o) {
  double worst = 0.0;
  for (const auto& [name, arch] : architectures()) {
    for (const char* att : {"soft", "hard"}) {
      const Config r = cfg(with(arch, std::string("memory.attention = ") + att + "\nepisode.shots = 2"));
      const auto source = make_source(r);
      const CSNModel model(model_spec_from_config(r), 9);
      Rng rng(17);
      for (int trial = 0; trial < 100; ++trial) {
        const Episode ep = sample(r, *source, derive_seed(17, std::uint64_t(trial)), Split::Test);
        std::vector<std::size_t> perm(ep.support_x.dim(0));
        for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
        rng.shuffle(perm);
        const Tensor a = model.predict(ep.support_x, ep.support_y, ep.query_x);
        const Tensor b = model.predict(ep.support_x.gather_rows(perm), ep.support_y.gather_rows(perm), ep.query_x);
        worst = std::max(worst, max_abs_diff(a, b));
      }
    }
  }
  o.require(worst <= 1e-9, "prediction moved under permutation");
  o.detail << "100 trials x 5 architectures x 2 attention modes, max change " << worst;
}

// 6. Gaussian source: adaFFN with direct feedback learns, the control cannot.
void criterion6(Outcome& o) {
  const std::string base =
      "data.source = gaussian\nepisode.queries = 75\ntrain.episodes = 2000\ntrain.val_interval = 400\n"
      "train.val_episodes = 200\nseed = 1";
  const Config r = cfg(base);
  const auto source = make_source(r);
  double oracle = 0.0;
  for (std::uint64_t e = 0; e < 1000; ++e) oracle += oracle_accuracy(sample(r, *source, e, Split::Test), InputKind::Vector);
  oracle /= 1000.0;
  o.require(oracle >= 0.95, "oracle below 0.95");
  const RunResult csn = train_eval(with(base, "cond.mode = df\nmemory.attention = hard"));
  const RunResult control = train_eval(with(base, "model.shifts = false"));
  o.require(csn.report.mean >= 0.85, "adaFFN below 0.85");
  o.require(control.report.mean <= 0.30, "control above 0.30");
  o.detail << "oracle " << oracle << "; adaFFN(DF) " << csn.report.mean << " +- " << csn.report.ci95
           << "; control " << control.report.mean << " +- " << control.report.ci95 << " (2000 episodes)";
}

// 7. Glyph subset: adaCNN with direct feedback beats the control by 15 points.
void criterion7(Outcome& o) {
  const std::string base =
      "data.source = omniglot\nmodel.arch = adacnn\ndata.omniglot.image_size = 14\ndata.omniglot.rotations = true\n"
      "data.train_classes = 30\ndata.val_classes = 10\ndata.test_classes = 10\nepisode.queries = 25\n"
      "train.episodes = 1000\ntrain.val_interval = 200\ntrain.val_episodes = 100\nseed = 1";
  const RunResult csn = train_eval(with(base, "cond.mode = df\nmemory.attention = hard"), 75);
  const RunResult control = train_eval(with(base, "model.shifts = false"), 75);
  const double gap = csn.report.mean - control.report.mean;
  o.require(gap >= 0.15, "gap below 15 points");
  o.detail << "adaCNN(DF) " << csn.report.mean << " vs control " << control.report.mean << ", gap "
           << gap * 100.0 << " points (" << csn.seconds + control.seconds << " s)";
}

// 8. Cloze: adaLSTM beats chance by 20 points and LSTM+adaFFN.
void criterion8(Outcome& o) {
  const std::string base =
      "data.source = cloze\ndata.cloze.length = 8\ncond.mode = df\nmemory.attention = hard\n"
      "train.episodes = 1500\ntrain.val_interval = 300\ntrain.val_episodes = 200\nseed = 1";
  const RunResult ada = train_eval(with(base, "model.arch = adalstm"));
  const RunResult head = train_eval(with(base, "model.arch = lstm_adaffn"));
  o.require(ada.report.mean >= 0.2 + 0.2, "adaLSTM within 20 points of chance");
  o.require(ada.report.mean > head.report.mean, "adaLSTM not above LSTM+adaFFN");
  o.detail << "adaLSTM " << ada.report.mean << " +- " << ada.report.ci95 << " vs LSTM+adaFFN " << head.report.mean
           << " +- " << head.report.ci95 << " (chance 0.2)";
}

// 9. Timing and the structural backward count.
void criterion9(Outcome& o) {
  const std::string base =
      "data.source = cloze\ndata.cloze.length = 8\nmodel.arch = adalstm\nmodel.lstm_layers = 2\nseed = 1";
  std::vector<TimingStats> stats;
  std::size_t n = 0;
  for (const char* mode : {"grad", "df"}) {
    const Config r = cfg(with(base, std::string("cond.mode = ") + mode));
    const auto source = make_source(r);
    const CSNModel model(model_spec_from_config(r), 1);
    n = episode_shape(r).ways * episode_shape(r).shots;
    // The same episode seeds for both modes.
    stats.push_back(bench_episodes(model, *source, episode_shape(r), 100, 4242, 10));
  }
  o.require(stats[1].median_ms < stats[0].median_ms, "DF median not below gradient median");
  o.require(stats[1].extract_backward == 0.0, "DF extraction ran a backward pass");
  o.require(stats[0].extract_backward == double(n), "gradient extraction is not one backward per example");
  o.detail << "median ms/task grad " << stats[0].median_ms << " df " << stats[1].median_ms << " (ratio "
           << stats[0].median_ms / stats[1].median_ms << "); backward per extraction grad "
           << stats[0].extract_backward << " df " << stats[1].extract_backward;
}

// 10. Ablation orderings at the 95% level.
void criterion10(Outcome& o) {
  const std::string gauss =
      "data.source = gaussian\nepisode.queries = 75\ntrain.episodes = 2000\ntrain.val_interval = 400\n"
      "train.val_episodes = 200\nseed = 1";
  const RunResult mlp_grad = train_eval(with(gauss, "cond.mode = grad\nmemory.value = mlp3"));
  const RunResult lambda = train_eval(with(gauss, "cond.mode = grad\nmemory.value = scalar_lambda"));
  const RunResult mlp_df = train_eval(with(gauss, "cond.mode = df\nmemory.attention = hard\nmemory.value = mlp3"));
  const RunResult percep =
      train_eval(with(gauss, "cond.mode = df\nmemory.attention = hard\nmemory.value = perceptron1"));
  const std::string cloze =
      "data.source = cloze\ndata.cloze.length = 8\nmodel.arch = adalstm\ncond.mode = df\nmemory.attention = hard\n"
      "train.episodes = 1500\ntrain.val_interval = 300\ntrain.val_episodes = 200\nseed = 1";
  const RunResult normalized = train_eval(with(cloze, "ablation.shift_mode = normalized"));
  const RunResult raw = train_eval(with(cloze, "ablation.shift_mode = raw_additive"));
  o.require(not_worse(mlp_grad.report, lambda.report), "MLP3 < ScalarLambda");
  o.require(not_worse(mlp_df.report, percep.report), "MLP3 < Perceptron1");
  o.require(not_worse(normalized.report, raw.report), "Normalized < RawAdditive");
  o.detail << "MLP3 " << mlp_grad.report.mean << " vs ScalarLambda " << lambda.report.mean << " (grad); MLP3 "
           << mlp_df.report.mean << " vs Perceptron1 " << percep.report.mean << " (df); Normalized "
           << normalized.report.mean << " vs RawAdditive " << raw.report.mean << " (cloze)";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<int> only;
  app.add_option("criteria", only, "criterion numbers to run (default: all)")->check(CLI::Range(1, 10));
  app.add_flag("-v,--verbose", g_verbose, "log every sub-run to stderr");
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::function<void(Outcome&)>> criteria = {
      criterion1, criterion2, criterion3, criterion4, criterion5,
      criterion6, criterion7, criterion8, criterion9, criterion10};
  std::set<int> selected(only.begin(), only.end());
  if (selected.empty()) {
    for (int i = 1; i <= 10; ++i) selected.insert(i);
  }

  g_glyphs = fs::temp_directory_path() / ("csn_acceptance_glyphs_" + std::to_string(::getpid()));
  GlyphOptions glyphs;  // 50 classes x 20 examples, 28 x 28
  write_glyph_dataset(g_glyphs, glyphs);

  // Timing runs first, before the heap is warm with anything else.
  std::vector<int> order(selected.begin(), selected.end());
  std::stable_partition(order.begin(), order.end(), [](int i) { return i == 9; });

  bool all = true;
  std::vector<std::string> lines(11);
  for (int i : order) {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      criteria[std::size_t(i - 1)](o);
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail << "[exception: " << e.what() << "]";
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    char head[64];
    std::snprintf(head, sizeof head, "criterion %2d: %s  (%.0f s)  ", i, o.pass ? "PASS" : "FAIL", s);
    lines[std::size_t(i)] = head + o.detail.str();
    std::fprintf(stderr, "%s\n", lines[std::size_t(i)].c_str());
    all = all && o.pass;
  }
  fs::remove_all(g_glyphs);
  for (int i : selected) std::printf("%s\n", lines[std::size_t(i)].c_str());
  std::printf("%s\n", all ? "ALL PASS" : "SOME CRITERIA FAILED");
  return all ? 0 : 1;
}
