// SPDX-License-Identifier: Apache-2.0
// Task sources, the episode sampler, optimizers, training and evaluation, config.
#include <cmath>
#include <filesystem>
#include <set>

#include "csn/glyphs.hpp"
#include "csn/tensor_io.hpp"
#include "csn/training.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace csn;

namespace {

std::unique_ptr<TaskSource> source_for(const std::string& cfg) {
  return make_source(csn::test::resolved(cfg));
}

double oracle_mean(const TaskSource& src, InputKind kind, std::size_t episodes, std::size_t queries,
                   std::uint64_t seed) {
  double total = 0.0;
  for (std::size_t e = 0; e < episodes; ++e) {
    Rng rng(derive_seed(seed, e));
    total += oracle_accuracy(sample_episode(src, Split::Test, 5, 1, queries, rng), kind);
  }
  return total / double(episodes);
}

}  // namespace

TEST_CASE("episode shape contract") {
  const auto src = source_for("");
  Rng rng(1);
  const Episode ep = sample_episode(*src, Split::Train, 5, 1, 15, rng);
  CHECK(ep.support_x.shape() == Shape{5, 16});
  CHECK(ep.query_x.shape() == Shape{15, 16});
  CHECK(ep.support_y.shape() == Shape{5, 5});
  CHECK(ep.query_y.shape() == Shape{15, 5});
  CHECK(std::set<std::size_t>(ep.support_labels.begin(), ep.support_labels.end()).size() == 5);
  std::vector<std::size_t> per_class(5);
  for (auto l : ep.query_labels) ++per_class[l];
  for (auto c : per_class) CHECK(c == 3);
  CHECK(ep.support_y == one_hot(ep.support_labels, 5));
}

TEST_CASE("sampling is deterministic per seed") {
  const auto src = source_for("data.source = cloze");
  Rng a(9), b(9);
  const Episode x = sample_episode(*src, Split::Val, 5, 2, 7, a);
  const Episode y = sample_episode(*src, Split::Val, 5, 2, 7, b);
  CHECK(x.support_x == y.support_x);
  CHECK(x.query_x == y.query_x);
  CHECK(x.support_labels == y.support_labels);
  CHECK(x.query_labels == y.query_labels);
  CHECK(x.support_x.dim(0) == 10);
}

TEST_CASE("splits are disjoint") {
  for (const char* cfg : {"", "data.source = cloze"}) {
    const auto src = source_for(cfg);
    std::set<std::size_t> train(src->classes(Split::Train).begin(), src->classes(Split::Train).end());
    for (auto s : {Split::Val, Split::Test}) {
      for (auto c : src->classes(s)) CHECK(train.count(c) == 0);
    }
    CHECK(train.size() == 30);
    CHECK(src->classes(Split::Test).size() == 10);
  }
}

TEST_CASE("sampler errors name the deficit") {
  const auto src = source_for("data.val_classes = 3");
  Rng rng(2);
  CHECK_THROWS_WITH_AS(sample_episode(*src, Split::Val, 5, 1, 5, rng), doctest::Contains("3"), SamplerError);
  CHECK_THROWS_AS(sample_episode(*src, Split::Train, 1, 1, 5, rng), SamplerError);
  CHECK_THROWS_AS(sample_episode(*src, Split::Train, 5, 0, 5, rng), SamplerError);
}

TEST_CASE("gaussian oracle limits") {
  const auto exact = source_for("data.gaussian.noise = 0.000001");
  CHECK(oracle_mean(*exact, InputKind::Vector, 50, 15, 3) == 1.0);
  const auto noisy = source_for("data.gaussian.noise = 1000");
  CHECK(oracle_mean(*noisy, InputKind::Vector, 400, 15, 3) == doctest::Approx(0.2).epsilon(0.15));
}

TEST_CASE("gaussian nearest-prototype oracle reaches 0.95") {
  const auto src = source_for("");
  const double acc = oracle_mean(*src, InputKind::Vector, 1000, 15, 5);
  MESSAGE("nearest-prototype oracle " << acc);
  CHECK(acc >= 0.95);
}

TEST_CASE("cloze oracle limits and default level") {
  const auto exact = source_for("data.source = cloze\ndata.cloze.noise = 0");
  CHECK(oracle_mean(*exact, InputKind::Sequence, 50, 5, 4) == 1.0);
  const auto random = source_for("data.source = cloze\ndata.cloze.noise = 1");
  CHECK(oracle_mean(*random, InputKind::Sequence, 1000, 5, 4) == doctest::Approx(0.2).epsilon(0.15));
  const auto dflt = source_for("data.source = cloze");
  const double acc = oracle_mean(*dflt, InputKind::Sequence, 1000, 5, 4);
  MESSAGE("context-overlap oracle " << acc);
  CHECK(acc >= 0.8);
}

TEST_CASE("cloze sentences carry exactly one blank") {
  const auto src = source_for("data.source = cloze");
  Rng rng(6);
  const Tensor s = src->draw(src->classes(Split::Train)[0], 50, rng);
  for (std::size_t r = 0; r < 50; ++r) {
    int blanks = 0;
    for (std::size_t j = 0; j < 8; ++j) blanks += s.at(r, j) == 0.0;
    CHECK(blanks == 1);
  }
}

TEST_CASE("image source from a generated glyph set") {
  const auto dir = std::filesystem::temp_directory_path() / "csn_glyph_test";
  std::filesystem::remove_all(dir);
  GlyphOptions o;
  o.classes = 50;
  o.examples = 4;
  o.size = 10;
  write_glyph_dataset(dir, o);
  const SplitSizes sizes;
  const auto rotated = load_omniglot(dir, 10, true, sizes, 1);
  const auto plain = load_omniglot(dir, 10, false, sizes, 1);
  CHECK(rotated->classes(Split::Train).size() == 120);
  CHECK(plain->classes(Split::Train).size() == 30);
  CHECK(rotated->classes(Split::Test).size() == 10);
  CHECK(plain->example_count() == 200);
  CHECK(plain->base_classes() == 50);

  const Tensor img = csnt::load(dir / "glyph0" / "0.csnt");
  CHECK(resize_bilinear(img, 10) == img);
  CHECK(resize_bilinear(img, 14).shape() == Shape{14, 14});
  CHECK(rotate_quarter(rotate_quarter(img, 1), 3) == img);
  CHECK(rotate_quarter(img, 4) == img);
  CHECK(rotate_quarter(img, 1) != img);

  CHECK_THROWS_AS(load_omniglot(dir / "nope", 10, true, sizes, 1), LoadError);
  Rng rng(1);
  CHECK_THROWS_AS(sample_episode(*plain, Split::Train, 5, 1, 20, rng), SamplerError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("Adam and SGD trajectories") {
  SUBCASE("Adam first step from zero with unit gradient") {
    ParameterStore s;
    Parameter& p = s.add("p", Tensor::scalar(0.0));
    Optimizer opt({});
    p.grad[0] = 1.0;
    opt.step(s);
    CHECK(p.value[0] == doctest::Approx(-0.001).epsilon(1e-6));
  }
  SUBCASE("Adam two steps against the hand-evaluated update") {
    ParameterStore s;
    Parameter& p = s.add("p", Tensor::scalar(0.5));
    OptimizerConfig c;
    c.lr = 0.01;
    Optimizer opt(c);
    const double g1 = 2.0, g2 = -0.5;
    p.grad[0] = g1;
    opt.step(s);
    p.grad[0] = g2;
    opt.step(s);
    const double m1 = 0.1 * g1, v1 = 0.001 * g1 * g1;
    const double t1 = 0.5 - 0.01 * (m1 / 0.1) / (std::sqrt(v1 / 0.001) + 1e-8);
    const double m2 = 0.9 * m1 + 0.1 * g2, v2 = 0.999 * v1 + 0.001 * g2 * g2;
    const double t2 = t1 - 0.01 * (m2 / (1 - 0.81)) / (std::sqrt(v2 / (1 - 0.999 * 0.999)) + 1e-8);
    CHECK(p.value[0] == doctest::Approx(t2).epsilon(1e-12));
    CHECK(opt.steps() == 2);
  }
  SUBCASE("SGD with momentum") {
    ParameterStore s;
    Parameter& p = s.add("p", Tensor::scalar(1.0));
    OptimizerConfig c;
    c.kind = OptimizerKind::SGDMomentum;
    c.lr = 0.1;
    c.momentum = 0.9;
    Optimizer opt(c);
    p.grad[0] = 1.0;
    opt.step(s);
    CHECK(p.value[0] == doctest::Approx(0.9).epsilon(1e-15));
    p.grad[0] = 2.0;
    opt.step(s);
    CHECK(p.value[0] == doctest::Approx(0.9 - 0.1 * (0.9 * 1.0 + 2.0)).epsilon(1e-15));
  }
}

TEST_CASE("gradient clipping") {
  ParameterStore s;
  Parameter& a = s.add("a", Tensor::vector({12.0, 0.0}));
  Parameter& b = s.add("b", Tensor::vector({16.0}));
  a.grad = a.value;
  b.grad = b.value;
  CHECK(clip_gradients(s, 10.0, ClipKind::Norm) == doctest::Approx(20.0));
  CHECK(s.grad_norm() == doctest::Approx(10.0).epsilon(1e-9));
  CHECK(clip_gradients(s, 100.0, ClipKind::Norm) == doctest::Approx(10.0));
  CHECK(s.grad_norm() == doctest::Approx(10.0).epsilon(1e-12));
  clip_gradients(s, 1.0, ClipKind::Value);
  CHECK(a.grad[0] == 1.0);
  CHECK(b.grad[0] == 1.0);
  CHECK_THROWS_AS(clip_gradients(s, 0.0, ClipKind::Norm), ConfigError);
}

TEST_CASE("training") {
  const std::string cfg = "cond.mode = df\nmemory.attention = hard\nmodel.hidden = 16\nmemory.key_dim = 16\n"
                          "memory.key_hidden = 16\ntrain.val_interval = 20\ntrain.val_episodes = 20\n"
                          "episode.queries = 10";
  const Config r = csn::test::resolved(cfg);
  const auto src = make_source(r);

  SUBCASE("a zero budget leaves the model unchanged") {
    CSNModel m(model_spec_from_config(r), 1);
    const auto init = m.params().snapshot();
    TrainerConfig tc = trainer_config(r, 1);
    tc.episodes = 0;
    const TrainResult res = train(m, *src, tc);
    CHECK(res.episodes == 0);
    CHECK(m.params().snapshot() == init);
  }
  SUBCASE("same seed gives identical metrics and parameters") {
    auto run = [&] {
      CSNModel m(model_spec_from_config(r), 1);
      TrainerConfig tc = trainer_config(r, 1);
      tc.episodes = 60;
      tc.record_timing = false;
      std::string log;
      TrainHooks hooks;
      hooks.on_record = [&](const MetricsRecord& rec) { log += to_json(rec) + "\n"; };
      train(m, *src, tc, hooks);
      return std::pair{log, m.params().snapshot()};
    };
    const auto a = run(), b = run();
    CHECK(!a.first.empty());
    CHECK(a.first == b.first);
    CHECK(a.second == b.second);
  }
  SUBCASE("the best validation snapshot is what the model holds") {
    CSNModel m(model_spec_from_config(r), 2);
    TrainerConfig tc = trainer_config(r, 2);
    tc.episodes = 100;
    std::vector<Tensor> checkpoint;
    std::vector<double> val;
    TrainHooks hooks;
    hooks.on_checkpoint = [&](const CSNModel& cm, std::size_t) { checkpoint = cm.params().snapshot(); };
    hooks.on_record = [&](const MetricsRecord& rec) {
      if (rec.split == "val") val.push_back(rec.accuracy);
    };
    const TrainResult res = train(m, *src, tc, hooks);
    REQUIRE(val.size() == 5);
    CHECK(res.best_val_accuracy == *std::max_element(val.begin(), val.end()));
    CHECK(m.params().snapshot() == checkpoint);
  }
}

TEST_CASE("evaluation") {
  // Untrained models sit in the chance band when nothing class-specific
  // reaches the output shift: the control, and DF mode, whose output units
  // all receive the same feedback vector.
  for (const char* variant : {"cond.mode = df", "model.shifts = false"}) {
    INFO(std::string(variant));
    const Config r = csn::test::resolved(std::string("model.hidden = 16\nmemory.key_dim = 16\n") + variant);
    const auto src = make_source(r);
    const CSNModel m(model_spec_from_config(r), 3);
    const EpisodeShape shape = episode_shape(r);
    const EvalReport a = evaluate(m, *src, Split::Test, 400, shape, 8);
    const EvalReport b = evaluate(m, *src, Split::Test, 400, shape, 8);
    CHECK(a.episodes == 400);
    CHECK(a.accuracies == b.accuracies);
    CHECK(to_json(a, false) == to_json(b, false));
    MESSAGE(std::string(variant) << ": untrained accuracy " << a.mean);
    CHECK(a.mean >= 0.10);
    CHECK(a.mean <= 0.30);
    double sq = 0.0;
    for (double x : a.accuracies) {
      CHECK(x >= 0.0);
      CHECK(x <= 1.0);
      sq += (x - a.mean) * (x - a.mean);
    }
    CHECK(a.std == doctest::Approx(std::sqrt(sq / 400.0)).epsilon(1e-2));
    CHECK(a.ci95 == doctest::Approx(1.96 * a.std / std::sqrt(400.0)).epsilon(1e-12));
  }
}

TEST_CASE("an untrained gradient-mode model already matches labels with a random sign") {
  // The output-layer information (log|y_hat - y| / p, sgn) separates the
  // description label from the rest, so even random value functions move
  // query logits towards or away from the retrieved label.
  const Config r = csn::test::resolved("");
  const auto src = make_source(r);
  std::vector<double> means;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const CSNModel m(model_spec_from_config(r), seed);
    means.push_back(evaluate(m, *src, Split::Test, 100, episode_shape(r), 8).mean);
  }
  CHECK(*std::max_element(means.begin(), means.end()) > 0.5);
  CHECK(*std::min_element(means.begin(), means.end()) < 0.1);
}

TEST_CASE("config parsing and validation") {
  const Config c = Config::parse("# comment\nseed = 4   # trailing\n\nmodel.arch = adacnn\n");
  CHECK(c.get_int("seed") == 4);
  CHECK(!c.is_default("seed"));
  CHECK(c.is_default("train.lr"));
  CHECK_THROWS_WITH_AS(Config::parse("modle.arch = adaffn"), doctest::Contains("modle.arch"), ConfigError);
  CHECK_THROWS_AS(Config::parse("seed 4"), ConfigError);
  CHECK_THROWS_AS(Config::parse("seed = four").get_int("seed"), ConfigError);
  CHECK_THROWS_AS(Config::load("/nonexistent/csn.cfg"), ConfigError);

  const Config r = resolve(Config::parse("model.arch = adacnn\ndata.source = omniglot"));
  CHECK(r.get("model.activation") == "relu");
  CHECK(r.get("train.clip") == "10");
  CHECK(r.get("model.classes") == "5");
  CHECK(resolve(Config::parse("data.source = cloze")).get("episode.queries") == "1");
  CHECK(resolve(Config()).get("episode.queries") == "75");

  CHECK_THROWS_AS(csn::test::spec_from("memory.value = scalar_lambda\ncond.mode = df"), ConfigError);
  CHECK_THROWS_AS(csn::test::spec_from("cond.stop_grad = false"), ConfigError);
  CHECK_THROWS_AS(csn::test::spec_from("model.arch = transformer"), ConfigError);
  CHECK_THROWS_AS(csn::test::spec_from("cond.p = 0"), ConfigError);

  const ModelSpec s = csn::test::spec_from("model.arch = adalstm\ncond.mode = df\nmemory.attention = hard");
  CHECK(model_spec_from_config(resolve(model_spec_to_config(s))).net.arch == Arch::LSTM);
  CHECK(model_spec_to_config(s).to_text(model_key_prefixes()) ==
        model_spec_to_config(model_spec_from_config(resolve(model_spec_to_config(s)))).to_text(model_key_prefixes()));
}
