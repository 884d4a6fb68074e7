// SPDX-License-Identifier: Apache-2.0
// Conditioning information: gradient preprocessing, gradient and direct feedback extraction.
#include <cmath>

#include "csn/conditioning.hpp"
#include "csn/gradcheck.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace csn;
using csn::test::one_hot_rows;
using csn::test::random_tensor;

TEST_CASE("preprocess_gradient direct evaluations") {
  auto [a, b] = preprocess_gradient(1.0, 7.0);
  CHECK(a == 0.0);
  CHECK(b == 1.0);
  auto [c, d] = preprocess_gradient(std::exp(-8.0), 7.0);
  CHECK(c == -1.0);
  CHECK(d == doctest::Approx(std::exp(-1.0)).epsilon(1e-14));
  for (double sign : {1.0, -1.0}) {
    const double g = sign * std::exp(-7.0);
    const auto large = std::pair{std::log(std::abs(g)) / 7.0, sign};
    const auto small = std::pair{-1.0, std::exp(7.0) * g};
    CHECK(std::abs(large.first - small.first) <= 1e-12);
    CHECK(std::abs(large.second - small.second) <= 1e-12);
    const auto got = preprocess_gradient(g, 7.0);
    CHECK(std::abs(got.first + 1.0) <= 1e-12);
    CHECK(std::abs(got.second - sign) <= 1e-12);
  }
}

TEST_CASE("preprocess_gradient properties") {
  Rng rng(1);
  for (int i = 0; i < 20000; ++i) {
    const double g = std::exp(rng.uniform(-20.0, 5.0)) * (rng.bernoulli(0.5) ? 1.0 : -1.0);
    const auto [a, b] = preprocess_gradient(g);
    const auto [na, nb] = preprocess_gradient(-g);
    CHECK(na == a);
    CHECK(nb == -b);
    CHECK(std::isfinite(a));
    CHECK(std::isfinite(b));
    CHECK(b >= -1.0);
    CHECK(b <= 1.0);
    if (std::abs(g) <= 1.0) CHECK(a <= 0.0);
    if (std::abs(g) < std::exp(-7.0)) CHECK(a == -1.0);
    // Bounded above by log(G)/p with G = |g|.
    CHECK(a <= std::max(std::log(std::abs(g)) / 7.0, -1.0) + 1e-15);
  }
}

namespace {

struct Net {
  ParameterStore store;
  std::unique_ptr<BaseNetwork> net;
  Net(const std::string& cfg, std::uint64_t seed = 3) {
    Rng rng(seed);
    net = std::make_unique<BaseNetwork>(csn::test::spec_from(cfg).net, store, "base.", rng);
  }
};

}  // namespace

TEST_CASE("gradient info at the output of a linear softmax classifier is y_hat - y") {
  Net n("model.hidden = none\nmodel.input_dim = 6\nmodel.classes = 4");
  Rng rng(2);
  const Tensor x = random_tensor(rng, {3, 6});
  const Tensor y = one_hot_rows({1, 3, 0}, 4);
  ConditioningMode raw;
  raw.preprocess = false;
  const ConditioningInfo info = extract_gradient_info(*n.net, x, y, raw);
  const ConditioningInfo df = extract_df_info(*n.net, x, y);
  Tape tape;
  const Tensor p = ops::softmax(n.net->forward(tape, x).logits).value();
  REQUIRE(info.width == 4);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t c = 0; c < 4; ++c) {
      CHECK(info.values[i * 4 + c] == doctest::Approx(p.at(i, c) - y.at(i, c)).epsilon(1e-12));
    }
  }
  // DF at the output layer: row (i, unit c) holds sigma'(a) (y_hat_i - y_i) with sigma' = 1.
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t c = 0; c < 4; ++c) {
      for (std::size_t k = 0; k < 4; ++k) {
        CHECK(df.values[(i * 4 + c) * 4 + k] == doctest::Approx(p.at(i, k) - y.at(i, k)).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("zero-weight network: output gradient is 1/C - y") {
  Net n("model.hidden = 5\nmodel.input_dim = 3");
  for (std::size_t i = 0; i < n.store.size(); ++i) csn::test::fill(n.store[i], 0.0);
  Rng rng(3);
  const Tensor y = one_hot_rows({2, 4}, 5);
  ConditioningMode raw;
  raw.preprocess = false;
  const ConditioningInfo info = extract_gradient_info(*n.net, random_tensor(rng, {2, 3}), y, raw);
  const Tensor out = info.slot(1);
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t c = 0; c < 5; ++c) CHECK(out[i * 5 + c] == doctest::Approx(0.2 - y.at(i, c)).epsilon(1e-14));
  }
}

TEST_CASE("gradient info equals finite differences of the description loss") {
  // For a single example dL/da_j = dL/db_j; for channel slots the spatial mean
  // of dL/da is dL/db_c divided by the plane size.
  const char* configs[] = {
      "model.hidden = 6,5\nmodel.input_dim = 4",
      "model.hidden = 6,5\nmodel.input_dim = 4\nmodel.activation = relu",
      "model.arch = adacnn\nmodel.image_size = 6\nmodel.filters = 3\nmodel.conv_layers = 2\nmodel.hidden = none",
  };
  for (const char* cfg : configs) {
    INFO(std::string(cfg));
    Net n(cfg);
    const NetworkSpec& spec = n.net->spec();
    Rng rng(4);
    const Tensor x = input_kind(spec.arch) == InputKind::Image
                         ? random_tensor(rng, {1, spec.image_size, spec.image_size})
                         : random_tensor(rng, {1, spec.input_dim});
    const Tensor y = one_hot_rows({2}, spec.classes);
    ConditioningMode raw;
    raw.preprocess = false;
    const ConditioningInfo info = extract_gradient_info(*n.net, x, y, raw);
    for (std::size_t t = 0; t < n.net->slots().size(); ++t) {
      const ShiftSlot& slot = n.net->slots()[t];
      Parameter* bias = n.store.find("base." + slot.name + ".b");
      REQUIRE(bias != nullptr);
      LossFn f = [&](Tape& tape) {
        return ops::softmax_cross_entropy(n.net->forward(tape, x).logits, tape.constant(y));
      };
      Tape tape;
      tape.backward(f(tape));
      tape.accumulate_param_grads();
      GradCheckOptions o;
      o.method = DiffMethod::Ridders;
      o.step = 1e-2;
      Parameter* ps[] = {bias};
      CHECK(finite_diff_check(f, ps, o).max_rel_error < 1e-5);
      for (std::size_t j = 0; j < slot.width; ++j) {
        const double expected = bias->grad[j] / double(slot.group);
        CHECK(info.values[info.offsets[t] + j] == doctest::Approx(expected).epsilon(1e-10));
      }
      n.store.zero_grad();
    }
  }
}

TEST_CASE("direct feedback special cases") {
  SUBCASE("tanh layer at a = 0 carries y_hat - y unchanged") {
    Net n("model.hidden = 4\nmodel.input_dim = 3\nmodel.classes = 2");
    for (std::size_t i = 0; i < n.store.size(); ++i) csn::test::fill(n.store[i], 0.0);
    const Tensor y = one_hot_rows({0}, 2);
    const ConditioningInfo df = extract_df_info(*n.net, Tensor({1, 3}, 0.4), y);
    const Tensor hidden = df.slot(0);
    for (std::size_t j = 0; j < 4; ++j) {
      CHECK(hidden[j * 2] == -0.5);
      CHECK(hidden[j * 2 + 1] == 0.5);
    }
  }
  SUBCASE("dead relu units give zero") {
    Net n("model.hidden = 4\nmodel.input_dim = 3\nmodel.activation = relu");
    csn::test::fill(*n.store.find("base.fc1.W"), 0.0);
    csn::test::fill(*n.store.find("base.fc1.b"), -1.0);
    Rng rng(5);
    const ConditioningInfo df = extract_df_info(*n.net, random_tensor(rng, {2, 3}), one_hot_rows({0, 1}, 5));
    const Tensor hidden = df.slot(0);
    for (double v : hidden.data()) CHECK(v == 0.0);
  }
  SUBCASE("adaLSTM with c_t = 0 carries y_hat - y at every step") {
    Net n("model.arch = adalstm\nmodel.seq_len = 4\nmodel.vocab = 10\nmodel.lstm_hidden = 3\nmodel.embed_dim = 2");
    for (std::size_t i = 0; i < n.store.size(); ++i) {
      if (n.store[i].name.find("lstm") != std::string::npos) csn::test::fill(n.store[i], 0.0);
    }
    const Tensor x({2, 4}, {1, 2, 0, 3, 4, 5, 6, 7});
    const Tensor y = one_hot_rows({3, 1}, 5);
    const ConditioningInfo df = extract_df_info(*n.net, x, y);
    Tape tape;
    const Tensor p = ops::softmax(n.net->forward(tape, x).logits).value();
    for (std::size_t t = 0; t < 4; ++t) {
      const Tensor s = df.slot(t);
      for (std::size_t i = 0; i < 2; ++i) {
        for (std::size_t j = 0; j < 3; ++j) {
          for (std::size_t c = 0; c < 5; ++c) {
            CHECK(s[(i * 3 + j) * 5 + c] == doctest::Approx(p.at(i, c) - y.at(i, c)).epsilon(1e-14));
          }
        }
      }
    }
  }
}

TEST_CASE("recurrent extraction with one step equals the plain extraction") {
  Net n("model.arch = adalstm\nmodel.seq_len = 1\nmodel.vocab = 10\nmodel.lstm_hidden = 3\nmodel.embed_dim = 2");
  const Tensor x({3, 1}, {4, 0, 9});
  const Tensor y = one_hot_rows({0, 2, 4}, 5);
  for (auto kind : {ConditioningKind::Gradient, ConditioningKind::DirectFeedback}) {
    ConditioningMode mode;
    mode.kind = kind;
    CHECK(extract_recurrent_info(*n.net, x, y, mode).values == extract_info(*n.net, x, y, mode).values);
  }
  CHECK_THROWS_AS(extract_recurrent_info(*n.net, Tensor({3, 2}), y, {}), UsageError);
}

TEST_CASE("recurrent gradient info matches finite differences through the cell state") {
  // The loss gradient is checked against finite differences in every
  // parameter feeding c_t; the extractor must report the tape's dL/dc_t.
  Net n("model.arch = adalstm\nmodel.seq_len = 3\nmodel.vocab = 8\nmodel.lstm_hidden = 3\nmodel.embed_dim = 2");
  const Tensor x({1, 3}, {5, 2, 7});
  const Tensor y = one_hot_rows({1}, 5);
  ConditioningMode raw;
  raw.preprocess = false;
  const ConditioningInfo info = extract_gradient_info(*n.net, x, y, raw);
  LossFn f = [&](Tape& tape) {
    return ops::softmax_cross_entropy(n.net->forward(tape, x).logits, tape.constant(y));
  };
  std::vector<Parameter*> all;
  for (std::size_t i = 0; i < n.store.size(); ++i) all.push_back(&n.store[i]);
  GradCheckOptions o;
  o.method = DiffMethod::Ridders;
  o.step = 1e-2;
  CHECK(finite_diff_check(f, all, o).max_rel_error < 1e-5);
  Tape tape;
  ForwardOptions fo;
  fo.capture_prefix = "c.";
  const NetForward fwd = n.net->forward(tape, x, fo);
  tape.backward(ops::softmax_cross_entropy(fwd.logits, tape.constant(y)));
  for (std::size_t t = 0; t < 3; ++t) {
    const Tensor g = tape.grad(*tape.find("c." + n.net->slots()[t].name));
    for (std::size_t j = 0; j < 3; ++j) CHECK(info.values[info.offsets[t] + j] == g[j]);
  }
}

TEST_CASE("extraction counts one backward per example in gradient mode and none in DF mode") {
  Net n("model.hidden = 4\nmodel.input_dim = 3");
  Rng rng(6);
  const Tensor x = random_tensor(rng, {5, 3});
  const Tensor y = one_hot_rows({0, 1, 2, 3, 4}, 5);
  const auto before = n.store.snapshot();
  auto b0 = TapeCounters::backward_traversals.load();
  extract_df_info(*n.net, x, y);
  CHECK(TapeCounters::backward_traversals.load() == b0);
  extract_gradient_info(*n.net, x, y);
  CHECK(TapeCounters::backward_traversals.load() == b0 + 5);
  CHECK(n.store.snapshot() == before);
}

TEST_CASE("extraction rejects bad labels") {
  Net n("model.hidden = 4\nmodel.input_dim = 3");
  CHECK_THROWS_AS(extract_df_info(*n.net, Tensor({2, 3}), Tensor({2, 4})), DimensionError);
  CHECK_THROWS_AS(parse_conditioning("backprop"), ConfigError);
}
