// SPDX-License-Identifier: Apache-2.0
// CSN layers: shifted dense, output, convolutional, residual and LSTM layers.
#include <cmath>

#include "csn/gradcheck.hpp"
#include "csn/layers.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace csn;
using csn::test::random_tensor;

namespace {

void zero_all(ParameterStore& store) {
  for (std::size_t i = 0; i < store.size(); ++i) {
    for (double& v : store[i].value.data()) v = 0.0;
  }
}

constexpr ShiftMode kModes[] = {ShiftMode::Normalized, ShiftMode::RawAdditive,
                                ShiftMode::PreActivation};

}  // namespace

TEST_CASE("dense CSN with zero shift equals the plain layer bit for bit") {
  Rng rng(1);
  ParameterStore store;
  const DenseLayer layer = DenseLayer::create(store, "d", 6, 5, rng);
  const Tensor x = random_tensor(rng, {4, 6});
  for (auto act : {Activation::Tanh, Activation::Relu}) {
    for (auto mode : kModes) {
      Tape tape;
      const Tensor plain = activate(layer.preactivation(tape, tape.constant(x)), act).value();
      const Tensor empty_shift = dense_csn_forward(tape, layer, tape.constant(x), Var{}, act, mode).h.value();
      const Tensor zero_shift =
          dense_csn_forward(tape, layer, tape.constant(x), tape.constant(Tensor({4, 5})), act, mode).h.value();
      CHECK(plain == empty_shift);
      CHECK(plain == zero_shift);
    }
  }
}

TEST_CASE("dense CSN direct evaluations") {
  Rng rng(2);
  ParameterStore store;
  const DenseLayer layer = DenseLayer::create(store, "d", 3, 4, rng);
  const Tensor x = random_tensor(rng, {2, 3});

  SUBCASE("zero weights, unit shift, tanh normalized gives tanh(1)") {
    zero_all(store);
    Tape tape;
    const Tensor h = dense_csn_forward(tape, layer, tape.constant(x), tape.constant(Tensor({2, 4}, 1.0)),
                                       Activation::Tanh, ShiftMode::Normalized)
                         .h.value();
    for (double v : h.data()) CHECK(v == doctest::Approx(0.76159415595576).epsilon(1e-12));
  }
  SUBCASE("relu normalized ignores negative shifts") {
    Tape tape;
    Tensor beta = random_tensor(rng, {2, 4});
    for (double& v : beta.data()) v = -std::abs(v) - 0.1;
    const Tensor plain = dense_csn_forward(tape, layer, tape.constant(x), Var{}, Activation::Relu,
                                           ShiftMode::Normalized).h.value();
    const Tensor shifted = dense_csn_forward(tape, layer, tape.constant(x), tape.constant(beta),
                                             Activation::Relu, ShiftMode::Normalized).h.value();
    CHECK(plain == shifted);
  }
  SUBCASE("the three shift modes") {
    Tape tape;
    const Tensor beta = random_tensor(rng, {2, 4});
    const Tensor a = layer.preactivation(tape, tape.constant(x)).value();
    auto h = [&](ShiftMode m) {
      return dense_csn_forward(tape, layer, tape.constant(x), tape.constant(beta), Activation::Tanh, m).h.value();
    };
    const Tensor n = h(ShiftMode::Normalized), r = h(ShiftMode::RawAdditive), p = h(ShiftMode::PreActivation);
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(n[i] == doctest::Approx(std::tanh(a[i]) + std::tanh(beta[i])).epsilon(1e-14));
      CHECK(r[i] == doctest::Approx(std::tanh(a[i]) + beta[i]).epsilon(1e-14));
      CHECK(p[i] == doctest::Approx(std::tanh(a[i] + beta[i])).epsilon(1e-14));
    }
  }
}

TEST_CASE("output CSN layer") {
  Rng rng(3);
  ParameterStore store;
  const DenseLayer layer = DenseLayer::create(store, "out", 4, 3, rng);
  const Tensor x = random_tensor(rng, {5, 4});

  SUBCASE("zero weights and shift give the uniform distribution") {
    zero_all(store);
    Tape tape;
    const Tensor p = output_csn_forward(tape, layer, tape.constant(x), Var{}).probs.value();
    for (double v : p.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  }
  SUBCASE("a constant shift leaves the distribution unchanged") {
    Tape tape;
    const Tensor p0 = output_csn_forward(tape, layer, tape.constant(x), Var{}).probs.value();
    const Tensor p1 =
        output_csn_forward(tape, layer, tape.constant(x), tape.constant(Tensor({5, 3}, 2.75))).probs.value();
    CHECK(max_abs_diff(p0, p1) <= 1e-9);
  }
  SUBCASE("two classes with shift (ln 3, 0)") {
    ParameterStore s2;
    const DenseLayer two = DenseLayer::create(s2, "o2", 1, 2, rng);
    zero_all(s2);
    Tape tape;
    const Tensor p = output_csn_forward(tape, two, tape.constant(Tensor({1, 1}, 0.3)),
                                        tape.constant(Tensor({1, 2}, {std::log(3.0), 0.0})))
                         .probs.value();
    CHECK(p[0] == doctest::Approx(0.75).epsilon(1e-14));
    CHECK(p[1] == doctest::Approx(0.25).epsilon(1e-14));
  }
}

TEST_CASE("conv and residual CSN layers") {
  Rng rng(4);
  ParameterStore store;
  const ConvLayer conv = ConvLayer::create(store, "c", 2, 3, 3, rng);
  const CSNResBlock block = CSNResBlock::create(store, "r", 2, 3, rng);
  const Tensor x = random_tensor(rng, {2, 2, 5, 5});

  SUBCASE("zero shift is the plain layer for every mode and granularity") {
    for (auto mode : kModes) {
      for (auto g : {ShiftGranularity::Channel, ShiftGranularity::Unit}) {
        Tape tape;
        Var xv = tape.constant(x);
        const Tensor plain_conv = ops::relu(conv.preactivation(tape, xv)).value();
        CHECK(conv_csn_forward(tape, conv, xv, Var{}, mode, g).h.value() == plain_conv);
        const Tensor plain_res = ops::relu(block.preactivation(tape, xv)).value();
        const std::size_t width = g == ShiftGranularity::Channel ? 3 : 3 * 25;
        CHECK(resblock_forward(tape, block, xv, tape.constant(Tensor({2, width})), mode, g).h.value() ==
              plain_res);
      }
    }
  }
  SUBCASE("zero weights give a zero output") {
    zero_all(store);
    Tape tape;
    const Tensor h = resblock_forward(tape, block, tape.constant(x), Var{}, ShiftMode::Normalized,
                                      ShiftGranularity::Channel).h.value();
    for (double v : h.data()) CHECK(v == 0.0);
  }
  SUBCASE("block loss matches finite differences in x, beta and parameters") {
    ParameterStore ps;
    const CSNResBlock b = CSNResBlock::create(ps, "rb", 2, 3, rng);
    Parameter& xin = ps.add("x", random_tensor(rng, {1, 2, 4, 4}));
    Parameter& beta = ps.add("beta", random_tensor(rng, {1, 3}));
    const Tensor w = random_tensor(rng, {1, 3, 4, 4});
    LossFn f = [&](Tape& tape) {
      Var h = resblock_forward(tape, b, tape.param(xin), tape.param(beta), ShiftMode::Normalized,
                               ShiftGranularity::Channel).h;
      return ops::sum(ops::mul_const(h, w));
    };
    std::vector<Parameter*> all;
    for (std::size_t i = 0; i < ps.size(); ++i) all.push_back(&ps[i]);
    GradCheckOptions o;
    o.method = DiffMethod::Ridders;
    o.step = 1e-2;
    CHECK(finite_diff_check(f, all, o).max_rel_error < 1e-5);
  }
}

TEST_CASE("adaLSTM step") {
  Rng rng(5);
  ParameterStore store;
  const AdaLSTMCell cell = AdaLSTMCell::create(store, "lstm", 3, 4, rng);
  const Tensor x = random_tensor(rng, {2, 3});

  SUBCASE("zero weights") {
    zero_all(store);
    Tape tape;
    Var zero = tape.constant(Tensor({2, 4}));
    const LSTMStep s = adalstm_step(tape, cell, tape.constant(x), zero, zero, Var{}, ShiftMode::Normalized);
    for (double v : s.i.value().data()) CHECK(v == 0.5);
    for (double v : s.f.value().data()) CHECK(v == 0.5);
    for (double v : s.o.value().data()) CHECK(v == 0.5);
    for (double v : s.c.value().data()) CHECK(v == 0.0);
    for (double v : s.h.value().data()) CHECK(v == 0.0);
    const LSTMStep t = adalstm_step(tape, cell, tape.constant(x), zero, zero, tape.constant(Tensor({2, 4}, 1.0)),
                                    ShiftMode::Normalized);
    for (double v : t.h.value().data()) CHECK(v == doctest::Approx(0.5 * std::tanh(1.0)).epsilon(1e-14));
  }
  SUBCASE("zero shift is a standard LSTM step") {
    Tape tape;
    const Tensor h0 = random_tensor(rng, {2, 4}), c0 = random_tensor(rng, {2, 4});
    const LSTMStep s = adalstm_step(tape, cell, tape.constant(x), tape.constant(h0), tape.constant(c0), Var{},
                                    ShiftMode::Normalized);
    // Hand-rolled reference over z = [x; h].
    auto gate = [&](const Parameter* w, const Parameter* b, std::size_t r, std::size_t u) {
      double a = b->value[u];
      for (std::size_t k = 0; k < 3; ++k) a += w->value.at(u, k) * x.at(r, k);
      for (std::size_t k = 0; k < 4; ++k) a += w->value.at(u, 3 + k) * h0.at(r, k);
      return a;
    };
    auto sig = [](double a) { return 1.0 / (1.0 + std::exp(-a)); };
    for (std::size_t r = 0; r < 2; ++r) {
      for (std::size_t u = 0; u < 4; ++u) {
        const double i = sig(gate(cell.w_i, cell.b_i, r, u)), f = sig(gate(cell.w_f, cell.b_f, r, u));
        const double o = sig(gate(cell.w_o, cell.b_o, r, u));
        const double c = std::tanh(gate(cell.w_v, cell.b_v, r, u)) * i + c0.at(r, u) * f;
        CHECK(s.c.value().at(r, u) == doctest::Approx(c).epsilon(1e-12));
        CHECK(s.h.value().at(r, u) == doctest::Approx(std::tanh(c) * o).epsilon(1e-12));
      }
    }
  }
  SUBCASE("gates stay in (0, 1) and the cell state is bounded") {
    for (int trial = 0; trial < 20; ++trial) {
      Tape tape;
      Var h = tape.constant(Tensor({2, 4})), c = tape.constant(Tensor({2, 4}));
      for (int t = 1; t <= 8; ++t) {
        const LSTMStep s = adalstm_step(tape, cell, tape.constant(random_tensor(rng, {2, 3}, 3.0)), h, c,
                                        tape.constant(random_tensor(rng, {2, 4})), ShiftMode::Normalized);
        for (Var g : {s.i, s.f, s.o}) {
          for (double v : g.value().data()) {
            CHECK(v > 0.0);
            CHECK(v < 1.0);
          }
        }
        for (double v : s.c.value().data()) CHECK(std::abs(v) <= double(t));
        h = s.h;
        c = s.c;
      }
    }
  }
}

TEST_CASE("dense CSN layer plus cross-entropy matches finite differences") {
  Rng rng(6);
  for (auto act : {Activation::Tanh, Activation::Relu}) {
    for (auto mode : kModes) {
      ParameterStore store;
      const DenseLayer hidden = DenseLayer::create(store, "h", 4, 5, rng);
      const DenseLayer out = DenseLayer::create(store, "o", 5, 3, rng);
      Parameter& xin = store.add("x", random_tensor(rng, {3, 4}));
      Parameter& beta = store.add("beta", random_tensor(rng, {3, 5}));
      Parameter& beta_out = store.add("beta_out", random_tensor(rng, {3, 3}));
      const Tensor y = csn::test::one_hot_rows({2, 0, 1}, 3);
      LossFn f = [&](Tape& tape) {
        Var h = dense_csn_forward(tape, hidden, tape.param(xin), tape.param(beta), act, mode).h;
        Var p = output_csn_forward(tape, out, h, tape.param(beta_out)).probs;
        return ops::cross_entropy(p, tape.constant(y));
      };
      std::vector<Parameter*> all;
      for (std::size_t i = 0; i < store.size(); ++i) all.push_back(&store[i]);
      GradCheckOptions o;
      o.method = DiffMethod::Ridders;
      o.step = 1e-2;
      INFO(to_string(act) << " " << to_string(mode));
      CHECK(finite_diff_check(f, all, o).max_rel_error < 1e-5);
    }
  }
}

TEST_CASE("activation derivative takes relu'(0) as zero") {
  const Tensor d = activation_derivative(Tensor({3}, {-1.0, 0.0, 2.0}), Activation::Relu);
  CHECK(d == Tensor({3}, {0.0, 0.0, 1.0}));
  CHECK(activation_derivative(Tensor({2}, {0.0, 5.0}), Activation::Identity) == Tensor({2}, {1.0, 1.0}));
}
