// SPDX-License-Identifier: Apache-2.0
#include "csn/layers.hpp"

#include <cmath>

namespace csn {

std::string to_string(Activation a) {
  switch (a) {
    case Activation::Tanh: return "tanh";
    case Activation::Relu: return "relu";
    case Activation::Identity: return "identity";
  }
  return "?";
}

std::string to_string(ShiftMode m) {
  switch (m) {
    case ShiftMode::Normalized: return "normalized";
    case ShiftMode::RawAdditive: return "raw_additive";
    case ShiftMode::PreActivation: return "pre_activation";
  }
  return "?";
}

std::string to_string(ShiftGranularity g) {
  return g == ShiftGranularity::Channel ? "channel" : "unit";
}

Activation parse_activation(const std::string& s) {
  if (s == "tanh") return Activation::Tanh;
  if (s == "relu") return Activation::Relu;
  throw ConfigError("unknown activation '" + s + "' (expected tanh|relu)");
}

ShiftMode parse_shift_mode(const std::string& s) {
  if (s == "normalized") return ShiftMode::Normalized;
  if (s == "raw_additive") return ShiftMode::RawAdditive;
  if (s == "pre_activation") return ShiftMode::PreActivation;
  throw ConfigError("unknown shift mode '" + s +
                    "' (expected normalized|raw_additive|pre_activation)");
}

ShiftGranularity parse_granularity(const std::string& s) {
  if (s == "channel") return ShiftGranularity::Channel;
  if (s == "unit") return ShiftGranularity::Unit;
  throw ConfigError("unknown shift granularity '" + s + "' (expected channel|unit)");
}

Var activate(Var x, Activation act) {
  switch (act) {
    case Activation::Tanh: return ops::tanh(x);
    case Activation::Relu: return ops::relu(x);
    case Activation::Identity: return x;
  }
  return x;
}

Tensor activation_derivative(const Tensor& preact, Activation act) {
  Tensor d(preact.shape());
  for (std::size_t i = 0; i < preact.size(); ++i) {
    switch (act) {
      case Activation::Tanh: {
        const double t = std::tanh(preact[i]);
        d[i] = 1.0 - t * t;
        break;
      }
      case Activation::Relu:
        d[i] = preact[i] > 0.0 ? 1.0 : 0.0;
        BranchTrace::note(preact[i] > 0.0);
        break;
      case Activation::Identity: d[i] = 1.0; break;
    }
  }
  return d;
}

Var shifted_activation(Var preact, Var shift, Activation act, ShiftMode mode, std::size_t group) {
  if (!shift.valid()) return activate(preact, act);
  const Shape original = preact.shape();
  const std::size_t batch = original.at(0);
  const std::size_t units = preact.value().size() / batch;
  if (group == 0 || units % group != 0) {
    throw DimensionError("shift group " + std::to_string(group) + " does not divide " +
                         std::to_string(units) + " units");
  }
  const Shape expected{batch, units / group};
  if (shift.shape() != expected) {
    throw DimensionError("shift shape " + shape_str(shift.shape()) + " does not match layer, expected " +
                         shape_str(expected));
  }
  Var flat = original.size() == 2 ? preact : ops::reshape(preact, {batch, units});
  Var beta = group == 1 ? shift : ops::repeat_groups(shift, group);
  Var out;
  switch (mode) {
    case ShiftMode::Normalized: out = ops::add(activate(flat, act), activate(beta, act)); break;
    case ShiftMode::RawAdditive: out = ops::add(activate(flat, act), beta); break;
    case ShiftMode::PreActivation: out = activate(ops::add(flat, beta), act); break;
  }
  return original.size() == 2 ? out : ops::reshape(out, original);
}

Tensor he_normal(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double stddev = std::sqrt(2.0 / double(fan_in));
  for (auto& v : t.data()) v = rng.normal(0.0, stddev);
  return t;
}

DenseLayer DenseLayer::create(ParameterStore& store, const std::string& name, std::size_t in,
                              std::size_t out, Rng& rng) {
  DenseLayer l;
  l.weight = &store.add(name + ".W", he_normal({out, in}, in, rng));
  l.bias = &store.add(name + ".b", Tensor({out}));
  l.in = in;
  l.out = out;
  return l;
}

Var DenseLayer::preactivation(Tape& tape, Var x) const {
  if (x.shape().size() != 2 || x.shape()[1] != in) {
    throw DimensionError("dense layer '" + weight->name + "' expects [B x " + std::to_string(in) +
                         "], got " + shape_str(x.shape()));
  }
  return ops::add_bias(ops::matmul(x, tape.param(*weight), ops::Transpose::Yes),
                       tape.param(*bias));
}

ShiftedOutput dense_csn_forward(Tape& tape, const DenseLayer& layer, Var x, Var shift,
                                Activation act, ShiftMode mode, const std::string& capture_as) {
  Var a = layer.preactivation(tape, x);
  if (!capture_as.empty()) a = tape.capture(a, capture_as);
  return {shifted_activation(a, shift, act, mode, 1), a};
}

OutputForward output_csn_forward(Tape& tape, const DenseLayer& layer, Var x, Var shift,
                                 const std::string& capture_as) {
  Var a = layer.preactivation(tape, x);
  if (!capture_as.empty()) a = tape.capture(a, capture_as);
  Var logits = a;
  if (shift.valid()) {
    if (shift.shape() != a.shape()) {
      throw DimensionError("output shift " + shape_str(shift.shape()) + " does not match logits " +
                           shape_str(a.shape()));
    }
    logits = ops::add(a, shift);
  }
  return {ops::softmax(logits), logits, a};
}

ConvLayer ConvLayer::create(ParameterStore& store, const std::string& name,
                            std::size_t in_channels, std::size_t out_channels, std::size_t size,
                            Rng& rng) {
  ConvLayer l;
  l.kernel = &store.add(name + ".K", he_normal({out_channels, in_channels, size, size},
                                               in_channels * size * size, rng));
  l.bias = &store.add(name + ".b", Tensor({out_channels}));
  l.in_channels = in_channels;
  l.out_channels = out_channels;
  l.size = size;
  return l;
}

Var ConvLayer::preactivation(Tape& tape, Var x) const {
  if (x.shape().size() != 4 || x.shape()[1] != in_channels) {
    throw DimensionError("conv layer '" + kernel->name + "' expects " +
                         std::to_string(in_channels) + " input channels, got " +
                         shape_str(x.shape()));
  }
  return ops::add_channel_bias(ops::conv2d(x, tape.param(*kernel)), tape.param(*bias));
}

std::size_t shift_group(const Shape& s, ShiftGranularity g) {
  return g == ShiftGranularity::Channel ? s.at(2) * s.at(3) : 1;
}

ShiftedOutput conv_csn_forward(Tape& tape, const ConvLayer& layer, Var x, Var shift,
                               ShiftMode mode, ShiftGranularity granularity,
                               const std::string& capture_as) {
  Var a = layer.preactivation(tape, x);
  if (!capture_as.empty()) a = tape.capture(a, capture_as);
  return {shifted_activation(a, shift, Activation::Relu, mode, shift_group(a.shape(), granularity)),
          a};
}

CSNResBlock CSNResBlock::create(ParameterStore& store, const std::string& name,
                                std::size_t in_channels, std::size_t filters, Rng& rng) {
  CSNResBlock b;
  b.conv_a = ConvLayer::create(store, name + ".a", in_channels, filters, 3, rng);
  b.conv_b = ConvLayer::create(store, name + ".b", filters, filters, 3, rng);
  b.conv_c = ConvLayer::create(store, name + ".c", filters, filters, 1, rng);
  b.conv_skip = ConvLayer::create(store, name + ".skip", in_channels, filters, 1, rng);
  b.filters = filters;
  return b;
}

Var CSNResBlock::preactivation(Tape& tape, Var x) const {
  Var h1 = ops::relu(conv_a.preactivation(tape, x));
  Var h2 = ops::relu(conv_b.preactivation(tape, h1));
  Var h3 = conv_c.preactivation(tape, h2);
  Var h4 = conv_skip.preactivation(tape, x);
  return ops::add(h3, h4);
}

ShiftedOutput resblock_forward(Tape& tape, const CSNResBlock& block, Var x, Var shift,
                               ShiftMode mode, ShiftGranularity granularity,
                               const std::string& capture_as) {
  Var a = block.preactivation(tape, x);
  if (!capture_as.empty()) a = tape.capture(a, capture_as);
  return {shifted_activation(a, shift, Activation::Relu, mode, shift_group(a.shape(), granularity)),
          a};
}

AdaLSTMCell AdaLSTMCell::create(ParameterStore& store, const std::string& name, std::size_t input,
                                std::size_t hidden, Rng& rng) {
  AdaLSTMCell c;
  const std::size_t fan_in = input + hidden;
  c.w_i = &store.add(name + ".W_i", he_normal({hidden, fan_in}, fan_in, rng));
  c.w_f = &store.add(name + ".W_f", he_normal({hidden, fan_in}, fan_in, rng));
  c.w_o = &store.add(name + ".W_o", he_normal({hidden, fan_in}, fan_in, rng));
  c.w_v = &store.add(name + ".W_v", he_normal({hidden, fan_in}, fan_in, rng));
  c.b_i = &store.add(name + ".b_i", Tensor({hidden}));
  c.b_f = &store.add(name + ".b_f", Tensor({hidden}));
  c.b_o = &store.add(name + ".b_o", Tensor({hidden}));
  c.b_v = &store.add(name + ".b_v", Tensor({hidden}));
  c.input = input;
  c.hidden = hidden;
  return c;
}

LSTMStep adalstm_step(Tape& tape, const AdaLSTMCell& cell, Var x, Var h_prev, Var c_prev,
                      Var shift, ShiftMode mode, const std::string& capture_as) {
  const std::size_t batch = x.shape().at(0);
  if (x.shape().size() != 2 || x.shape()[1] != cell.input) {
    throw DimensionError("adaLSTM step expects input [B x " + std::to_string(cell.input) +
                         "], got " + shape_str(x.shape()));
  }
  const Shape state{batch, cell.hidden};
  if (h_prev.shape() != state || c_prev.shape() != state) {
    throw DimensionError("adaLSTM state must be " + shape_str(state) + ", got h " +
                         shape_str(h_prev.shape()) + ", c " + shape_str(c_prev.shape()));
  }
  const Var parts[] = {x, h_prev};
  Var z = ops::concat_cols(parts);
  auto gate = [&](Parameter* w, Parameter* b) {
    return ops::add_bias(ops::matmul(z, tape.param(*w), ops::Transpose::Yes), tape.param(*b));
  };
  Var i = ops::sigmoid(gate(cell.w_i, cell.b_i));
  Var f = ops::sigmoid(gate(cell.w_f, cell.b_f));
  Var o = ops::sigmoid(gate(cell.w_o, cell.b_o));
  Var v = ops::tanh(gate(cell.w_v, cell.b_v));
  Var c = ops::add(ops::mul(v, i), ops::mul(c_prev, f));
  if (!capture_as.empty()) c = tape.capture(c, capture_as);
  Var h = ops::mul(shifted_activation(c, shift, Activation::Tanh, mode, 1), o);
  return {h, c, i, f, o};
}

}  // namespace csn
