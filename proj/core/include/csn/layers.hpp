// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <string>

#include "csn/ops.hpp"
#include "csn/rng.hpp"
#include "csn/tape.hpp"

// Layers with conditionally shifted neurons. Every forward takes a shift
// tensor beta; an empty Var means beta = 0, which the description phase uses.
namespace csn {

enum class Activation { Tanh, Relu, Identity };

/// How a hidden layer combines its activation with the retrieved shift.
///  Normalized:    sigma(a) + sigma(beta)
///  RawAdditive:   sigma(a) + beta
///  PreActivation: sigma(a + beta)
enum class ShiftMode { Normalized, RawAdditive, PreActivation };

/// Shift granularity for convolutional blocks: one shift per output channel,
/// broadcast over the spatial plane, or one per output unit.
enum class ShiftGranularity { Channel, Unit };

std::string to_string(Activation a);
std::string to_string(ShiftMode m);
std::string to_string(ShiftGranularity g);
Activation parse_activation(const std::string& s);
ShiftMode parse_shift_mode(const std::string& s);
ShiftGranularity parse_granularity(const std::string& s);

Var activate(Var x, Activation act);
/// sigma'(a) element-wise. relu'(0) is taken as 0; Identity gives ones.
Tensor activation_derivative(const Tensor& preact, Activation act);

/// Applies sigma and the shift to `preact` ([B x ...]). `shift` is
/// [B x units / group], each shift value covering `group` consecutive units.
Var shifted_activation(Var preact, Var shift, Activation act, ShiftMode mode,
                       std::size_t group = 1);

/// He-normal initialization: N(0, 2 / fan_in).
Tensor he_normal(Shape shape, std::size_t fan_in, Rng& rng);

/// a = x W^T + b with W [out x in].
struct DenseLayer {
  Parameter* weight = nullptr;
  Parameter* bias = nullptr;
  std::size_t in = 0;
  std::size_t out = 0;

  static DenseLayer create(ParameterStore& store, const std::string& name, std::size_t in,
                           std::size_t out, Rng& rng);
  Var preactivation(Tape& tape, Var x) const;
};

struct ShiftedOutput {
  Var h;
  Var preact;
};

/// Hidden CSN layer. If `capture_as` is non-empty the pre-activation node is
/// registered on the tape under that name for gradient capture.
ShiftedOutput dense_csn_forward(Tape& tape, const DenseLayer& layer, Var x, Var shift,
                                Activation act, ShiftMode mode,
                                const std::string& capture_as = {});

struct OutputForward {
  Var probs;
  Var logits;   // a_T + beta_T
  Var preact;   // a_T
};

/// softmax(a_T + beta_T); the shift is always added before the softmax.
OutputForward output_csn_forward(Tape& tape, const DenseLayer& layer, Var x, Var shift,
                                 const std::string& capture_as = {});

/// Same-padding stride-1 convolution with per-channel bias.
struct ConvLayer {
  Parameter* kernel = nullptr;
  Parameter* bias = nullptr;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t size = 0;

  static ConvLayer create(ParameterStore& store, const std::string& name, std::size_t in_channels,
                          std::size_t out_channels, std::size_t size, Rng& rng);
  Var preactivation(Tape& tape, Var x) const;
};

/// Shift group size of a [B x C x H x W] activation under `g`.
std::size_t shift_group(const Shape& activation_shape, ShiftGranularity g);

/// Convolutional CSN layer: conv -> shifted relu.
ShiftedOutput conv_csn_forward(Tape& tape, const ConvLayer& layer, Var x, Var shift,
                               ShiftMode mode, ShiftGranularity granularity,
                               const std::string& capture_as = {});

/// Residual block whose output neurons are CSNs:
///   h1 = relu(conv3x3(x)), h2 = relu(conv3x3(h1)), h3 = conv1x1(h2),
///   h4 = conv1x1(x), a = h3 + h4, h = relu(a) (+) beta.
struct CSNResBlock {
  ConvLayer conv_a;
  ConvLayer conv_b;
  ConvLayer conv_c;
  ConvLayer conv_skip;
  std::size_t filters = 0;

  static CSNResBlock create(ParameterStore& store, const std::string& name,
                            std::size_t in_channels, std::size_t filters, Rng& rng);
  Var preactivation(Tape& tape, Var x) const;
};

ShiftedOutput resblock_forward(Tape& tape, const CSNResBlock& block, Var x, Var shift,
                               ShiftMode mode, ShiftGranularity granularity,
                               const std::string& capture_as = {});

/// LSTM cell with shifted hidden output, gates over [x_t; h_{t-1}]:
///   c_t = tanh(W_v z + b_v) * i_t + c_{t-1} * f_t
///   h_t = (tanh(c_t) (+) beta_t) * o_t
struct AdaLSTMCell {
  Parameter* w_i = nullptr;
  Parameter* w_f = nullptr;
  Parameter* w_o = nullptr;
  Parameter* w_v = nullptr;
  Parameter* b_i = nullptr;
  Parameter* b_f = nullptr;
  Parameter* b_o = nullptr;
  Parameter* b_v = nullptr;
  std::size_t input = 0;
  std::size_t hidden = 0;

  static AdaLSTMCell create(ParameterStore& store, const std::string& name, std::size_t input,
                            std::size_t hidden, Rng& rng);
};

struct LSTMStep {
  Var h;
  Var c;
  Var i, f, o;
};

/// One time step. `c_t` is captured under `capture_as` when given.
LSTMStep adalstm_step(Tape& tape, const AdaLSTMCell& cell, Var x, Var h_prev, Var c_prev,
                      Var shift, ShiftMode mode, const std::string& capture_as = {});

}  // namespace csn
