// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "csn/layers.hpp"

namespace csn {

enum class Arch { FFN, CNN, ResNet, LSTM, LSTMFFN };

std::string to_string(Arch a);
Arch parse_arch(const std::string& s);

/// Input family of an architecture: [B x D] vectors, [B x H x W] images or
/// [B x S] token-id sequences.
enum class InputKind { Vector, Image, Sequence };
InputKind input_kind(Arch a);

/// Token id marking a left-padding position in a sequence.
constexpr double kPadToken = -1.0;

struct NetworkSpec {
  Arch arch = Arch::FFN;
  std::size_t classes = 5;

  std::size_t input_dim = 16;    // FFN
  std::size_t image_size = 14;   // CNN, ResNet
  std::size_t vocab = 64;        // LSTM, LSTMFFN
  std::size_t seq_len = 8;
  std::size_t embed_dim = 32;

  std::vector<std::size_t> hidden{64, 64};  // dense hidden layers before the output
  Activation activation = Activation::Tanh;

  std::size_t filters = 32;
  std::size_t conv_layers = 5;
  std::vector<std::size_t> res_filters{64, 96, 128, 256};
  std::size_t res_divisor = 4;

  std::size_t lstm_layers = 1;
  std::size_t lstm_hidden = 64;

  /// Number of layers, counted from the output, that carry CSNs. A recurrent
  /// layer counts once and gets one shift slot per time step.
  std::size_t csn_layers = std::numeric_limits<std::size_t>::max();
  ShiftMode shift_mode = ShiftMode::Normalized;
  ShiftGranularity granularity = ShiftGranularity::Channel;
  double dropout = 0.0;
};

/// One shift vector consumed by the network: `width` values per example, each
/// covering `group` consecutive pre-activation units.
struct ShiftSlot {
  std::string name;
  std::size_t width = 0;
  std::size_t group = 1;
  Activation activation = Activation::Identity;
  bool output = false;
};

struct ForwardOptions {
  /// One [B x width] shift per slot, or empty for beta = 0 everywhere.
  std::vector<Var> shifts;
  /// When non-empty, slot pre-activations are captured as prefix + slot name.
  std::string capture_prefix;
  /// Inverted dropout is active only when an rng is given.
  Rng* dropout_rng = nullptr;
};

struct NetForward {
  Var logits;
  /// Pre-activation of every slot (c_t for recurrent slots), unflattened.
  std::vector<Var> preacts;
  /// Final hidden state of the sequence body, if any.
  Var sequence_state;
};

/// Converts raw episode inputs into the layout the network consumes.
Tensor network_input(InputKind kind, const Tensor& x);

/// Base learner built from a NetworkSpec.
class BaseNetwork {
 public:
  BaseNetwork(const NetworkSpec& spec, ParameterStore& store, const std::string& prefix, Rng& rng);

  const NetworkSpec& spec() const { return spec_; }
  const std::vector<ShiftSlot>& slots() const { return slots_; }
  /// Total shift width over all slots.
  std::size_t shift_width() const;

  NetForward forward(Tape& tape, const Tensor& x, const ForwardOptions& options = {}) const;

 private:
  struct Layer {
    enum class Kind { Conv, Res, Lstm, Dense, Output } kind;
    std::size_t index = 0;      // into the per-kind container
    int slot = -1;              // first shift slot, -1 if not a CSN layer
    std::size_t spatial = 0;    // conv/res output side before pooling
  };

  Var shift_for(const ForwardOptions& o, int slot) const;
  std::string capture_name(const ForwardOptions& o, int slot) const;
  Var dropout(Tape& tape, Var h, const ForwardOptions& o) const;

  NetworkSpec spec_;
  std::vector<ConvLayer> conv_;
  std::vector<CSNResBlock> res_;
  Parameter* embedding_ = nullptr;
  std::vector<AdaLSTMCell> cells_;
  std::vector<DenseLayer> dense_;
  DenseLayer output_;
  std::vector<Layer> layers_;
  std::vector<ShiftSlot> slots_;
};

/// Feature extractor with no shifts, shared by the key function: the same
/// conv/residual/recurrent body as the base learner, or an MLP for vectors.
class FeatureBody {
 public:
  FeatureBody(const NetworkSpec& spec, std::size_t vector_hidden, ParameterStore& store,
              const std::string& prefix, Rng& rng);
  std::size_t out_features() const { return out_features_; }
  Var forward(Tape& tape, const Tensor& x) const;

 private:
  NetworkSpec spec_;
  std::vector<ConvLayer> conv_;
  std::vector<CSNResBlock> res_;
  Parameter* embedding_ = nullptr;
  std::vector<AdaLSTMCell> cells_;
  std::vector<DenseLayer> dense_;
  std::size_t out_features_ = 0;
};

}  // namespace csn
