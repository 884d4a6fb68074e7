// SPDX-License-Identifier: Apache-2.0
#include "csn/networks.hpp"

#include <algorithm>

namespace csn {

std::string to_string(Arch a) {
  switch (a) {
    case Arch::FFN: return "adaffn";
    case Arch::CNN: return "adacnn";
    case Arch::ResNet: return "adaresnet";
    case Arch::LSTM: return "adalstm";
    case Arch::LSTMFFN: return "lstm_adaffn";
  }
  return "?";
}

Arch parse_arch(const std::string& s) {
  if (s == "adaffn") return Arch::FFN;
  if (s == "adacnn") return Arch::CNN;
  if (s == "adaresnet") return Arch::ResNet;
  if (s == "adalstm") return Arch::LSTM;
  if (s == "lstm_adaffn") return Arch::LSTMFFN;
  throw ConfigError("unknown architecture '" + s +
                    "' (expected adaffn|adacnn|adaresnet|adalstm|lstm_adaffn)");
}

InputKind input_kind(Arch a) {
  switch (a) {
    case Arch::FFN: return InputKind::Vector;
    case Arch::CNN:
    case Arch::ResNet: return InputKind::Image;
    case Arch::LSTM:
    case Arch::LSTMFFN: return InputKind::Sequence;
  }
  return InputKind::Vector;
}

Tensor network_input(InputKind kind, const Tensor& x) {
  if (kind == InputKind::Image && x.rank() == 3) {
    return x.reshaped({x.dim(0), 1, x.dim(1), x.dim(2)});
  }
  if (kind == InputKind::Image && x.rank() != 4) {
    throw DimensionError("image input must be [B x H x W], got " + shape_str(x.shape()));
  }
  if (kind != InputKind::Image && x.rank() != 2) {
    throw DimensionError("input must be [B x features], got " + shape_str(x.shape()));
  }
  return x;
}

namespace {

std::size_t pooled(std::size_t s) { return (s + 1) / 2; }

std::size_t res_width(const NetworkSpec& spec, std::size_t i) {
  return std::max<std::size_t>(1, spec.res_filters[i] / std::max<std::size_t>(1, spec.res_divisor));
}

void check_input(const NetworkSpec& spec, const Tensor& x) {
  switch (input_kind(spec.arch)) {
    case InputKind::Vector:
      if (x.dim(1) != spec.input_dim) {
        throw DimensionError("expected input width " + std::to_string(spec.input_dim) + ", got " +
                             shape_str(x.shape()));
      }
      break;
    case InputKind::Image:
      if (x.dim(2) != spec.image_size || x.dim(3) != spec.image_size) {
        throw DimensionError("expected " + std::to_string(spec.image_size) + "x" +
                             std::to_string(spec.image_size) + " images, got " +
                             shape_str(x.shape()));
      }
      break;
    case InputKind::Sequence:
      if (x.dim(1) != spec.seq_len) {
        throw DimensionError("expected sequences of length " + std::to_string(spec.seq_len) +
                             ", got " + shape_str(x.shape()));
      }
      break;
  }
}

struct SequenceRun {
  Var h;                       // last layer, last step
  std::vector<Var> c;          // [layer * S + t]
};

// Runs the embedding and the LSTM stack over token ids [B x S]. Padding
// positions carry the previous state through unchanged.
template <typename ShiftFn, typename NameFn>
SequenceRun run_sequence(Tape& tape, const NetworkSpec& spec, Parameter* embedding,
                         const std::vector<AdaLSTMCell>& cells, const Tensor& ids,
                         ShiftFn shift_for, NameFn name_for) {
  const std::size_t batch = ids.dim(0);
  const std::size_t steps = ids.dim(1);
  Var emb = tape.param(*embedding);
  std::vector<Var> h, c;
  for (const auto& cell : cells) {
    h.push_back(tape.constant(Tensor({batch, cell.hidden})));
    c.push_back(tape.constant(Tensor({batch, cell.hidden})));
  }
  SequenceRun run;
  for (std::size_t t = 0; t < steps; ++t) {
    std::vector<std::size_t> idx(batch);
    bool padded = false;
    for (std::size_t b = 0; b < batch; ++b) {
      const double tok = ids.at(b, t);
      if (tok == kPadToken) {
        padded = true;
        idx[b] = 0;
        continue;
      }
      if (tok < 0 || tok >= double(spec.vocab) || tok != double(std::size_t(tok))) {
        throw DimensionError("token id " + std::to_string(tok) + " outside vocabulary of " +
                             std::to_string(spec.vocab));
      }
      idx[b] = std::size_t(tok);
    }
    Var in = ops::gather_rows(emb, idx);
    for (std::size_t l = 0; l < cells.size(); ++l) {
      LSTMStep s = adalstm_step(tape, cells[l], in, h[l], c[l], shift_for(l, t), spec.shift_mode,
                                name_for(l, t));
      run.c.push_back(s.c);
      if (padded) {
        Tensor keep({batch, cells[l].hidden});
        Tensor pass({batch, cells[l].hidden});
        for (std::size_t b = 0; b < batch; ++b) {
          const bool pad = ids.at(b, t) == kPadToken;
          for (std::size_t u = 0; u < cells[l].hidden; ++u) {
            keep.at(b, u) = pad ? 0.0 : 1.0;
            pass.at(b, u) = pad ? 1.0 : 0.0;
          }
        }
        h[l] = ops::add(ops::mul_const(s.h, keep), ops::mul_const(h[l], pass));
        c[l] = ops::add(ops::mul_const(s.c, keep), ops::mul_const(c[l], pass));
      } else {
        h[l] = s.h;
        c[l] = s.c;
      }
      in = h[l];
    }
  }
  // Reorder c from [t * L + l] to [l * S + t].
  std::vector<Var> by_layer(run.c.size());
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t l = 0; l < cells.size(); ++l) by_layer[l * steps + t] = run.c[t * cells.size() + l];
  }
  run.c = std::move(by_layer);
  run.h = h.back();
  return run;
}

}  // namespace

BaseNetwork::BaseNetwork(const NetworkSpec& spec, ParameterStore& store, const std::string& prefix,
                         Rng& rng)
    : spec_(spec) {
  if (spec.classes < 2) throw ConfigError("model.classes must be at least 2");
  std::size_t features = 0;
  switch (spec.arch) {
    case Arch::FFN: features = spec.input_dim; break;
    case Arch::CNN: {
      std::size_t in = 1, s = spec.image_size;
      for (std::size_t i = 0; i < spec.conv_layers; ++i) {
        conv_.push_back(ConvLayer::create(store, prefix + "conv" + std::to_string(i + 1), in,
                                          spec.filters, 3, rng));
        layers_.push_back({Layer::Kind::Conv, i, -1, s});
        in = spec.filters;
        s = pooled(s);
      }
      features = in * s * s;
      break;
    }
    case Arch::ResNet: {
      std::size_t in = 1, s = spec.image_size;
      for (std::size_t i = 0; i < spec.res_filters.size(); ++i) {
        const std::size_t f = res_width(spec, i);
        res_.push_back(CSNResBlock::create(store, prefix + "block" + std::to_string(i + 1), in, f, rng));
        layers_.push_back({Layer::Kind::Res, i, -1, s});
        in = f;
        s = pooled(s);
      }
      features = in * s * s;
      break;
    }
    case Arch::LSTM:
    case Arch::LSTMFFN: {
      embedding_ = &store.add(prefix + "embed",
                              he_normal({spec.vocab, spec.embed_dim}, spec.embed_dim, rng));
      std::size_t in = spec.embed_dim;
      for (std::size_t l = 0; l < spec.lstm_layers; ++l) {
        cells_.push_back(AdaLSTMCell::create(store, prefix + "lstm" + std::to_string(l + 1), in,
                                             spec.lstm_hidden, rng));
        // The plain LSTM under an adaptive head never carries shifts.
        if (spec.arch == Arch::LSTM) layers_.push_back({Layer::Kind::Lstm, l, -1, 0});
        in = spec.lstm_hidden;
      }
      features = in;
      break;
    }
  }
  std::size_t in = features;
  for (std::size_t i = 0; i < spec.hidden.size(); ++i) {
    dense_.push_back(DenseLayer::create(store, prefix + "fc" + std::to_string(i + 1), in,
                                        spec.hidden[i], rng));
    layers_.push_back({Layer::Kind::Dense, i, -1, 0});
    in = spec.hidden[i];
  }
  output_ = DenseLayer::create(store, prefix + "out", in, spec.classes, rng);
  layers_.push_back({Layer::Kind::Output, 0, -1, 0});

  const std::size_t first_csn = layers_.size() - std::min(spec.csn_layers, layers_.size());
  for (std::size_t k = first_csn; k < layers_.size(); ++k) {
    Layer& layer = layers_[k];
    layer.slot = int(slots_.size());
    switch (layer.kind) {
      case Layer::Kind::Conv:
      case Layer::Kind::Res: {
        const std::size_t f = layer.kind == Layer::Kind::Conv ? conv_[layer.index].out_channels
                                                              : res_[layer.index].filters;
        const std::size_t plane = layer.spatial * layer.spatial;
        const std::string name =
            (layer.kind == Layer::Kind::Conv ? "conv" : "block") + std::to_string(layer.index + 1);
        if (spec.granularity == ShiftGranularity::Channel) {
          slots_.push_back({name, f, plane, Activation::Relu, false});
        } else {
          slots_.push_back({name, f * plane, 1, Activation::Relu, false});
        }
        break;
      }
      case Layer::Kind::Lstm:
        for (std::size_t t = 0; t < spec.seq_len; ++t) {
          slots_.push_back({"lstm" + std::to_string(layer.index + 1) + ".t" + std::to_string(t),
                            spec.lstm_hidden, 1, Activation::Tanh, false});
        }
        break;
      case Layer::Kind::Dense:
        slots_.push_back({"fc" + std::to_string(layer.index + 1), dense_[layer.index].out, 1,
                          spec.activation, false});
        break;
      case Layer::Kind::Output:
        slots_.push_back({"out", spec.classes, 1, Activation::Identity, true});
        break;
    }
  }
}

std::size_t BaseNetwork::shift_width() const {
  std::size_t w = 0;
  for (const auto& s : slots_) w += s.width;
  return w;
}

Var BaseNetwork::shift_for(const ForwardOptions& o, int slot) const {
  if (slot < 0 || o.shifts.empty()) return {};
  return o.shifts.at(std::size_t(slot));
}

std::string BaseNetwork::capture_name(const ForwardOptions& o, int slot) const {
  if (slot < 0 || o.capture_prefix.empty()) return {};
  return o.capture_prefix + slots_[std::size_t(slot)].name;
}

Var BaseNetwork::dropout(Tape& tape, Var h, const ForwardOptions& o) const {
  (void)tape;
  if (o.dropout_rng == nullptr || spec_.dropout <= 0.0) return h;
  const double keep = 1.0 - spec_.dropout;
  Tensor mask(h.shape());
  for (auto& m : mask.data()) m = o.dropout_rng->bernoulli(keep) ? 1.0 / keep : 0.0;
  return ops::mul_const(h, mask);
}

NetForward BaseNetwork::forward(Tape& tape, const Tensor& raw, const ForwardOptions& o) const {
  if (!o.shifts.empty() && o.shifts.size() != slots_.size()) {
    throw ConfigError("network has " + std::to_string(slots_.size()) + " shift slots, got " +
                      std::to_string(o.shifts.size()) + " shifts");
  }
  const Tensor x = network_input(input_kind(spec_.arch), raw);
  check_input(spec_, x);
  const std::size_t batch = x.dim(0);

  NetForward out;
  out.preacts.resize(slots_.size());
  Var h;
  std::size_t k = 0;  // index into layers_
  switch (input_kind(spec_.arch)) {
    case InputKind::Vector: h = tape.constant(x); break;
    case InputKind::Image: {
      h = tape.constant(x);
      const std::size_t body = spec_.arch == Arch::CNN ? conv_.size() : res_.size();
      for (; k < body; ++k) {
        const Layer& layer = layers_[k];
        ShiftedOutput r =
            layer.kind == Layer::Kind::Conv
                ? conv_csn_forward(tape, conv_[layer.index], h, shift_for(o, layer.slot),
                                   spec_.shift_mode, spec_.granularity, capture_name(o, layer.slot))
                : resblock_forward(tape, res_[layer.index], h, shift_for(o, layer.slot),
                                   spec_.shift_mode, spec_.granularity, capture_name(o, layer.slot));
        if (layer.slot >= 0) out.preacts[std::size_t(layer.slot)] = r.preact;
        h = ops::maxpool2x2(r.h);
      }
      h = ops::reshape(h, {batch, h.value().size() / batch});
      h = dropout(tape, h, o);
      break;
    }
    case InputKind::Sequence: {
      const bool adaptive = spec_.arch == Arch::LSTM;
      auto slot_of = [&](std::size_t l, std::size_t t) -> int {
        if (!adaptive || layers_[l].slot < 0) return -1;
        return layers_[l].slot + int(t);
      };
      SequenceRun run = run_sequence(
          tape, spec_, embedding_, cells_, x,
          [&](std::size_t l, std::size_t t) { return shift_for(o, slot_of(l, t)); },
          [&](std::size_t l, std::size_t t) { return capture_name(o, slot_of(l, t)); });
      if (adaptive) {
        for (std::size_t l = 0; l < cells_.size(); ++l) {
          for (std::size_t t = 0; t < spec_.seq_len; ++t) {
            const int s = slot_of(l, t);
            if (s >= 0) out.preacts[std::size_t(s)] = run.c[l * spec_.seq_len + t];
          }
        }
        k = cells_.size();
      }
      out.sequence_state = run.h;
      h = dropout(tape, run.h, o);
      break;
    }
  }
  for (; layers_[k].kind == Layer::Kind::Dense; ++k) {
    const Layer& layer = layers_[k];
    ShiftedOutput r = dense_csn_forward(tape, dense_[layer.index], h, shift_for(o, layer.slot),
                                        spec_.activation, spec_.shift_mode,
                                        capture_name(o, layer.slot));
    if (layer.slot >= 0) out.preacts[std::size_t(layer.slot)] = r.preact;
    h = dropout(tape, r.h, o);
  }
  const Layer& last = layers_[k];
  OutputForward r = output_csn_forward(tape, output_, h, shift_for(o, last.slot),
                                       capture_name(o, last.slot));
  if (last.slot >= 0) out.preacts[std::size_t(last.slot)] = r.preact;
  out.logits = r.logits;
  return out;
}

FeatureBody::FeatureBody(const NetworkSpec& spec, std::size_t vector_hidden, ParameterStore& store,
                         const std::string& prefix, Rng& rng)
    : spec_(spec) {
  switch (input_kind(spec.arch)) {
    case InputKind::Vector:
      dense_.push_back(DenseLayer::create(store, prefix + "fc1", spec.input_dim, vector_hidden, rng));
      out_features_ = vector_hidden;
      break;
    case InputKind::Image: {
      std::size_t in = 1, s = spec.image_size;
      if (spec.arch == Arch::CNN) {
        for (std::size_t i = 0; i < spec.conv_layers; ++i) {
          conv_.push_back(ConvLayer::create(store, prefix + "conv" + std::to_string(i + 1), in,
                                            spec.filters, 3, rng));
          in = spec.filters;
          s = pooled(s);
        }
      } else {
        for (std::size_t i = 0; i < spec.res_filters.size(); ++i) {
          const std::size_t f = res_width(spec, i);
          res_.push_back(CSNResBlock::create(store, prefix + "block" + std::to_string(i + 1), in, f, rng));
          in = f;
          s = pooled(s);
        }
      }
      out_features_ = in * s * s;
      break;
    }
    case InputKind::Sequence:
      embedding_ = &store.add(prefix + "embed",
                              he_normal({spec.vocab, spec.embed_dim}, spec.embed_dim, rng));
      cells_.push_back(AdaLSTMCell::create(store, prefix + "lstm1", spec.embed_dim,
                                           spec.lstm_hidden, rng));
      out_features_ = spec.lstm_hidden;
      break;
  }
}

Var FeatureBody::forward(Tape& tape, const Tensor& raw) const {
  const Tensor x = network_input(input_kind(spec_.arch), raw);
  check_input(spec_, x);
  const std::size_t batch = x.dim(0);
  switch (input_kind(spec_.arch)) {
    case InputKind::Vector:
      return ops::relu(dense_[0].preactivation(tape, tape.constant(x)));
    case InputKind::Image: {
      Var h = tape.constant(x);
      for (const auto& c : conv_) h = ops::maxpool2x2(ops::relu(c.preactivation(tape, h)));
      for (const auto& b : res_) h = ops::maxpool2x2(ops::relu(b.preactivation(tape, h)));
      return ops::reshape(h, {batch, h.value().size() / batch});
    }
    case InputKind::Sequence: {
      SequenceRun run = run_sequence(
          tape, spec_, embedding_, cells_, x, [](std::size_t, std::size_t) { return Var(); },
          [](std::size_t, std::size_t) { return std::string(); });
      return run.h;
    }
  }
  return {};
}

}  // namespace csn
