// SPDX-License-Identifier: Apache-2.0
#include "csn/memory.hpp"

namespace csn {

std::string to_string(AttentionMode a) { return a == AttentionMode::Soft ? "soft" : "hard"; }

std::string to_string(ValueKind v) {
  switch (v) {
    case ValueKind::MLP3: return "mlp3";
    case ValueKind::ScalarLambda: return "scalar_lambda";
    case ValueKind::Perceptron1: return "perceptron1";
  }
  return "?";
}

AttentionMode parse_attention(const std::string& s) {
  if (s == "soft") return AttentionMode::Soft;
  if (s == "hard") return AttentionMode::Hard;
  throw ConfigError("unknown attention mode '" + s + "' (expected soft|hard)");
}

ValueKind parse_value_kind(const std::string& s) {
  if (s == "mlp3") return ValueKind::MLP3;
  if (s == "scalar_lambda") return ValueKind::ScalarLambda;
  if (s == "perceptron1") return ValueKind::Perceptron1;
  throw ConfigError("unknown value function '" + s + "' (expected mlp3|scalar_lambda|perceptron1)");
}

KeyFunction::KeyFunction(const NetworkSpec& net, std::size_t key_dim, std::size_t vector_hidden,
                         ParameterStore& store, Rng& rng)
    : body_(net, vector_hidden, store, "key.", rng),
      proj_(DenseLayer::create(store, "key.proj", body_.out_features(), key_dim, rng)),
      dim_(key_dim) {}

Var KeyFunction::operator()(Tape& tape, const Tensor& x) const {
  return proj_.preactivation(tape, body_.forward(tape, x));
}

namespace {
constexpr double kValueBiasInit = 0.1;
}  // namespace

ValueFunction::ValueFunction(ValueKind kind, std::size_t m, std::size_t hidden,
                             ParameterStore& store, Rng& rng)
    : kind_(kind), m_(m) {
  switch (kind) {
    case ValueKind::MLP3:
      layers_.push_back(DenseLayer::create(store, "value.fc1", m, hidden, rng));
      layers_.push_back(DenseLayer::create(store, "value.fc2", hidden, hidden, rng));
      layers_.push_back(DenseLayer::create(store, "value.fc3", hidden, 1, rng));
      // Positive start so relu-shifted layers receive gradient from the first episode.
      layers_.back().bias->value[0] = kValueBiasInit;
      break;
    case ValueKind::Perceptron1:
      layers_.push_back(DenseLayer::create(store, "value.fc1", m, 1, rng));
      break;
    case ValueKind::ScalarLambda:
      if (m != 1) throw ConfigError("scalar_lambda value function needs raw gradients (m = 1)");
      lambda_ = &store.add("value.lambda", Tensor::vector({-1.0}));
      break;
  }
}

Var ValueFunction::operator()(Tape& tape, Var info) const {
  if (info.shape().size() != 2 || info.shape()[1] != m_) {
    throw DimensionError("value function expects [R x " + std::to_string(m_) + "], got " +
                         shape_str(info.shape()));
  }
  if (kind_ == ValueKind::ScalarLambda) return ops::mul_scalar(info, tape.param(*lambda_));
  Var h = info;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    h = layers_[i].preactivation(tape, h);
    if (i + 1 < layers_.size()) h = ops::relu(h);
  }
  return h;
}

std::vector<Parameter*> ValueFunction::output_parameters() const {
  if (lambda_ != nullptr) return {lambda_};
  return {layers_.back().weight, layers_.back().bias};
}

Var MemoryBank::slot_values(std::size_t t) const {
  return ops::slice_cols(values, offsets.at(t), offsets.at(t + 1));
}

MemoryBank write_memory(Tape& tape, const Tensor& description_x, Var info,
                        const std::vector<std::size_t>& offsets, const KeyFunction& f,
                        const ValueFunction& g) {
  const std::size_t n = description_x.rank() == 0 ? 0 : description_x.dim(0);
  if (n == 0) throw UsageError("write_memory: empty description");
  const std::size_t width = offsets.back();
  if (info.shape()[0] != n * width) {
    throw DimensionError("write_memory: info has " + std::to_string(info.shape()[0]) +
                         " rows, expected " + std::to_string(n) + " x " + std::to_string(width));
  }
  MemoryBank bank;
  bank.keys = f(tape, description_x);
  bank.values = ops::reshape(g(tape, info), {n, width});
  bank.offsets = offsets;
  return bank;
}

MemoryBank write_memory(Tape& tape, const Tensor& description_x, const ConditioningInfo& info,
                        const KeyFunction& f, const ValueFunction& g) {
  if (info.examples != description_x.dim(0)) {
    throw DimensionError("write_memory: info covers " + std::to_string(info.examples) +
                         " examples, description has " + std::to_string(description_x.dim(0)));
  }
  return write_memory(tape, description_x, ops::stop_gradient(tape.constant(info.values)),
                      info.offsets, f, g);
}

ShiftSet read_shifts(Tape& tape, Var query_keys, const MemoryBank& bank, AttentionMode mode) {
  if (bank.size() == 0) throw UsageError("read_shifts: empty memory");
  ShiftSet out;
  Var cos = ops::cosine_similarity(query_keys, bank.keys);
  Var beta;
  if (mode == AttentionMode::Soft) {
    out.attention = ops::softmax(cos);
    beta = ops::matmul(out.attention, bank.values);
  } else {
    const Tensor& c = cos.value();
    const std::size_t b = c.dim(0), n = c.dim(1);
    std::vector<std::size_t> idx(b);
    Tensor onehot({b, n});
    for (std::size_t r = 0; r < b; ++r) {
      std::size_t best = 0;
      for (std::size_t i = 1; i < n; ++i) {
        if (c.at(r, i) > c.at(r, best)) best = i;
      }
      idx[r] = best;
      BranchTrace::note(best);
      onehot.at(r, best) = 1.0;
    }
    out.attention = tape.constant(std::move(onehot));
    beta = ops::gather_rows(bank.values, idx);
  }
  const std::size_t slots = bank.offsets.size() - 1;
  for (std::size_t t = 0; t < slots; ++t) {
    out.shifts.push_back(slots == 1 ? beta
                                    : ops::slice_cols(beta, bank.offsets[t], bank.offsets[t + 1]));
  }
  return out;
}

ShiftSet read_shifts(Tape& tape, const Tensor& query_x, const MemoryBank& bank,
                     const KeyFunction& f, AttentionMode mode) {
  return read_shifts(tape, f(tape, query_x), bank, mode);
}

}  // namespace csn
