// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "csn/conditioning.hpp"

namespace csn {

enum class AttentionMode { Soft, Hard };
enum class ValueKind { MLP3, ScalarLambda, Perceptron1 };

std::string to_string(AttentionMode a);
std::string to_string(ValueKind v);
AttentionMode parse_attention(const std::string& s);
ValueKind parse_value_kind(const std::string& s);

/// f: input -> R^d. A feature body of the base learner's family (kept as
/// separate parameters) followed by a linear map.
class KeyFunction {
 public:
  KeyFunction(const NetworkSpec& net, std::size_t key_dim, std::size_t vector_hidden,
              ParameterStore& store, Rng& rng);
  std::size_t dim() const { return dim_; }
  /// [B x d] keys for a batch of raw inputs.
  Var operator()(Tape& tape, const Tensor& x) const;

 private:
  FeatureBody body_;
  DenseLayer proj_;
  std::size_t dim_;
};

/// g: maps each neuron's m-vector of conditioning information to one scalar.
/// The same parameters serve every layer.
class ValueFunction {
 public:
  ValueFunction(ValueKind kind, std::size_t m, std::size_t hidden, ParameterStore& store, Rng& rng);
  ValueKind kind() const { return kind_; }
  std::size_t input_dim() const { return m_; }
  /// info [R x m] -> [R x 1]
  Var operator()(Tape& tape, Var info) const;
  /// Parameters of the last layer (lambda for ScalarLambda).
  std::vector<Parameter*> output_parameters() const;

 private:
  ValueKind kind_;
  std::size_t m_;
  std::vector<DenseLayer> layers_;
  Parameter* lambda_ = nullptr;
};

struct MemoryBank {
  Var keys;     // [n x d]
  Var values;   // [n x W], slots concatenated
  std::vector<std::size_t> offsets;

  std::size_t size() const { return keys.valid() ? keys.shape()[0] : 0; }
  /// V_t: [n x L_t]
  Var slot_values(std::size_t t) const;
};

/// K row i = f(x'_i); V row i = g applied per neuron to the info of example i.
/// `info` is [n * W x m] with row i * W + j (see ConditioningInfo).
MemoryBank write_memory(Tape& tape, const Tensor& description_x, Var info,
                        const std::vector<std::size_t>& offsets, const KeyFunction& f,
                        const ValueFunction& g);
MemoryBank write_memory(Tape& tape, const Tensor& description_x, const ConditioningInfo& info,
                        const KeyFunction& f, const ValueFunction& g);

struct ShiftSet {
  std::vector<Var> shifts;  // per slot, [B x L_t]
  Var attention;            // [B x n]; one-hot rows in hard mode
};

/// alpha = softmax_i cos(f(x_j), k'_i); beta_t = alpha V_t. Hard mode reads the
/// row with the largest cosine, ties going to the lowest index.
ShiftSet read_shifts(Tape& tape, const Tensor& query_x, const MemoryBank& bank,
                     const KeyFunction& f, AttentionMode mode);

/// Same, from precomputed query keys [B x d].
ShiftSet read_shifts(Tape& tape, Var query_keys, const MemoryBank& bank, AttentionMode mode);

}  // namespace csn
