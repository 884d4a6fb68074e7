// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "csn/config.hpp"
#include "csn/memory.hpp"

namespace csn {

struct ModelSpec {
  NetworkSpec net;
  ConditioningMode cond;
  /// Conditioning information is a constant of the meta-training graph.
  bool stop_grad = true;
  AttentionMode attention = AttentionMode::Soft;
  ValueKind value = ValueKind::MLP3;
  std::size_t value_hidden = 20;
  std::size_t key_dim = 64;
  std::size_t key_hidden = 64;
  /// false: shift-disabled control; no key or value function is built.
  bool shifts = true;
};

/// Reads model.*, cond.*, memory.* and ablation.* keys of a resolved config.
ModelSpec model_spec_from_config(const Config& resolved);
/// Inverse of model_spec_from_config over the model key prefixes.
Config model_spec_to_config(const ModelSpec& spec);

/// One task: n = k * C description pairs and the query pairs. Labels are
/// episode-relative (0..C-1); the *_y tensors are their one-hot rows.
struct Episode {
  Tensor support_x;
  Tensor support_y;
  Tensor query_x;
  Tensor query_y;
  std::vector<std::size_t> support_labels;
  std::vector<std::size_t> query_labels;
  std::size_t ways = 0;
  std::size_t shots = 0;
  std::uint64_t seed = 0;
};

Tensor one_hot(const std::vector<std::size_t>& labels, std::size_t classes);

struct DescribeResult {
  MemoryBank bank;
  double extract_ms = 0.0;
};

struct LossResult {
  Var loss;            // sum of query cross-entropies
  Var logits;          // [m x C]
  std::size_t correct = 0;
  double extract_ms = 0.0;
};

/// Base learner plus meta learner (key and value functions).
class CSNModel {
 public:
  CSNModel(const ModelSpec& spec, std::uint64_t seed);
  CSNModel(const CSNModel&) = delete;
  CSNModel& operator=(const CSNModel&) = delete;

  const ModelSpec& spec() const { return spec_; }
  ParameterStore& params() { return store_; }
  const ParameterStore& params() const { return store_; }
  const BaseNetwork& network() const { return *net_; }
  const KeyFunction* key_function() const { return key_.get(); }
  const ValueFunction* value_function() const { return value_.get(); }

  /// Conditioning information of a description set, extracted on scratch tapes
  /// with every shift at zero.
  ConditioningInfo conditioning(const Tensor& x, const Tensor& y) const;

  /// Description phase: conditioning extraction then memory write. `frozen`
  /// substitutes precomputed information (for finite-difference checks).
  DescribeResult describe(Tape& tape, const Tensor& x, const Tensor& y,
                          const ConditioningInfo* frozen = nullptr) const;

  /// Prediction phase logits; a null bank (or a control model) runs with
  /// every shift at zero.
  Var predict_logits(Tape& tape, const MemoryBank* bank, const Tensor& query_x,
                     Rng* dropout = nullptr) const;

  /// Class probabilities for the queries, on a fresh tape.
  Tensor predict(const Tensor& support_x, const Tensor& support_y, const Tensor& query_x) const;

  /// describe() then the summed query cross-entropy, all on `tape`.
  LossResult episode_loss(Tape& tape, const Episode& episode, Rng* dropout = nullptr,
                          const ConditioningInfo* frozen = nullptr) const;

 private:
  ModelSpec spec_;
  ParameterStore store_;
  std::unique_ptr<BaseNetwork> net_;
  std::unique_ptr<KeyFunction> key_;
  std::unique_ptr<ValueFunction> value_;
};

constexpr std::uint8_t kModelFileVersion = 1;

void save_model(const CSNModel& model, const std::filesystem::path& path);
/// Throws LoadError on malformed or mismatched files; never returns a
/// partially loaded model.
std::unique_ptr<CSNModel> load_model(const std::filesystem::path& path);

/// ConfigError unless `model` can run episodes described by `expected`
/// (architecture and class count).
void check_model_compatible(const ModelSpec& model, const ModelSpec& expected);

}  // namespace csn
