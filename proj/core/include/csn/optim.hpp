// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "csn/tape.hpp"

namespace csn {

enum class OptimizerKind { Adam, SGDMomentum };
enum class ClipKind { Norm, Value };

std::string to_string(OptimizerKind k);
OptimizerKind parse_optimizer(const std::string& s);
ClipKind parse_clip_kind(const std::string& s);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Adam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double momentum = 0.9;
};

/// Updates parameter values from their accumulated gradients.
class Optimizer {
 public:
  explicit Optimizer(const OptimizerConfig& config) : config_(config) {}
  void step(ParameterStore& params);
  std::size_t steps() const { return t_; }

 private:
  OptimizerConfig config_;
  std::size_t t_ = 0;
  std::vector<Tensor> m_;  // first moment, or velocity for SGD
  std::vector<Tensor> v_;
};

/// Clips gradients in place: scales all of them so the global L2 norm is at
/// most `threshold` (Norm), or clamps each entry to [-threshold, threshold]
/// (Value). Returns the global norm before clipping.
double clip_gradients(ParameterStore& params, double threshold, ClipKind kind);

}  // namespace csn
