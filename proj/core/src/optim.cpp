// SPDX-License-Identifier: Apache-2.0
#include "csn/optim.hpp"

#include <algorithm>
#include <cmath>

namespace csn {

std::string to_string(OptimizerKind k) { return k == OptimizerKind::Adam ? "adam" : "sgd"; }

OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "adam") return OptimizerKind::Adam;
  if (s == "sgd") return OptimizerKind::SGDMomentum;
  throw ConfigError("unknown optimizer '" + s + "' (expected adam|sgd)");
}

ClipKind parse_clip_kind(const std::string& s) {
  if (s == "norm") return ClipKind::Norm;
  if (s == "value") return ClipKind::Value;
  throw ConfigError("unknown clip kind '" + s + "' (expected norm|value)");
}

void Optimizer::step(ParameterStore& params) {
  if (m_.empty()) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_.emplace_back(params[i].value.shape());
      v_.emplace_back(params[i].value.shape());
    }
  }
  ++t_;
  const auto& c = config_;
  const double bc1 = 1.0 - std::pow(c.beta1, double(t_));
  const double bc2 = 1.0 - std::pow(c.beta2, double(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto theta = params[i].value.data();
    auto g = params[i].grad.data();
    auto m = m_[i].data();
    auto v = v_[i].data();
    for (std::size_t j = 0; j < theta.size(); ++j) {
      if (c.kind == OptimizerKind::Adam) {
        m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
        v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
        theta[j] -= c.lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + c.eps);
      } else {
        m[j] = c.momentum * m[j] + g[j];
        theta[j] -= c.lr * m[j];
      }
    }
  }
}

double clip_gradients(ParameterStore& params, double threshold, ClipKind kind) {
  if (!(threshold > 0.0)) throw ConfigError("clip threshold must be positive");
  const double norm = params.grad_norm();
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (auto& g : params[i].grad.data()) {
      if (kind == ClipKind::Norm) {
        if (norm > threshold) g *= threshold / norm;
      } else {
        g = std::clamp(g, -threshold, threshold);
      }
    }
  }
  return norm;
}

}  // namespace csn
