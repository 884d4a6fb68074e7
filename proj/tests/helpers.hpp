// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <vector>

#include "csn/rng.hpp"
#include "csn/tensor.hpp"

namespace csn::test {

inline Tensor random_tensor(Rng& rng, Shape shape, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.normal(0.0, scale);
  return t;
}

inline Tensor one_hot_rows(const std::vector<std::size_t>& labels, std::size_t classes) {
  Tensor t({labels.size(), classes});
  for (std::size_t i = 0; i < labels.size(); ++i) t.at(i, labels[i]) = 1.0;
  return t;
}

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-12});
}

}  // namespace csn::test

#include <string>

#include "csn/config.hpp"
#include "csn/model.hpp"

namespace csn::test {

/// Resolved config from `key = value` lines on top of the defaults.
inline Config resolved(const std::string& text) { return resolve(Config::parse(text)); }

inline ModelSpec spec_from(const std::string& text) { return model_spec_from_config(resolved(text)); }

inline void fill(Parameter& p, double v) {
  for (double& x : p.value.data()) x = v;
}

}  // namespace csn::test
