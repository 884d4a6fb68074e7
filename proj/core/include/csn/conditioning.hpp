// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "csn/networks.hpp"

namespace csn {

enum class ConditioningKind { Gradient, DirectFeedback };

std::string to_string(ConditioningKind k);
ConditioningKind parse_conditioning(const std::string& s);

struct ConditioningMode {
  ConditioningKind kind = ConditioningKind::Gradient;
  /// Preprocessing constant for gradient information.
  double p = 7.0;
  /// When false the raw gradient is stored (m = 1); used by the scalar value
  /// function.
  bool preprocess = true;
};

/// (log|g| / p, sgn g) if |g| >= e^-p, otherwise (-1, e^p g).
std::pair<double, double> preprocess_gradient(double g, double p = 7.0);

/// Conditioning information for n description examples over every shift slot
/// of a network, stored as one [n * W x m] matrix whose row i * W + j holds
/// neuron j (slots concatenated in order) of example i.
struct ConditioningInfo {
  std::size_t examples = 0;
  std::size_t width = 0;
  std::size_t m = 0;
  std::vector<std::size_t> offsets;  // first column of each slot; back() == width
  Tensor values;

  /// [n x L_t x m] block of slot t.
  Tensor slot(std::size_t t) const;
};

/// Per-example backpropagated dL/da at every slot pre-activation (dL/dc_t for
/// recurrent slots), one scratch tape and one backward traversal per example.
/// Channel-granular slots average the gradient over the spatial plane.
ConditioningInfo extract_gradient_info(const BaseNetwork& net, const Tensor& x, const Tensor& y,
                                       const ConditioningMode& mode = {});

/// sigma'(a) (y_hat - y) at every slot from a single forward pass; the output
/// layer uses sigma' = 1. No backward traversal.
ConditioningInfo extract_df_info(const BaseNetwork& net, const Tensor& x, const Tensor& y);

/// Recurrent networks: same as the two extractors above, indexed by
/// (layer, time step) through the network's per-step slots.
ConditioningInfo extract_recurrent_info(const BaseNetwork& net, const Tensor& x, const Tensor& y,
                                        const ConditioningMode& mode);

/// Dispatches on mode.kind.
ConditioningInfo extract_info(const BaseNetwork& net, const Tensor& x, const Tensor& y,
                              const ConditioningMode& mode);

/// Direct feedback computed on an existing tape so gradients flow through the
/// conditioning information itself. `fwd` is the description-phase forward.
Var df_info_on_tape(Tape& tape, const BaseNetwork& net, const NetForward& fwd, const Tensor& y);

}  // namespace csn
