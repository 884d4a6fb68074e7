// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "csn/tape.hpp"

namespace csn {

/// The finite-difference oracle could not be evaluated (for example the loss
/// is not deterministic).
class OracleError : public Error {
 public:
  using Error::Error;
};

/// Builds a scalar loss on the given tape from the current parameter values.
using LossFn = std::function<Var(Tape&)>;

enum class DiffMethod {
  Central,
  /// Richardson extrapolation over shrinking steps (Ridders), restricted to
  /// the smooth piece of the base point: steps are cut until every
  /// evaluation has the base point's BranchTrace fingerprint, and a kink
  /// close on one side switches to one-sided differences. `step` is the
  /// largest step tried. Resolves gradients far below the rounding noise of a
  /// single central difference on piecewise-smooth losses.
  Ridders,
};

struct GradCheckOptions {
  double step = 1e-5;
  DiffMethod method = DiffMethod::Central;
  /// Coordinates checked per parameter; 0 checks every coordinate.
  std::size_t samples_per_param = 0;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
};

/// Central differences (f(t+h) - f(t-h)) / 2h against backward(), coordinate
/// by coordinate. Relative error uses max(|analytic|, 1e-8) as denominator.
GradCheckResult finite_diff_check(const LossFn& f, std::span<Parameter* const> params,
                                  const GradCheckOptions& options = {});

struct OpCheck {
  std::string op;
  double max_rel_error = 0.0;
};

/// Checks every primitive op against finite differences at `points` random
/// inputs each.
std::vector<OpCheck> check_primitive_ops(std::uint64_t seed, std::size_t points = 20,
                                         double step = 1e-5);

}  // namespace csn
