// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "csn/gradcheck.hpp"
#include "csn/training.hpp"

namespace csn {

struct GroupCheck {
  std::string group;  // parameter name
  GradCheckResult result;
};

struct PipelineCheck {
  std::vector<GroupCheck> groups;
  double worst = 0.0;
  std::string worst_group;
  bool passed(double tolerance = 1e-4) const { return worst < tolerance; }
};

/// Finite differences against backward() on episode_loss for `samples`
/// random coordinates of every parameter, using Ridders extrapolation from
/// `step`. Conditioning information is frozen
/// at the checked parameters (it is a constant of the training graph), except
/// when the model keeps direct feedback on the tape.
///
/// The check runs at the parameters plus N(0, jitter) noise: zero-initialized
/// biases otherwise put relu units fed by blank inputs exactly on the kink.
/// The model's parameters are restored afterwards.
PipelineCheck check_episode_gradients(CSNModel& model, const Episode& episode,
                                      std::size_t samples, std::uint64_t seed,
                                      double step = 1e-2, double jitter = 1e-2);

struct TimingStats {
  double median_ms = 0.0;
  double p95_ms = 0.0;
  double median_extract_ms = 0.0;
  double p95_extract_ms = 0.0;
  /// Backward traversals during conditioning extraction, per episode.
  double extract_backward = 0.0;
  std::size_t episodes = 0;
};

/// Nearest-rank percentile, q in [0, 1].
double percentile(std::vector<double> values, double q);

/// Times describe + predict on episodes derive_seed(seed, i), i < warmup +
/// episodes; the first `warmup` are excluded from the statistics.
TimingStats bench_episodes(const CSNModel& model, const TaskSource& source,
                           const EpisodeShape& shape, std::size_t episodes, std::uint64_t seed,
                           std::size_t warmup = 10);

}  // namespace csn
