// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "csn/optim.hpp"
#include "csn/sources.hpp"

namespace csn {

struct EpisodeShape {
  std::size_t ways = 5;
  std::size_t shots = 1;
  std::size_t queries = 75;
};

struct TrainerConfig {
  OptimizerConfig optimizer;
  std::optional<double> clip;
  ClipKind clip_kind = ClipKind::Norm;
  std::size_t episodes = 5000;
  std::size_t val_interval = 400;
  std::size_t val_episodes = 400;
  EpisodeShape shape;
  std::uint64_t seed = 1;
  /// Zero every timing field so metrics streams compare byte for byte.
  bool record_timing = true;
};

TrainerConfig trainer_config(const Config& resolved, std::uint64_t seed);
EpisodeShape episode_shape(const Config& resolved);

struct MetricsRecord {
  std::size_t episode = 0;
  std::string split;
  double loss = 0.0;       // mean summed query cross-entropy per episode
  double accuracy = 0.0;
  double wall_ms = 0.0;    // per episode
  double extract_ms = 0.0; // conditioning extraction per episode
  double timestamp = 0.0;  // seconds since the Unix epoch
};

std::string to_json(const MetricsRecord& r);

struct TrainHooks {
  std::function<void(const MetricsRecord&)> on_record;
  /// Called with the model at its new best validation accuracy.
  std::function<void(const CSNModel&, std::size_t episode)> on_checkpoint;
};

struct TrainResult {
  std::size_t episodes = 0;
  double best_val_accuracy = -1.0;
  std::size_t best_episode = 0;
};

/// Episodic meta-training. Episode e uses the seed derive_seed(config.seed, e).
/// Validates every val_interval episodes on a fixed set of validation episodes
/// and keeps the parameters of the best validation result, which the model
/// holds on return. Non-finite values raise NumericError naming the episode
/// seed.
TrainResult train(CSNModel& model, const TaskSource& source, const TrainerConfig& config,
                  const TrainHooks& hooks = {});

struct EvalReport {
  double mean = 0.0;
  double std = 0.0;
  double ci95 = 0.0;
  std::size_t episodes = 0;
  double ms_per_episode = 0.0;
  double extract_ms = 0.0;
  double loss = 0.0;
  std::vector<double> accuracies;
};

std::string to_json(const EvalReport& r, bool with_timing = true);

/// Accuracy over `episodes` episodes; episode i is sampled from
/// derive_seed(seed, i), so results do not depend on evaluation order.
EvalReport evaluate(const CSNModel& model, const TaskSource& source, Split split,
                    std::size_t episodes, const EpisodeShape& shape, std::uint64_t seed);

}  // namespace csn
