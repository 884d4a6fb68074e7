// SPDX-License-Identifier: Apache-2.0
#include "csn/training.hpp"

#include <chrono>
#include <cmath>
#include "json.hpp"

namespace csn {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

double unix_time() {
  return std::chrono::duration<double>(std::chrono::system_clock::now().time_since_epoch()).count();
}

constexpr std::uint64_t kTrainStream = 1;
constexpr std::uint64_t kValStream = 2;

}  // namespace

EpisodeShape episode_shape(const Config& c) {
  return {c.get_size("episode.ways"), c.get_size("episode.shots"), c.get_size("episode.queries")};
}

TrainerConfig trainer_config(const Config& c, std::uint64_t seed) {
  TrainerConfig t;
  t.optimizer.kind = parse_optimizer(c.get("train.optimizer"));
  t.optimizer.lr = c.get_double("train.lr");
  t.optimizer.momentum = c.get_double("train.momentum");
  if (!(t.optimizer.lr > 0.0)) throw ConfigError("train.lr must be positive");
  if (c.get("train.clip") != "none") {
    t.clip = c.get_double("train.clip");
    if (!(*t.clip > 0.0)) throw ConfigError("train.clip must be positive or 'none'");
  }
  t.clip_kind = parse_clip_kind(c.get("train.clip_kind"));
  t.episodes = c.get_size("train.episodes");
  t.val_interval = c.get_size("train.val_interval");
  t.val_episodes = c.get_size("train.val_episodes");
  t.shape = episode_shape(c);
  if (t.shape.queries == 0) throw ConfigError("episode.queries must be positive");
  t.seed = seed;
  return t;
}

std::string to_json(const MetricsRecord& r) {
  nlohmann::ordered_json j;
  j["episode"] = r.episode;
  j["split"] = r.split;
  j["loss"] = r.loss;
  j["accuracy"] = r.accuracy;
  j["wall_ms"] = r.wall_ms;
  j["extract_ms"] = r.extract_ms;
  j["timestamp"] = r.timestamp;
  return j.dump();
}

std::string to_json(const EvalReport& r, bool with_timing) {
  nlohmann::ordered_json j;
  j["mean"] = r.mean;
  j["std"] = r.std;
  j["ci95"] = r.ci95;
  j["episodes"] = r.episodes;
  j["ms_per_episode"] = with_timing ? r.ms_per_episode : 0.0;
  return j.dump();
}

EvalReport evaluate(const CSNModel& model, const TaskSource& source, Split split,
                    std::size_t episodes, const EpisodeShape& shape, std::uint64_t seed) {
  EvalReport rep;
  rep.episodes = episodes;
  double total_ms = 0.0;
  for (std::size_t e = 0; e < episodes; ++e) {
    Rng rng(derive_seed(seed, e));
    Episode ep = sample_episode(source, split, shape.ways, shape.shots, shape.queries, rng);
    const auto t0 = Clock::now();
    Tape tape(TapeOptions{.track_params = false});
    LossResult r = model.episode_loss(tape, ep);
    total_ms += ms_since(t0);
    rep.extract_ms += r.extract_ms;
    rep.loss += r.loss.value()[0];
    rep.accuracies.push_back(double(r.correct) / double(ep.query_labels.size()));
  }
  if (episodes == 0) return rep;
  for (double a : rep.accuracies) rep.mean += a;
  rep.mean /= double(episodes);
  double var = 0.0;
  for (double a : rep.accuracies) var += (a - rep.mean) * (a - rep.mean);
  rep.std = episodes > 1 ? std::sqrt(var / double(episodes - 1)) : 0.0;
  rep.ci95 = 1.96 * rep.std / std::sqrt(double(episodes));
  rep.ms_per_episode = total_ms / double(episodes);
  rep.extract_ms /= double(episodes);
  rep.loss /= double(episodes);
  return rep;
}

TrainResult train(CSNModel& model, const TaskSource& source, const TrainerConfig& config,
                  const TrainHooks& hooks) {
  TrainResult result;
  Optimizer opt(config.optimizer);
  ParameterStore& params = model.params();
  std::vector<Tensor> best;
  const std::uint64_t train_seed = derive_seed(config.seed, kTrainStream);
  const std::uint64_t val_seed = derive_seed(config.seed, kValStream);
  const bool validate = config.val_interval > 0 && config.val_episodes > 0;
  const double timing = config.record_timing ? 1.0 : 0.0;

  double loss_sum = 0.0, acc_sum = 0.0, wall_sum = 0.0, extract_sum = 0.0;
  std::size_t window = 0;
  auto emit = [&](MetricsRecord r) {
    r.wall_ms *= timing;
    r.extract_ms *= timing;
    r.timestamp = config.record_timing ? unix_time() : 0.0;
    if (hooks.on_record) hooks.on_record(r);
  };
  auto flush_train = [&](std::size_t episode) {
    if (window == 0) return;
    const double w = double(window);
    emit({episode, "train", loss_sum / w, acc_sum / w, wall_sum / w, extract_sum / w, 0.0});
    loss_sum = acc_sum = wall_sum = extract_sum = 0.0;
    window = 0;
  };

  for (std::size_t e = 1; e <= config.episodes; ++e) {
    const std::uint64_t ep_seed = derive_seed(train_seed, e);
    Rng rng(ep_seed);
    Episode ep = sample_episode(source, Split::Train, config.shape.ways, config.shape.shots,
                                config.shape.queries, rng);
    ep.seed = ep_seed;
    Rng dropout(derive_seed(ep_seed, 1));
    const auto t0 = Clock::now();
    double loss = 0.0;
    LossResult r;
    try {
      Tape tape;
      r = model.episode_loss(tape, ep, &dropout);
      loss = r.loss.value()[0];
      tape.backward(r.loss);
      params.zero_grad();
      tape.accumulate_param_grads();
      if (!std::isfinite(params.grad_norm())) throw NumericError("backward", "non-finite gradient");
    } catch (const NumericError& err) {
      throw NumericError(err.op(), std::string(err.what()) + " [training episode " +
                                       std::to_string(e) + ", episode seed " +
                                       std::to_string(ep_seed) + "]");
    }
    if (config.clip) clip_gradients(params, *config.clip, config.clip_kind);
    opt.step(params);
    result.episodes = e;

    loss_sum += loss;
    acc_sum += double(r.correct) / double(ep.query_labels.size());
    wall_sum += ms_since(t0);
    extract_sum += r.extract_ms;
    ++window;

    if (validate && e % config.val_interval == 0) {
      flush_train(e);
      const EvalReport v =
          evaluate(model, source, Split::Val, config.val_episodes, config.shape, val_seed);
      emit({e, "val", v.loss, v.mean, v.ms_per_episode, v.extract_ms, 0.0});
      if (v.mean > result.best_val_accuracy) {
        result.best_val_accuracy = v.mean;
        result.best_episode = e;
        best = params.snapshot();
        if (hooks.on_checkpoint) hooks.on_checkpoint(model, e);
      }
    }
  }
  flush_train(result.episodes);
  if (!best.empty()) params.restore(best);
  return result;
}

}  // namespace csn
