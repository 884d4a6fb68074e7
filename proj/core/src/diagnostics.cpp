// SPDX-License-Identifier: Apache-2.0
#include "csn/diagnostics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <optional>

namespace csn {

PipelineCheck check_episode_gradients(CSNModel& model, const Episode& episode,
                                      std::size_t samples, std::uint64_t seed, double step,
                                      double jitter) {
  const ModelSpec& spec = model.spec();
  ParameterStore& store = model.params();
  const std::vector<Tensor> saved = store.snapshot();
  Rng noise(derive_seed(seed, 0x71));
  for (std::size_t i = 0; i < store.size(); ++i) {
    for (double& v : store[i].value.data()) v += noise.normal(0.0, jitter);
  }

  std::optional<ConditioningInfo> frozen;
  if (spec.shifts && spec.stop_grad) frozen = model.conditioning(episode.support_x, episode.support_y);
  const ConditioningInfo* info = frozen ? &*frozen : nullptr;
  LossFn f = [&](Tape& tape) { return model.episode_loss(tape, episode, nullptr, info).loss; };

  PipelineCheck out;
  for (std::size_t i = 0; i < store.size(); ++i) {
    Parameter* p = &store[i];
    GradCheckOptions o;
    o.step = step;
    o.method = DiffMethod::Ridders;
    o.samples_per_param = samples;
    o.seed = derive_seed(seed, i);
    GroupCheck g{p->name, finite_diff_check(f, std::span<Parameter* const>(&p, 1), o)};
    if (out.groups.empty() || g.result.max_rel_error > out.worst) {
      out.worst = g.result.max_rel_error;
      out.worst_group = g.group;
    }
    out.groups.push_back(std::move(g));
  }
  store.restore(saved);
  return out;
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  const auto rank = std::size_t(std::ceil(q * double(values.size())));
  return values[std::clamp<std::size_t>(rank, 1, values.size()) - 1];
}

TimingStats bench_episodes(const CSNModel& model, const TaskSource& source,
                           const EpisodeShape& shape, std::size_t episodes, std::uint64_t seed,
                           std::size_t warmup) {
  using clock = std::chrono::steady_clock;
  auto ms_since = [](clock::time_point t) {
    return std::chrono::duration<double, std::milli>(clock::now() - t).count();
  };
  std::vector<double> total, extract;
  std::uint64_t backward = 0;
  for (std::size_t i = 0; i < warmup + episodes; ++i) {
    Rng rng(derive_seed(seed, i));
    const Episode ep =
        sample_episode(source, Split::Test, shape.ways, shape.shots, shape.queries, rng);
    const auto t0 = clock::now();
    const auto b0 = TapeCounters::backward_traversals.load();
    double extract_ms = 0.0;
    std::uint64_t traversals = 0;
    Tape tape(TapeOptions{.track_params = false});
    if (model.spec().shifts) {
      const ConditioningInfo info = model.conditioning(ep.support_x, ep.support_y);
      extract_ms = ms_since(t0);
      traversals = TapeCounters::backward_traversals.load() - b0;
      const DescribeResult d = model.describe(tape, ep.support_x, ep.support_y, &info);
      model.predict_logits(tape, &d.bank, ep.query_x);
    } else {
      model.predict_logits(tape, nullptr, ep.query_x);
    }
    const double ms = ms_since(t0);
    if (i < warmup) continue;
    total.push_back(ms);
    extract.push_back(extract_ms);
    backward += traversals;
  }
  TimingStats s;
  s.episodes = episodes;
  s.median_ms = percentile(total, 0.5);
  s.p95_ms = percentile(total, 0.95);
  s.median_extract_ms = percentile(extract, 0.5);
  s.p95_extract_ms = percentile(extract, 0.95);
  s.extract_backward = episodes == 0 ? 0.0 : double(backward) / double(episodes);
  return s;
}

}  // namespace csn
