// SPDX-License-Identifier: Apache-2.0
#include <benchmark/benchmark.h>

#include "csn/sources.hpp"
#include "csn/training.hpp"

using namespace csn;

namespace {

Tensor random(Rng& rng, std::vector<std::size_t> shape) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.normal();
  return t;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = std::size_t(state.range(0));
  Rng rng(1);
  const Tensor a = random(rng, {n, n}), b = random(rng, {n, n});
  for (auto _ : state) {
    Tape tape(TapeOptions{.track_params = false});
    benchmark::DoNotOptimize(ops::matmul(tape.constant(a), tape.constant(b)).value());
  }
}
BENCHMARK(BM_Matmul)->Arg(16)->Arg(64)->Arg(256);

void BM_Conv2dForwardBackward(benchmark::State& state) {
  const auto size = std::size_t(state.range(0));
  Rng rng(2);
  const Tensor x = random(rng, {5, 8, size, size});
  Parameter w("w", random(rng, {8, 8, 3, 3}));
  for (auto _ : state) {
    Tape tape;
    tape.backward(ops::sum(ops::conv2d(tape.constant(x), tape.param(w))));
    benchmark::DoNotOptimize(w.grad.data().data());
  }
}
BENCHMARK(BM_Conv2dForwardBackward)->Arg(14)->Arg(28);

// Conditioning extraction for one 5-way one-shot description set.
struct ExtractFixture {
  Config config;
  std::unique_ptr<TaskSource> source;
  std::unique_ptr<CSNModel> model;
  Episode episode;

  ExtractFixture(const std::string& text, const std::string& mode) {
    Config c = Config::parse(text);
    c.set("cond.mode", mode);
    config = resolve(c);
    source = make_source(config);
    model = std::make_unique<CSNModel>(model_spec_from_config(config), 1);
    Rng rng(3);
    const EpisodeShape s = episode_shape(config);
    episode = sample_episode(*source, Split::Train, s.ways, s.shots, s.queries, rng);
  }
};

const char* const kFFN = "data.source = gaussian";
const char* const kLSTM = "data.source = cloze\ndata.cloze.length = 8\nmodel.arch = adalstm\nmodel.lstm_layers = 2";

void extraction(benchmark::State& state, const char* text, const char* mode) {
  ExtractFixture f(text, mode);
  for (auto _ : state) {
    benchmark::DoNotOptimize(f.model->conditioning(f.episode.support_x, f.episode.support_y).values);
  }
}
BENCHMARK_CAPTURE(extraction, ffn_grad, kFFN, "grad");
BENCHMARK_CAPTURE(extraction, ffn_df, kFFN, "df");
BENCHMARK_CAPTURE(extraction, lstm_grad, kLSTM, "grad");
BENCHMARK_CAPTURE(extraction, lstm_df, kLSTM, "df");

// Full description plus prediction on one episode.
void episode_forward(benchmark::State& state, const char* text, const char* mode) {
  ExtractFixture f(text, mode);
  for (auto _ : state) {
    benchmark::DoNotOptimize(f.model->predict(f.episode.support_x, f.episode.support_y, f.episode.query_x));
  }
}
BENCHMARK_CAPTURE(episode_forward, lstm_grad, kLSTM, "grad");
BENCHMARK_CAPTURE(episode_forward, lstm_df, kLSTM, "df");

}  // namespace
BENCHMARK_MAIN();
