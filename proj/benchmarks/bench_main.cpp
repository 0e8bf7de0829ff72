#include <benchmark/benchmark.h>

#include <random>

#include "coavt/dataio.hpp"
#include "coavt/diffcore.hpp"
#include "coavt/model.hpp"
#include "coavt/objectives.hpp"
#include "coavt/trainer.hpp"

namespace {

using namespace coavt;

const data::Corpus& corpus() {
  static const data::Corpus c = [] {
    data::CorpusConfig cfg;
    cfg.n_train = 64;
    cfg.n_test = 32;
    return data::generate_corpus(cfg);
  }();
  return c;
}

void BM_MatMul(benchmark::State& state) {
  const std::size_t n = static_cast<std::size_t>(state.range(0));
  std::mt19937_64 rng(1);
  std::normal_distribution<double> nd;
  std::vector<double> a(n * n), b(n * n);
  for (auto& x : a) x = nd(rng);
  for (auto& x : b) x = nd(rng);
  const auto ta = diff::Tensor::constant({n, n}, a);
  const auto tb = diff::Tensor::constant({n, n}, b);
  for (auto _ : state) benchmark::DoNotOptimize(diff::matmul(ta, tb));
  state.counters["GMAC/s"] = benchmark::Counter(static_cast<double>(n * n * n) * state.iterations() / 1e9,
                                               benchmark::Counter::kIsRate);
}
BENCHMARK(BM_MatMul)->Arg(64)->Arg(256);

void BM_PatchifyMask(benchmark::State& state) {
  const auto& item = corpus().train[0];
  std::mt19937_64 rng(3);
  for (auto _ : state) {
    auto seq = data::patchify(item.video_frames[0], 4);
    benchmark::DoNotOptimize(data::mask_patches(seq, 0.5, rng));
  }
}
BENCHMARK(BM_PatchifyMask);

// One full optimizer step at desk scale; arg 1 enables (0.75, 0.5) masking.
void BM_PretrainStep(benchmark::State& state) {
  const bool masked = state.range(0) != 0;
  train::TrainConfig cfg;
  cfg.batch_size = 32;
  cfg.max_steps = 1000000;
  cfg.disable_masking = !masked;
  model::Model m(model::ModelConfig{}, 7);
  train::Pretrainer trainer(m, corpus().train, cfg);
  train::OptimizerState opt;
  for (auto _ : state) benchmark::DoNotOptimize(trainer.step(opt));
}
BENCHMARK(BM_PretrainStep)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond)->MinTime(5.0);

void BM_ForwardNoGrad(benchmark::State& state) {
  model::Model m(model::ModelConfig{}, 7);
  std::vector<std::size_t> idx(32);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::mt19937_64 rng(0);
  const auto batch =
      train::make_batch(corpus().train, idx, m.config(), train::FrameChoice::kCentral, 0.0, 0.0, rng);
  for (auto _ : state) {
    diff::NoGradGuard guard;
    const auto c = m.encoders().condition(model::Condition::kAV, &batch.audio, &batch.visual);
    benchmark::DoNotOptimize(m.encoders().query_forward(c, model::QueryMode::kExtract));
  }
}
BENCHMARK(BM_ForwardNoGrad)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
