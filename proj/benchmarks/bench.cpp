#include <benchmark/benchmark.h>

#include "miclab/masking.hpp"
#include "miclab/nn.hpp"
#include "miclab/ops.hpp"
#include "miclab/synthworlds.hpp"
#include "miclab/uda.hpp"

using namespace miclab;

namespace {

ag::Tensor random_tensor(const ag::Shape& shape, Rng& rng) {
  ag::Tensor t(shape);
  for (double& v : t.values()) v = rng.normal();
  return t;
}

void BM_Conv2dForward(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  Rng rng(0);
  const ag::Tensor x = random_tensor({4, c, 32, 32}, rng);
  const ag::Tensor w = random_tensor({c, c, 3, 3}, rng);
  for (auto _ : state) {
    ag::Graph g(false);
    benchmark::DoNotOptimize(ag::conv2d(g, x, w, 1, 1).data());
  }
  state.SetItemsProcessed(state.iterations() * 4);
}
BENCHMARK(BM_Conv2dForward)->Arg(16)->Arg(32)->Arg(64);

void BM_Conv2dBackward(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  ag::Tensor x = random_tensor({4, c, 32, 32}, rng);
  ag::Tensor w = random_tensor({c, c, 3, 3}, rng);
  x.set_requires_grad(true);
  w.set_requires_grad(true);
  for (auto _ : state) {
    ag::Graph g;
    g.backward(ag::sum(g, ag::conv2d(g, x, w, 1, 1)));
    x.clear_grad();
    w.clear_grad();
  }
}
BENCHMARK(BM_Conv2dBackward)->Arg(16)->Arg(32);

void BM_SegmenterForward(benchmark::State& state) {
  Rng rng(2);
  const auto model = nn::build_segmenter(nn::ArchDescriptor{}, rng);
  const ag::Tensor x = random_tensor({4, 3, 32, 32}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(nn::predict_probs(model, x).data());
  state.SetItemsProcessed(state.iterations() * 4);
}
BENCHMARK(BM_SegmenterForward);

void BM_PatchMask(benchmark::State& state) {
  Rng rng(3);
  for (auto _ : state) benchmark::DoNotOptimize(aug::sample_patch_mask(32, 32, 8, 0.3, rng).keep.data());
}
BENCHMARK(BM_PatchMask);

// One optimizer step of each host method, with and without the MIC term.
void BM_TrainStep(benchmark::State& state) {
  const auto spec = synth::SceneSpec::default_spec();
  const auto src = synth::generate_dataset(spec, synth::Domain::kSource, 16, 1);
  const auto tgt = synth::generate_dataset(spec, synth::Domain::kTarget, 16, 2);
  const auto val = synth::generate_dataset(spec, synth::Domain::kTarget, 4, 2, synth::Split::kVal);
  const uda::TrainData data{&src, &tgt, &val, nullptr};
  uda::TrainConfig cfg;
  cfg.host = static_cast<uda::HostMethod>(state.range(0));
  cfg.mic.enabled = state.range(1) != 0;
  cfg.steps = 1 << 30;
  cfg.eval_interval = 1 << 30;
  auto s = uda::init_state(cfg);
  for (auto _ : state) uda::run_steps(s, cfg, data, s.step + 1);
  state.SetLabel(uda::to_string(cfg.host) + (cfg.mic.enabled ? "+mic" : ""));
}
BENCHMARK(BM_TrainStep)
    ->Args({static_cast<int>(uda::HostMethod::kSourceOnly), 0})
    ->Args({static_cast<int>(uda::HostMethod::kSelfTraining), 0})
    ->Args({static_cast<int>(uda::HostMethod::kSelfTraining), 1})
    ->Args({static_cast<int>(uda::HostMethod::kEntropyMin), 1})
    ->Args({static_cast<int>(uda::HostMethod::kAdversarial), 1})
    ->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
