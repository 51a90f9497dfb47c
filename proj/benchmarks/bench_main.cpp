#include <benchmark/benchmark.h>

#include "drpca/rpca_classic.hpp"
#include "drpca/train_eval.hpp"

using namespace drpca;

namespace {

template <typename T>
Tensor<T> random_tensor(Shape s, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<T> t(s);
  for (T& v : t.values()) v = static_cast<T>(rng.uniform(-1.0, 1.0));
  return t;
}

void BM_Conv3x3(benchmark::State& state) {
  const int c = static_cast<int>(state.range(0));
  const Tensor<float> x = random_tensor<float>({1, c, 64, 64}, 1);
  const Tensor<float> w = random_tensor<float>({c, c, 3, 3}, 2);
  const Tensor<float> b = random_tensor<float>({c, 1, 1, 1}, 3);
  for (auto _ : state) {
    Tape<float> tape;
    tape.set_grad_enabled(false);
    benchmark::DoNotOptimize(ag::conv2d(tape.constant(x), tape.constant(w), tape.constant(b)).value().data());
  }
  state.SetItemsProcessed(state.iterations() * 2LL * c * c * 9 * 64 * 64);
}
BENCHMARK(BM_Conv3x3)->Arg(4)->Arg(16)->Unit(benchmark::kMicrosecond);

void BM_Conv3x3Backward(benchmark::State& state) {
  const int c = static_cast<int>(state.range(0));
  ParameterStore<float> store;
  const ParamId w = store.add("w", random_tensor<float>({c, c, 3, 3}, 2));
  const ParamId b = store.add("b", random_tensor<float>({c, 1, 1, 1}, 3));
  const Tensor<float> x = random_tensor<float>({1, c, 64, 64}, 1);
  for (auto _ : state) {
    Tape<float> tape;
    tape.bind(store);
    tape.backward(ag::mean_all(ag::conv2d(tape.variable(x), tape.param(w), tape.param(b))));
    benchmark::DoNotOptimize(tape.param_grad(w).data());
  }
}
BENCHMARK(BM_Conv3x3Backward)->Arg(16)->Unit(benchmark::kMicrosecond);

NetConfig desk_net() {
  TrainConfig t;
  return t.net_config();
}

void BM_NetworkForward(benchmark::State& state) {
  const Model<float> m = build_model<float>(desk_net(), 0);
  SceneSpec spec;
  const Tensor<float> x = stack_images(make_scenes(spec, static_cast<int>(state.range(0))));
  for (auto _ : state) benchmark::DoNotOptimize(run_network(x, m).generator_calls);
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_NetworkForward)->Arg(1)->Arg(8)->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
  const Model<float> m = build_model<float>(desk_net(), 0);
  SceneSpec spec;
  const std::vector<Scene> batch = make_scenes(spec, 8);
  const Tensor<float> x = stack_images(batch);
  const Tensor<float> gt = tensor_cast<float>(stack_masks(batch));
  for (auto _ : state) {
    Tape<float> tape;
    tape.bind(m.params);
    const Var<float> xv = tape.constant(x);
    tape.backward(total_loss(net_forward(xv, m), gt, xv).total);
    benchmark::DoNotOptimize(tape.param_grad(0).data());
  }
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

void BM_Svt(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  Rng rng(4);
  Matrix x(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) x(i, j) = rng.uniform(-1.0, 1.0);
  for (auto _ : state) benchmark::DoNotOptimize(svt(x, 0.5).data());
}
BENCHMARK(BM_Svt)->Arg(64)->Arg(128)->Unit(benchmark::kMicrosecond);

void BM_RpcaSolve(benchmark::State& state) {
  SceneSpec spec;
  const Matrix d = to_matrix(make_scenes(spec, 1).front().image);
  RpcaConfig cfg;
  for (auto _ : state) benchmark::DoNotOptimize(rpca_solve(d, cfg).iterations);
}
BENCHMARK(BM_RpcaSolve)->Unit(benchmark::kMillisecond);

void BM_PixelAndObjectMetrics(benchmark::State& state) {
  SceneSpec spec;
  const std::vector<Scene> s = make_scenes(spec, 8);
  const Mask gt = stack_masks(s);
  for (auto _ : state) {
    benchmark::DoNotOptimize(pixel_counts(gt, gt).tp);
    benchmark::DoNotOptimize(object_counts(gt, gt).detected);
  }
}
BENCHMARK(BM_PixelAndObjectMetrics)->Unit(benchmark::kMicrosecond);

}  // namespace

BENCHMARK_MAIN();
