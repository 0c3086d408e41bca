#include <benchmark/benchmark.h>

#include <optional>

#include "roadenkf/decoder.hpp"
#include "roadenkf/enkf.hpp"
#include "roadenkf/train.hpp"
#include "roadenkf/truth_models.hpp"

using namespace roadenkf;
using ad::Tensor;
using ad::Var;

namespace {

Tensor normal_tensor(ad::Shape shape, std::uint64_t seed) {
  Tensor t(std::move(shape));
  RngStream(seed).fill_normal(t.data());
  return t;
}

}  // namespace

// args: d_y, N
static void BM_AnalysisStep(benchmark::State& state) {
  const auto d = static_cast<std::size_t>(state.range(0)), n = static_cast<std::size_t>(state.range(1));
  const auto obs = enkf::ObservationOp::identity(d, 0.1);
  const Var z(normal_tensor({n, d}, 1));
  const Tensor y = normal_tensor({d}, 2);
  RngStream s(3);
  for (auto _ : state) benchmark::DoNotOptimize(enkf::analysis_step(z, z, y, obs, s));
}
BENCHMARK(BM_AnalysisStep)->Args({32, 50})->Args({256, 100})->Args({64, 512});

static void BM_AnalysisStepNaive(benchmark::State& state) {
  const auto d = static_cast<std::size_t>(state.range(0)), n = static_cast<std::size_t>(state.range(1));
  const auto obs = enkf::ObservationOp::identity(d, 0.1);
  const Var z(normal_tensor({n, d}, 1));
  const Tensor y = normal_tensor({d}, 2);
  RngStream s(3);
  for (auto _ : state) benchmark::DoNotOptimize(enkf::analysis_step_naive(z, z, y, obs, s));
}
BENCHMARK(BM_AnalysisStepNaive)->Args({32, 50})->Args({256, 100});

// args: d_u, N
static void BM_FndDecode(benchmark::State& state) {
  dec::FndConfig cfg;
  cfg.stack.d_u = static_cast<std::size_t>(state.range(0));
  RngStream s(4);
  const auto p = dec::init_fnd(cfg, s);
  const Var z(normal_tensor({static_cast<std::size_t>(state.range(1)), cfg.d_z}, 5));
  for (auto _ : state) benchmark::DoNotOptimize(dec::fnd_decode(p, z));
}
BENCHMARK(BM_FndDecode)->Args({32, 50})->Args({128, 100});

static void BM_FndDecodeReference(benchmark::State& state) {
  dec::FndConfig cfg;
  cfg.stack.d_u = static_cast<std::size_t>(state.range(0));
  RngStream s(4);
  const auto p = dec::init_fnd(cfg, s);
  const Var z(normal_tensor({static_cast<std::size_t>(state.range(1)), cfg.d_z}, 5));
  for (auto _ : state) benchmark::DoNotOptimize(dec::fnd_decode_reference(p, z));
}
BENCHMARK(BM_FndDecodeReference)->Args({32, 50});

// One TBPTT segment (10 steps) of the desk L63 setup, forward and backward.
static void BM_SegmentGradient(benchmark::State& state) {
  train::ModelConfig mc;
  RngStream s(6);
  const auto model = train::make_model(mc, s);
  const auto obs = enkf::augment_observations(enkf::ObservationOp::identity(32, 0.01), 2.0, 3);
  const train::Instance inst{obs, normal_tensor({10, 32}, 7)};
  train::TrainConfig tc;
  tc.ensemble_size = 50;
  tc.threads = 1;
  for (auto _ : state) {
    std::vector<RngStream> streams{RngStream(8)};
    benchmark::DoNotOptimize(
        train::segment_gradient(*model, {&inst}, {std::nullopt}, streams, train::Segment{1, 10}, tc));
  }
}
BENCHMARK(BM_SegmentGradient)->Unit(benchmark::kMillisecond);

static void BM_BurgersRhs(benchmark::State& state) {
  const auto d = static_cast<std::size_t>(state.range(0));
  const Tensor u = normal_tensor({d}, 9);
  Tensor out({d});
  for (auto _ : state) {
    truth::burgers_rhs(u.data(), 1.0 / 150.0, 2.0 / static_cast<double>(d - 1), out.data());
    benchmark::DoNotOptimize(out.raw());
  }
}
BENCHMARK(BM_BurgersRhs)->Arg(128)->Arg(256);

static void BM_KsRhs(benchmark::State& state) {
  const auto d = static_cast<std::size_t>(state.range(0));
  const Tensor u = normal_tensor({d}, 10);
  Tensor out({d});
  for (auto _ : state) {
    truth::ks_rhs(u.data(), 0.05, 2.0 / static_cast<double>(d - 1), out.data());
    benchmark::DoNotOptimize(out.raw());
  }
}
BENCHMARK(BM_KsRhs)->Arg(32)->Arg(256);

BENCHMARK_MAIN();
