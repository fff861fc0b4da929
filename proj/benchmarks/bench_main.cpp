#include <benchmark/benchmark.h>

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "leanq/calib.hpp"
#include "leanq/grids.hpp"
#include "leanq/harness.hpp"
#include "leanq/pack_io.hpp"
#include "leanq/quantizer.hpp"

namespace {

using namespace leanq;

struct Group {
  std::vector<double> w, cw;
};

Group make_group(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> ud(-4.0, 0.0);
  Group g;
  for (std::size_t i = 0; i < n; ++i) {
    g.w.push_back(nd(rng));
    g.cw.push_back(std::pow(10.0, ud(rng)));
  }
  return g;
}

void BM_AffineGridSearch(benchmark::State& state) {
  const auto g = make_group(128, 1);
  const grids::GridSearchConfig cfg{static_cast<int>(state.range(0)), 1};
  for (auto _ : state) benchmark::DoNotOptimize(grids::affine_grid_search(g.w, g.cw, 4, cfg));
}
BENCHMARK(BM_AffineGridSearch)->Arg(64)->Arg(256)->Arg(2048)->Unit(benchmark::kMillisecond);

void BM_AffineGridSearchBatch(benchmark::State& state) {
  const auto g = make_group(128 * 64, 2);
  const grids::GridSearchConfig cfg{64, static_cast<unsigned>(state.range(0))};
  for (auto _ : state) {
    benchmark::DoNotOptimize(grids::affine_grid_search_batch(g.w, g.cw, 128, 4, cfg));
  }
}
BENCHMARK(BM_AffineGridSearchBatch)
    ->Arg(1)
    ->Arg(2)
    ->Arg(4)
    ->Arg(8)
    ->UseRealTime()
    ->Unit(benchmark::kMillisecond);

void BM_WeightedKMeans(benchmark::State& state) {
  const auto g = make_group(4096, 3);
  const int bits = static_cast<int>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(grids::weighted_kmeans(g.w, g.cw, bits));
}
BENCHMARK(BM_WeightedKMeans)->Arg(2)->Arg(3)->Arg(4)->Unit(benchmark::kMillisecond);

void BM_QuantizeLayerBlock(benchmark::State& state) {
  const auto layer = harness::gen_synthetic_layer({64, 256, 1024, 0.05, 100.0, 4});
  calib::HessianAccumulator acc;
  acc.accumulate(layer.x);
  const auto hs = calib::finalize(acc);
  quant::QuantConfig cfg;
  cfg.bits = 3;
  cfg.grid = state.range(0) == 0 ? quant::GridType::MinMaxAffine : quant::GridType::LeanNonUniform;
  cfg.workers = 1;
  const auto grids = quant::learn_grids(layer.w, hs, cfg);
  for (auto _ : state) benchmark::DoNotOptimize(quant::quantize_layer_block(layer.w, hs, cfg, grids));
}
BENCHMARK(BM_QuantizeLayerBlock)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_PackCodes(benchmark::State& state) {
  const int bits = static_cast<int>(state.range(0));
  const std::size_t rows = 256, cols = 4096;
  std::mt19937_64 rng(5);
  std::vector<std::uint8_t> codes(rows * cols);
  for (auto& c : codes) c = static_cast<std::uint8_t>(rng() & ((1u << bits) - 1));
  for (auto _ : state) benchmark::DoNotOptimize(io::pack_codes(codes, rows, cols, bits));
  state.SetBytesProcessed(static_cast<std::int64_t>(state.iterations() * codes.size()));
}
BENCHMARK(BM_PackCodes)->Arg(2)->Arg(3)->Arg(4)->Arg(8);

void BM_UnpackCodes(benchmark::State& state) {
  const int bits = static_cast<int>(state.range(0));
  const std::size_t rows = 256, cols = 4096;
  std::mt19937_64 rng(6);
  std::vector<std::uint8_t> codes(rows * cols);
  for (auto& c : codes) c = static_cast<std::uint8_t>(rng() & ((1u << bits) - 1));
  const auto bytes = io::pack_codes(codes, rows, cols, bits);
  for (auto _ : state) benchmark::DoNotOptimize(io::unpack_codes(bytes, bits, rows, cols));
  state.SetBytesProcessed(static_cast<std::int64_t>(state.iterations() * codes.size()));
}
BENCHMARK(BM_UnpackCodes)->Arg(2)->Arg(3)->Arg(4)->Arg(8);

}  // namespace

BENCHMARK_MAIN();
