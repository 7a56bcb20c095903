#include <benchmark/benchmark.h>

#include "chili/chili.h"
#include "chili/eval.h"
#include "chili/fixture.h"
#include "chili/rng.h"
#include "chili/vit.h"

namespace chili {
namespace {

ModelSpec SmallSpec(std::size_t layers) {
  ModelSpec s;
  s.model_id = "bench";
  s.layers = layers;
  s.heads = 4;
  s.patch_size = 4;
  s.image_size = 32;
  s.d_model = 64;
  s.d_embed = 32;
  s.d_mlp = 256;
  return s;
}

void BM_EncodeAndDecompose(benchmark::State& state) {
  const WeightArchive w = RandomArchive(1, SmallSpec(static_cast<std::size_t>(state.range(0))));
  const Tensor image = PreprocessImage(RandomRaster(2, 40, 40), w.spec.image_size);
  const ConceptEmbeddingSet c = RandomConcepts(3, {"k"}, w.spec.d_embed);
  for (auto _ : state) {
    const EncodedImage enc = EncodeImage(w, image);
    const ContributionRecord rec = Decompose(w, enc.record);
    benchmark::DoNotOptimize(ScoreConcept(rec, c.at(0).vector, w.spec.logit_scale, "k").S);
  }
}
BENCHMARK(BM_EncodeAndDecompose)->Arg(2)->Arg(6);

void BM_MedianFilter(benchmark::State& state) {
  const std::size_t n = static_cast<std::size_t>(state.range(0));
  Rng rng(4);
  std::vector<double> v(n * n);
  for (double& x : v) x = rng.Normal();
  const GridMap m(n, n, v);
  for (auto _ : state) benchmark::DoNotOptimize(MedianFilter2d(m));
}
BENCHMARK(BM_MedianFilter)->Arg(7)->Arg(14)->Arg(32);

void BM_Calibrate(benchmark::State& state) {
  const FixtureSpec spec;
  const Fixture f = GenerateFixture(5, spec);
  std::vector<SpatialMaps> maps;
  std::vector<GridMap> masks;
  for (const auto& s : f.probe) {
    maps.push_back(ToSpatialMaps(s.maps, spec.grid_rows, spec.grid_cols));
    masks.push_back(s.mask);
  }
  for (auto _ : state) benchmark::DoNotOptimize(Calibrate(maps, masks, kDefaultAlpha));
}
BENCHMARK(BM_Calibrate);

void BM_Auroc(benchmark::State& state) {
  const std::size_t n = static_cast<std::size_t>(state.range(0));
  Rng rng(6);
  std::vector<double> pos(n), neg(n);
  for (double& x : pos) x = rng.Normal() + 0.5;
  for (double& x : neg) x = rng.Normal();
  for (auto _ : state) benchmark::DoNotOptimize(Auroc(pos, neg));
}
BENCHMARK(BM_Auroc)->Arg(100)->Arg(10000);

}  // namespace
}  // namespace chili

BENCHMARK_MAIN();
