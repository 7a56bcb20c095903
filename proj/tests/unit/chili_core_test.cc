#include <cmath>

#include <gtest/gtest.h>

#include "chili/chili.h"
#include "chili/error.h"
#include "chili/fixture.h"
#include "chili/rng.h"
#include "reference_vit.h"
#include "temp_dir.h"

namespace chili {
namespace {

GridMap RandomMap(Rng& rng, std::size_t r, std::size_t c) {
  std::vector<double> v(r * c);
  for (double& x : v) x = rng.Normal();
  return GridMap(r, c, v);
}

TEST(RegisterSplitTest, PartsAddBack) {
  Rng rng(1);
  for (int t = 0; t < 100; ++t) {
    const GridMap m = RandomMap(rng, 1 + rng.Index(8), 1 + rng.Index(8));
    const RegisterSplit s = SplitPseudoRegister(m);
    const GridMap back = s.register_part + s.filtered;
    for (std::size_t k = 0; k < m.size(); ++k) EXPECT_NEAR(back[k], m[k], 1e-12);
  }
}

TEST(RegisterSplitTest, IsolatedSpikeGoesToRegister) {
  std::vector<double> v(36, 1.0);
  v[14] = 50.0;
  const RegisterSplit s = SplitPseudoRegister(GridMap(6, 6, v));
  EXPECT_EQ(s.filtered, GridMap::Constant(6, 6, 1.0));
  EXPECT_EQ(s.register_part[14], 49.0);
  EXPECT_EQ(s.register_part.Sum(), 49.0);
}

TEST(BinarizeTest, StrictlyAboveMean) {
  EXPECT_EQ(BinarizeMean(GridMap(1, 4, {1, 2, 3, 4})), GridMap(1, 4, {0, 0, 1, 1}));
  EXPECT_EQ(BinarizeMean(GridMap::Constant(2, 2, 3.0)), GridMap::Constant(2, 2, 0.0));
  EXPECT_EQ(BinarizeMean(GridMap(1, 3, {0, 0, 3})), GridMap(1, 3, {0, 0, 1}));
}

TEST(IouTest, HandCounted) {
  const GridMap a(1, 4, {1, 1, 0, 0}), b(1, 4, {0, 1, 1, 0});
  EXPECT_DOUBLE_EQ(Iou(a, b), 1.0 / 3.0);
  EXPECT_EQ(Iou(a, a), 1.0);
  EXPECT_EQ(Iou(a, GridMap(1, 4, {0, 0, 1, 1})), 0.0);
  EXPECT_EQ(Iou(GridMap::Constant(2, 2, 0), GridMap::Constant(2, 2, 0)), 1.0);
  EXPECT_THROW(Iou(a, GridMap::Constant(2, 2, 0)), ValidationError);
}

TEST(IouWeightTest, ClosedForm) {
  EXPECT_EQ(IouWeight(0.0, 3.0), 0.0);
  EXPECT_NEAR(IouWeight(1.0, 3.0), 0.950213, 1e-6);
  EXPECT_NEAR(IouWeight(0.5, 3.0), 0.776870, 1e-6);
  double prev = -1.0;
  for (int i = 1; i <= 10; ++i) {
    const double w = IouWeight(0.4, 0.5 * i);
    EXPECT_GT(w, prev);
    prev = w;
  }
}

TEST(WeightsFromIousTest, AveragesWeightsNotIous) {
  const std::vector<std::vector<double>> ious = {{0.0, 1.0}, {1.0, 1.0}};
  const std::vector<double> w = WeightsFromIous(ious, 3.0);
  EXPECT_NEAR(w[0], 0.5 * (1.0 - std::exp(-3.0)), 1e-12);
  EXPECT_NEAR(w[1], 1.0 - std::exp(-3.0), 1e-12);
}

// Head 0 tracks the mask, head 1 the complement.
SpatialMaps TwoHeadMaps(const GridMap& mask, const std::string& model_id) {
  SpatialMaps sp;
  sp.model_id = model_id;
  sp.layers = 1;
  sp.heads = 2;
  sp.maps = {mask, GridMap::Constant(mask.rows(), mask.cols(), 1.0) - mask};
  sp.cls = Tensor({1, 2}, {0.0f, 0.0f});
  return sp;
}

// Full-width bands survive the 3x3 median unchanged.
GridMap BandMask(std::size_t n, std::size_t r0, std::size_t k) {
  std::vector<double> v(n * n, 0.0);
  for (std::size_t r = r0; r < r0 + k; ++r) {
    for (std::size_t c = 0; c < n; ++c) v[r * n + c] = 1.0;
  }
  return GridMap(n, n, v);
}

GridMap BlockMask(std::size_t n, std::size_t r0, std::size_t c0, std::size_t k) {
  std::vector<double> v(n * n, 0.0);
  for (std::size_t r = r0; r < r0 + k; ++r) {
    for (std::size_t c = c0; c < c0 + k; ++c) v[r * n + c] = 1.0;
  }
  return GridMap(n, n, v);
}

TEST(CalibrateTest, ObjectHeadOutweighsComplementHead) {
  std::vector<SpatialMaps> maps;
  std::vector<GridMap> masks;
  for (std::size_t k = 0; k < 3; ++k) {
    const GridMap mask = BandMask(8, k, 4);
    maps.push_back(TwoHeadMaps(mask, "m"));
    masks.push_back(mask);
  }
  const CalibrationWeights cal = Calibrate(maps, masks, 3.0);
  EXPECT_NEAR(cal.at(0, 0), 1.0 - std::exp(-3.0), 1e-12);
  EXPECT_EQ(cal.at(0, 1), 0.0);
  EXPECT_EQ(cal.sample_count, 3u);
  EXPECT_EQ(cal.model_id, "m");
  EXPECT_EQ(cal.grid_rows, 8u);
}

TEST(CalibrateTest, RejectsBadProbeSets) {
  const GridMap mask = BlockMask(6, 1, 1, 2);
  std::vector<SpatialMaps> maps = {TwoHeadMaps(mask, "a"), TwoHeadMaps(mask, "b")};
  std::vector<GridMap> masks = {mask, mask};
  EXPECT_THROW(Calibrate(maps, masks, 3.0), ValidationError);
  maps[1].model_id = "a";
  masks[1] = GridMap::Constant(6, 6, 0.0);
  EXPECT_THROW(Calibrate(maps, masks, 3.0), ValidationError);
  EXPECT_THROW(Calibrate({}, {}, 3.0), ValidationError);
  masks[1] = mask;
  EXPECT_THROW(Calibrate(maps, masks, 0.0), ValidationError);
}

TEST(CalibrationFileTest, RoundTripAndValidation) {
  testing::TempDir dir;
  CalibrationWeights cal;
  cal.model_id = "m";
  cal.alpha = 3.0;
  cal.layers = 2;
  cal.heads = 2;
  cal.grid_rows = 4;
  cal.grid_cols = 5;
  cal.w = {0.1, 0.2, 0.3, 0.0};
  cal.sample_count = 7;
  SaveCalibration(dir / "c.json", cal);
  const CalibrationWeights back = LoadCalibration(dir / "c.json");
  EXPECT_EQ(back.w, cal.w);
  EXPECT_EQ(back.grid_cols, 5u);
  EXPECT_EQ(back.sample_count, 7u);
  EXPECT_THROW(DecodeCalibration(R"({"model_id":"m","alpha":3,"L":1,"H":1,"grid":[2,2],"weights":[[0.99]],"sample_count":1})", "x"),
               ValidationError);
  EXPECT_THROW(DecodeCalibration(R"({"model_id":"m","alpha":3,"L":1,"H":2,"grid":[2,2],"weights":[[0.5]],"sample_count":1})", "x"),
               ValidationError);
  EXPECT_THROW(DecodeCalibration("{", "x"), ValidationError);
}

CalibrationWeights Uniform(const SpatialMaps& sp, double w) {
  CalibrationWeights cal;
  cal.model_id = sp.model_id;
  cal.layers = sp.layers;
  cal.heads = sp.heads;
  cal.grid_rows = sp.maps.front().rows();
  cal.grid_cols = sp.maps.front().cols();
  cal.w.assign(sp.layers * sp.heads, w);
  return cal;
}

TEST(DecomposeMapsTest, ConservationOnRandomModels) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const WeightArchive w = RandomArchive(seed, testing::RandomTinySpec(seed));
    const Tensor image = PreprocessImage(RandomRaster(seed, 8, 8), w.spec.image_size);
    const ContributionRecord rec = Decompose(w, EncodeImage(w, image).record);
    const ConceptEmbeddingSet c = RandomConcepts(seed, {"k"}, w.spec.d_embed);
    const ScoredMaps sm = ScoreConcept(rec, c.at(0).vector, 100.0, "k");
    const std::size_t G = w.spec.grid_side();
    const SpatialMaps sp = ToSpatialMaps(sm, G, G);
    Rng rng(seed);
    CalibrationWeights cal = Uniform(sp, 0.0);
    for (double& x : cal.w) x = rng.Uniform(0.0, 0.95);
    const SplitMaps split = DecomposeMaps(sp, cal);
    for (std::size_t l = 0; l < sp.layers; ++l) {
      for (std::size_t h = 0; h < sp.heads; ++h) {
        const HeadSplit& hs = split.at(l, h);
        for (std::size_t k = 0; k < G * G; ++k) {
          EXPECT_NEAR(hs.register_part[k] + hs.object[k] + hs.context[k], sp.map(l, h)[k], 1e-12);
        }
      }
    }
    const ScoreSplit ss = SplitScore(sm, split);
    EXPECT_NEAR(ss.S_object + ss.S_context + ss.S_register + ss.S_cls + ss.eps, ss.S,
                1e-4 * std::max(1.0, std::abs(ss.S)));
    EXPECT_EQ(ss.S, sm.S);
  }
}

TEST(DecomposeMapsTest, ZeroWeightsGiveZeroObject) {
  const GridMap mask = BlockMask(5, 1, 1, 2);
  const SpatialMaps sp = TwoHeadMaps(mask, "m");
  const SplitMaps split = DecomposeMaps(sp, Uniform(sp, 0.0));
  EXPECT_EQ(split.object_sum, GridMap::Constant(5, 5, 0.0));
  CalibrationWeights other = Uniform(sp, 0.1);
  other.model_id = "different";
  EXPECT_THROW(DecomposeMaps(sp, other), ValidationError);
}

TEST(SplitScoreTest, RejectsSplitsFromOtherMaps) {
  ScoredMaps a, b;
  a.model_id = b.model_id = "m";
  a.A = Tensor({1, 1, 5}, {0, 1, 2, 3, 4});
  b.A = Tensor({1, 1, 5}, {0, 1, 2, 3, 5});
  const SpatialMaps sa = ToSpatialMaps(a, 2, 2);
  const SplitMaps split = DecomposeMaps(sa, Uniform(sa, 0.5));
  EXPECT_NO_THROW(SplitScore(a, split));
  EXPECT_THROW(SplitScore(b, split), ValidationError);
}

TEST(ScoreComponentTest, NamesRoundTrip) {
  for (const char* n : {"S", "S_object", "S_context", "S_register"}) {
    EXPECT_EQ(ScoreComponentName(ParseScoreComponent(n)), n);
  }
  EXPECT_THROW(ParseScoreComponent("S_obj"), ValidationError);
}

}  // namespace
}  // namespace chili
