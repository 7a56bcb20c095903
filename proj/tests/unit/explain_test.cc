#include <cmath>

#include <gtest/gtest.h>

#include "chili/error.h"
#include "chili/explain.h"
#include "chili/fixture.h"
#include "chili/rng.h"
#include "chili/tensor_file.h"
#include "oracles.h"
#include "temp_dir.h"

namespace chili {
namespace {

CbmModel Linear(std::vector<double> w0, std::vector<double> w1) {
  CbmModel m;
  m.classes = {"a", "b"};
  for (std::size_t j = 0; j < w0.size(); ++j) m.concepts.push_back("c" + std::to_string(j));
  m.weights = w0;
  m.weights.insert(m.weights.end(), w1.begin(), w1.end());
  m.bias = {0.0, 0.0};
  m.background.assign(w0.size(), 0.0);
  return m;
}

TEST(ShapLinearTest, ClosedForm) {
  const CbmModel m = Linear({2, 3}, {0, 0});
  const std::vector<double> row = {1, 1}, bg = {0, 0};
  EXPECT_EQ(ShapLinear(m, row, bg, 0), (std::vector<double>{2, 3}));
  EXPECT_EQ(ShapLinear(m, bg, bg, 0), (std::vector<double>{0, 0}));
  EXPECT_THROW(ShapLinear(m, std::vector<double>{1}, bg, 0), ValidationError);
  EXPECT_THROW(ShapLinear(m, row, bg, 2), ValidationError);
}

TEST(ShapLinearTest, EfficiencyHoldsWithStandardization) {
  Rng rng(1);
  for (int t = 0; t < 50; ++t) {
    CbmModel m = Linear({rng.Normal(), rng.Normal(), rng.Normal()}, {rng.Normal(), 0, 1});
    m.bias = {rng.Normal(), rng.Normal()};
    if (t % 2) {
      m.feature_mean = {1, 2, 3};
      m.feature_scale = {0.5, 2, 10};
    }
    const std::vector<double> row = {rng.Normal(), rng.Normal(), rng.Normal()};
    const std::vector<double> bg = {rng.Normal(), rng.Normal(), rng.Normal()};
    const auto phi = ShapLinear(m, row, bg, 1);
    double sum = 0.0;
    for (double v : phi) sum += v;
    EXPECT_NEAR(sum, m.Logits(row)[1] - m.Logits(bg)[1], 1e-12);
  }
}

TEST(ShapPermutationTest, MatchesLinearAndExactValues) {
  const CbmModel m = Linear({2, -1, 0.5}, {0, 0, 0});
  const std::vector<double> row = {1, 2, 3}, bg = {0.5, 0, 1};
  const ScoreFunction f = [&](std::span<const double> x) { return m.Logits(x)[0]; };
  const ShapEstimate est = ShapPermutation(f, row, bg, 200, 7);
  const auto exact = ShapLinear(m, row, bg, 0);
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_LE(std::abs(est.values[j] - exact[j]), std::max(3 * est.stderr_[j], 1e-12));
  }

  const ScoreFunction g = [](std::span<const double> x) {
    return x[0] * x[1] + std::sin(x[2]) * x[0] + x[3] * x[3];
  };
  const std::vector<double> r2 = {1, 2, 0.5, -1}, b2 = {0, 0, 0, 0};
  const auto oracle = testing::ExactShapley(g, r2, b2);
  const ShapEstimate e2 = ShapPermutation(g, r2, b2, 500, 3);
  double total = 0.0;
  for (std::size_t j = 0; j < 4; ++j) {
    EXPECT_LE(std::abs(e2.values[j] - oracle[j]), 3 * e2.stderr_[j] + 1e-12) << j;
    total += e2.values[j];
  }
  // Every permutation telescopes to f(row) - f(background).
  EXPECT_NEAR(total, g(r2) - g(b2), 1e-12);
}

TEST(ShapPermutationTest, SymmetryDummyAndDeterminism) {
  const ScoreFunction f = [](std::span<const double> x) { return x[0] * x[1] + 0.0 * x[2]; };
  const std::vector<double> row = {2, 2, 5}, bg = {0, 0, 5};
  const ShapEstimate a = ShapPermutation(f, row, bg, 100, 1);
  const ShapEstimate b = ShapPermutation(f, row, bg, 100, 1);
  EXPECT_EQ(a.values, b.values);
  EXPECT_NEAR(a.values[0], a.values[1], 3 * (a.stderr_[0] + a.stderr_[1]) + 1e-12);
  EXPECT_EQ(a.values[2], 0.0);
  EXPECT_THROW(ShapPermutation(f, row, bg, 0, 1), ValidationError);
}

TEST(ExactShapleyOracleTest, KnownGameValues) {
  // Glove game: v = min(x0 + x1, x2) on 0/1 players.
  const ScoreFunction f = [](std::span<const double> x) { return std::min(x[0] + x[1], x[2]); };
  const auto phi = testing::ExactShapley(f, std::vector<double>{1, 1, 1}, std::vector<double>{0, 0, 0});
  EXPECT_NEAR(phi[0], 1.0 / 6.0, 1e-12);
  EXPECT_NEAR(phi[2], 2.0 / 3.0, 1e-12);
}

TEST(TopKTest, OrderingAndTies) {
  const std::vector<std::string> names = {"d", "b", "a", "c"};
  const std::vector<double> v = {0.5, -3.0, 1.0, 2.0};
  const auto top = TopK(v, names, 2);
  EXPECT_EQ(top[0].concept_name, "b");
  EXPECT_EQ(top[1].concept_name, "c");
  const auto eq = TopK(std::vector<double>{1, -1, 1, 1}, names, 4);
  EXPECT_EQ(eq[0].concept_name, "a");
  EXPECT_EQ(eq[3].concept_name, "d");
  EXPECT_THROW(TopK(v, names, 5), ValidationError);
  EXPECT_EQ(RankSigned(v, names)[3].concept_name, "b");
}

TEST(HeatmapTest, ScalingConventions) {
  const Raster flat = RenderHeatmap(GridMap::Constant(2, 2, 3.0), 4, 4);
  for (auto p : flat.pixels) EXPECT_EQ(p, 128);
  const Raster hot = RenderHeatmap(GridMap(2, 2, {0, 1, 0, 0}), 4, 6);
  for (std::size_t y = 0; y < 6; ++y) {
    for (std::size_t x = 0; x < 4; ++x) {
      EXPECT_EQ(hot.at(x, y), (y < 3 && x >= 2) ? 255 : 0);
    }
  }
  const Raster mono = RenderHeatmap(GridMap(1, 3, {-1, 0, 2}), 3, 1);
  EXPECT_LT(mono.at(0, 0), mono.at(1, 0));
  EXPECT_LT(mono.at(1, 0), mono.at(2, 0));
}

TEST(RenderExplanationTest, SidecarRoundTripsRanking) {
  testing::TempDir dir;
  CbmModel m = Linear({1, 2, 0.5}, {0, 0, 0});
  m.concepts = {"beak", "wing/left", "tail"};
  m.background = {0.2, 0.1, 0.0};
  std::vector<GridMap> maps;
  for (int j = 0; j < 3; ++j) {
    std::vector<double> v(9, 0.0);
    v[j] = 1.0;
    maps.emplace_back(3, 3, v);
  }
  const Explanation e = Explain(m, std::vector<double>{1, 1, 1}, maps, 2);
  EXPECT_EQ(e.predicted_class, "a");
  double sum = 0.0;
  for (double v : e.shap) sum += v;
  EXPECT_NEAR(sum, m.Logits(std::vector<double>{1, 1, 1})[0] - m.Logits(m.background)[0], 1e-12);

  const Raster image = RandomRaster(1, 6, 6);
  const RenderedExplanation out = RenderExplanation(e, image, dir.path());
  ASSERT_EQ(out.heatmaps.size(), 2u);
  EXPECT_EQ(out.heatmaps[0].filename(), "heatmap_00_wing_left.pgm");
  EXPECT_EQ(LoadExplanationRanking(out.sidecar), e.ranked);
  const Raster sheet = ReadPnm(out.contact_sheet);
  EXPECT_EQ(sheet.width, 18u);
  EXPECT_EQ(sheet.height, 6u);
  EXPECT_EQ(sheet.at(0, 0, 1), image.at(0, 0, 1));
  const std::string first = ReadFileBytes(out.sidecar);
  RenderExplanation(e, image, dir.path());
  EXPECT_EQ(ReadFileBytes(out.sidecar), first);
  EXPECT_THROW(Explain(m, std::vector<double>{1, 1, 1}, {maps[0]}, 2), ValidationError);
}

}  // namespace
}  // namespace chili
