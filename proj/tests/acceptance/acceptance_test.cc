// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "chili/cbm.h"
#include "chili/chili.h"
#include "chili/eval.h"
#include "chili/explain.h"
#include "chili/fixture.h"
#include "chili/rng.h"
#include "chili/tensor_file.h"
#include "chili/vit.h"
#include "oracles.h"
#include "reference_vit.h"
#include "temp_dir.h"

#ifndef CHILI_EXECUTABLE
#error "CHILI_EXECUTABLE must name the chili binary"
#endif

namespace chili {
namespace {

using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass;
  std::string detail;
};

double Seconds(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string Fmt(const char* f, double a, double b = 0.0, double c = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), f, a, b, c);
  return buf;
}

struct TinyCase {
  WeightArchive w;
  EncodedImage enc;
  ContributionRecord rec;
  ScoredMaps sm;
};

TinyCase MakeTiny(std::uint64_t seed) {
  TinyCase t;
  t.w = RandomArchive(seed, testing::RandomTinySpec(seed));
  const Tensor image = PreprocessImage(RandomRaster(seed + 1000, 17, 15), t.w.spec.image_size);
  t.enc = EncodeImage(t.w, image);
  t.rec = Decompose(t.w, t.enc.record);
  const ConceptEmbeddingSet c = RandomConcepts(seed + 2000, {"k"}, t.w.spec.d_embed);
  t.sm = ScoreConcept(t.rec, c.at(0).vector, t.w.spec.logit_scale, "k");
  return t;
}

Outcome Reconstruction() {
  const auto start = Clock::now();
  double worst = 0.0;
  for (std::uint64_t seed = 1; seed <= 100; ++seed) {
    const TinyCase t = MakeTiny(seed);
    const double err = std::abs(t.sm.S - (t.sm.SumA() + t.sm.eps)) / std::max(1.0, std::abs(t.sm.S));
    worst = std::max(worst, err);
  }
  const double secs = Seconds(start);
  return {worst <= 1e-4 && secs < 30.0,
          Fmt("100 models, worst relative error %.2e, %.2f s", worst, secs)};
}

Outcome ForwardOracle() {
  double worst = 0.0;
  for (std::uint64_t seed = 1; seed <= 50; ++seed) {
    const WeightArchive w = RandomArchive(seed, testing::RandomTinySpec(seed));
    const Tensor image = PreprocessImage(RandomRaster(seed + 3000, 12, 12), w.spec.image_size);
    const EncodedImage enc = EncodeImage(w, image);
    const testing::ReferenceForward ref = testing::RunReference(w, image);
    for (std::size_t e = 0; e < ref.embedding.size(); ++e) {
      worst = std::max(worst, std::abs(enc.embedding[e] - ref.embedding[e]));
    }
    for (std::size_t d = 0; d < ref.final_cls.size(); ++d) {
      worst = std::max(worst, std::abs(enc.record.final_cls[d] - ref.final_cls[d]));
    }
    const std::size_t T = w.spec.tokens() + 1;
    for (std::size_t lh = 0; lh < ref.attention.size(); ++lh) {
      for (std::size_t i = 0; i < T; ++i) {
        worst = std::max(worst, std::abs(enc.record.attention[lh * T + i] - ref.attention[lh][i]));
      }
    }
  }
  return {worst <= 1e-5, Fmt("50 seeds, worst element difference %.2e", worst)};
}

Outcome Conservation() {
  double map_err = 0.0, score_err = 0.0;
  for (std::uint64_t seed = 1; seed <= 100; ++seed) {
    const TinyCase t = MakeTiny(seed);
    const std::size_t G = t.w.spec.grid_side();
    const SpatialMaps sp = ToSpatialMaps(t.sm, G, G);
    CalibrationWeights cal;
    cal.model_id = t.w.spec.model_id;
    cal.layers = sp.layers;
    cal.heads = sp.heads;
    cal.grid_rows = cal.grid_cols = G;
    Rng rng(seed);
    for (std::size_t i = 0; i < sp.layers * sp.heads; ++i) {
      cal.w.push_back(IouWeight(rng.Uniform(), kDefaultAlpha));
    }
    const SplitMaps split = DecomposeMaps(sp, cal);
    for (std::size_t l = 0; l < sp.layers; ++l) {
      for (std::size_t h = 0; h < sp.heads; ++h) {
        const HeadSplit& hs = split.at(l, h);
        for (std::size_t k = 0; k < G * G; ++k) {
          const double sum = hs.register_part[k] + hs.object[k] + hs.context[k];
          map_err = std::max(map_err, std::abs(sum - sp.map(l, h)[k]));
        }
      }
    }
    const ScoreSplit s = SplitScore(t.sm, split);
    const double total = s.S_object + s.S_context + s.S_register + s.S_cls + s.eps;
    score_err = std::max(score_err, std::abs(total - s.S) / std::max(1.0, std::abs(s.S)));
  }
  return {map_err <= 1e-6 && score_err <= 1e-4,
          Fmt("map error %.2e, score relative error %.2e", map_err, score_err)};
}

Outcome CalibrationClosedForm() {
  const double w0 = IouWeight(0.0, 3.0);
  const double w1 = IouWeight(1.0, 3.0);
  const double wh = IouWeight(0.5, 3.0);
  bool monotone = true;
  for (double iou : {0.1, 0.5, 1.0}) {
    double prev = -1.0;
    for (int i = 1; i <= 10; ++i) {
      const double w = IouWeight(iou, 0.5 * i);
      monotone = monotone && w > prev;
      prev = w;
    }
  }
  const bool pass = w0 == 0.0 && std::abs(w1 - 0.950213) <= 1e-6 &&
                    std::abs(wh - 0.776870) <= 1e-6 && monotone;
  return {pass, Fmt("w(0)=%.1f w(1)=%.6f w(0.5)=%.6f", w0, w1, wh) +
                    (monotone ? ", monotone in alpha" : ", NOT monotone")};
}

Outcome MetricOracles() {
  Rng rng(99);
  std::size_t bad_auroc = 0, bad_ap = 0, bad_median = 0;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = 2 + rng.Index(11), p = 1 + rng.Index(n - 1);
    std::vector<double> pos(p), neg(n - p);
    for (double& x : pos) x = t % 2 ? rng.Normal() : static_cast<double>(rng.Index(3));
    for (double& x : neg) x = t % 2 ? rng.Normal() : static_cast<double>(rng.Index(3));
    if (Auroc(pos, neg) != testing::BruteAuroc(pos, neg)) ++bad_auroc;
  }
  for (int t = 0; t < 500; ++t) {
    const std::size_t n = 1 + rng.Index(16);
    std::vector<double> s(n), g(n, 0.0);
    for (double& x : s) x = t % 2 ? rng.Normal() : static_cast<double>(rng.Index(4));
    g[rng.Index(n)] = 1.0;
    for (double& x : g) x = x != 0.0 || rng.Index(2) ? 1.0 : 0.0;
    const GridMap sm(1, n, s), gm(1, n, g);
    if (std::abs(AveragePrecision(sm, gm) - testing::BruteAp(sm, gm)) > 1e-12) ++bad_ap;
  }
  for (int t = 0; t < 200; ++t) {
    const std::size_t r = 1 + rng.Index(10), c = 1 + rng.Index(10);
    std::vector<double> v(r * c);
    for (double& x : v) x = t % 2 ? rng.Normal() : static_cast<double>(rng.Index(3));
    const GridMap m(r, c, v);
    if (!(MedianFilter2d(m) == testing::BruteMedian(m))) ++bad_median;
  }
  // 3x3 hand fixture: 7 of 9 cells agree; fg IoU 2/4, bg IoU 5/7.
  const GridMap pred(3, 3, {1, 1, 0, 1, 0, 0, 0, 0, 1});
  const GridMap gt(3, 3, {1, 1, 0, 0, 0, 0, 0, 0, 0});
  const bool hand = PixelAccuracy(pred, gt) == 7.0 / 9.0 &&
                    MeanIou(pred, gt) == (2.0 / 4.0 + 5.0 / 7.0) / 2.0 &&
                    MeanIou(gt, gt) == 1.0 && PixelAccuracy(gt, gt) == 1.0;
  const bool pass = bad_auroc == 0 && bad_ap == 0 && bad_median == 0 && hand;
  return {pass, Fmt("mismatches auroc %.0f/1000 ap %.0f/500 median %.0f/200", bad_auroc, bad_ap,
                    bad_median) +
                    (hand ? ", hand fixtures exact" : ", hand fixtures WRONG")};
}

struct FixtureRun {
  CalibrationWeights cal;
  DetectionResult det;
  SegResult object;
  SegResult raw;
};

FixtureRun RunFixture(std::uint64_t seed) {
  const FixtureSpec spec;
  const Fixture f = GenerateFixture(seed, spec);
  std::vector<SpatialMaps> maps;
  std::vector<GridMap> masks;
  for (const auto& s : f.probe) {
    maps.push_back(ToSpatialMaps(s.maps, spec.grid_rows, spec.grid_cols));
    masks.push_back(s.mask);
  }
  FixtureRun r;
  r.cal = Calibrate(maps, masks, kDefaultAlpha);
  std::vector<ScoreSplit> splits;
  std::vector<bool> present;
  SegmentationAccumulator object, raw;
  for (const auto& s : f.eval) {
    const SpatialMaps sp = ToSpatialMaps(s.maps, spec.grid_rows, spec.grid_cols);
    const SplitMaps split = DecomposeMaps(sp, r.cal);
    splits.push_back(SplitScore(s.maps, split));
    present.push_back(s.present);
    if (s.present) {
      const GridMap summed = sp.Summed();
      object.Add(BinarizeMean(split.object_sum), split.object_sum, s.mask);
      raw.Add(BinarizeMean(summed), summed, s.mask);
    }
  }
  r.det = EvaluateDetection(splits, present);
  r.object = object.Result();
  r.raw = raw.Result();
  return r;
}

Outcome FixtureDetection() {
  const auto start = Clock::now();
  const FixtureSpec spec;
  double worst_gap = std::numeric_limits<double>::infinity();
  double worst_margin = std::numeric_limits<double>::infinity();
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const FixtureRun r = RunFixture(seed);
    double min_obj = std::numeric_limits<double>::infinity();
    double max_ctx = -std::numeric_limits<double>::infinity();
    for (std::size_t l = 0; l < spec.layers; ++l) {
      for (std::size_t h = 0; h < spec.heads; ++h) {
        if (spec.IsObjectHead(l, h)) {
          min_obj = std::min(min_obj, r.cal.at(l, h));
        } else {
          max_ctx = std::max(max_ctx, r.cal.at(l, h));
        }
      }
    }
    worst_gap = std::min(worst_gap, min_obj - max_ctx);
    worst_margin = std::min(worst_margin, r.det.S_object - r.det.S);
  }
  const double secs = Seconds(start);
  return {worst_gap > 0.0 && worst_margin >= 0.05 && secs < 60.0,
          Fmt("20 seeds, min w gap %.4f, min AUROC(S_object)-AUROC(S) %.4f, %.2f s", worst_gap,
              worst_margin, secs)};
}

Outcome FixtureSegmentation() {
  double worst = std::numeric_limits<double>::infinity();
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const FixtureRun r = RunFixture(seed);
    worst = std::min(worst, r.object.miou - r.raw.miou);
  }
  return {worst >= 0.0, Fmt("20 seeds, min mIoU(object)-mIoU(raw) %.4f", worst)};
}

Outcome TripletCounts() {
  TripletScenario s;
  s.c1 = "c1";
  s.c2 = "c2";
  s.k = "k";
  auto rate = [&](const std::vector<std::pair<double, double>>& present_absent) {
    std::vector<TripletRepetition> reps;
    for (const auto& [p, a] : present_absent) reps.push_back({{p, p}, {a, a}, {0.0}});
    s.repetitions = reps.size();
    return RunTriplet(s, reps).failure_rate;
  };
  // Failures are repetitions whose absent mean is strictly above the present mean.
  const double r0 = rate({{2, 1}, {3, 3}, {5, -1}, {1, 0.5}, {4, 4}});
  const double r4 = rate({{1, 2}, {3, 3}, {1, 5}, {2, 1}, {0, -1}});
  const double r1 = rate({{0, 1}, {-1, 0}, {2, 2.5}});
  return {r0 == 0.0 && r4 == 0.4 && r1 == 1.0, Fmt("rates %.2f %.2f %.2f", r0, r4, r1)};
}

ConceptMatrix RandomMatrix(Rng& rng, std::size_t n, std::size_t d, std::size_t K) {
  ConceptMatrix m;
  for (std::size_t j = 0; j < d; ++j) m.concepts.push_back("c" + std::to_string(j));
  for (std::size_t k = 0; k < K; ++k) m.classes.push_back("k" + std::to_string(k));
  m.rows = n;
  for (std::size_t i = 0; i < n; ++i) {
    m.labels.push_back(i < K ? i : rng.Index(K));
    for (std::size_t j = 0; j < d; ++j) m.values.push_back(rng.Normal() * 3.0);
  }
  return m;
}

Outcome Cbm() {
  // Separable: class k has a +5 offset on concept k.
  Rng rng(5);
  ConceptMatrix sep = RandomMatrix(rng, 60, 3, 3);
  for (std::size_t i = 0; i < sep.rows; ++i) {
    for (std::size_t j = 0; j < 3; ++j) sep.values[i * 3 + j] *= 0.2;
    sep.values[i * 3 + sep.labels[i]] += 5.0;
  }
  const double train_acc = Accuracy(TrainCbm(sep, CbmHyper{}), sep);

  double worst_sum = 0.0;
  std::size_t nonmonotone = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng r(seed + 77);
    const ConceptMatrix m = RandomMatrix(r, 10 + r.Index(30), 1 + r.Index(6), 2 + r.Index(4));
    const CbmModel model = TrainCbm(m, CbmHyper{});
    for (std::size_t e = 1; e < model.loss_trace.size(); ++e) {
      if (model.loss_trace[e] > model.loss_trace[e - 1]) ++nonmonotone;
    }
    for (std::size_t i = 0; i < m.rows; ++i) {
      double total = 0.0;
      for (double p : Predict(model, m.row(i)).probabilities) total += p;
      worst_sum = std::max(worst_sum, std::abs(total - 1.0));
    }
  }
  return {train_acc == 1.0 && worst_sum <= 1e-6 && nonmonotone == 0,
          Fmt("separable train accuracy %.3f, max |sum p - 1| %.1e, loss increases %.0f", train_acc,
              worst_sum, nonmonotone)};
}

Outcome Shapley() {
  double worst_eff = 0.0;
  std::size_t outside = 0, compared = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed + 500);
    const std::size_t d = 2 + rng.Index(9), K = 2 + rng.Index(3);
    CbmModel m;
    for (std::size_t k = 0; k < K; ++k) m.classes.push_back("k" + std::to_string(k));
    for (std::size_t j = 0; j < d; ++j) m.concepts.push_back("c" + std::to_string(j));
    for (std::size_t q = 0; q < K * d; ++q) m.weights.push_back(rng.Normal());
    for (std::size_t k = 0; k < K; ++k) m.bias.push_back(rng.Normal());
    std::vector<double> row(d), bg(d);
    for (double& x : row) x = rng.Normal();
    for (double& x : bg) x = rng.Normal();
    const std::size_t cls = Predict(m, row).class_index;

    const std::vector<double> phi = ShapLinear(m, row, bg, cls);
    double total = 0.0;
    for (double v : phi) total += v;
    worst_eff = std::max(worst_eff, std::abs(total - (m.Logits(row)[cls] - m.Logits(bg)[cls])));

    // Nonlinear head output: the predicted-class probability.
    const ScoreFunction f = [&](std::span<const double> x) {
      return Predict(m, x).probabilities[cls];
    };
    const std::vector<double> exact = testing::ExactShapley(f, row, bg);
    const ShapEstimate est = ShapPermutation(f, row, bg, 200, seed);
    for (std::size_t j = 0; j < d; ++j) {
      ++compared;
      if (std::abs(est.values[j] - exact[j]) > 3.0 * est.stderr_[j] + 1e-12) ++outside;
    }
  }
  return {worst_eff <= 1e-6 && outside == 0,
          Fmt("linear efficiency error %.1e; sampled outside 3 stderr: %.0f of %.0f", worst_eff,
              outside, compared)};
}

bool TreesEqual(const std::filesystem::path& a, const std::filesystem::path& b, std::size_t& files) {
  namespace fs = std::filesystem;
  files = 0;
  for (const auto& entry : fs::recursive_directory_iterator(a)) {
    if (!entry.is_regular_file()) continue;
    const fs::path other = b / fs::relative(entry.path(), a);
    if (!fs::exists(other) || ReadFileBytes(entry.path()) != ReadFileBytes(other)) return false;
    ++files;
  }
  std::size_t count_b = 0;
  for (const auto& entry : fs::recursive_directory_iterator(b)) count_b += entry.is_regular_file();
  return count_b == files;
}

Outcome Determinism() {
  testing::TempDir dir;
  const std::string exe = CHILI_EXECUTABLE;
  int codes = 0;
  const char* runs[][2] = {{"1", "w1a"}, {"1", "w1b"}, {"4", "w4"}};
  for (const auto& run : runs) {
    const std::string cmd = std::string("CHILI_WORKERS=") + run[0] + " '" + exe +
                            "' selftest --seed 7 --out-dir '" + (dir / run[1]).string() +
                            "' > /dev/null 2>&1";
    codes |= std::system(cmd.c_str());
  }
  std::size_t files = 0;
  const bool same_twice = TreesEqual(dir / "w1a", dir / "w1b", files);
  const bool same_workers = TreesEqual(dir / "w1a", dir / "w4", files);
  const bool report = std::filesystem::exists(dir / "w1a" / "selftest_report.json");
  return {codes == 0 && report && same_twice && same_workers,
          Fmt("selftest exit status %.0f, %.0f output files", codes, files) +
              (same_twice ? ", repeat identical" : ", repeat DIFFERS") +
              (same_workers ? ", workers 1 vs 4 identical" : ", workers 1 vs 4 DIFFER")};
}

}  // namespace
}  // namespace chili

int main() {
  using chili::Outcome;
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"reconstruction identity", chili::Reconstruction},
      {"forward-pass oracle", chili::ForwardOracle},
      {"split conservation", chili::Conservation},
      {"calibration closed form", chili::CalibrationClosedForm},
      {"metric oracles", chili::MetricOracles},
      {"fixture detection", chili::FixtureDetection},
      {"fixture segmentation", chili::FixtureSegmentation},
      {"triplet failure rate", chili::TripletCounts},
      {"cbm training", chili::Cbm},
      {"shapley", chili::Shapley},
      {"determinism", chili::Determinism},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::printf("%s %2zu %s: %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first,
                o.detail.c_str());
    failed += !o.pass;
  }
  std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failed,
              criteria.size());
  return failed == 0 ? 0 : 1;
}
