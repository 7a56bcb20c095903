#ifndef CHILI_EVAL_H_
#define CHILI_EVAL_H_

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "chili/chili.h"
#include "chili/rng.h"
#include "chili/tensor.h"

namespace chili {

// Mann-Whitney U / (|pos| |neg|), ties counted one half.
double Auroc(std::span<const double> pos, std::span<const double> neg);

double PixelAccuracy(const GridMap& pred, const GridMap& gt);

// Mean of foreground and background IoU.
double MeanIou(const GridMap& pred, const GridMap& gt);

// Area under the step precision-recall curve with cells ranked by descending
// score. Tied scores form a single threshold step.
double AveragePrecision(const GridMap& scores, const GridMap& gt);

struct SegResult {
  double pixel_acc = 0.0;
  double miou = 0.0;
  double map = 0.0;
  std::size_t images = 0;
};

// Per-image metric means.
class SegmentationAccumulator {
 public:
  // pred is binary, scores feed AP.
  void Add(const GridMap& pred, const GridMap& scores, const GridMap& gt);
  SegResult Result() const;

 private:
  double acc_ = 0.0, miou_ = 0.0, ap_ = 0.0;
  std::size_t n_ = 0;
};

struct DetectionResult {
  double S = 0.0;
  double S_object = 0.0;
  double S_context = 0.0;
  double S_register = 0.0;
  std::size_t positives = 0;
  std::size_t negatives = 0;

  double Get(ScoreComponent c) const;
};

DetectionResult EvaluateDetection(std::span<const ScoreSplit> splits,
                                  const std::vector<bool>& present);

struct TripletScenario {
  std::string c1;
  std::string c2;
  std::string k;
  std::size_t samples_per_subset = 10;
  std::size_t repetitions = 10;

  void Validate() const;
};

// Scores of one repetition: k-present c1, k-absent c1, c2.
struct TripletRepetition {
  std::vector<double> present;
  std::vector<double> absent;
  std::vector<double> other;
};

struct TripletResult {
  TripletScenario scenario;
  std::array<double, 3> means{};
  std::array<double, 3> stds{};
  double failure_rate = 0.0;
};

// Means and sample stds pool every repetition; a repetition fails when the
// k-absent c1 mean is strictly above the k-present mean.
TripletResult RunTriplet(const TripletScenario& scenario,
                         std::span<const TripletRepetition> reps);

// Draws scenario.repetitions subsets (without replacement, capped by pool
// size) from three score pools.
std::vector<TripletRepetition> SampleTriplet(const TripletScenario& scenario,
                                             std::span<const double> present,
                                             std::span<const double> absent,
                                             std::span<const double> other,
                                             Rng& rng);

// Mean of per-scenario failure rates.
double AggregateFailureRate(std::span<const TripletResult> results);

}  // namespace chili

#endif  // CHILI_EVAL_H_
