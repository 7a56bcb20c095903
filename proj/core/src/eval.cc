#include "chili/eval.h"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>

#include "chili/error.h"

namespace chili {

double Auroc(std::span<const double> pos, std::span<const double> neg) {
  if (pos.empty() || neg.empty()) {
    throw ValidationError("auroc: both score lists must be nonempty");
  }
  struct Item {
    double score;
    bool positive;
  };
  std::vector<Item> items;
  items.reserve(pos.size() + neg.size());
  for (double s : pos) items.push_back({s, true});
  for (double s : neg) items.push_back({s, false});
  std::sort(items.begin(), items.end(),
            [](const Item& a, const Item& b) { return a.score < b.score; });
  // Twice the U statistic, kept integral so ties are exact.
  std::uint64_t twice_u = 0;
  std::uint64_t neg_below = 0;
  for (std::size_t i = 0; i < items.size();) {
    std::size_t j = i;
    std::uint64_t p = 0, n = 0;
    while (j < items.size() && items[j].score == items[i].score) {
      (items[j].positive ? p : n) += 1;
      ++j;
    }
    twice_u += 2 * p * neg_below + p * n;
    neg_below += n;
    i = j;
  }
  return static_cast<double>(twice_u) /
         (2.0 * static_cast<double>(pos.size()) * static_cast<double>(neg.size()));
}

namespace {

void RequireSameShape(const GridMap& a, const GridMap& b, const char* what) {
  if (!a.SameShape(b)) throw ValidationError(std::string(what) + ": shape mismatch");
}

}  // namespace

double PixelAccuracy(const GridMap& pred, const GridMap& gt) {
  RequireSameShape(pred, gt, "pixel_accuracy");
  std::size_t match = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    match += (pred[i] != 0.0) == (gt[i] != 0.0);
  }
  return static_cast<double>(match) / static_cast<double>(pred.size());
}

double MeanIou(const GridMap& pred, const GridMap& gt) {
  RequireSameShape(pred, gt, "mean_iou");
  double total = 0.0;
  for (const bool cls : {true, false}) {
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const bool p = (pred[i] != 0.0) == cls, g = (gt[i] != 0.0) == cls;
      inter += p && g;
      uni += p || g;
    }
    total += uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
  }
  return total / 2.0;
}

double AveragePrecision(const GridMap& scores, const GridMap& gt) {
  RequireSameShape(scores, gt, "average_precision");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] > scores[b];
  });
  std::size_t total_pos = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) total_pos += gt[i] != 0.0;
  if (total_pos == 0) throw ValidationError("average_precision: empty ground truth");

  double ap = 0.0;
  std::size_t tp = 0, seen = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i, block_tp = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      block_tp += gt[order[j]] != 0.0;
      ++j;
    }
    tp += block_tp;
    seen = j;
    const double precision = static_cast<double>(tp) / static_cast<double>(seen);
    ap += precision * static_cast<double>(block_tp) / static_cast<double>(total_pos);
    i = j;
  }
  return ap;
}

void SegmentationAccumulator::Add(const GridMap& pred, const GridMap& scores,
                                  const GridMap& gt) {
  acc_ += PixelAccuracy(pred, gt);
  miou_ += MeanIou(pred, gt);
  ap_ += AveragePrecision(scores, gt);
  ++n_;
}

SegResult SegmentationAccumulator::Result() const {
  SegResult r;
  r.images = n_;
  if (n_ == 0) return r;
  const double n = static_cast<double>(n_);
  r.pixel_acc = acc_ / n;
  r.miou = miou_ / n;
  r.map = ap_ / n;
  return r;
}

double DetectionResult::Get(ScoreComponent c) const {
  switch (c) {
    case ScoreComponent::kS: return S;
    case ScoreComponent::kObject: return S_object;
    case ScoreComponent::kContext: return S_context;
    case ScoreComponent::kRegister: return S_register;
  }
  return S;
}

DetectionResult EvaluateDetection(std::span<const ScoreSplit> splits,
                                  const std::vector<bool>& present) {
  if (splits.size() != present.size()) {
    throw ValidationError("detection: score and label counts differ");
  }
  DetectionResult r;
  auto component = [&](ScoreComponent c) {
    std::vector<double> pos, neg;
    for (std::size_t i = 0; i < splits.size(); ++i) {
      (present[i] ? pos : neg).push_back(ComponentValue(splits[i], c));
    }
    r.positives = pos.size();
    r.negatives = neg.size();
    return Auroc(pos, neg);
  };
  r.S = component(ScoreComponent::kS);
  r.S_object = component(ScoreComponent::kObject);
  r.S_context = component(ScoreComponent::kContext);
  r.S_register = component(ScoreComponent::kRegister);
  return r;
}

void TripletScenario::Validate() const {
  if (c1 == c2) throw ValidationError("triplet: c1 and c2 must differ");
  if (repetitions < 1) throw ValidationError("triplet: repetitions must be >= 1");
  if (samples_per_subset < 1) {
    throw ValidationError("triplet: samples_per_subset must be >= 1");
  }
}

namespace {

double Mean(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double SampleStd(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  const double m = Mean(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

}  // namespace

TripletResult RunTriplet(const TripletScenario& scenario,
                         std::span<const TripletRepetition> reps) {
  scenario.Validate();
  if (reps.empty()) throw ValidationError("triplet: no repetitions");
  std::array<std::vector<double>, 3> pooled;
  std::size_t failures = 0;
  for (std::size_t r = 0; r < reps.size(); ++r) {
    const TripletRepetition& rep = reps[r];
    if (rep.present.empty() || rep.absent.empty() || rep.other.empty()) {
      throw ValidationError("triplet: repetition " + std::to_string(r) +
                            " has an empty subset");
    }
    if (Mean(rep.absent) > Mean(rep.present)) ++failures;
    pooled[0].insert(pooled[0].end(), rep.present.begin(), rep.present.end());
    pooled[1].insert(pooled[1].end(), rep.absent.begin(), rep.absent.end());
    pooled[2].insert(pooled[2].end(), rep.other.begin(), rep.other.end());
  }
  TripletResult out;
  out.scenario = scenario;
  for (std::size_t k = 0; k < 3; ++k) {
    out.means[k] = Mean(pooled[k]);
    out.stds[k] = SampleStd(pooled[k]);
  }
  out.failure_rate = static_cast<double>(failures) / static_cast<double>(reps.size());
  return out;
}

std::vector<TripletRepetition> SampleTriplet(const TripletScenario& scenario,
                                             std::span<const double> present,
                                             std::span<const double> absent,
                                             std::span<const double> other,
                                             Rng& rng) {
  scenario.Validate();
  if (present.empty() || absent.empty() || other.empty()) {
    throw ValidationError("triplet: empty score pool");
  }
  auto draw = [&](std::span<const double> pool) {
    std::vector<double> v(pool.begin(), pool.end());
    rng.Shuffle(v.begin(), v.end());
    v.resize(std::min(v.size(), scenario.samples_per_subset));
    return v;
  };
  std::vector<TripletRepetition> reps;
  for (std::size_t r = 0; r < scenario.repetitions; ++r) {
    TripletRepetition rep;
    rep.present = draw(present);
    rep.absent = draw(absent);
    rep.other = draw(other);
    reps.push_back(std::move(rep));
  }
  return reps;
}

double AggregateFailureRate(std::span<const TripletResult> results) {
  if (results.empty()) return 0.0;
  double s = 0.0;
  for (const auto& r : results) s += r.failure_rate;
  return s / static_cast<double>(results.size());
}

}  // namespace chili
