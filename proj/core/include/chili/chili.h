#ifndef CHILI_CHILI_H_
#define CHILI_CHILI_H_

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "chili/tensor.h"
#include "chili/vit.h"

namespace chili {

inline constexpr double kDefaultAlpha = 3.0;

struct RegisterSplit {
  GridMap register_part;  // map - median(map)
  GridMap filtered;       // median(map)
};

// Separates high-norm artifact cells from the spatially coherent part.
RegisterSplit SplitPseudoRegister(const GridMap& map);

// 1 where value > mean(all cells), else 0.
GridMap BinarizeMean(const GridMap& filtered);

// |a & b| / |a | b| on binary maps; 1.0 when both are empty.
double Iou(const GridMap& a, const GridMap& b);

// 1 - exp(-alpha * iou).
double IouWeight(double iou, double alpha);

// Per-head weights w_{l,h} in [0, 1 - e^{-alpha}].
struct CalibrationWeights {
  std::string model_id;
  double alpha = kDefaultAlpha;
  std::size_t layers = 0;
  std::size_t heads = 0;
  std::size_t grid_rows = 0;
  std::size_t grid_cols = 0;
  std::vector<double> w;  // index l * heads + h
  std::size_t sample_count = 0;

  double at(std::size_t l, std::size_t h) const { return w.at(l * heads + h); }
  void Validate() const;
};

// IoU(h_m(median(A_{l,h})), G) for every head of one probe sample.
std::vector<double> HeadIous(const SpatialMaps& maps, const GridMap& mask);

// Expectation of 1 - e^{-alpha IoU} over samples, per head; samples are given
// as per-head IoU rows and reduced in order.
std::vector<double> WeightsFromIous(std::span<const std::vector<double>> ious,
                                    double alpha);

// Calibrates over a probe set. maps[i] and masks[i] describe sample i; every
// mask must be nonempty and match the map grid.
CalibrationWeights Calibrate(std::span<const SpatialMaps> maps,
                             std::span<const GridMap> masks, double alpha);

std::string EncodeCalibration(const CalibrationWeights& weights);
CalibrationWeights DecodeCalibration(const std::string& text,
                                     const std::string& source);
// {"model_id", "alpha", "L", "H", "grid": [R, C], "weights": [[...]],
//  "sample_count"}
void SaveCalibration(const std::filesystem::path& path,
                     const CalibrationWeights& weights);
CalibrationWeights LoadCalibration(const std::filesystem::path& path);

struct HeadSplit {
  GridMap register_part;
  GridMap filtered;
  GridMap object;   // w * filtered
  GridMap context;  // (1 - w) * filtered
};

struct SplitMaps {
  std::string concept_name;
  std::size_t layers = 0;
  std::size_t heads = 0;
  std::vector<HeadSplit> per_head;  // index l * heads + h
  GridMap object_sum;
  GridMap context_sum;
  GridMap register_sum;
  std::uint64_t source_digest = 0;

  const HeadSplit& at(std::size_t l, std::size_t h) const {
    return per_head[l * heads + h];
  }
};

// Digest of the spatial values of a score map; identifies split provenance.
std::uint64_t SpatialDigest(const ScoredMaps& sm);
std::uint64_t SpatialDigest(const SpatialMaps& maps);

SplitMaps DecomposeMaps(const SpatialMaps& maps,
                        const CalibrationWeights& weights);

struct ScoreSplit {
  double S = 0.0;
  double S_object = 0.0;
  double S_context = 0.0;
  double S_register = 0.0;
  double S_cls = 0.0;
  double eps = 0.0;
};

// Throws ValidationError when `splits` was not derived from `sm`.
ScoreSplit SplitScore(const ScoredMaps& sm, const SplitMaps& splits);

enum class ScoreComponent { kS, kObject, kContext, kRegister };

ScoreComponent ParseScoreComponent(const std::string& name);
std::string ScoreComponentName(ScoreComponent c);
double ComponentValue(const ScoreSplit& split, ScoreComponent c);

// Full split of one score map against a calibration table.
ScoreSplit AnalyzeScore(const ScoredMaps& sm, const CalibrationWeights& weights);


}  // namespace chili

#endif  // CHILI_CHILI_H_
