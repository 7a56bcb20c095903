#include "chili/chili.h"

#include <bit>
#include <cmath>

#include "chili/error.h"
#include "chili/parallel.h"
#include "chili/tensor_file.h"
#include "json.hpp"

namespace chili {

using nlohmann::json;

RegisterSplit SplitPseudoRegister(const GridMap& map) {
  GridMap filtered = MedianFilter2d(map);
  GridMap reg = map - filtered;
  return {std::move(reg), std::move(filtered)};
}

GridMap BinarizeMean(const GridMap& filtered) {
  const double mean = filtered.Mean();
  std::vector<double> out(filtered.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = filtered[i] > mean ? 1.0 : 0.0;
  }
  return GridMap(filtered.rows(), filtered.cols(), std::move(out));
}

double Iou(const GridMap& a, const GridMap& b) {
  if (!a.SameShape(b)) throw ValidationError("iou: shape mismatch");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool x = a[i] != 0.0, y = b[i] != 0.0;
    inter += x && y;
    uni += x || y;
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

double IouWeight(double iou, double alpha) {
  return 1.0 - std::exp(-alpha * iou);
}

void CalibrationWeights::Validate() const {
  if (!(alpha > 0.0) || !std::isfinite(alpha)) {
    throw ValidationError("calibration: alpha must be > 0");
  }
  if (layers == 0 || heads == 0 || w.size() != layers * heads) {
    throw ValidationError("calibration: weight table is not L x H");
  }
  const double upper = 1.0 - std::exp(-alpha);
  for (double v : w) {
    if (!(v >= 0.0 && v <= upper)) {
      throw ValidationError("calibration: weight outside [0, 1 - e^-alpha]");
    }
  }
}

std::vector<double> HeadIous(const SpatialMaps& maps, const GridMap& mask) {
  std::vector<double> out(maps.maps.size());
  for (std::size_t k = 0; k < maps.maps.size(); ++k) {
    if (!maps.maps[k].SameShape(mask)) {
      throw ValidationError("probe mask grid does not match activation grid");
    }
    out[k] = Iou(BinarizeMean(MedianFilter2d(maps.maps[k])), mask);
  }
  return out;
}

std::vector<double> WeightsFromIous(std::span<const std::vector<double>> ious,
                                    double alpha) {
  if (ious.empty()) throw ValidationError("calibration: empty probe set");
  if (!(alpha > 0.0)) throw ValidationError("calibration: alpha must be > 0");
  const std::size_t heads = ious.front().size();
  std::vector<double> sum(heads, 0.0);
  for (const auto& row : ious) {
    if (row.size() != heads) throw ValidationError("calibration: ragged IoU rows");
    for (std::size_t k = 0; k < heads; ++k) sum[k] += IouWeight(row[k], alpha);
  }
  for (double& v : sum) v /= static_cast<double>(ious.size());
  return sum;
}

CalibrationWeights Calibrate(std::span<const SpatialMaps> maps,
                             std::span<const GridMap> masks, double alpha) {
  if (maps.empty()) throw ValidationError("calibration: empty probe set");
  if (maps.size() != masks.size()) {
    throw ValidationError("calibration: maps and masks differ in count");
  }
  const SpatialMaps& first = maps.front();
  for (std::size_t i = 0; i < maps.size(); ++i) {
    if (maps[i].layers != first.layers || maps[i].heads != first.heads) {
      throw ValidationError("calibration: sample " + std::to_string(i) +
                            " has a different layer/head layout");
    }
    if (maps[i].model_id != first.model_id) {
      throw ValidationError("calibration: sample " + std::to_string(i) +
                            " comes from model '" + maps[i].model_id +
                            "', expected '" + first.model_id + "'");
    }
    if (masks[i].Sum() == 0.0) {
      throw ValidationError("calibration: sample " + std::to_string(i) +
                            " has an empty mask");
    }
  }
  std::vector<std::vector<double>> ious(maps.size());
  ParallelFor(maps.size(), [&](std::size_t i) { ious[i] = HeadIous(maps[i], masks[i]); });

  CalibrationWeights cw;
  cw.model_id = first.model_id;
  cw.alpha = alpha;
  cw.layers = first.layers;
  cw.heads = first.heads;
  cw.grid_rows = masks.front().rows();
  cw.grid_cols = masks.front().cols();
  cw.w = WeightsFromIous(ious, alpha);
  cw.sample_count = maps.size();
  return cw;
}

std::string EncodeCalibration(const CalibrationWeights& cw) {
  cw.Validate();
  json weights = json::array();
  for (std::size_t l = 0; l < cw.layers; ++l) {
    json row = json::array();
    for (std::size_t h = 0; h < cw.heads; ++h) row.push_back(cw.at(l, h));
    weights.push_back(row);
  }
  json doc = {{"model_id", cw.model_id},
              {"alpha", cw.alpha},
              {"L", cw.layers},
              {"H", cw.heads},
              {"grid", {cw.grid_rows, cw.grid_cols}},
              {"weights", weights},
              {"sample_count", cw.sample_count}};
  return doc.dump(2) + "\n";
}

CalibrationWeights DecodeCalibration(const std::string& text,
                                     const std::string& source) {
  CalibrationWeights cw;
  try {
    const json doc = json::parse(text);
    cw.model_id = doc.at("model_id").get<std::string>();
    cw.alpha = doc.at("alpha").get<double>();
    cw.layers = doc.at("L").get<std::size_t>();
    cw.heads = doc.at("H").get<std::size_t>();
    const auto grid = doc.at("grid").get<std::vector<std::size_t>>();
    if (grid.size() != 2) throw ValidationError(source + ": grid must be [R, C]");
    cw.grid_rows = grid[0];
    cw.grid_cols = grid[1];
    const auto rows = doc.at("weights").get<std::vector<std::vector<double>>>();
    if (rows.size() != cw.layers) {
      throw ValidationError(source + ": weights must have L rows");
    }
    for (const auto& row : rows) {
      if (row.size() != cw.heads) {
        throw ValidationError(source + ": weights rows must have H entries");
      }
      cw.w.insert(cw.w.end(), row.begin(), row.end());
    }
    cw.sample_count = doc.at("sample_count").get<std::size_t>();
  } catch (const json::exception& e) {
    throw ValidationError(source + ": invalid calibration file: " + e.what());
  }
  try {
    cw.Validate();
  } catch (const ValidationError& e) {
    throw ValidationError(source + ": " + e.what());
  }
  return cw;
}

void SaveCalibration(const std::filesystem::path& path,
                     const CalibrationWeights& weights) {
  WriteFileBytes(path, EncodeCalibration(weights));
}

CalibrationWeights LoadCalibration(const std::filesystem::path& path) {
  return DecodeCalibration(ReadFileBytes(path), path.string());
}

namespace {

constexpr std::uint64_t kFnvOffset = 1469598103934665603ull;
constexpr std::uint64_t kFnvPrime = 1099511628211ull;

void Mix(std::uint64_t& h, double v) {
  // Normalise -0.0 so equal values hash equally.
  const std::uint64_t bits = std::bit_cast<std::uint64_t>(v == 0.0 ? 0.0 : v);
  for (int b = 0; b < 8; ++b) {
    h ^= (bits >> (8 * b)) & 0xff;
    h *= kFnvPrime;
  }
}

}  // namespace

std::uint64_t SpatialDigest(const ScoredMaps& sm) {
  std::uint64_t h = kFnvOffset;
  const std::size_t L = sm.layers(), H = sm.heads(), T = sm.tokens();
  for (std::size_t lh = 0; lh < L * H; ++lh) {
    for (std::size_t i = 1; i < T; ++i) Mix(h, sm.A[lh * T + i]);
  }
  return h;
}

std::uint64_t SpatialDigest(const SpatialMaps& maps) {
  std::uint64_t h = kFnvOffset;
  for (const GridMap& m : maps.maps) {
    for (double v : m.values()) Mix(h, v);
  }
  return h;
}

SplitMaps DecomposeMaps(const SpatialMaps& maps,
                        const CalibrationWeights& weights) {
  if (weights.layers != maps.layers || weights.heads != maps.heads) {
    throw ValidationError("calibration table is " + std::to_string(weights.layers) +
                          "x" + std::to_string(weights.heads) +
                          ", maps are " + std::to_string(maps.layers) + "x" +
                          std::to_string(maps.heads));
  }
  if (maps.maps.empty()) throw ValidationError("decompose_maps: no maps");
  const std::size_t rows = maps.maps.front().rows(), cols = maps.maps.front().cols();
  if (!weights.model_id.empty() && !maps.model_id.empty() &&
      weights.model_id != maps.model_id) {
    throw ValidationError("calibration is for model '" + weights.model_id +
                          "', maps are from '" + maps.model_id + "'");
  }
  if (weights.grid_rows != 0 && (weights.grid_rows != rows || weights.grid_cols != cols)) {
    throw ValidationError("calibration grid " + std::to_string(weights.grid_rows) + "x" +
                          std::to_string(weights.grid_cols) + " does not match maps " +
                          std::to_string(rows) + "x" + std::to_string(cols));
  }
  SplitMaps out;
  out.concept_name = maps.concept_name;
  out.layers = maps.layers;
  out.heads = maps.heads;
  out.object_sum = GridMap::Constant(rows, cols, 0.0);
  out.context_sum = out.object_sum;
  out.register_sum = out.object_sum;
  for (std::size_t l = 0; l < maps.layers; ++l) {
    for (std::size_t h = 0; h < maps.heads; ++h) {
      RegisterSplit rs = SplitPseudoRegister(maps.map(l, h));
      const double w = weights.at(l, h);
      HeadSplit hs{std::move(rs.register_part), std::move(rs.filtered), {}, {}};
      hs.object = w * hs.filtered;
      hs.context = (1.0 - w) * hs.filtered;
      out.object_sum = out.object_sum + hs.object;
      out.context_sum = out.context_sum + hs.context;
      out.register_sum = out.register_sum + hs.register_part;
      out.per_head.push_back(std::move(hs));
    }
  }
  out.source_digest = SpatialDigest(maps);
  return out;
}

ScoreSplit SplitScore(const ScoredMaps& sm, const SplitMaps& splits) {
  if (sm.layers() != splits.layers || sm.heads() != splits.heads ||
      SpatialDigest(sm) != splits.source_digest) {
    throw ValidationError("score_split: split maps were not derived from the "
                          "given score maps (concept '" + sm.concept_name + "')");
  }
  ScoreSplit s;
  s.S = sm.S;
  s.eps = sm.eps;
  s.S_object = splits.object_sum.Sum();
  s.S_context = splits.context_sum.Sum();
  s.S_register = splits.register_sum.Sum();
  const std::size_t T = sm.tokens();
  for (std::size_t lh = 0; lh < sm.layers() * sm.heads(); ++lh) {
    s.S_cls += sm.A[lh * T];
  }
  return s;
}

ScoreComponent ParseScoreComponent(const std::string& name) {
  if (name == "S") return ScoreComponent::kS;
  if (name == "S_object") return ScoreComponent::kObject;
  if (name == "S_context") return ScoreComponent::kContext;
  if (name == "S_register") return ScoreComponent::kRegister;
  throw ValidationError("unknown score component '" + name +
                        "' (expected S, S_object, S_context, S_register)");
}

std::string ScoreComponentName(ScoreComponent c) {
  switch (c) {
    case ScoreComponent::kS: return "S";
    case ScoreComponent::kObject: return "S_object";
    case ScoreComponent::kContext: return "S_context";
    case ScoreComponent::kRegister: return "S_register";
  }
  return "S";
}

double ComponentValue(const ScoreSplit& split, ScoreComponent c) {
  switch (c) {
    case ScoreComponent::kS: return split.S;
    case ScoreComponent::kObject: return split.S_object;
    case ScoreComponent::kContext: return split.S_context;
    case ScoreComponent::kRegister: return split.S_register;
  }
  return split.S;
}

ScoreSplit AnalyzeScore(const ScoredMaps& sm, const CalibrationWeights& weights) {
  const SpatialMaps spatial = ToSpatialMaps(sm, weights.grid_rows, weights.grid_cols);
  return SplitScore(sm, DecomposeMaps(spatial, weights));
}

}  // namespace chili
