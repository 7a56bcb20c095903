#ifndef CHILI_EXPLAIN_H_
#define CHILI_EXPLAIN_H_

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "chili/cbm.h"
#include "chili/image_io.h"
#include "chili/tensor.h"

namespace chili {

// Exact Shapley values of logit `class_index` for the linear head:
// phi_j = W[class, j] * (z(row)_j - z(background)_j).
std::vector<double> ShapLinear(const CbmModel& model, std::span<const double> row,
                               std::span<const double> background,
                               std::size_t class_index);

struct ShapEstimate {
  std::vector<double> values;
  std::vector<double> stderr_;  // standard error of each mean
};

using ScoreFunction = std::function<double(std::span<const double>)>;

// Mean marginal contribution over `permutations` seeded random orderings.
ShapEstimate ShapPermutation(const ScoreFunction& f, std::span<const double> row,
                             std::span<const double> background,
                             std::size_t permutations, std::uint64_t seed);

struct RankedConcept {
  std::string concept_name;
  double value = 0.0;
  friend bool operator==(const RankedConcept&, const RankedConcept&) = default;
};

// Descending |value|, ties by name.
std::vector<RankedConcept> TopK(std::span<const double> values,
                                const std::vector<std::string>& concepts,
                                std::size_t k);
// Descending signed value, ties by name.
std::vector<RankedConcept> RankSigned(std::span<const double> values,
                                      const std::vector<std::string>& concepts);

struct Explanation {
  std::string predicted_class;
  std::size_t class_index = 0;
  std::vector<std::string> concepts;
  std::vector<double> shap;           // concept order
  std::vector<RankedConcept> ranked;  // top-k by |shap|
  std::vector<GridMap> object_maps;   // concept order
  std::vector<double> background;
};

Explanation Explain(const CbmModel& model, std::span<const double> row,
                    std::vector<GridMap> object_maps, std::size_t k);

// Min-max scaled to 0..255 (a constant map gives 128), nearest-neighbour
// upsampled to width x height.
Raster RenderHeatmap(const GridMap& map, std::size_t width, std::size_t height);

struct RenderedExplanation {
  std::vector<std::filesystem::path> heatmaps;  // ranked order
  std::filesystem::path sidecar;
  std::filesystem::path contact_sheet;
};

// Writes heatmap_<rank>_<concept>.pgm for every ranked concept,
// explanation.json and contact_sheet.ppm (image followed by the heatmaps).
RenderedExplanation RenderExplanation(const Explanation& expl, const Raster& image,
                                      const std::filesystem::path& out_dir);

// Ranking stored in an explanation.json sidecar.
std::vector<RankedConcept> LoadExplanationRanking(const std::filesystem::path& path);

}  // namespace chili

#endif  // CHILI_EXPLAIN_H_
