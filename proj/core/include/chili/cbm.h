#ifndef CHILI_CBM_H_
#define CHILI_CBM_H_

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "chili/chili.h"
#include "chili/vit.h"
#include "chili/weights_io.h"

namespace chili {

// Rows are images, columns concepts; entries are one score component.
struct ConceptMatrix {
  std::vector<std::string> concepts;
  std::vector<std::string> classes;
  std::size_t rows = 0;
  std::vector<double> values;       // rows x concepts
  std::vector<std::size_t> labels;  // indices into classes
  ScoreComponent component = ScoreComponent::kS;

  std::size_t cols() const { return concepts.size(); }
  std::span<const double> row(std::size_t i) const {
    return std::span<const double>(values).subspan(i * cols(), cols());
  }
  void Validate() const;
};

// Sorted unique labels.
std::vector<std::string> ClassVocabulary(const std::vector<std::string>& labels);

// Entry (i, j) is the requested component of image i's score for concept j.
// `weights` is required for every component other than kS. An empty
// `classes` uses ClassVocabulary(labels).
ConceptMatrix BuildConceptMatrix(std::span<const ContributionRecord> records,
                                 const ConceptEmbeddingSet& concepts,
                                 const CalibrationWeights* weights,
                                 ScoreComponent component,
                                 const std::vector<std::string>& labels,
                                 const std::vector<std::string>& classes,
                                 double logit_scale);

// Same, from precomputed per-image score maps: maps[i][j] is image i scored
// against concept j.
ConceptMatrix BuildConceptMatrix(const std::vector<std::vector<ScoredMaps>>& maps,
                                 const std::vector<std::string>& concepts,
                                 const CalibrationWeights* weights,
                                 ScoreComponent component,
                                 const std::vector<std::string>& labels,
                                 const std::vector<std::string>& classes);

struct CbmHyper {
  std::size_t epochs = 500;
  double lr = 0.1;
  double l2 = 1e-4;
  std::uint64_t seed = 0;
  bool standardize = false;
};

// Multinomial logistic regression head.
struct CbmModel {
  std::vector<std::string> classes;
  std::vector<std::string> concepts;
  ScoreComponent component = ScoreComponent::kS;
  std::vector<double> weights;  // classes x concepts
  std::vector<double> bias;
  CbmHyper hyper;
  std::vector<double> background;  // training mean, raw feature space
  std::vector<double> feature_mean;   // empty unless standardized
  std::vector<double> feature_scale;
  std::vector<double> loss_trace;     // initial loss, then one per epoch

  double weight(std::size_t k, std::size_t j) const {
    return weights[k * concepts.size() + j];
  }
  // Maps a raw row into the space the weights act on.
  std::vector<double> Features(std::span<const double> row) const;
  std::vector<double> Logits(std::span<const double> row) const;
  void Validate() const;
};

// Full-batch gradient descent from zero on mean cross-entropy plus
// (l2 / 2) |W|^2. A step that would raise the loss is retried at half the
// learning rate, so loss_trace never increases.
CbmModel TrainCbm(const ConceptMatrix& matrix, const CbmHyper& hyper);

struct Prediction {
  std::size_t class_index = 0;
  std::vector<double> probabilities;
};

Prediction Predict(const CbmModel& model, std::span<const double> row);
double Accuracy(const CbmModel& model, const ConceptMatrix& matrix);
double CbmLoss(const CbmModel& model, const ConceptMatrix& matrix);

std::string EncodeCbmModel(const CbmModel& model);
CbmModel DecodeCbmModel(const std::string& text, const std::string& source);
void SaveCbmModel(const std::filesystem::path& path, const CbmModel& model);
CbmModel LoadCbmModel(const std::filesystem::path& path);

}  // namespace chili

#endif  // CHILI_CBM_H_
