#include "chili/cbm.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "chili/error.h"
#include "chili/parallel.h"
#include "chili/tensor_file.h"
#include "json.hpp"

namespace chili {

using nlohmann::json;

void ConceptMatrix::Validate() const {
  if (concepts.empty()) throw ValidationError("concept matrix: no concepts");
  if (values.size() != rows * cols()) {
    throw ValidationError("concept matrix: value count does not match shape");
  }
  if (labels.size() != rows) {
    throw ValidationError("concept matrix: one label per row is required");
  }
  for (double v : values) {
    if (!std::isfinite(v)) throw ValidationError("concept matrix: non-finite entry");
  }
  for (std::size_t label : labels) {
    if (label >= classes.size()) {
      throw ValidationError("concept matrix: label outside the class vocabulary");
    }
  }
}

std::vector<std::string> ClassVocabulary(const std::vector<std::string>& labels) {
  std::set<std::string> unique(labels.begin(), labels.end());
  return {unique.begin(), unique.end()};
}

namespace {

std::vector<std::size_t> LabelIndices(const std::vector<std::string>& labels,
                                      const std::vector<std::string>& classes) {
  std::vector<std::size_t> out;
  out.reserve(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto it = std::find(classes.begin(), classes.end(), labels[i]);
    if (it == classes.end()) {
      throw ValidationError("concept matrix: row " + std::to_string(i) + " has unknown class '" +
                            labels[i] + "'");
    }
    out.push_back(static_cast<std::size_t>(it - classes.begin()));
  }
  return out;
}

double Component(const ScoredMaps& sm, const CalibrationWeights* weights,
                 ScoreComponent component) {
  if (component == ScoreComponent::kS) return sm.S;
  if (sm.model_id != weights->model_id) {
    throw ValidationError("concept matrix: calibration model_id '" + weights->model_id +
                          "' does not match '" + sm.model_id + "'");
  }
  return ComponentValue(AnalyzeScore(sm, *weights), component);
}

void RequireWeights(const CalibrationWeights* weights, ScoreComponent component) {
  if (component != ScoreComponent::kS && weights == nullptr) {
    throw ValidationError("concept matrix: component " + ScoreComponentName(component) +
                          " requires a calibration");
  }
}

}  // namespace

ConceptMatrix BuildConceptMatrix(std::span<const ContributionRecord> records,
                                 const ConceptEmbeddingSet& concepts,
                                 const CalibrationWeights* weights,
                                 ScoreComponent component,
                                 const std::vector<std::string>& labels,
                                 const std::vector<std::string>& classes,
                                 double logit_scale) {
  RequireWeights(weights, component);
  if (records.size() != labels.size()) {
    throw ValidationError("concept matrix: one label per image is required");
  }
  ConceptMatrix m;
  for (const auto& c : concepts.concepts()) m.concepts.push_back(c.name);
  m.classes = classes.empty() ? ClassVocabulary(labels) : classes;
  m.rows = records.size();
  m.labels = LabelIndices(labels, m.classes);
  m.component = component;
  m.values.assign(m.rows * m.cols(), 0.0);
  const std::size_t d = m.cols();
  ParallelFor(m.rows, [&](std::size_t i) {
    for (std::size_t j = 0; j < d; ++j) {
      const ConceptEmbedding& c = concepts.at(j);
      const ScoredMaps sm = ScoreConcept(records[i], c.vector, logit_scale, c.name);
      m.values[i * d + j] = Component(sm, weights, component);
    }
  });
  m.Validate();
  return m;
}

ConceptMatrix BuildConceptMatrix(const std::vector<std::vector<ScoredMaps>>& maps,
                                 const std::vector<std::string>& concepts,
                                 const CalibrationWeights* weights,
                                 ScoreComponent component,
                                 const std::vector<std::string>& labels,
                                 const std::vector<std::string>& classes) {
  RequireWeights(weights, component);
  if (maps.size() != labels.size()) {
    throw ValidationError("concept matrix: one label per image is required");
  }
  ConceptMatrix m;
  m.concepts = concepts;
  m.classes = classes.empty() ? ClassVocabulary(labels) : classes;
  m.rows = maps.size();
  m.labels = LabelIndices(labels, m.classes);
  m.component = component;
  const std::size_t d = m.cols();
  for (std::size_t i = 0; i < maps.size(); ++i) {
    if (maps[i].size() != d) {
      throw ValidationError("concept matrix: image " + std::to_string(i) +
                            " does not have one score map per concept");
    }
  }
  m.values.assign(m.rows * d, 0.0);
  ParallelFor(m.rows, [&](std::size_t i) {
    for (std::size_t j = 0; j < d; ++j) {
      m.values[i * d + j] = Component(maps[i][j], weights, component);
    }
  });
  m.Validate();
  return m;
}

std::vector<double> CbmModel::Features(std::span<const double> row) const {
  if (row.size() != concepts.size()) {
    throw ValidationError("cbm: row has " + std::to_string(row.size()) + " concepts, model expects " +
                          std::to_string(concepts.size()));
  }
  std::vector<double> z(row.begin(), row.end());
  if (!feature_mean.empty()) {
    for (std::size_t j = 0; j < z.size(); ++j) z[j] = (z[j] - feature_mean[j]) / feature_scale[j];
  }
  return z;
}

std::vector<double> CbmModel::Logits(std::span<const double> row) const {
  const std::vector<double> z = Features(row);
  const std::size_t d = concepts.size();
  std::vector<double> out(classes.size());
  for (std::size_t k = 0; k < classes.size(); ++k) {
    double s = bias[k];
    for (std::size_t j = 0; j < d; ++j) s += weights[k * d + j] * z[j];
    out[k] = s;
  }
  return out;
}

void CbmModel::Validate() const {
  if (classes.size() < 2) throw ValidationError("cbm: at least two classes are required");
  if (concepts.empty()) throw ValidationError("cbm: no concepts");
  if (weights.size() != classes.size() * concepts.size()) {
    throw ValidationError("cbm: weight matrix shape does not match classes x concepts");
  }
  if (bias.size() != classes.size()) throw ValidationError("cbm: one bias per class is required");
  if (!background.empty() && background.size() != concepts.size()) {
    throw ValidationError("cbm: background width mismatch");
  }
  if (feature_mean.size() != feature_scale.size() ||
      (!feature_mean.empty() && feature_mean.size() != concepts.size())) {
    throw ValidationError("cbm: standardization width mismatch");
  }
  for (double s : feature_scale) {
    if (!(s > 0.0)) throw ValidationError("cbm: standardization scale must be positive");
  }
  for (const auto* v : {&weights, &bias, &background}) {
    for (double x : *v) {
      if (!std::isfinite(x)) throw ValidationError("cbm: non-finite parameter");
    }
  }
}

namespace {

std::vector<double> Softmax(std::vector<double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (double& v : logits) {
    v = std::exp(v - mx);
    total += v;
  }
  for (double& v : logits) v /= total;
  return logits;
}

// log-sum-exp(z) - z[label]
double CrossEntropy(const std::vector<double>& logits, std::size_t label) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (double v : logits) total += std::exp(v - mx);
  return mx + std::log(total) - logits[label];
}

struct Objective {
  const std::vector<std::vector<double>>& features;
  const std::vector<std::size_t>& labels;
  std::size_t classes;
  std::size_t dim;
  double l2;

  std::vector<double> LogitsOf(const std::vector<double>& w, const std::vector<double>& b,
                               const std::vector<double>& z) const {
    std::vector<double> out(classes);
    for (std::size_t k = 0; k < classes; ++k) {
      double s = b[k];
      for (std::size_t j = 0; j < dim; ++j) s += w[k * dim + j] * z[j];
      out[k] = s;
    }
    return out;
  }

  double Loss(const std::vector<double>& w, const std::vector<double>& b) const {
    double ce = 0.0;
    for (std::size_t i = 0; i < features.size(); ++i) {
      ce += CrossEntropy(LogitsOf(w, b, features[i]), labels[i]);
    }
    double sq = 0.0;
    for (double x : w) sq += x * x;
    return ce / static_cast<double>(features.size()) + 0.5 * l2 * sq;
  }

  void Gradient(const std::vector<double>& w, const std::vector<double>& b,
                std::vector<double>& gw, std::vector<double>& gb) const {
    gw.assign(w.size(), 0.0);
    gb.assign(b.size(), 0.0);
    const double inv_n = 1.0 / static_cast<double>(features.size());
    for (std::size_t i = 0; i < features.size(); ++i) {
      std::vector<double> p = Softmax(LogitsOf(w, b, features[i]));
      p[labels[i]] -= 1.0;
      for (std::size_t k = 0; k < classes; ++k) {
        gb[k] += p[k] * inv_n;
        for (std::size_t j = 0; j < dim; ++j) gw[k * dim + j] += p[k] * features[i][j] * inv_n;
      }
    }
    for (std::size_t q = 0; q < w.size(); ++q) gw[q] += l2 * w[q];
  }
};

}  // namespace

CbmModel TrainCbm(const ConceptMatrix& matrix, const CbmHyper& hyper) {
  matrix.Validate();
  if (matrix.classes.size() < 2) throw ValidationError("cbm: at least two classes are required");
  if (matrix.rows == 0) throw ValidationError("cbm: empty training matrix");
  std::vector<std::size_t> counts(matrix.classes.size(), 0);
  for (std::size_t label : matrix.labels) ++counts[label];
  for (std::size_t k = 0; k < counts.size(); ++k) {
    if (counts[k] == 0) {
      throw ValidationError("cbm: class '" + matrix.classes[k] + "' has no training samples");
    }
  }
  if (!(hyper.lr > 0.0) || !(hyper.l2 >= 0.0)) {
    throw ValidationError("cbm: lr must be > 0 and l2 >= 0");
  }

  const std::size_t n = matrix.rows, d = matrix.cols(), K = matrix.classes.size();
  CbmModel model;
  model.classes = matrix.classes;
  model.concepts = matrix.concepts;
  model.component = matrix.component;
  model.hyper = hyper;
  model.background.assign(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) model.background[j] += matrix.row(i)[j];
  }
  for (double& v : model.background) v /= static_cast<double>(n);
  if (hyper.standardize) {
    model.feature_mean = model.background;
    model.feature_scale.assign(d, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < d; ++j) {
        const double dv = matrix.row(i)[j] - model.feature_mean[j];
        model.feature_scale[j] += dv * dv;
      }
    }
    for (double& s : model.feature_scale) {
      s = std::sqrt(s / static_cast<double>(n));
      if (s == 0.0) s = 1.0;
    }
  }
  model.weights.assign(K * d, 0.0);
  model.bias.assign(K, 0.0);

  std::vector<std::vector<double>> features(n);
  for (std::size_t i = 0; i < n; ++i) features[i] = model.Features(matrix.row(i));
  const Objective obj{features, matrix.labels, K, d, hyper.l2};

  double loss = obj.Loss(model.weights, model.bias);
  model.loss_trace.push_back(loss);
  double lr = hyper.lr;
  std::vector<double> gw, gb, w2(model.weights.size()), b2(K);
  for (std::size_t epoch = 0; epoch < hyper.epochs; ++epoch) {
    obj.Gradient(model.weights, model.bias, gw, gb);
    double step = std::min(hyper.lr, 2.0 * lr);
    bool accepted = false;
    for (int attempt = 0; attempt < 60; ++attempt, step *= 0.5) {
      for (std::size_t q = 0; q < w2.size(); ++q) w2[q] = model.weights[q] - step * gw[q];
      for (std::size_t k = 0; k < K; ++k) b2[k] = model.bias[k] - step * gb[k];
      const double candidate = obj.Loss(w2, b2);
      if (std::isfinite(candidate) && candidate <= loss) {
        model.weights = w2;
        model.bias = b2;
        loss = candidate;
        lr = step;
        accepted = true;
        break;
      }
    }
    // No descent step exists at this precision: the iterate is stationary.
    if (!accepted) lr = hyper.lr * std::numeric_limits<double>::epsilon();
    model.loss_trace.push_back(loss);
  }
  model.Validate();
  return model;
}

Prediction Predict(const CbmModel& model, std::span<const double> row) {
  Prediction p;
  p.probabilities = Softmax(model.Logits(row));
  const std::vector<double> logits = model.Logits(row);
  p.class_index = static_cast<std::size_t>(
      std::max_element(logits.begin(), logits.end()) - logits.begin());
  return p;
}

namespace {

void RequireSameConcepts(const CbmModel& model, const ConceptMatrix& matrix) {
  if (model.concepts != matrix.concepts) {
    throw ValidationError("cbm: matrix concepts do not match the model");
  }
}

std::size_t ModelLabel(const CbmModel& model, const ConceptMatrix& matrix, std::size_t i) {
  const std::string& name = matrix.classes.at(matrix.labels[i]);
  auto it = std::find(model.classes.begin(), model.classes.end(), name);
  if (it == model.classes.end()) {
    throw ValidationError("cbm: class '" + name + "' is unknown to the model");
  }
  return static_cast<std::size_t>(it - model.classes.begin());
}

}  // namespace

double Accuracy(const CbmModel& model, const ConceptMatrix& matrix) {
  matrix.Validate();
  RequireSameConcepts(model, matrix);
  if (matrix.rows == 0) throw ValidationError("cbm: accuracy of an empty matrix");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < matrix.rows; ++i) {
    if (Predict(model, matrix.row(i)).class_index == ModelLabel(model, matrix, i)) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(matrix.rows);
}

double CbmLoss(const CbmModel& model, const ConceptMatrix& matrix) {
  matrix.Validate();
  RequireSameConcepts(model, matrix);
  if (matrix.rows == 0) throw ValidationError("cbm: loss of an empty matrix");
  double ce = 0.0;
  for (std::size_t i = 0; i < matrix.rows; ++i) {
    ce += CrossEntropy(model.Logits(matrix.row(i)), ModelLabel(model, matrix, i));
  }
  double sq = 0.0;
  for (double x : model.weights) sq += x * x;
  return ce / static_cast<double>(matrix.rows) + 0.5 * model.hyper.l2 * sq;
}

std::string EncodeCbmModel(const CbmModel& model) {
  model.Validate();
  const std::size_t d = model.concepts.size();
  json weights = json::array();
  for (std::size_t k = 0; k < model.classes.size(); ++k) {
    weights.push_back(std::vector<double>(model.weights.begin() + k * d,
                                          model.weights.begin() + (k + 1) * d));
  }
  json doc = {{"classes", model.classes},
              {"concepts", model.concepts},
              {"weights", weights},
              {"bias", model.bias},
              {"component", ScoreComponentName(model.component)},
              {"hyper",
               {{"epochs", model.hyper.epochs},
                {"lr", model.hyper.lr},
                {"l2", model.hyper.l2},
                {"seed", model.hyper.seed},
                {"standardize", model.hyper.standardize}}},
              {"background", model.background}};
  if (!model.feature_mean.empty()) {
    doc["standardization"] = {{"mean", model.feature_mean}, {"scale", model.feature_scale}};
  }
  return doc.dump(2) + "\n";
}

CbmModel DecodeCbmModel(const std::string& text, const std::string& source) {
  CbmModel m;
  try {
    const json doc = json::parse(text);
    m.classes = doc.at("classes").get<std::vector<std::string>>();
    m.concepts = doc.at("concepts").get<std::vector<std::string>>();
    for (const auto& row : doc.at("weights")) {
      const auto r = row.get<std::vector<double>>();
      if (r.size() != m.concepts.size()) {
        throw ValidationError(source + ": weight row width does not match concepts");
      }
      m.weights.insert(m.weights.end(), r.begin(), r.end());
    }
    m.bias = doc.at("bias").get<std::vector<double>>();
    m.component = ParseScoreComponent(doc.at("component").get<std::string>());
    const json& h = doc.at("hyper");
    m.hyper.epochs = h.at("epochs").get<std::size_t>();
    m.hyper.lr = h.at("lr").get<double>();
    m.hyper.l2 = h.at("l2").get<double>();
    m.hyper.seed = h.at("seed").get<std::uint64_t>();
    m.hyper.standardize = h.at("standardize").get<bool>();
    if (doc.contains("background")) m.background = doc["background"].get<std::vector<double>>();
    if (doc.contains("standardization")) {
      m.feature_mean = doc["standardization"].at("mean").get<std::vector<double>>();
      m.feature_scale = doc["standardization"].at("scale").get<std::vector<double>>();
    }
  } catch (const json::exception& e) {
    throw ValidationError(source + ": malformed CBM model: " + e.what());
  }
  try {
    m.Validate();
  } catch (const ValidationError& e) {
    throw ValidationError(source + ": " + e.what());
  }
  return m;
}

void SaveCbmModel(const std::filesystem::path& path, const CbmModel& model) {
  WriteFileBytes(path, EncodeCbmModel(model));
}

CbmModel LoadCbmModel(const std::filesystem::path& path) {
  return DecodeCbmModel(ReadFileBytes(path), path.string());
}

}  // namespace chili
