#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>

#include <fmt/format.h>

#include "chili/cbm.h"
#include "chili/chili.h"
#include "chili/error.h"
#include "chili/eval.h"
#include "chili/explain.h"
#include "chili/fixture.h"
#include "chili/rng.h"
#include "chili/vit.h"
#include "chili/weights_io.h"
#include "cli.h"

namespace chili::cli {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

void RequireFile(const std::string& path, const char* flag) {
  if (path.empty()) throw ValidationError(std::string(flag) + " is required");
  if (!fs::exists(path)) throw ValidationError(std::string(flag) + ": file not found: " + path);
}

void RequireAlpha(double alpha) {
  if (!(alpha > 0.0) || !std::isfinite(alpha)) throw ValidationError("--alpha must be > 0");
}

std::string Where(std::size_t i) { return "sample " + std::to_string(i); }

// Every artifact touched by one command must come from the same model.
class ModelGuard {
 public:
  void See(const std::string& id, const std::string& where) {
    if (id_.empty()) {
      id_ = id;
    } else if (id != id_) {
      throw ValidationError(where + ": model_id '" + id + "' does not match '" + id_ + "'");
    }
  }
  const std::string& id() const { return id_; }

 private:
  std::string id_;
};

// Score maps come from precomputed files named in the manifest, or from
// running the encoder when --weights and --concepts are given.
class ScoreSource {
 public:
  explicit ScoreSource(const Options& o) {
    if (!o.weights.empty()) {
      RequireFile(o.weights, "--weights");
      weights_ = LoadWeightArchive(o.weights);
      logit_scale_ = o.logit_scale.value_or(weights_->spec.logit_scale);
    }
    if (!o.concepts.empty()) {
      RequireFile(o.concepts, "--concepts");
      concepts_ = LoadConceptEmbeddings(o.concepts, weights_ ? weights_->spec.d_embed : 0);
    }
  }

  const ConceptEmbeddingSet* concepts() const { return concepts_ ? &*concepts_ : nullptr; }

  ScoredMaps Get(const ProbeSample& s, const std::string& concept_name, const std::string& where) {
    if (concept_name.empty()) throw ValidationError(where + ": no concept given");
    auto it = s.maps.find(concept_name);
    if (it != s.maps.end()) {
      ScoredMaps sm = LoadScoredMaps(it->second);
      if (!sm.concept_name.empty() && sm.concept_name != concept_name) {
        throw ValidationError(where + ": maps file " + it->second.string() + " is for concept '" +
                              sm.concept_name + "', expected '" + concept_name + "'");
      }
      return sm;
    }
    if (!weights_ || !concepts_) {
      throw ValidationError(where + ": no precomputed maps for concept '" + concept_name +
                            "'; pass --weights and --concepts");
    }
    const std::string key = s.image.string();
    auto rec = cache_.find(key);
    if (rec == cache_.end()) {
      const Tensor image = LoadImage(s.image, weights_->spec.image_size);
      const EncodedImage enc = EncodeImage(*weights_, image);
      rec = cache_.emplace(key, Decompose(*weights_, enc.record)).first;
    }
    const ConceptEmbedding& c = concepts_->Find(concept_name);
    return ScoreConcept(rec->second, c.vector, logit_scale_, concept_name);
  }

 private:
  std::optional<WeightArchive> weights_;
  std::optional<ConceptEmbeddingSet> concepts_;
  double logit_scale_ = 100.0;
  std::map<std::string, ContributionRecord> cache_;
};

CalibrationWeights LoadCalibrationFor(const Options& o, const Manifest& m, ModelGuard& guard) {
  RequireFile(o.calibration, "--calibration");
  CalibrationWeights cal = LoadCalibration(o.calibration);
  guard.See(cal.model_id, o.calibration);
  if (cal.grid_rows != m.grid_rows || cal.grid_cols != m.grid_cols) {
    throw ValidationError(fmt::format("{}: calibration grid {}x{} does not match manifest grid {}x{}",
                                      o.calibration, cal.grid_rows, cal.grid_cols, m.grid_rows,
                                      m.grid_cols));
  }
  return cal;
}

Manifest LoadManifestFlag(const std::string& path, const char* flag) {
  RequireFile(path, flag);
  return LoadProbeManifest(path);
}

json SourceConfig(const Options& o) {
  json c = json::object();
  if (!o.weights.empty()) c["weights"] = o.weights;
  if (!o.concepts.empty()) c["concepts"] = o.concepts;
  if (o.logit_scale) c["logit_scale"] = *o.logit_scale;
  return c;
}

json SplitJson(const ScoreSplit& s) {
  return {{"S", s.S},           {"S_object", s.S_object}, {"S_context", s.S_context},
          {"S_register", s.S_register}, {"S_cls", s.S_cls},       {"eps", s.eps}};
}

json SegJson(const SegResult& r) {
  return {{"pixel_acc", r.pixel_acc}, {"miou", r.miou}, {"map", r.map}, {"images", r.images}};
}

}  // namespace

CommandResult RunCalibrate(const Options& o, std::ostream& out) {
  RequireAlpha(o.alpha);
  const Manifest m = LoadManifestFlag(o.manifest, "--manifest");
  ScoreSource src(o);
  ModelGuard guard;
  std::vector<SpatialMaps> maps;
  std::vector<GridMap> masks;
  for (std::size_t i = 0; i < m.samples.size(); ++i) {
    const ProbeSample& s = m.samples[i];
    if (!s.mask) throw ValidationError(Where(i) + ": probe samples need a mask");
    const ScoredMaps sm = src.Get(s, s.concept_name, Where(i));
    guard.See(sm.model_id, Where(i));
    maps.push_back(ToSpatialMaps(sm, m.grid_rows, m.grid_cols));
    masks.push_back(LoadMask(*s.mask, m.grid_rows, m.grid_cols));
  }
  const CalibrationWeights cal = Calibrate(maps, masks, o.alpha);
  const fs::path target = o.out.empty() ? fs::path(o.out_dir) / "calibration.json" : fs::path(o.out);
  SaveCalibration(target, cal);

  out << fmt::format("calibrated {} heads over {} probe samples (alpha={})\n",
                     cal.layers * cal.heads, cal.sample_count, cal.alpha);
  out << fmt::format("{:>6}", "layer");
  for (std::size_t h = 0; h < cal.heads; ++h) out << fmt::format(" {:>8}", fmt::format("h{}", h));
  out << "\n";
  json weights = json::array();
  for (std::size_t l = 0; l < cal.layers; ++l) {
    out << fmt::format("{:>6}", l);
    json row = json::array();
    for (std::size_t h = 0; h < cal.heads; ++h) {
      out << fmt::format(" {:>8.4f}", cal.at(l, h));
      row.push_back(cal.at(l, h));
    }
    out << "\n";
    weights.push_back(row);
  }

  CommandResult r;
  r.model_id = cal.model_id;
  r.config = SourceConfig(o);
  r.config["manifest"] = o.manifest;
  r.config["alpha"] = o.alpha;
  r.config["out"] = target.string();
  r.results = {{"L", cal.layers},
               {"H", cal.heads},
               {"sample_count", cal.sample_count},
               {"weights", weights}};
  return r;
}

CommandResult RunScore(const Options& o, std::ostream& out) {
  const Manifest m = LoadManifestFlag(o.manifest, "--manifest");
  ModelGuard guard;
  const CalibrationWeights cal = LoadCalibrationFor(o, m, guard);
  ScoreSource src(o);
  json rows = json::array();
  out << fmt::format("{:>5} {:<16} {:>10} {:>10} {:>10} {:>10} {:>8} {:>8}\n", "idx", "concept",
                     "S", "S_object", "S_context", "S_register", "S_cls", "eps");
  for (std::size_t i = 0; i < m.samples.size(); ++i) {
    const ProbeSample& s = m.samples[i];
    const std::string c = o.concept_name.empty() ? s.concept_name : o.concept_name;
    const ScoredMaps sm = src.Get(s, c, Where(i));
    guard.See(sm.model_id, Where(i));
    const ScoreSplit split = AnalyzeScore(sm, cal);
    out << fmt::format("{:>5} {:<16} {:>10.4f} {:>10.4f} {:>10.4f} {:>10.4f} {:>8.4f} {:>8.4f}\n", i,
                       c, split.S, split.S_object, split.S_context, split.S_register, split.S_cls,
                       split.eps);
    json row = SplitJson(split);
    row["index"] = i;
    row["concept"] = c;
    rows.push_back(row);
  }
  CommandResult r;
  r.model_id = guard.id();
  r.config = SourceConfig(o);
  r.config["manifest"] = o.manifest;
  r.config["calibration"] = o.calibration;
  if (!o.concept_name.empty()) r.config["concept"] = o.concept_name;
  r.results = {{"samples", rows}};
  return r;
}

CommandResult RunDetect(const Options& o, std::ostream& out) {
  const ScoreComponent selected = ParseScoreComponent(o.component.empty() ? "S_object" : o.component);
  const Manifest m = LoadManifestFlag(o.manifest, "--manifest");
  ModelGuard guard;
  const CalibrationWeights cal = LoadCalibrationFor(o, m, guard);
  ScoreSource src(o);
  std::vector<ScoreSplit> splits;
  std::vector<bool> present;
  for (std::size_t i = 0; i < m.samples.size(); ++i) {
    const ProbeSample& s = m.samples[i];
    const std::string c = o.concept_name.empty() ? s.concept_name : o.concept_name;
    const ScoredMaps sm = src.Get(s, c, Where(i));
    guard.See(sm.model_id, Where(i));
    splits.push_back(AnalyzeScore(sm, cal));
    present.push_back(s.present);
  }
  const DetectionResult d = EvaluateDetection(splits, present);
  out << fmt::format("AUROC {} = {:.4f}\n", ScoreComponentName(selected), d.Get(selected));
  out << fmt::format("  positives {}  negatives {}\n", d.positives, d.negatives);
  json auroc = json::object();
  for (ScoreComponent c : {ScoreComponent::kS, ScoreComponent::kObject, ScoreComponent::kContext,
                           ScoreComponent::kRegister}) {
    out << fmt::format("  {:<10} {:.4f}\n", ScoreComponentName(c), d.Get(c));
    auroc[ScoreComponentName(c)] = d.Get(c);
  }
  CommandResult r;
  r.model_id = guard.id();
  r.config = SourceConfig(o);
  r.config["manifest"] = o.manifest;
  r.config["calibration"] = o.calibration;
  r.config["component"] = ScoreComponentName(selected);
  r.results = {{"auroc", auroc},
               {"component", ScoreComponentName(selected)},
               {"selected_auroc", d.Get(selected)},
               {"positives", d.positives},
               {"negatives", d.negatives}};
  return r;
}

CommandResult RunSegment(const Options& o, std::ostream& out) {
  const Manifest m = LoadManifestFlag(o.manifest, "--manifest");
  ModelGuard guard;
  const CalibrationWeights cal = LoadCalibrationFor(o, m, guard);
  ScoreSource src(o);
  SegmentationAccumulator object, raw;
  for (std::size_t i = 0; i < m.samples.size(); ++i) {
    const ProbeSample& s = m.samples[i];
    if (!s.present || !s.mask) continue;
    const std::string c = o.concept_name.empty() ? s.concept_name : o.concept_name;
    const ScoredMaps sm = src.Get(s, c, Where(i));
    guard.See(sm.model_id, Where(i));
    const SpatialMaps spatial = ToSpatialMaps(sm, m.grid_rows, m.grid_cols);
    const SplitMaps split = DecomposeMaps(spatial, cal);
    const GridMap gt = LoadMask(*s.mask, m.grid_rows, m.grid_cols);
    const GridMap summed = spatial.Summed();
    object.Add(BinarizeMean(split.object_sum), split.object_sum, gt);
    raw.Add(BinarizeMean(summed), summed, gt);
  }
  const SegResult ro = object.Result(), rr = raw.Result();
  if (ro.images == 0) throw ValidationError(o.manifest + ": no concept-present samples with masks");
  out << fmt::format("{:<8} {:>9} {:>9} {:>9}\n", "map", "pix_acc", "mIoU", "mAP");
  out << fmt::format("{:<8} {:>9.4f} {:>9.4f} {:>9.4f}\n", "object", ro.pixel_acc, ro.miou, ro.map);
  out << fmt::format("{:<8} {:>9.4f} {:>9.4f} {:>9.4f}\n", "raw", rr.pixel_acc, rr.miou, rr.map);
  CommandResult r;
  r.model_id = guard.id();
  r.config = SourceConfig(o);
  r.config["manifest"] = o.manifest;
  r.config["calibration"] = o.calibration;
  r.results = {{"object", SegJson(ro)}, {"raw", SegJson(rr)}};
  return r;
}

CommandResult RunTripletCommand(const Options& o, std::ostream& out) {
  TripletScenario scenario;
  scenario.c1 = o.c1;
  scenario.c2 = o.c2;
  scenario.k = o.concept_name;
  scenario.samples_per_subset = o.samples;
  scenario.repetitions = o.repetitions;
  if (scenario.k.empty()) throw ValidationError("--concept is required");
  scenario.Validate();
  const ScoreComponent component = ParseScoreComponent(o.component.empty() ? "S" : o.component);
  const Manifest m = LoadManifestFlag(o.manifest, "--manifest");
  ModelGuard guard;
  std::optional<CalibrationWeights> cal;
  if (component != ScoreComponent::kS) cal = LoadCalibrationFor(o, m, guard);
  ScoreSource src(o);
  std::vector<double> present, absent, other;
  for (std::size_t i = 0; i < m.samples.size(); ++i) {
    const ProbeSample& s = m.samples[i];
    if (!s.label) continue;
    std::vector<double>* pool = nullptr;
    if (*s.label == scenario.c1) pool = s.present ? &present : &absent;
    if (*s.label == scenario.c2) pool = &other;
    if (pool == nullptr) continue;
    const ScoredMaps sm = src.Get(s, scenario.k, Where(i));
    guard.See(sm.model_id, Where(i));
    pool->push_back(cal ? ComponentValue(AnalyzeScore(sm, *cal), component) : sm.S);
  }
  Rng rng(o.seed);
  const auto reps = SampleTriplet(scenario, present, absent, other, rng);
  const TripletResult t = RunTriplet(scenario, reps);
  const std::string name = ScoreComponentName(component);
  out << fmt::format("{:<28} {:>10} {:>10}\n", "subset (" + name + ")", "mean", "std");
  const std::array<std::string, 3> labels = {scenario.c1 + " with " + scenario.k,
                                             scenario.c1 + " without " + scenario.k, scenario.c2};
  for (std::size_t j = 0; j < 3; ++j) {
    out << fmt::format("{:<28} {:>10.4f} {:>10.4f}\n", labels[j], t.means[j], t.stds[j]);
  }
  out << fmt::format("failure rate {:.2f} over {} repetitions\n", t.failure_rate, reps.size());
  CommandResult r;
  r.model_id = guard.id();
  r.config = SourceConfig(o);
  r.config["manifest"] = o.manifest;
  if (cal) r.config["calibration"] = o.calibration;
  r.config["component"] = name;
  r.config["concept"] = scenario.k;
  r.config["c1"] = scenario.c1;
  r.config["c2"] = scenario.c2;
  r.config["samples"] = scenario.samples_per_subset;
  r.config["repetitions"] = scenario.repetitions;
  r.config["seed"] = o.seed;
  r.results = {{"means", {{"present", t.means[0]}, {"absent", t.means[1]}, {"other", t.means[2]}}},
               {"stds", {{"present", t.stds[0]}, {"absent", t.stds[1]}, {"other", t.stds[2]}}},
               {"failure_rate", t.failure_rate},
               {"pool_sizes", {present.size(), absent.size(), other.size()}}};
  return r;
}

namespace {

std::vector<std::string> ConceptList(const Manifest& m, const ScoreSource& src,
                                     const std::string& source) {
  std::vector<std::string> names;
  if (src.concepts() != nullptr) {
    for (const auto& c : src.concepts()->concepts()) names.push_back(c.name);
    return names;
  }
  if (m.samples.empty()) throw ValidationError(source + ": no samples");
  for (const auto& [name, path] : m.samples.front().maps) names.push_back(name);
  if (names.empty()) {
    throw ValidationError(source + ": no concepts; pass --concepts or give per-sample maps");
  }
  return names;
}

ConceptMatrix MatrixFor(const Manifest& m, const std::vector<std::string>& names,
                        ScoreSource& src, const CalibrationWeights* cal, ScoreComponent component,
                        const std::vector<std::string>& classes, ModelGuard& guard,
                        const std::string& source) {
  std::vector<std::vector<ScoredMaps>> maps;
  std::vector<std::string> labels;
  for (std::size_t i = 0; i < m.samples.size(); ++i) {
    const ProbeSample& s = m.samples[i];
    if (!s.label) throw ValidationError(source + ": " + Where(i) + " has no \"class\"");
    labels.push_back(*s.label);
    std::vector<ScoredMaps> row;
    for (const auto& c : names) {
      row.push_back(src.Get(s, c, source + ": " + Where(i)));
      guard.See(row.back().model_id, source + ": " + Where(i));
    }
    maps.push_back(std::move(row));
  }
  return BuildConceptMatrix(maps, names, cal, component, labels, classes);
}

}  // namespace

CommandResult RunCbmTrain(const Options& o, std::ostream& out) {
  const ScoreComponent component = ParseScoreComponent(o.component.empty() ? "S_object" : o.component);
  const Manifest train = LoadManifestFlag(o.train, "--train");
  std::optional<Manifest> test;
  if (!o.test.empty()) test = LoadManifestFlag(o.test, "--test");
  ModelGuard guard;
  std::optional<CalibrationWeights> cal;
  if (component != ScoreComponent::kS) cal = LoadCalibrationFor(o, train, guard);
  ScoreSource src(o);
  const std::vector<std::string> names = ConceptList(train, src, o.train);
  const CalibrationWeights* calp = cal ? &*cal : nullptr;
  const ConceptMatrix train_m = MatrixFor(train, names, src, calp, component, {}, guard, o.train);

  CbmHyper hyper;
  hyper.epochs = o.epochs;
  hyper.lr = o.lr;
  hyper.l2 = o.l2;
  hyper.seed = o.seed;
  hyper.standardize = o.standardize;
  const CbmModel model = TrainCbm(train_m, hyper);
  const fs::path target = o.out.empty() ? fs::path(o.out_dir) / "cbm_model.json" : fs::path(o.out);
  SaveCbmModel(target, model);

  CommandResult r;
  r.model_id = guard.id();
  r.results["train_accuracy"] = Accuracy(model, train_m);
  r.results["final_loss"] = model.loss_trace.back();
  r.results["initial_loss"] = model.loss_trace.front();
  r.results["classes"] = model.classes;
  r.results["concepts"] = model.concepts;
  out << fmt::format("CBM on {} ({} concepts, {} classes)\n", ScoreComponentName(component),
                     names.size(), model.classes.size());
  out << fmt::format("  train accuracy {:.4f}  loss {:.6f} -> {:.6f}\n",
                     r.results["train_accuracy"].get<double>(), model.loss_trace.front(),
                     model.loss_trace.back());
  if (test) {
    const ConceptMatrix test_m =
        MatrixFor(*test, names, src, calp, component, model.classes, guard, o.test);
    r.results["test_accuracy"] = Accuracy(model, test_m);
    out << fmt::format("  test accuracy  {:.4f}\n", r.results["test_accuracy"].get<double>());
  }
  r.config = SourceConfig(o);
  r.config["train"] = o.train;
  if (test) r.config["test"] = o.test;
  if (cal) r.config["calibration"] = o.calibration;
  r.config["component"] = ScoreComponentName(component);
  r.config["epochs"] = hyper.epochs;
  r.config["lr"] = hyper.lr;
  r.config["l2"] = hyper.l2;
  r.config["seed"] = hyper.seed;
  r.config["standardize"] = hyper.standardize;
  r.config["out"] = target.string();
  return r;
}

CommandResult RunExplain(const Options& o, std::ostream& out) {
  RequireFile(o.model, "--model");
  const CbmModel model = LoadCbmModel(o.model);
  const Manifest m = LoadManifestFlag(o.manifest, "--manifest");
  if (o.index >= m.samples.size()) {
    throw ValidationError(fmt::format("--index {} out of range ({} samples)", o.index, m.samples.size()));
  }
  ModelGuard guard;
  const CalibrationWeights cal = LoadCalibrationFor(o, m, guard);
  ScoreSource src(o);
  const ProbeSample& s = m.samples[o.index];
  std::vector<double> row;
  std::vector<GridMap> object_maps;
  for (const auto& c : model.concepts) {
    const ScoredMaps sm = src.Get(s, c, Where(o.index));
    guard.See(sm.model_id, Where(o.index));
    const SplitMaps split = DecomposeMaps(ToSpatialMaps(sm, m.grid_rows, m.grid_cols), cal);
    row.push_back(ComponentValue(SplitScore(sm, split), model.component));
    object_maps.push_back(split.object_sum);
  }
  const Explanation expl = Explain(model, row, std::move(object_maps), o.top_k);
  const RenderedExplanation files = RenderExplanation(expl, ReadPnm(s.image), o.out_dir);

  const std::vector<double> logits = model.Logits(row);
  const std::vector<double> base = model.Logits(model.background);
  double total = 0.0;
  for (double v : expl.shap) total += v;
  const double residual = total - (logits[expl.class_index] - base[expl.class_index]);

  out << fmt::format("predicted {} (sum of shap {:.6f}, efficiency residual {:.2e})\n",
                     expl.predicted_class, total, residual);
  json ranked = json::array();
  for (std::size_t i = 0; i < expl.ranked.size(); ++i) {
    out << fmt::format("  {:>2}. {:<16} {:>+10.4f}\n", i + 1, expl.ranked[i].concept_name,
                       expl.ranked[i].value);
    ranked.push_back({{"concept", expl.ranked[i].concept_name}, {"shap", expl.ranked[i].value}});
  }
  CommandResult r;
  r.model_id = guard.id();
  r.results = {{"predicted_class", expl.predicted_class},
               {"ranking", ranked},
               {"shap", expl.shap},
               {"concepts", expl.concepts},
               {"efficiency_residual", residual}};
  if (o.permutations > 0) {
    const std::size_t k = expl.class_index;
    const ScoreFunction f = [&](std::span<const double> x) { return model.Logits(x)[k]; };
    const ShapEstimate est = ShapPermutation(f, row, model.background, o.permutations, o.seed);
    r.results["sampled"] = {{"values", est.values}, {"stderr", est.stderr_}};
  }
  r.config = SourceConfig(o);
  r.config["model"] = o.model;
  r.config["manifest"] = o.manifest;
  r.config["calibration"] = o.calibration;
  r.config["index"] = o.index;
  r.config["top_k"] = o.top_k;
  r.config["permutations"] = o.permutations;
  r.config["seed"] = o.seed;
  return r;
}

CommandResult RunFixture(const Options& o, std::ostream& out) {
  const FixtureSpec spec;
  const Fixture f = GenerateFixture(o.seed, spec);
  WriteFixture(f, o.out_dir);
  out << fmt::format("fixture seed {}: {} probe, {} eval, {} other, {} + {} CBM images -> {}\n",
                     o.seed, f.probe.size(), f.eval.size(), f.other.size(), f.cbm_train.size(),
                     f.cbm_test.size(), o.out_dir);
  CommandResult r;
  r.model_id = spec.model_id;
  r.config = {{"seed", o.seed}};
  r.results = {{"probe", f.probe.size()},
               {"eval", f.eval.size()},
               {"other", f.other.size()},
               {"cbm_train", f.cbm_train.size()},
               {"cbm_test", f.cbm_test.size()}};
  return r;
}

}  // namespace chili::cli
