#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include <fmt/format.h>

#include "chili/chili.h"
#include "chili/fixture.h"
#include "chili/vit.h"
#include "chili/weights_io.h"
#include "cli.h"

namespace chili::cli {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

class Checks {
 public:
  explicit Checks(std::ostream& out) : out_(out) {}

  void Record(const std::string& name, bool pass, const std::string& detail, json values) {
    out_ << (pass ? "PASS " : "FAIL ") << name << ": " << detail << "\n";
    values["pass"] = pass;
    results_[name] = std::move(values);
    passed_ = passed_ && pass;
  }
  bool passed() const { return passed_; }
  const json& results() const { return results_; }

 private:
  std::ostream& out_;
  json results_ = json::object();
  bool passed_ = true;
};

double ReconstructionError(std::uint64_t seed) {
  ModelSpec spec;
  spec.model_id = "selftest-tiny";
  spec.layers = 2;
  spec.heads = 2;
  spec.patch_size = 4;
  spec.image_size = 16;
  spec.d_model = 16;
  spec.d_embed = 8;
  spec.d_mlp = 32;
  const WeightArchive w = RandomArchive(seed, spec);
  const Tensor image = PreprocessImage(RandomRaster(seed + 1, 20, 20), spec.image_size);
  const ContributionRecord rec = Decompose(w, EncodeImage(w, image).record);
  const ConceptEmbeddingSet cs = RandomConcepts(seed + 2, {"k"}, spec.d_embed);
  const ScoredMaps sm = ScoreConcept(rec, cs.at(0).vector, spec.logit_scale, "k");
  return std::abs(sm.S - (sm.SumA() + sm.eps)) / std::max(1.0, std::abs(sm.S));
}

struct Conservation {
  double map_error = 0.0;
  double score_error = 0.0;
};

Conservation CheckConservation(const fs::path& manifest, const fs::path& calibration) {
  const Manifest m = LoadProbeManifest(manifest);
  const CalibrationWeights cal = LoadCalibration(calibration);
  Conservation c;
  for (const ProbeSample& s : m.samples) {
    const ScoredMaps sm = LoadScoredMaps(s.maps.at(s.concept_name));
    const SpatialMaps spatial = ToSpatialMaps(sm, m.grid_rows, m.grid_cols);
    const SplitMaps split = DecomposeMaps(spatial, cal);
    for (std::size_t l = 0; l < split.layers; ++l) {
      for (std::size_t h = 0; h < split.heads; ++h) {
        const HeadSplit& hs = split.at(l, h);
        const GridMap& raw = spatial.map(l, h);
        for (std::size_t k = 0; k < raw.size(); ++k) {
          const double sum = hs.register_part[k] + hs.object[k] + hs.context[k];
          c.map_error = std::max(c.map_error, std::abs(sum - raw[k]));
        }
      }
    }
    const ScoreSplit ss = SplitScore(sm, split);
    const double total = ss.S_object + ss.S_context + ss.S_register + ss.S_cls + ss.eps;
    c.score_error = std::max(c.score_error, std::abs(total - ss.S) / std::max(1.0, std::abs(ss.S)));
  }
  return c;
}

}  // namespace

SelftestOutcome RunSelftest(const Options& o, std::ostream& out) {
  const fs::path root = o.out_dir;
  const fs::path fixture_dir = root / "fixture";
  const FixtureSpec spec;
  std::ostringstream sink;
  Checks checks(out);

  const double recon = ReconstructionError(o.seed);
  checks.Record("reconstruction", recon <= 1e-4, fmt::format("relative error {:.3e}", recon),
                {{"relative_error", recon}});

  Options fx;
  fx.seed = o.seed;
  fx.out_dir = fixture_dir.string();
  RunFixture(fx, sink);
  {
    const Fixture f = GenerateFixture(o.seed, spec);
    const ScoredMaps loaded = LoadScoredMaps(fixture_dir / "maps" / "probe_000.st");
    const bool same = loaded.A == f.probe.front().maps.A && loaded.S == f.probe.front().maps.S &&
                      loaded.eps == f.probe.front().maps.eps;
    checks.Record("fixture_roundtrip", same, same ? "maps reload exactly" : "maps differ", json::object());
  }

  Options base;
  base.seed = o.seed;
  base.out_dir = root.string();
  base.calibration = (root / "calibration.json").string();

  Options cal = base;
  cal.manifest = (fixture_dir / "probe.json").string();
  cal.out = base.calibration;
  const json w = RunCalibrate(cal, sink).results.at("weights");
  double min_object = std::numeric_limits<double>::infinity();
  double max_context = -std::numeric_limits<double>::infinity();
  for (std::size_t l = 0; l < spec.layers; ++l) {
    for (std::size_t h = 0; h < spec.heads; ++h) {
      const double v = w.at(l).at(h).get<double>();
      if (spec.IsObjectHead(l, h)) {
        min_object = std::min(min_object, v);
      } else {
        max_context = std::max(max_context, v);
      }
    }
  }
  checks.Record("calibration_order", min_object > max_context,
                fmt::format("min object-head w {:.4f} vs max context-head w {:.4f}", min_object,
                            max_context),
                {{"min_object_w", min_object}, {"max_context_w", max_context}, {"weights", w}});

  const Conservation cons = CheckConservation(fixture_dir / "eval.json", base.calibration);
  checks.Record("conservation", cons.map_error <= 1e-6 && cons.score_error <= 1e-4,
                fmt::format("map error {:.2e}, score error {:.2e}", cons.map_error, cons.score_error),
                {{"map_error", cons.map_error}, {"score_error", cons.score_error}});

  Options det = base;
  det.manifest = (fixture_dir / "eval.json").string();
  det.component = "S_object";
  const json auroc = RunDetect(det, sink).results.at("auroc");
  const double a_obj = auroc.at("S_object").get<double>(), a_s = auroc.at("S").get<double>();
  checks.Record("detection", a_obj - a_s >= 0.05,
                fmt::format("AUROC S_object {:.4f} vs S {:.4f}", a_obj, a_s),
                {{"auroc", auroc}, {"margin", a_obj - a_s}});

  Options seg = base;
  seg.manifest = det.manifest;
  const json segr = RunSegment(seg, sink).results;
  const double m_obj = segr.at("object").at("miou").get<double>();
  const double m_raw = segr.at("raw").at("miou").get<double>();
  checks.Record("segmentation", m_obj >= m_raw,
                fmt::format("mIoU object {:.4f} vs raw {:.4f}", m_obj, m_raw), segr);

  Options tri = base;
  tri.manifest = (fixture_dir / "triplet.json").string();
  tri.concept_name = spec.concept_name;
  tri.c1 = spec.c1;
  tri.c2 = spec.c2;
  tri.component = "S";
  const json tri_s = RunTripletCommand(tri, sink).results;
  tri.component = "S_object";
  const json tri_o = RunTripletCommand(tri, sink).results;
  const double fr_s = tri_s.at("failure_rate").get<double>();
  const double fr_o = tri_o.at("failure_rate").get<double>();
  checks.Record("triplet", fr_o <= fr_s,
                fmt::format("failure rate S_object {:.2f} vs S {:.2f}", fr_o, fr_s),
                {{"S", tri_s}, {"S_object", tri_o}});

  Options cbm = base;
  cbm.train = (fixture_dir / "cbm_train.json").string();
  cbm.test = (fixture_dir / "cbm_test.json").string();
  cbm.component = "S";
  cbm.out = (root / "cbm_S.json").string();
  const json cbm_s = RunCbmTrain(cbm, sink).results;
  cbm.component = "S_object";
  cbm.out = (root / "cbm_S_object.json").string();
  const json cbm_o = RunCbmTrain(cbm, sink).results;
  const double acc_o = cbm_o.at("test_accuracy").get<double>();
  const double acc_s = cbm_s.at("test_accuracy").get<double>();
  const double train_o = cbm_o.at("train_accuracy").get<double>();
  checks.Record("cbm", acc_o >= acc_s && train_o == 1.0,
                fmt::format("test accuracy S_object {:.4f} vs S {:.4f}, train S_object {:.4f}", acc_o,
                            acc_s, train_o),
                {{"S", cbm_s}, {"S_object", cbm_o}});

  Options ex = base;
  ex.model = cbm.out;
  ex.manifest = cbm.test;
  ex.index = 0;
  ex.top_k = 3;
  ex.out_dir = (root / "explain").string();
  const json exr = RunExplain(ex, sink).results;
  const double residual = exr.at("efficiency_residual").get<double>();
  checks.Record("shap_efficiency", std::abs(residual) <= 1e-6,
                fmt::format("efficiency residual {:.2e}", residual), exr);

  SelftestOutcome outcome;
  outcome.passed = checks.passed();
  outcome.result.model_id = spec.model_id;
  outcome.result.config = {{"seed", o.seed}};
  outcome.result.results = {{"checks", checks.results()}, {"passed", checks.passed()}};
  out << (outcome.passed ? "selftest passed\n" : "selftest FAILED\n");
  return outcome;
}

}  // namespace chili::cli
