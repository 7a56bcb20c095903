#include "cli.h"

#include <functional>

#include "CLI11.hpp"
#include "chili/error.h"
#include "chili/tensor_file.h"

namespace chili::cli {

using nlohmann::json;
namespace fs = std::filesystem;

json MakeReport(const std::string& command, const CommandResult& result) {
  return {{"command", command},
          {"config", result.config},
          {"model_id", result.model_id},
          {"results", result.results},
          {"tool", "chili"},
          {"version", kVersion}};
}

void EmitReport(const json& report, const fs::path& path) {
  WriteFileBytes(path, report.dump(2) + "\n");
}

namespace {

void AddSource(CLI::App* cmd, Options& o) {
  cmd->add_option("--weights", o.weights, "Weight archive (tensor container)");
  cmd->add_option("--concepts", o.concepts, "Concept embeddings JSON");
  cmd->add_option("--logit-scale", o.logit_scale, "Override the archive logit scale");
}

void AddOutDir(CLI::App* cmd, Options& o) {
  cmd->add_option("--out-dir", o.out_dir, "Directory for reports and artifacts")
      ->capture_default_str();
}

}  // namespace

int Main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  Options o;
  CLI::App app{"Additive head/token decomposition of ViT concept scores", "chili"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  using Runner = std::function<CommandResult(const Options&, std::ostream&)>;
  std::map<std::string, Runner> runners;

  auto* cal = app.add_subcommand("calibrate", "Fit per-head object weights on a probe set");
  cal->add_option("--manifest", o.manifest, "Probe manifest")->required();
  cal->add_option("--alpha", o.alpha, "IoU weighting sharpness")->capture_default_str();
  cal->add_option("--out", o.out, "Calibration file (default <out-dir>/calibration.json)");
  AddSource(cal, o);
  AddOutDir(cal, o);
  runners["calibrate"] = RunCalibrate;

  auto* score = app.add_subcommand("score", "Split each sample's score into components");
  score->add_option("--manifest", o.manifest, "Manifest")->required();
  score->add_option("--calibration", o.calibration, "Calibration file")->required();
  score->add_option("--concept", o.concept_name, "Score this concept instead of each sample's");
  AddSource(score, o);
  AddOutDir(score, o);
  runners["score"] = RunScore;

  auto* detect = app.add_subcommand("detect", "Concept detection AUROC");
  detect->add_option("--manifest", o.manifest, "Manifest with present flags")->required();
  detect->add_option("--calibration", o.calibration, "Calibration file")->required();
  detect->add_option("--component", o.component, "S, S_object, S_context or S_register");
  detect->add_option("--concept", o.concept_name, "Score this concept instead of each sample's");
  AddSource(detect, o);
  AddOutDir(detect, o);
  runners["detect"] = RunDetect;

  auto* segment = app.add_subcommand("segment", "Segmentation metrics: object map vs raw map");
  segment->add_option("--manifest", o.manifest, "Manifest with masks")->required();
  segment->add_option("--calibration", o.calibration, "Calibration file")->required();
  segment->add_option("--concept", o.concept_name, "Score this concept instead of each sample's");
  AddSource(segment, o);
  AddOutDir(segment, o);
  runners["segment"] = RunSegment;

  auto* triplet = app.add_subcommand("triplet", "Concept-present / absent / other-class protocol");
  triplet->add_option("--manifest", o.manifest, "Manifest with classes and present flags")
      ->required();
  triplet->add_option("--concept", o.concept_name, "Concept k")->required();
  triplet->add_option("--c1", o.c1, "Class that may show k")->required();
  triplet->add_option("--c2", o.c2, "Other class")->required();
  triplet->add_option("--component", o.component, "S (default), S_object, S_context, S_register");
  triplet->add_option("--calibration", o.calibration, "Needed for split components");
  triplet->add_option("--samples", o.samples, "Images per subset")->capture_default_str();
  triplet->add_option("--repetitions", o.repetitions, "Repetitions")->capture_default_str();
  triplet->add_option("--seed", o.seed, "Sampling seed")->capture_default_str();
  AddSource(triplet, o);
  AddOutDir(triplet, o);
  runners["triplet"] = RunTripletCommand;

  auto* cbm = app.add_subcommand("cbm-train", "Train a concept-bottleneck classifier");
  cbm->add_option("--train", o.train, "Training manifest (samples need \"class\")")->required();
  cbm->add_option("--test", o.test, "Held-out manifest");
  cbm->add_option("--component", o.component, "S_object (default) or S, S_context, S_register");
  cbm->add_option("--calibration", o.calibration, "Needed for split components");
  cbm->add_option("--epochs", o.epochs, "Gradient steps")->capture_default_str();
  cbm->add_option("--lr", o.lr, "Learning rate")->capture_default_str();
  cbm->add_option("--l2", o.l2, "L2 penalty")->capture_default_str();
  cbm->add_option("--seed", o.seed, "Recorded seed (training is deterministic)");
  cbm->add_flag("--standardize", o.standardize, "z-score concept columns");
  cbm->add_option("--out", o.out, "Model file (default <out-dir>/cbm_model.json)");
  AddSource(cbm, o);
  AddOutDir(cbm, o);
  runners["cbm-train"] = RunCbmTrain;

  auto* explain = app.add_subcommand("explain", "Concept Shapley values and heatmaps for one image");
  explain->add_option("--model", o.model, "CBM model file")->required();
  explain->add_option("--manifest", o.manifest, "Manifest holding the image")->required();
  explain->add_option("--calibration", o.calibration, "Calibration file")->required();
  explain->add_option("--index", o.index, "Sample index")->capture_default_str();
  explain->add_option("--top-k", o.top_k, "Concepts to render")->capture_default_str();
  explain->add_option("--permutations", o.permutations, "Also report a sampled estimate");
  explain->add_option("--seed", o.seed, "Permutation seed");
  AddSource(explain, o);
  AddOutDir(explain, o);
  runners["explain"] = RunExplain;

  auto* fixture = app.add_subcommand("fixture", "Write the synthetic fixture");
  fixture->add_option("--seed", o.seed, "Generator seed")->capture_default_str();
  AddOutDir(fixture, o);
  runners["fixture"] = RunFixture;

  auto* selftest = app.add_subcommand("selftest", "Fixture-based end-to-end checks");
  selftest->add_option("--seed", o.seed, "Fixture seed");
  selftest->add_option("--out-dir", o.out_dir, "Work directory")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return 1;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    std::error_code ec;
    fs::create_directories(o.out_dir, ec);
    if (ec) throw IoError("cannot create " + o.out_dir + ": " + ec.message());
    if (command == "selftest") {
      const SelftestOutcome st = RunSelftest(o, out);
      EmitReport(MakeReport(command, st.result), fs::path(o.out_dir) / "selftest_report.json");
      return st.passed ? 0 : 1;
    }
    const CommandResult r = runners.at(command)(o, out);
    EmitReport(MakeReport(command, r), fs::path(o.out_dir) / (command + "_report.json"));
    return 0;
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace chili::cli
