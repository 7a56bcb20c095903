#include <sstream>

#include <gtest/gtest.h>

#include "chili/tensor_file.h"
#include "cli.h"
#include "json.hpp"
#include "temp_dir.h"

namespace chili::cli {
namespace {

using nlohmann::json;

struct Invocation {
  int code;
  std::string out;
  std::string err;
};

Invocation Invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "chili");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = Main(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    fixture_ = (dir_ / "fx").string();
    ASSERT_EQ(Invoke({"fixture", "--seed", "3", "--out-dir", fixture_}).code, 0);
    calib_ = (dir_ / "calib.json").string();
    const Invocation r = Invoke({"calibrate", "--manifest", fixture_ + "/probe.json", "--alpha", "3",
                          "--out", calib_, "--out-dir", (dir_ / "out").string()});
    ASSERT_EQ(r.code, 0) << r.err;
  }
  json ReadJson(const std::string& path) { return json::parse(ReadFileBytes(path)); }

  testing::TempDir dir_;
  std::string fixture_;
  std::string calib_;
};

TEST_F(CliTest, CalibrateWritesLxHWeights) {
  const json cal = ReadJson(calib_);
  EXPECT_EQ(cal["L"], 2);
  EXPECT_EQ(cal["H"], 4);
  EXPECT_EQ(cal["weights"].size(), 2u);
  EXPECT_EQ(cal["weights"][0].size(), 4u);
  EXPECT_EQ(cal["model_id"], "synthetic-fixture");
  const json report = ReadJson((dir_ / "out" / "calibrate_report.json").string());
  EXPECT_EQ(report["version"], kVersion);
  EXPECT_EQ(report["config"]["alpha"], 3.0);
}

TEST_F(CliTest, DetectObjectComponentBeatsRawScore) {
  const std::string out = (dir_ / "det").string();
  const auto detect = [&](const std::string& c) {
    const Invocation r = Invoke({"detect", "--manifest", fixture_ + "/eval.json", "--calibration", calib_,
                          "--component", c, "--out-dir", out});
    EXPECT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(r.out.rfind("AUROC " + c + " = ", 0), 0u) << r.out;
    return ReadJson(out + "/detect_report.json")["results"]["selected_auroc"].get<double>();
  };
  EXPECT_GT(detect("S_object"), detect("S"));
}

TEST_F(CliTest, ScoreSegmentTripletCbmExplain) {
  const std::string out = (dir_ / "o").string();
  EXPECT_EQ(Invoke({"score", "--manifest", fixture_ + "/eval.json", "--calibration", calib_,
                    "--out-dir", out}).code, 0);
  EXPECT_EQ(ReadJson(out + "/score_report.json")["results"]["samples"].size(), 60u);
  EXPECT_EQ(Invoke({"segment", "--manifest", fixture_ + "/eval.json", "--calibration", calib_,
                    "--out-dir", out}).code, 0);
  const json seg = ReadJson(out + "/segment_report.json")["results"];
  EXPECT_GE(seg["object"]["miou"].get<double>(), seg["raw"]["miou"].get<double>());
  const Invocation t = Invoke({"triplet", "--manifest", fixture_ + "/triplet.json", "--concept", "beak",
                        "--c1", "finch", "--c2", "airplane", "--seed", "1", "--out-dir", out});
  EXPECT_EQ(t.code, 0) << t.err;
  const Invocation c = Invoke({"cbm-train", "--train", fixture_ + "/cbm_train.json", "--test",
                        fixture_ + "/cbm_test.json", "--calibration", calib_, "--out-dir", out});
  ASSERT_EQ(c.code, 0) << c.err;
  const Invocation e = Invoke({"explain", "--model", out + "/cbm_model.json", "--manifest",
                        fixture_ + "/cbm_test.json", "--calibration", calib_, "--top-k", "2",
                        "--permutations", "50", "--out-dir", out + "/ex"});
  ASSERT_EQ(e.code, 0) << e.err;
  const json ex = ReadJson(out + "/ex/explain_report.json")["results"];
  EXPECT_LE(std::abs(ex["efficiency_residual"].get<double>()), 1e-6);
  EXPECT_TRUE(std::filesystem::exists(out + "/ex/explanation.json"));
  EXPECT_TRUE(std::filesystem::exists(out + "/ex/contact_sheet.ppm"));
}

TEST_F(CliTest, ReportsAreByteIdenticalForIdenticalInputs) {
  const std::string a = (dir_ / "a").string(), b = (dir_ / "b").string();
  for (const auto& d : {a, b}) {
    ASSERT_EQ(Invoke({"detect", "--manifest", fixture_ + "/eval.json", "--calibration", calib_,
                      "--out-dir", d}).code, 0);
  }
  EXPECT_EQ(ReadFileBytes(a + "/detect_report.json"), ReadFileBytes(b + "/detect_report.json"));
}

TEST_F(CliTest, RejectsModelIdMismatch) {
  json cal = ReadJson(calib_);
  cal["model_id"] = "other-model";
  const std::string other = (dir_ / "other.json").string();
  WriteFileBytes(other, cal.dump());
  const Invocation r = Invoke({"detect", "--manifest", fixture_ + "/eval.json", "--calibration", other,
                        "--out-dir", (dir_ / "x").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("model_id"), std::string::npos) << r.err;
}

TEST(CliUsageTest, UnknownFlagAndCommand) {
  Invocation r = Invoke({"selftest", "--frobnicate"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("Usage"), std::string::npos) << r.err;
  r = Invoke({"transmogrify"});
  EXPECT_EQ(r.code, 1);
  r = Invoke({});
  EXPECT_EQ(r.code, 1);
  r = Invoke({"--help"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("calibrate"), std::string::npos);
}

TEST(CliUsageTest, ValidationAndIoExitCodes) {
  testing::TempDir dir;
  Invocation r = Invoke({"detect", "--manifest", (dir / "nope.json").string(), "--calibration", "x",
                  "--out-dir", dir.path().string()});
  EXPECT_EQ(r.code, 1);
  WriteFileBytes(dir / "m.json", "{not json");
  r = Invoke({"calibrate", "--manifest", (dir / "m.json").string(), "--out-dir", dir.path().string()});
  EXPECT_EQ(r.code, 1);
  WriteFileBytes(dir / "empty.json", R"({"grid":[2,2],"samples":[]})");
  r = Invoke({"calibrate", "--manifest", (dir / "empty.json").string(), "--alpha", "-1",
              "--out-dir", dir.path().string()});
  EXPECT_EQ(r.code, 1);
  // Output directory path occupied by a regular file.
  WriteFileBytes(dir / "blocker", "x");
  r = Invoke({"fixture", "--out-dir", (dir / "blocker").string()});
  EXPECT_EQ(r.code, 2) << r.err;
}

TEST(ReportTest, StableKeysAndEmptySections) {
  testing::TempDir dir;
  const json empty = MakeReport("noop", CommandResult{});
  EmitReport(empty, dir / "r.json");
  const json back = json::parse(ReadFileBytes(dir / "r.json"));
  EXPECT_EQ(back, empty);
  EXPECT_TRUE(back["results"].is_object());
  EXPECT_TRUE(back["results"].empty());
  CommandResult r;
  r.results["zeta"] = 1;
  r.results["alpha"] = 2;
  r.model_id = "m";
  EmitReport(MakeReport("x", r), dir / "a.json");
  const std::string text = ReadFileBytes(dir / "a.json");
  EXPECT_LT(text.find("\"alpha\""), text.find("\"zeta\""));
  EXPECT_LT(text.find("\"command\""), text.find("\"version\""));
}

}  // namespace
}  // namespace chili::cli
