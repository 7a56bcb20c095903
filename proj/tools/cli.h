#ifndef CHILI_TOOLS_CLI_H_
#define CHILI_TOOLS_CLI_H_

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>

#include "json.hpp"

namespace chili::cli {

inline constexpr const char* kVersion = "0.1.0";

struct Options {
  std::string weights;
  std::string concepts;
  std::string calibration;
  std::string manifest;
  std::string train;
  std::string test;
  std::string model;
  std::string out;
  std::string out_dir = ".";
  std::string component;
  std::string concept_name;
  std::string c1;
  std::string c2;
  double alpha = 3.0;
  std::optional<double> logit_scale;
  std::uint64_t seed = 0;
  std::size_t index = 0;
  std::size_t top_k = 5;
  std::size_t permutations = 0;
  std::size_t samples = 10;
  std::size_t repetitions = 10;
  std::size_t epochs = 500;
  double lr = 0.1;
  double l2 = 1e-4;
  bool standardize = false;
};

// What a subcommand hands to the report writer.
struct CommandResult {
  nlohmann::json config = nlohmann::json::object();
  nlohmann::json results = nlohmann::json::object();
  std::string model_id;
};

CommandResult RunCalibrate(const Options& o, std::ostream& out);
CommandResult RunScore(const Options& o, std::ostream& out);
CommandResult RunDetect(const Options& o, std::ostream& out);
CommandResult RunSegment(const Options& o, std::ostream& out);
CommandResult RunTripletCommand(const Options& o, std::ostream& out);
CommandResult RunCbmTrain(const Options& o, std::ostream& out);
CommandResult RunExplain(const Options& o, std::ostream& out);
CommandResult RunFixture(const Options& o, std::ostream& out);

// Fixture-based end-to-end checks. Writes its artifacts below o.out_dir and
// prints one PASS/FAIL line per check; `passed` is false if any failed.
struct SelftestOutcome {
  bool passed = true;
  CommandResult result;
};
SelftestOutcome RunSelftest(const Options& o, std::ostream& out);

// {"command", "config", "model_id", "results", "tool", "version"}; object
// keys are sorted, so identical results serialize identically.
nlohmann::json MakeReport(const std::string& command, const CommandResult& result);
void EmitReport(const nlohmann::json& report, const std::filesystem::path& path);

// Exit codes: 0 success, 1 validation error or bad usage, 2 I/O error.
int Main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace chili::cli

#endif  // CHILI_TOOLS_CLI_H_
