#pragma once

#include <cstdint>
#include <exception>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "qgn/model.hpp"
#include "qgn/training.hpp"
#include "qgn/verify.hpp"

namespace qgn {

namespace exit_code {
inline constexpr int kOk = 0;
inline constexpr int kFormat = 1;     // FormatError, ClassRangeError, IoError
inline constexpr int kShape = 2;      // ShapeError, BoundsError
inline constexpr int kStructure = 3;  // StructureError
inline constexpr int kConfig = 4;     // ConfigError, ModeError
inline constexpr int kVerify = 5;     // verify suite failure, decode --compare mismatch
inline constexpr int kInput = 6;      // InputError, bad command line
}  // namespace exit_code

int exit_code_for(const std::exception& e);

enum class ReportFormat { Text, Csv };

/// Everything a subcommand needs. Round-trips through a key=value file
/// (`key = value` per line, '#' starts a comment); command-line flags are
/// applied on top through set().
struct RunConfig {
  std::string subcommand;
  std::string input;
  std::string output;
  std::string gt;
  std::string checkpoint;
  std::string log;
  std::string compare;
  std::string dump_logits;

  QgnConfig model;
  TrainConfig train;
  SyntheticDataConfig data;
  PropagationScheme scheme = PropagationScheme::All;
  ReportFormat format = ReportFormat::Text;
  LossWeights::Mode loss = LossWeights::Mode::Fixed;
  double gamma = 1.0;
  double delta = 0.99;
  bool auto_pad = false;
  std::vector<double> percentages;  // stats input, coarsest level first
  VerifyOptions verify;

  void set(const std::string& key, const std::string& value);  // throws ConfigError
  std::string serialize() const;
  static RunConfig parse(std::string_view text);
  static RunConfig load(const std::filesystem::path& path);

  std::uint64_t seed() const { return model.seed; }
  LossWeights loss_weights() const;

  bool operator==(const RunConfig& other) const { return serialize() == other.serialize(); }
};

std::vector<std::string> config_keys();

/// Entry point of the `qgn` binary; returns the process exit code.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace qgn
