#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"

namespace tfr::cli {

enum ExitCode : int {
  kOk = 0,
  kInputError = 2,
  kMetricPrecondition = 3,
  kNumericFailure = 4,
};

/// Entry point shared by the `tfr` binary and the tests. `args` excludes the
/// program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Commands on fully resolved configs (see docs/formats.md for the schemas).
// They throw tfr::Error; run() maps errors to exit codes.
void cmd_score(const nlohmann::json& config, std::ostream& out);
void cmd_eval(const nlohmann::json& config, std::ostream& out);
void cmd_synth(const nlohmann::json& config, std::ostream& out);
void cmd_report(const nlohmann::json& config, std::ostream& out);
void cmd_validate(const std::vector<std::string>& paths, std::ostream& out);

/// Default config of a command; every accepted key appears here.
nlohmann::json default_config(const std::string& command);

/// Overlays `user` on the command defaults, rejecting unknown keys.
nlohmann::json resolve_config(const std::string& command, const nlohmann::json& user);

/// Lowercase hex SHA-256 of a byte string.
std::string sha256_hex(const std::string& bytes);

}  // namespace tfr::cli
