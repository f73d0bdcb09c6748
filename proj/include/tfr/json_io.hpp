#pragma once

#include <filesystem>
#include <string>

#include "json.hpp"
#include "tfr/data_model.hpp"

namespace tfr {

// Versioned JSON schemas; see docs/formats.md.
inline constexpr int kScoreTableSchemaVersion = 1;
inline constexpr int kEvalReportSchemaVersion = 1;

nlohmann::ordered_json to_json(const ScoreTable& table);
ScoreTable score_table_from_json(const nlohmann::json& j);

nlohmann::ordered_json to_json(const EvalReport& report);
EvalReport eval_report_from_json(const nlohmann::json& j);

// Serialized text (two-space indent, trailing newline); byte-stable for equal inputs.
std::string dump(const nlohmann::ordered_json& j);

void write_text_file(const std::filesystem::path& path, const std::string& text);
nlohmann::json read_json_file(const std::filesystem::path& path);

}  // namespace tfr
