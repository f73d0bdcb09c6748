#include "tfr/json_io.hpp"

#include <cmath>
#include <fstream>

#include "tfr/error.hpp"

namespace tfr {

namespace {

nlohmann::ordered_json optional_number(const std::optional<double>& v) {
  return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
}

std::optional<double> read_optional(const nlohmann::json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

void require_schema(const nlohmann::json& j, const char* schema, int version) {
  if (j.value("schema", std::string()) != schema) {
    throw Error(Errc::ParseError, std::string("expected schema '") + schema + "'");
  }
  if (j.value("version", 0) != version) {
    throw Error(Errc::ParseError, std::string("unsupported ") + schema + " version");
  }
}

}  // namespace

nlohmann::ordered_json to_json(const ScoreTable& table) {
  nlohmann::ordered_json j;
  j["schema"] = "tfr.score_table";
  j["version"] = kScoreTableSchemaVersion;
  j["metric"] = table.metric_name;
  j["target"] = table.target;
  j["mode"] = to_string(table.mode);
  auto& scores = j["scores"] = nlohmann::ordered_json::object();
  for (const auto& [id, v] : table.scores) scores[id] = v;
  if (table.components) {
    auto& comps = j["components"] = nlohmann::ordered_json::object();
    for (const auto& [id, c] : *table.components) {
      comps[id] = {{"s_lp", c.s_lp},
                   {"s_fu", optional_number(c.s_fu)},
                   {"s_lp_norm", c.s_lp_norm},
                   {"s_fu_norm", optional_number(c.s_fu_norm)}};
    }
  }
  return j;
}

ScoreTable score_table_from_json(const nlohmann::json& j) {
  try {
    require_schema(j, "tfr.score_table", kScoreTableSchemaVersion);
    ScoreTable t;
    t.metric_name = j.at("metric").get<std::string>();
    t.target = j.at("target").get<std::string>();
    t.mode = direction_from_string(j.at("mode").get<std::string>());
    for (const auto& [id, v] : j.at("scores").items()) {
      const double s = v.get<double>();
      if (!std::isfinite(s)) throw Error(Errc::NonFiniteValue, "score for " + id);
      t.scores[id] = s;
    }
    if (j.contains("components")) {
      std::map<std::string, ScoreComponents> comps;
      for (const auto& [id, c] : j.at("components").items()) {
        comps[id] = ScoreComponents{c.at("s_lp").get<double>(), read_optional(c.at("s_fu")),
                                    c.at("s_lp_norm").get<double>(), read_optional(c.at("s_fu_norm"))};
      }
      t.components = std::move(comps);
    }
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::ParseError, std::string("score table: ") + e.what());
  }
}

nlohmann::ordered_json to_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["schema"] = "tfr.eval_report";
  j["version"] = kEvalReportSchemaVersion;
  j["targets"] = r.targets;
  j["metrics"] = r.metrics;
  auto per_target = nlohmann::ordered_json::array();
  for (std::size_t t = 0; t < r.targets.size(); ++t) {
    nlohmann::ordered_json row;
    row["target"] = r.targets[t];
    // Built apart: ordered_json keeps members in a vector, so references into `row` do not survive inserts.
    auto tau = nlohmann::ordered_json::object();
    auto ranks = nlohmann::ordered_json::object();
    for (std::size_t m = 0; m < r.metrics.size(); ++m) {
      tau[r.metrics[m]] = optional_number(r.tau[t][m]);
      ranks[r.metrics[m]] = r.ranks[t][m];
    }
    row["tau"] = std::move(tau);
    row["rank"] = std::move(ranks);
    per_target.push_back(std::move(row));
  }
  j["per_target"] = std::move(per_target);
  auto avg = nlohmann::ordered_json::object();
  for (std::size_t m = 0; m < r.metrics.size(); ++m) avg[r.metrics[m]] = r.avg_ranks[m];
  j["avg_ranks"] = std::move(avg);
  j["friedman"] = {{"chi2", optional_number(r.friedman_chi2)}, {"p", optional_number(r.friedman_p)}};
  j["critical_difference"] = optional_number(r.critical_difference);
  j["alpha"] = r.alpha;
  j["tie_mode"] = r.tie_mode;
  j["notes"] = r.notes;
  j["config"] = nlohmann::ordered_json::parse(r.config_json);
  return j;
}

EvalReport eval_report_from_json(const nlohmann::json& j) {
  try {
    require_schema(j, "tfr.eval_report", kEvalReportSchemaVersion);
    EvalReport r;
    r.targets = j.at("targets").get<std::vector<std::string>>();
    r.metrics = j.at("metrics").get<std::vector<std::string>>();
    const auto& rows = j.at("per_target");
    if (rows.size() != r.targets.size()) throw Error(Errc::ParseError, "per_target length differs from targets");
    for (std::size_t t = 0; t < rows.size(); ++t) {
      const auto& row = rows[t];
      if (row.at("target").get<std::string>() != r.targets[t]) throw Error(Errc::ParseError, "per_target order");
      std::vector<std::optional<double>> tau;
      std::vector<double> ranks;
      for (const auto& m : r.metrics) {
        tau.push_back(read_optional(row.at("tau").at(m)));
        ranks.push_back(row.at("rank").at(m).get<double>());
      }
      r.tau.push_back(std::move(tau));
      r.ranks.push_back(std::move(ranks));
    }
    for (const auto& m : r.metrics) r.avg_ranks.push_back(j.at("avg_ranks").at(m).get<double>());
    r.friedman_chi2 = read_optional(j.at("friedman").at("chi2"));
    r.friedman_p = read_optional(j.at("friedman").at("p"));
    r.critical_difference = read_optional(j.at("critical_difference"));
    r.alpha = j.at("alpha").get<double>();
    r.tie_mode = j.at("tie_mode").get<std::string>();
    r.notes = j.at("notes").get<std::vector<std::string>>();
    r.config_json = j.at("config").dump();
    validate(r);
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::ParseError, std::string("eval report: ") + e.what());
  }
}

std::string dump(const nlohmann::ordered_json& j) { return j.dump(2) + "\n"; }

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::IoError, "cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw Error(Errc::IoError, "write failed for " + path.string());
}

nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::IoError, "cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::ParseError, path.string() + ": " + e.what());
  }
}

}  // namespace tfr
