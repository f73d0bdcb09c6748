#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>

#include "tfr/baselines.hpp"
#include "tfr/cli.hpp"
#include "tfr/csv.hpp"
#include "tfr/error.hpp"
#include "tfr/json_io.hpp"
#include "tfr/micronet.hpp"
#include "tfr/rank_eval.hpp"
#include "tfr/rng.hpp"
#include "tfr/transfer_score.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace tfr::cli {

namespace {

template <typename T>
T get(const json& cfg, const char* key) {
  try {
    return cfg.at(key).get<T>();
  } catch (const json::exception&) {
    throw Error(Errc::ParseError, std::string("config key '") + key + "' has the wrong type");
  }
}

template <typename T>
std::optional<T> get_optional(const json& cfg, const char* key) {
  if (!cfg.contains(key) || cfg.at(key).is_null()) return std::nullopt;
  return get<T>(cfg, key);
}

std::string required_path(const json& cfg, const char* key) {
  auto v = get_optional<std::string>(cfg, key);
  if (!v || v->empty()) throw Error(Errc::InvariantViolation, std::string("config key '") + key + "' is required");
  return *v;
}

std::string read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::IoError, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string fixed(double v, int digits) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(digits) << v;
  std::string s = ss.str();
  if (s == "-" + std::string("0.") + std::string(static_cast<std::size_t>(digits), '0')) s.erase(0, 1);
  return s;
}

// Files named directly, plus matching files found under named directories, sorted.
std::vector<fs::path> collect(const std::vector<std::string>& entries, const std::function<bool(const fs::path&)>& keep,
                              bool recursive) {
  std::vector<fs::path> out;
  for (const auto& e : entries) {
    const fs::path p(e);
    if (fs::is_directory(p)) {
      std::vector<fs::path> found;
      auto add = [&](const fs::directory_entry& d) {
        if (d.is_regular_file() && keep(d.path())) found.push_back(d.path());
      };
      if (recursive) {
        for (const auto& d : fs::recursive_directory_iterator(p)) add(d);
      } else {
        for (const auto& d : fs::directory_iterator(p)) add(d);
      }
      std::sort(found.begin(), found.end());
      out.insert(out.end(), found.begin(), found.end());
    } else if (fs::exists(p)) {
      out.push_back(p);
    } else {
      throw Error(Errc::IoError, "no such file or directory: " + e);
    }
  }
  return out;
}

Error with_path(const Error& e, const fs::path& path) {
  std::string msg = e.what();
  const std::string prefix = std::string(to_string(e.code())) + ": ";
  if (msg.starts_with(prefix)) msg.erase(0, prefix.size());
  return Error(e.code(), path.string() + ": " + msg);
}

// ---------------------------------------------------------------- score

const std::vector<std::string> kMetrics{"ours", "ours-sum", "ours-lp", "leep", "nleep", "logme", "parc"};

ScoreTable baseline_table(const std::string& metric, const TargetSet& target, const std::vector<CandidateBundle>& bundles,
                          const std::vector<fs::path>& paths, Direction mode, const json& cfg, std::uint64_t seed) {
  ScoreTable table;
  table.metric_name = metric;
  table.target = target.name;
  table.mode = mode;
  for (std::size_t i = 0; i < bundles.size(); ++i) {
    const auto& b = bundles[i];
    double s = 0.0;
    if (metric == "leep") {
      if (!b.source_probs || b.source_probs->cols() == 0) {
        throw Error(Errc::MetricPrecondition, "leep needs source probabilities, but bundle '" + b.model_id + "' (" +
                                                  paths[i].string() + ") has none");
      }
      s = baselines::leep(*b.source_probs, target.labels, target.num_classes);
    } else if (metric == "nleep") {
      baselines::NleepConfig nc;
      nc.variance_keep = get<double>(cfg.at("nleep"), "variance_keep");
      nc.components = get<int>(cfg.at("nleep"), "components");
      nc.seed = derive_seed(seed, hash_tag(b.model_id));
      s = baselines::nleep(b.embeddings, target.labels, target.num_classes, nc);
    } else if (metric == "logme") {
      s = baselines::logme(b.embeddings, target.labels, target.num_classes);
    } else {
      s = baselines::parc(b.embeddings, target.labels, target.num_classes);
    }
    // Cross-domain runs report 1 - S so that larger still means "predicted better".
    table.scores[b.model_id] = mode == Direction::cross_domain ? 1.0 - s : s;
  }
  return table;
}

}  // namespace

void cmd_score(const json& cfg, std::ostream& out) {
  const fs::path target_path = required_path(cfg, "target");
  const auto metrics = get<std::vector<std::string>>(cfg, "metrics");
  if (metrics.empty()) throw Error(Errc::InvariantViolation, "no metrics requested");
  for (const auto& m : metrics) {
    if (std::find(kMetrics.begin(), kMetrics.end(), m) == kMetrics.end()) {
      throw Error(Errc::ParseError, "unknown metric '" + m + "'");
    }
  }
  const auto mode = direction_from_string(get<std::string>(cfg, "mode"));
  const auto seed = get<std::uint64_t>(cfg, "seed");
  const fs::path out_dir = get<std::string>(cfg, "out_dir");

  TargetSet target;
  try {
    target = load_target_set(target_path);
    validate(target);
  } catch (const Error& e) {
    throw with_path(e, target_path);
  }
  const auto paths = collect(
      get<std::vector<std::string>>(cfg, "candidates"), [](const fs::path& p) { return p.extension() == ".tfrb"; },
      false);
  std::vector<CandidateBundle> bundles;
  for (const auto& p : paths) {
    try {
      auto b = load_bundle(p);
      validate(b);
      if (static_cast<std::size_t>(b.embeddings.rows()) != target.size()) {
        throw Error(Errc::ShapeMismatch, "bundle has " + std::to_string(b.embeddings.rows()) + " rows but the target has " +
                                             std::to_string(target.size()));
      }
      bundles.push_back(std::move(b));
    } catch (const Error& e) {
      throw with_path(e, p);
    }
  }
  if (bundles.size() < 2) {
    throw Error(Errc::TooFewCandidates, "need at least 2 candidate bundles, found " + std::to_string(bundles.size()));
  }

  score::ScoreConfig sc;
  const auto& nca = cfg.at("nca");
  sc.nca.out_dim = get_optional<int>(nca, "out_dim");
  sc.nca.l2_penalty = get_optional<double>(nca, "l2_penalty");
  sc.nca.max_iters = get_optional<int>(nca, "max_iters");
  sc.nca.step_size = get_optional<double>(nca, "step_size");
  sc.nca.tol = get_optional<double>(nca, "tol");
  sc.knn.k = get<int>(cfg.at("knn"), "k");
  sc.threads = get<int>(cfg, "threads");
  sc.mode.direction = mode;

  std::optional<std::vector<score::RawScore>> raw;
  for (const auto& metric : metrics) {
    ScoreTable table;
    if (metric.starts_with("ours")) {
      if (!raw) raw = score::raw_scores(target, bundles, sc);
      if (metric == "ours-lp") {
        table = score::lp_only(target.name, *raw, mode, metric);
      } else {
        auto cm = sc.mode;
        cm.variant = metric == "ours-sum" ? score::Variant::sum : score::Variant::product;
        table = score::combine(target.name, *raw, cm, metric);
      }
    } else {
      table = baseline_table(metric, target, bundles, paths, mode, cfg, seed);
    }
    const fs::path file = out_dir / ("scores_" + metric + ".json");
    write_text_file(file, dump(to_json(table)));
    const auto best = score::argmax_model(table);
    out << "best by " << metric << " for " << target.name << ": " << best << " (" << csv::format_number(table.scores.at(best))
        << ") -> " << file.string() << "\n";
  }
}

// ---------------------------------------------------------------- eval

namespace {

void write_tau_csv(const EvalReport& r, const fs::path& path) {
  std::ostringstream ss;
  csv::Row header{"target"};
  header.insert(header.end(), r.metrics.begin(), r.metrics.end());
  csv::write_row(ss, header);
  for (std::size_t t = 0; t < r.targets.size(); ++t) {
    csv::Row row{r.targets[t]};
    for (std::size_t m = 0; m < r.metrics.size(); ++m) {
      const auto& tau = r.tau[t][m];
      row.push_back((tau ? fixed(*tau, 2) : std::string("-")) + " (" + csv::format_number(r.ranks[t][m]) + ")");
    }
    csv::write_row(ss, row);
  }
  csv::Row avg{"Avg. rank"};
  for (double v : r.avg_ranks) avg.push_back(fixed(v, 2));
  csv::write_row(ss, avg);
  write_text_file(path, ss.str());
}

}  // namespace

void cmd_eval(const json& cfg, std::ostream& out) {
  rank::RankConfig rc;
  rc.tie_mode = rank::tie_mode_from_string(get<std::string>(cfg, "tie_mode"));
  rc.alpha = get<double>(cfg, "alpha");
  const auto q = get_optional<double>(cfg, "q");

  EvalReport report;
  if (const auto tau_path = get_optional<std::string>(cfg, "tau_table")) {
    try {
      report = rank::evaluate_tau_table(rank::load_tau_table(*tau_path), rc);
    } catch (const Error& e) {
      throw with_path(e, *tau_path);
    }
  } else {
    const fs::path truth_path = required_path(cfg, "truth");
    GroundTruthTable truth;
    try {
      truth = load_ground_truth(truth_path);
      validate(truth);
    } catch (const Error& e) {
      throw with_path(e, truth_path);
    }
    const auto files = collect(
        get<std::vector<std::string>>(cfg, "scores"),
        [](const fs::path& p) { return p.extension() == ".json" && p.filename().string().starts_with("scores_"); }, true);
    if (files.empty()) throw Error(Errc::InvariantViolation, "no score tables given");
    std::vector<ScoreTable> tables;
    for (const auto& f : files) {
      try {
        tables.push_back(score_table_from_json(read_json_file(f)));
      } catch (const Error& e) {
        throw with_path(e, f);
      }
    }
    report = rank::evaluate(tables, truth, rc);
  }
  if (q) {
    report.critical_difference = rank::critical_difference_q(static_cast<int>(report.metrics.size()),
                                                             static_cast<int>(report.targets.size()), *q);
    report.notes.push_back("critical difference computed with q = " + csv::format_number(*q));
  }
  report.config_json = cfg.dump();
  validate(report);

  const fs::path out_path = get<std::string>(cfg, "out");
  write_text_file(out_path, dump(to_json(report)));
  if (const auto csv_path = get_optional<std::string>(cfg, "csv_out")) write_tau_csv(report, *csv_path);

  out << "average ranks:";
  for (std::size_t m = 0; m < report.metrics.size(); ++m) {
    out << " " << report.metrics[m] << "=" << fixed(report.avg_ranks[m], 2);
  }
  out << "\n";
  if (report.friedman_chi2) {
    out << "Friedman chi2 = " << fixed(*report.friedman_chi2, 3) << ", p = " << fixed(*report.friedman_p, 4) << "\n";
  }
  if (report.critical_difference) out << "critical difference = " << fixed(*report.critical_difference, 3) << "\n";
  for (const auto& n : report.notes) out << "note: " << n << "\n";
  out << "report written to " << out_path.string() << "\n";
}

// ---------------------------------------------------------------- synth

void cmd_synth(const json& cfg, std::ostream& out) {
  const auto seed = get<std::uint64_t>(cfg, "seed");
  const fs::path out_dir = get<std::string>(cfg, "out_dir");
  const int n_targets = get<int>(cfg, "targets");
  if (n_targets != 1 && n_targets != 3) throw Error(Errc::InvariantViolation, "targets must be 1 or 3");
  auto spec = micro::default_zoo_spec(n_targets);
  if (const auto n_sources = get_optional<int>(cfg, "sources")) {
    if (*n_sources < 3 || *n_sources > static_cast<int>(spec.sources.size())) {
      throw Error(Errc::InvariantViolation, "sources must be between 3 and " + std::to_string(spec.sources.size()) +
                                                ", got " + std::to_string(*n_sources));
    }
    spec.sources.resize(static_cast<std::size_t>(*n_sources));
  }
  if (cfg.contains("zoo") && !cfg.at("zoo").is_null()) spec = micro::zoo_spec_from_json(cfg.at("zoo"), spec);
  spec.threads = get<int>(cfg, "threads");

  const auto zoo = micro::make_micro_zoo(spec, seed);

  std::map<std::string, std::string> files;
  auto record = [&](const fs::path& p) { files[fs::relative(p, out_dir).generic_string()] = sha256_hex(read_bytes(p)); };
  for (const auto& zt : zoo.targets) {
    const fs::path dir = out_dir / zt.target_set.name;
    fs::create_directories(dir / "candidates");
    save_target_set(zt.target_set, dir / "target.tfrb");
    record(dir / "target.tfrb");
    record(sidecar_path(dir / "target.tfrb"));
    write_text_file(dir / "dataset.json", dump(micro::to_json(zt.data.spec)));
    record(dir / "dataset.json");
    for (const auto& b : zt.bundles) {
      const fs::path p = dir / "candidates" / (b.model_id + ".tfrb");
      save_bundle(b, p);
      record(p);
      record(sidecar_path(p));
    }
  }
  {
    std::ostringstream ss;
    write_ground_truth(zoo.ground_truth, ss);
    write_text_file(out_dir / "ground_truth.csv", ss.str());
    record(out_dir / "ground_truth.csv");
  }

  nlohmann::ordered_json manifest;
  manifest["schema"] = "tfr.manifest";
  manifest["version"] = 1;
  manifest["command"] = "synth";
  manifest["seed"] = seed;
  manifest["config"] = cfg;
  manifest["config_sha256"] = sha256_hex(cfg.dump());
  manifest["zoo"] = micro::to_json(spec);
  manifest["files"] = files;
  write_text_file(out_dir / "manifest.json", dump(manifest));

  out << "wrote " << zoo.targets.size() << " target(s) x " << spec.sources.size() << " candidates to "
      << out_dir.string() << "\n";
  for (std::size_t t = 0; t < zoo.ground_truth.columns.size(); ++t) {
    for (std::size_t s = 0; s < zoo.ground_truth.rows.size(); ++s) {
      out << "  " << zoo.ground_truth.columns[t] << " <- " << zoo.ground_truth.rows[s] << ": AUC x100 = "
          << fixed(*zoo.ground_truth.at(s, t), 2) << "\n";
    }
  }
}

// ---------------------------------------------------------------- report

void cmd_report(const json& cfg, std::ostream& out) {
  const auto report_path = get_optional<std::string>(cfg, "report");
  const auto truth_path = get_optional<std::string>(cfg, "truth");
  const auto compare = get<std::vector<std::string>>(cfg, "compare");
  const bool exclude_self = get<bool>(cfg, "exclude_self");
  const auto format = get<std::string>(cfg, "format");
  if (format != "text" && format != "csv") throw Error(Errc::ParseError, "format must be 'text' or 'csv'");
  if (!report_path && !truth_path) throw Error(Errc::InvariantViolation, "report needs 'report' and/or 'truth'");
  if (!compare.empty() && compare.size() != 2) throw Error(Errc::InvariantViolation, "compare takes exactly two sources");
  if (!compare.empty() && !truth_path) throw Error(Errc::InvariantViolation, "compare needs a ground-truth table");

  if (truth_path) {
    GroundTruthTable truth;
    try {
      truth = load_ground_truth(*truth_path);
      validate(truth);
    } catch (const Error& e) {
      throw with_path(e, *truth_path);
    }
    if (format == "csv") csv::write_row(out, {"target", "best_source", "auc"});
    for (std::size_t c = 0; c < truth.columns.size(); ++c) {
      std::optional<std::size_t> best;
      for (std::size_t r = 0; r < truth.rows.size(); ++r) {
        const auto v = truth.at(r, c);
        if (v && (!best || *v > *truth.at(*best, c))) best = r;
      }
      if (!best) continue;
      const auto value = fixed(*truth.at(*best, c), 2);
      if (format == "csv") {
        csv::write_row(out, {truth.columns[c], truth.rows[*best], value});
      } else {
        out << "best source for " << truth.columns[c] << ": " << truth.rows[*best] << " (" << value << ")\n";
      }
    }
    if (!compare.empty()) {
      const auto a = truth.row_index(compare[0]);
      const auto b = truth.row_index(compare[1]);
      if (!a || !b) throw Error(Errc::IdMismatch, "compare: unknown source '" + compare[a ? 1 : 0] + "'");
      int wins = 0;
      int ties = 0;
      int total = 0;
      for (std::size_t c = 0; c < truth.columns.size(); ++c) {
        const auto va = truth.at(*a, c);
        const auto vb = truth.at(*b, c);
        const bool self = truth.columns[c] == compare[0] || truth.columns[c] == compare[1];
        if (!va || !vb || (exclude_self && self)) continue;
        ++total;
        wins += *va > *vb ? 1 : 0;
        ties += *va == *vb ? 1 : 0;
      }
      out << compare[0] << " vs " << compare[1] << (exclude_self ? " excluding self targets" : "") << ": "
          << compare[0] << " wins " << wins << " of " << total;
      if (ties) out << " (" << ties << " ties)";
      out << "\n";
    }
  }

  if (report_path) {
    EvalReport r;
    try {
      r = eval_report_from_json(read_json_file(*report_path));
      validate(r);
    } catch (const Error& e) {
      throw with_path(e, *report_path);
    }
    if (format == "csv") {
      csv::Row header{"target"};
      header.insert(header.end(), r.metrics.begin(), r.metrics.end());
      csv::write_row(out, header);
      for (std::size_t t = 0; t < r.targets.size(); ++t) {
        csv::Row row{r.targets[t]};
        for (std::size_t m = 0; m < r.metrics.size(); ++m) {
          row.push_back((r.tau[t][m] ? fixed(*r.tau[t][m], 2) : std::string("-")) + " (" +
                        csv::format_number(r.ranks[t][m]) + ")");
        }
        csv::write_row(out, row);
      }
      csv::Row avg{"Avg. rank"};
      for (double v : r.avg_ranks) avg.push_back(fixed(v, 2));
      csv::write_row(out, avg);
      return;
    }
    std::size_t w = 10;
    for (const auto& t : r.targets) w = std::max(w, t.size() + 2);
    out << std::left << std::setw(static_cast<int>(w)) << "target";
    for (const auto& m : r.metrics) out << std::right << std::setw(std::max<int>(12, static_cast<int>(m.size()) + 2)) << m;
    out << "\n";
    for (std::size_t t = 0; t < r.targets.size(); ++t) {
      out << std::left << std::setw(static_cast<int>(w)) << r.targets[t];
      for (std::size_t m = 0; m < r.metrics.size(); ++m) {
        const std::string cell = (r.tau[t][m] ? fixed(*r.tau[t][m], 2) : std::string("-")) + " (" +
                                 csv::format_number(r.ranks[t][m]) + ")";
        out << std::right << std::setw(std::max<int>(12, static_cast<int>(r.metrics[m].size()) + 2)) << cell;
      }
      out << "\n";
    }
    out << std::left << std::setw(static_cast<int>(w)) << "Avg. rank";
    for (std::size_t m = 0; m < r.metrics.size(); ++m) {
      out << std::right << std::setw(std::max<int>(12, static_cast<int>(r.metrics[m].size()) + 2)) << fixed(r.avg_ranks[m], 2);
    }
    out << std::left << "\n";
    if (r.friedman_p) {
      out << "Friedman chi2 = " << fixed(*r.friedman_chi2, 3) << ", p = " << fixed(*r.friedman_p, 4) << " ("
          << (*r.friedman_p < r.alpha ? "reject" : "cannot reject") << " equal performance at alpha " << r.alpha << ")\n";
    }
    if (r.critical_difference) {
      const auto best = static_cast<std::size_t>(std::min_element(r.avg_ranks.begin(), r.avg_ranks.end()) - r.avg_ranks.begin());
      out << "critical difference = " << fixed(*r.critical_difference, 3) << "; within CD of " << r.metrics[best] << " ("
          << fixed(r.avg_ranks[best], 2) << "):";
      for (std::size_t m = 0; m < r.metrics.size(); ++m) {
        if (m != best && r.avg_ranks[m] - r.avg_ranks[best] <= *r.critical_difference) out << " " << r.metrics[m];
      }
      out << "\n";
    }
    for (const auto& n : r.notes) out << "note: " << n << "\n";
  }
}

// ---------------------------------------------------------------- validate

void cmd_validate(const std::vector<std::string>& paths, std::ostream& out) {
  if (paths.empty()) throw Error(Errc::InvariantViolation, "validate needs at least one path");
  for (const auto& s : paths) {
    const fs::path p(s);
    try {
      const auto ext = p.extension().string();
      if (ext == ".tfrb") {
        const auto b = load_bundle(p);
        validate(b);
        out << "OK " << s << ": bundle '" << b.model_id << "' n=" << b.embeddings.rows() << " D=" << b.embeddings.cols()
            << " Z=" << (b.source_probs ? b.source_probs->cols() : 0);
        if (b.grad_norms) {
          out << " grad_norms=(" << csv::format_number(b.grad_norms->conv1) << ", "
              << csv::format_number(b.grad_norms->conv2) << ")";
        }
        if (b.labels) out << " labels C=" << b.num_classes.value_or(0);
        out << "\n";
      } else if (ext == ".csv") {
        std::string first_error;
        try {
          const auto gt = load_ground_truth(p);
          validate(gt);
          out << "OK " << s << ": ground truth " << gt.rows.size() << " x " << gt.columns.size() << ", "
              << gt.missing_count() << " missing\n";
          continue;
        } catch (const Error& e) {
          first_error = e.what();
        }
        try {
          const auto t = rank::load_tau_table(p);
          out << "OK " << s << ": tau table " << t.targets.size() << " x " << t.metrics.size() << "\n";
        } catch (const Error&) {
          throw Error(Errc::ParseError, first_error);
        }
      } else if (ext == ".json") {
        const auto j = read_json_file(p);
        const auto schema = j.is_object() && j.contains("schema") && j.at("schema").is_string()
                                ? j.at("schema").get<std::string>()
                                : std::string();
        if (schema == "tfr.score_table") {
          const auto t = score_table_from_json(j);
          out << "OK " << s << ": score table " << t.metric_name << "/" << t.target << " with " << t.scores.size()
              << " scores\n";
        } else if (schema == "tfr.eval_report") {
          const auto r = eval_report_from_json(j);
          validate(r);
          out << "OK " << s << ": eval report " << r.targets.size() << " targets x " << r.metrics.size() << " metrics\n";
        } else if (schema == "tfr.manifest") {
          const auto& files = j.at("files");
          for (auto it = files.begin(); it != files.end(); ++it) {
            const auto actual = sha256_hex(read_bytes(p.parent_path() / it.key()));
            if (actual != it.value().get<std::string>()) {
              throw Error(Errc::InvariantViolation, "hash mismatch for " + it.key());
            }
          }
          out << "OK " << s << ": manifest, " << files.size() << " files verified\n";
        } else {
          throw Error(Errc::ParseError, "unrecognized JSON schema '" + schema + "'");
        }
      } else {
        throw Error(Errc::ParseError, "unrecognized file type");
      }
    } catch (const Error& e) {
      throw with_path(e, p);
    } catch (const json::exception& e) {
      throw Error(Errc::ParseError, s + ": " + e.what());
    }
  }
}

}  // namespace tfr::cli
