#include <fstream>
#include <ostream>

#include "CLI11.hpp"
#include "tfr/cli.hpp"
#include "tfr/error.hpp"
#include "tfr/json_io.hpp"
#include "tfr/log.hpp"

namespace tfr::cli {

namespace {

using nlohmann::json;

int exit_code(Errc code) {
  switch (code) {
    case Errc::MetricPrecondition:
    case Errc::TooFewSamples:
    case Errc::NoValidTriplet:
    case Errc::ZeroDenominator:
    case Errc::TooFewCandidates:
    case Errc::EmptyPool:
    case Errc::DegenerateRanks:
    case Errc::MissingQValue:
      return kMetricPrecondition;
    case Errc::DegenerateInput:
    case Errc::NonFinite:
    case Errc::DegeneratePool:
    case Errc::StaleCache:
    case Errc::Divergence:
    case Errc::EmCollapse:
    case Errc::SvdFailure:
    case Errc::ZeroVariance:
    case Errc::RankDeficiency:
      return kNumericFailure;
    default:
      return kInputError;
  }
}

// "a.b.c=value": value is parsed as JSON when possible, else taken as a string.
void apply_set(json& user, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw Error(Errc::ParseError, "--set expects key=value, got '" + assignment + "'");
  }
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  json* node = &user;
  std::size_t start = 0;
  for (;;) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw Error(Errc::ParseError, "bad --set key '" + path + "'");
    if (!node->is_object()) *node = json::object();
    if (dot == std::string::npos) {
      (*node)[key] = value;
      break;
    }
    node = &(*node)[key];
    start = dot + 1;
  }
}

struct Common {
  std::string config_file;
  std::vector<std::string> sets;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("-c,--config", c.config_file, "JSON config file");
  app->add_option("--set", c.sets, "override a config key, e.g. --set knn.k=7")->take_all();
}

// Layers: defaults < config file < flags < --set.
json build_user(const Common& c, const json& flags) {
  json user = json::object();
  if (!c.config_file.empty()) {
    user = read_json_file(c.config_file);
    if (!user.is_object()) throw Error(Errc::ParseError, c.config_file + ": config must be a JSON object");
  }
  for (auto it = flags.begin(); it != flags.end(); ++it) user[it.key()] = it.value();
  for (const auto& s : c.sets) apply_set(user, s);
  return user;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Rank candidate source models for a labeled target set and evaluate the rankings."};
  app.name("tfr");
  app.require_subcommand(1);
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "suppress warnings");

  json flags = json::object();
  auto opt = [&](CLI::App* sub, const std::string& name, const std::string& key, const std::string& help) {
    sub->add_option_function<std::string>(name, [&flags, key](const std::string& v) { flags[key] = v; }, help);
  };
  auto opt_int = [&](CLI::App* sub, const std::string& name, const std::string& key, const std::string& help) {
    sub->add_option_function<std::int64_t>(name, [&flags, key](const std::int64_t& v) { flags[key] = v; }, help);
  };
  auto opt_num = [&](CLI::App* sub, const std::string& name, const std::string& key, const std::string& help) {
    sub->add_option_function<double>(name, [&flags, key](const double& v) { flags[key] = v; }, help);
  };
  auto opt_list = [&](CLI::App* sub, const std::string& name, const std::string& key, const std::string& help) {
    sub->add_option_function<std::vector<std::string>>(
        name, [&flags, key](const std::vector<std::string>& v) { flags[key] = v; }, help);
  };

  Common common;

  auto* score = app.add_subcommand("score", "score candidate bundles against a target set");
  add_common(score, common);
  opt(score, "--target", "target", "target set bundle (.tfrb)");
  opt_list(score, "--candidates", "candidates", "candidate bundles or directories of them");
  opt_list(score, "--metrics", "metrics", "ours, ours-sum, ours-lp, leep, nleep, logme, parc");
  opt(score, "-o,--out-dir", "out_dir", "directory for scores_<metric>.json");
  opt_int(score, "--seed", "seed", "seed for stochastic steps (default: $TFR_SEED or 0)");
  opt_int(score, "--threads", "threads", "worker threads");
  opt(score, "--mode", "mode", "in_domain or cross_domain");

  auto* eval = app.add_subcommand("eval", "rank metrics by weighted Kendall tau against ground truth");
  add_common(eval, common);
  opt_list(eval, "--scores", "scores", "score tables or directories of them");
  opt(eval, "--truth", "truth", "ground-truth CSV");
  opt(eval, "--tau-table", "tau_table", "precomputed tau table CSV instead of scores + truth");
  opt(eval, "--tie-mode", "tie_mode", "ordinal_by_column_order or average");
  opt_num(eval, "--alpha", "alpha", "significance level for the Nemenyi test");
  opt_num(eval, "--q", "q", "explicit Nemenyi constant");
  opt(eval, "-o,--out", "out", "report JSON path");
  opt(eval, "--csv-out", "csv_out", "also write the tau table as CSV");

  auto* synth = app.add_subcommand("synth", "build a synthetic source zoo with ground truth");
  add_common(synth, common);
  opt(synth, "-o,--out-dir", "out_dir", "output directory");
  opt_int(synth, "--seed", "seed", "zoo seed (default: $TFR_SEED or 0)");
  opt_int(synth, "--targets", "targets", "1 or 3 target tasks");
  opt_int(synth, "--sources", "sources", "use the first N preset sources");
  opt_int(synth, "--threads", "threads", "worker threads");

  auto* report = app.add_subcommand("report", "summarize ground truth and evaluation reports");
  add_common(report, common);
  opt(report, "--report", "report", "eval report JSON");
  opt(report, "--truth", "truth", "ground-truth CSV");
  report->add_option_function<std::vector<std::string>>(
      "--compare", [&flags](const std::vector<std::string>& v) { flags["compare"] = v; }, "two sources to compare")
      ->expected(2);
  report->add_flag_function("--include-self", [&flags](std::int64_t) { flags["exclude_self"] = false; },
                            "count targets named like a compared source");
  opt(report, "--format", "format", "text or csv");

  auto* val = app.add_subcommand("validate", "check bundles, CSV tables, score tables, reports and manifests");
  std::vector<std::string> val_paths;
  val->add_option("paths", val_paths, "files to check")->required();

  std::vector<std::string> argv(args.rbegin(), args.rend());
  try {
    app.parse(argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kInputError;
  }

  ScopedWarningHandler warnings([&err, quiet](std::string_view m) {
    if (!quiet) err << "warning: " << m << "\n";
  });
  try {
    if (val->parsed()) {
      cmd_validate(val_paths, out);
      return kOk;
    }
    for (auto* sub : {score, eval, synth, report}) {
      if (!sub->parsed()) continue;
      const auto cfg = resolve_config(sub->get_name(), build_user(common, flags));
      if (sub == score) cmd_score(cfg, out);
      if (sub == eval) cmd_eval(cfg, out);
      if (sub == synth) cmd_synth(cfg, out);
      if (sub == report) cmd_report(cfg, out);
    }
    return kOk;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code(e.code());
  } catch (const json::exception& e) {
    err << "error: ParseError: " << e.what() << "\n";
    return kInputError;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: IoError: " << e.what() << "\n";
    return kInputError;
  }
}

}  // namespace tfr::cli
