#include "tfr/rank_eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include "tfr/csv.hpp"
#include "tfr/error.hpp"
#include "tfr/stats.hpp"

namespace tfr::rank {

std::string to_string(TieMode m) { return m == TieMode::average ? "average" : "ordinal_by_column_order"; }

TieMode tie_mode_from_string(const std::string& s) {
  if (s == "ordinal_by_column_order" || s == "ordinal") return TieMode::ordinal_by_column_order;
  if (s == "average") return TieMode::average;
  throw Error(Errc::ParseError, "unknown tie mode '" + s + "'");
}

const QTable& nemenyi_q_table() {
  static const QTable table = {
      {{0.05, 2}, 1.960}, {{0.05, 3}, 2.343}, {{0.05, 4}, 2.569}, {{0.05, 5}, 2.728}, {{0.05, 6}, 2.850},
      {{0.05, 7}, 2.949}, {{0.05, 8}, 3.031}, {{0.05, 9}, 3.102}, {{0.05, 10}, 3.164},
      {{0.10, 2}, 1.645}, {{0.10, 3}, 2.052}, {{0.10, 4}, 2.291}, {{0.10, 5}, 2.459}, {{0.10, 6}, 2.589},
      {{0.10, 7}, 2.693}, {{0.10, 8}, 2.780}, {{0.10, 9}, 2.855}, {{0.10, 10}, 2.920},
  };
  return table;
}

namespace {

int sign(double v) { return (v > 0.0) - (v < 0.0); }

}  // namespace

double weighted_kendall_tau(const std::vector<double>& pred, const std::vector<double>& truth) {
  if (pred.size() != truth.size()) {
    throw Error(Errc::LengthMismatch, "prediction has " + std::to_string(pred.size()) + " entries, truth has " +
                                          std::to_string(truth.size()));
  }
  const std::size_t k = pred.size();
  if (k < 2) throw Error(Errc::DegenerateInput, "weighted tau needs at least 2 items");
  for (std::size_t i = 0; i < k; ++i) {
    if (!std::isfinite(pred[i]) || !std::isfinite(truth[i])) throw Error(Errc::NonFinite, "non-finite score");
  }

  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return truth[a] > truth[b]; });
  std::vector<double> position(k);
  for (std::size_t r = 0; r < k; ++r) position[order[r]] = static_cast<double>(r);

  double num = 0.0;
  double den = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = i + 1; j < k; ++j) {
      const double w = 1.0 / (1.0 + position[i]) + 1.0 / (1.0 + position[j]);
      num += w * sign(pred[i] - pred[j]) * sign(truth[i] - truth[j]);
      den += w;
    }
  }
  return num / den;
}

std::vector<double> ordinal_ranks(const std::vector<std::optional<double>>& row, TieMode mode) {
  const std::size_t k = row.size();
  std::vector<std::size_t> present;
  std::vector<std::size_t> missing;
  for (std::size_t m = 0; m < k; ++m) (row[m] ? present : missing).push_back(m);
  if (present.empty()) throw Error(Errc::DegenerateInput, "ranking needs at least one value");

  // Stable: exact ties keep column order.
  std::stable_sort(present.begin(), present.end(), [&](std::size_t a, std::size_t b) { return *row[a] > *row[b]; });

  std::vector<double> ranks(k, 0.0);
  for (std::size_t pos = 0; pos < present.size();) {
    std::size_t end = pos + 1;
    if (mode == TieMode::average) {
      while (end < present.size() && *row[present[end]] == *row[present[pos]]) ++end;
    }
    const double r = (static_cast<double>(pos + 1) + static_cast<double>(end)) / 2.0;
    for (std::size_t t = pos; t < end; ++t) ranks[present[t]] = r;
    pos = end;
  }
  for (std::size_t t = 0; t < missing.size(); ++t) ranks[missing[t]] = static_cast<double>(k - t);
  return ranks;
}

std::vector<double> average_ranks(const std::vector<std::vector<double>>& rank_matrix) {
  if (rank_matrix.empty()) throw Error(Errc::DegenerateInput, "empty rank matrix");
  const std::size_t k = rank_matrix.front().size();
  std::vector<double> avg(k, 0.0);
  for (const auto& row : rank_matrix) {
    if (row.size() != k) throw Error(Errc::LengthMismatch, "rank rows differ in length");
    for (std::size_t m = 0; m < k; ++m) avg[m] += row[m];
  }
  for (auto& v : avg) v /= static_cast<double>(rank_matrix.size());
  return avg;
}

FriedmanResult friedman_test(const std::vector<std::vector<double>>& rank_matrix) {
  const std::size_t n = rank_matrix.size();
  if (n < 2) throw Error(Errc::DegenerateRanks, "Friedman test needs at least 2 targets");
  const std::size_t k = rank_matrix.front().size();
  if (k < 3) throw Error(Errc::DegenerateRanks, "Friedman test needs at least 3 methods");
  const double expected_sum = static_cast<double>(k * (k + 1)) / 2.0;
  for (const auto& row : rank_matrix) {
    if (row.size() != k) throw Error(Errc::DegenerateRanks, "rank rows differ in length");
    const double s = std::accumulate(row.begin(), row.end(), 0.0);
    if (std::abs(s - expected_sum) > 1e-9) throw Error(Errc::DegenerateRanks, "a row is not a ranking of 1..K");
  }
  const auto avg = average_ranks(rank_matrix);
  const auto kd = static_cast<double>(k);
  const auto nd = static_cast<double>(n);
  double sq = 0.0;
  for (double r : avg) sq += r * r;
  FriedmanResult out;
  out.chi2 = std::max(0.0, 12.0 * nd / (kd * (kd + 1.0)) * sq - 3.0 * nd * (kd + 1.0));
  out.p = stats::chi2_sf(out.chi2, kd - 1.0);
  return out;
}

double critical_difference_q(int k, int n, double q) {
  if (k < 2 || n < 1) throw Error(Errc::InvariantViolation, "critical difference needs K >= 2 and N >= 1");
  return q * std::sqrt(static_cast<double>(k) * (k + 1) / (6.0 * n));
}

double critical_difference(int k, int n, double alpha, const QTable& q_table) {
  const auto it = q_table.find({alpha, k});
  if (it == q_table.end()) {
    throw Error(Errc::MissingQValue, "no Nemenyi constant for alpha = " + csv::format_number(alpha) +
                                         ", K = " + std::to_string(k));
  }
  return critical_difference_q(k, n, it->second);
}

// ---------------------------------------------------------------- tables

TauTable parse_tau_table(std::istream& in) {
  const auto rows = csv::read(in);
  if (rows.empty()) throw Error(Errc::ParseError, "tau table is empty");
  TauTable t;
  const auto& header = rows.front();
  if (header.size() < 2) throw Error(Errc::ParseError, "tau table needs at least one metric column");
  for (std::size_t c = 1; c < header.size(); ++c) t.metrics.emplace_back(csv::trim(header[c]));
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& row = rows[r];
    if (row.size() != header.size()) {
      throw Error(Errc::ParseError, "tau table line " + std::to_string(r + 1) + " has " + std::to_string(row.size()) +
                                        " cells, expected " + std::to_string(header.size()));
    }
    t.targets.emplace_back(csv::trim(row[0]));
    auto& taus = t.tau.emplace_back();
    auto& ranks = t.published_rank.emplace_back();
    for (std::size_t c = 1; c < row.size(); ++c) {
      std::string cell(csv::trim(row[c]));
      std::optional<double> rank;
      if (const auto open = cell.find('('); open != std::string::npos) {
        const auto close = cell.find(')', open);
        if (close == std::string::npos) throw Error(Errc::ParseError, "unbalanced parenthesis in '" + cell + "'");
        rank = csv::parse_number(csv::trim(cell.substr(open + 1, close - open - 1)));
        if (!rank) throw Error(Errc::ParseError, "bad rank in '" + cell + "'");
        cell = std::string(csv::trim(cell.substr(0, open)));
      }
      std::optional<double> tau;
      if (!cell.empty() && cell != "-") {
        tau = csv::parse_number(cell);
        if (!tau) throw Error(Errc::ParseError, "bad tau value '" + cell + "'");
      }
      taus.push_back(tau);
      ranks.push_back(rank);
    }
  }
  return t;
}

TauTable load_tau_table(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::IoError, "cannot open " + path.string());
  return parse_tau_table(in);
}

namespace {

void fill_statistics(EvalReport& report, const RankConfig& cfg) {
  report.avg_ranks = average_ranks(report.ranks);
  const auto n = static_cast<int>(report.targets.size());
  const auto k = static_cast<int>(report.metrics.size());
  if (n >= 2 && k >= 3) {
    const auto f = friedman_test(report.ranks);
    report.friedman_chi2 = f.chi2;
    report.friedman_p = f.p;
  } else {
    report.notes.push_back("Friedman test skipped: needs at least 2 targets and 3 metrics");
  }
  if (const auto it = cfg.q_table.find({cfg.alpha, k}); it != cfg.q_table.end()) {
    report.critical_difference = critical_difference_q(k, n, it->second);
  } else {
    report.notes.push_back("critical difference skipped: no Nemenyi constant for K = " + std::to_string(k));
  }
}

}  // namespace

EvalReport evaluate_tau_table(const TauTable& table, const RankConfig& cfg) {
  if (!(cfg.alpha > 0.0 && cfg.alpha < 1.0)) throw Error(Errc::InvariantViolation, "alpha must be in (0, 1)");
  if (table.targets.empty()) throw Error(Errc::DegenerateInput, "tau table has no targets");
  EvalReport report;
  report.targets = table.targets;
  report.metrics = table.metrics;
  report.alpha = cfg.alpha;
  report.tie_mode = to_string(cfg.tie_mode);
  report.tau = table.tau;
  for (std::size_t t = 0; t < table.targets.size(); ++t) {
    report.ranks.push_back(ordinal_ranks(table.tau[t], cfg.tie_mode));
    for (std::size_t m = 0; m < table.metrics.size(); ++m) {
      const double r = report.ranks[t][m];
      if (!table.tau[t][m]) {
        report.notes.push_back(table.metrics[m] + " missing for " + table.targets[t] + ": assigned rank " +
                               csv::format_number(r));
      }
      const auto& printed = table.published_rank[t][m];
      if (printed && *printed != r) {
        report.notes.push_back(table.targets[t] + "/" + table.metrics[m] + ": computed rank " + csv::format_number(r) +
                               " differs from the printed rank " + csv::format_number(*printed));
      }
    }
  }
  fill_statistics(report, cfg);
  return report;
}

EvalReport evaluate(const std::vector<ScoreTable>& scores, const GroundTruthTable& truth, const RankConfig& cfg) {
  if (!(cfg.alpha > 0.0 && cfg.alpha < 1.0)) throw Error(Errc::InvariantViolation, "alpha must be in (0, 1)");
  if (scores.empty()) throw Error(Errc::DegenerateInput, "no score tables to evaluate");

  EvalReport report;
  report.alpha = cfg.alpha;
  report.tie_mode = to_string(cfg.tie_mode);
  std::set<std::string> targets_seen;
  for (const auto& s : scores) {
    if (std::find(report.metrics.begin(), report.metrics.end(), s.metric_name) == report.metrics.end()) {
      report.metrics.push_back(s.metric_name);
    }
    targets_seen.insert(s.target);
  }
  std::vector<std::string> unknown;
  for (const auto& t : targets_seen) {
    if (!truth.column_index(t)) unknown.push_back("target '" + t + "'");
  }
  for (const auto& s : scores) {
    for (const auto& [id, v] : s.scores) {
      if (!truth.row_index(id)) unknown.push_back("model '" + id + "' (" + s.metric_name + "/" + s.target + ")");
    }
  }
  for (const auto& s : scores) {
    const auto col = truth.column_index(s.target);
    if (!col) continue;
    for (std::size_t r = 0; r < truth.rows.size(); ++r) {
      if (truth.at(r, *col) && !s.scores.contains(truth.rows[r])) {
        unknown.push_back("model '" + truth.rows[r] + "' missing from " + s.metric_name + "/" + s.target);
      }
    }
  }
  if (!unknown.empty()) {
    std::string msg = "identifiers do not match the ground truth:";
    for (const auto& u : unknown) msg += " " + u + ";";
    throw Error(Errc::IdMismatch, msg);
  }
  for (const auto& c : truth.columns) {
    if (targets_seen.contains(c)) report.targets.push_back(c);
  }

  const std::size_t k = report.metrics.size();
  for (const auto& target : report.targets) {
    const auto col = *truth.column_index(target);
    std::vector<std::optional<double>> row(k);
    for (std::size_t m = 0; m < k; ++m) {
      const ScoreTable* table = nullptr;
      for (const auto& s : scores) {
        if (s.target == target && s.metric_name == report.metrics[m]) {
          if (table) throw Error(Errc::DuplicateIdentifier, "two score tables for " + s.metric_name + "/" + target);
          table = &s;
        }
      }
      if (!table) {
        report.notes.push_back(report.metrics[m] + " has no scores for " + target + ": assigned the lowest rank");
        continue;
      }
      std::vector<double> pred;
      std::vector<double> gt;
      for (const auto& [id, v] : table->scores) {
        const auto cell = truth.at(*truth.row_index(id), col);
        if (!cell) continue;
        pred.push_back(v);
        gt.push_back(*cell);
      }
      if (pred.size() < 2) {
        report.notes.push_back(report.metrics[m] + " on " + target + ": fewer than 2 comparable models");
        continue;
      }
      row[m] = weighted_kendall_tau(pred, gt);
    }
    report.tau.push_back(row);
    report.ranks.push_back(ordinal_ranks(row, cfg.tie_mode));
  }
  fill_statistics(report, cfg);
  return report;
}

}  // namespace tfr::rank
