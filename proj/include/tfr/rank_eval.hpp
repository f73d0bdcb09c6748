#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "tfr/data_model.hpp"

namespace tfr::rank {

enum class TieMode { ordinal_by_column_order, average };

std::string to_string(TieMode m);
TieMode tie_mode_from_string(const std::string& s);

/// Nemenyi constants q_alpha for K = 2..10 at alpha 0.05 and 0.10.
using QTable = std::map<std::pair<double, int>, double>;
const QTable& nemenyi_q_table();

struct RankConfig {
  TieMode tie_mode = TieMode::ordinal_by_column_order;
  double alpha = 0.05;
  QTable q_table = nemenyi_q_table();
};

/// Weighted Kendall tau with additive hyperbolic weights 1/(1+r_i) + 1/(1+r_j),
/// where r_i is the position of i in truth order (descending, index breaks ties).
double weighted_kendall_tau(const std::vector<double>& pred, const std::vector<double>& truth);

/// Ranks one target's row of tau values; higher tau gets the lower rank.
/// Missing entries take ranks K, K-1, ... in column order; in ordinal mode
/// exact ties are broken by column order.
std::vector<double> ordinal_ranks(const std::vector<std::optional<double>>& row, TieMode mode);

std::vector<double> average_ranks(const std::vector<std::vector<double>>& rank_matrix);

struct FriedmanResult {
  double chi2 = 0.0;
  double p = 1.0;
};

FriedmanResult friedman_test(const std::vector<std::vector<double>>& rank_matrix);

double critical_difference(int k, int n, double alpha, const QTable& q_table);
/// The same formula with an explicit constant.
double critical_difference_q(int k, int n, double q);

/// Published tau table: cells "0.31 (3)", "- (7)" or blank.
struct TauTable {
  std::vector<std::string> targets;
  std::vector<std::string> metrics;
  std::vector<std::vector<std::optional<double>>> tau;             // [target][metric]
  std::vector<std::vector<std::optional<double>>> published_rank;  // [target][metric]
};

TauTable parse_tau_table(std::istream& in);
TauTable load_tau_table(const std::filesystem::path& path);

/// Ranks, averages and statistics for a tau table. Ranks are recomputed from
/// the tau values; disagreements with printed ranks are listed in the notes.
EvalReport evaluate_tau_table(const TauTable& table, const RankConfig& cfg);

/// One ScoreTable per (target, metric). Score ids whose truth cell is
/// missing are skipped; metrics absent for a target take the lowest rank.
EvalReport evaluate(const std::vector<ScoreTable>& scores, const GroundTruthTable& truth, const RankConfig& cfg);

}  // namespace tfr::rank
