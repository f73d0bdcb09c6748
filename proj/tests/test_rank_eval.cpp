#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "oracles.hpp"
#include "support.hpp"
#include "tfr/error.hpp"
#include "tfr/rank_eval.hpp"

using namespace tfr;
using namespace tfr::rank;

namespace {

std::vector<double> draw(Rng& rng, std::size_t k, bool ties) {
  std::vector<double> v(k);
  for (auto& x : v) x = ties ? static_cast<double>(rng.index(4)) : rng.normal();
  return v;
}

template <typename F>
Errc code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no tfr::Error thrown";
  return Errc::DegenerateInput;
}

std::vector<std::vector<double>> random_rank_matrix(Rng& rng, int n, int k) {
  std::vector<std::vector<double>> m;
  for (int t = 0; t < n; ++t) {
    std::vector<double> r(static_cast<std::size_t>(k));
    std::iota(r.begin(), r.end(), 1.0);
    shuffle(r.begin(), r.end(), rng);
    m.push_back(r);
  }
  return m;
}

ScoreTable table(const std::string& metric, const std::string& target) {
  ScoreTable s;
  s.metric_name = metric;
  s.target = target;
  return s;
}

bool has_note(const EvalReport& r, const std::string& needle) {
  return std::any_of(r.notes.begin(), r.notes.end(), [&](const std::string& n) { return n.find(needle) != std::string::npos; });
}

}  // namespace

TEST(WeightedTau, MatchesOracleOnRandomInstances) {
  Rng rng(1);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t k = 2 + rng.index(14);
    const bool ties = trial % 3 == 0;
    const auto pred = draw(rng, k, ties);
    const auto truth = draw(rng, k, ties && trial % 2);
    EXPECT_EQ(weighted_kendall_tau(pred, truth), oracle::weighted_tau(pred, truth)) << "trial " << trial;
  }
}

TEST(WeightedTau, IdentityReversalAndBounds) {
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const auto truth = draw(rng, 2 + rng.index(10), false);
    std::vector<double> neg(truth.size());
    std::transform(truth.begin(), truth.end(), neg.begin(), [](double v) { return -v; });
    EXPECT_DOUBLE_EQ(weighted_kendall_tau(truth, truth), 1.0);
    EXPECT_DOUBLE_EQ(weighted_kendall_tau(neg, truth), -1.0);
    const auto pred = draw(rng, truth.size(), true);
    const double t = weighted_kendall_tau(pred, truth);
    EXPECT_GE(t, -1.0);
    EXPECT_LE(t, 1.0);
  }
}

TEST(WeightedTau, InvariantUnderMonotoneTransformOfPrediction) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const auto truth = draw(rng, 8, false);
    const auto pred = draw(rng, 8, trial % 2 == 0);
    std::vector<double> warped(pred.size());
    std::transform(pred.begin(), pred.end(), warped.begin(), [](double v) { return std::exp(3 * v) + 7; });
    EXPECT_EQ(weighted_kendall_tau(warped, truth), weighted_kendall_tau(pred, truth));
  }
}

TEST(WeightedTau, NegatingPredictionNegatesTau) {
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const auto truth = draw(rng, 9, false);
    const auto pred = draw(rng, 9, trial % 2 == 0);
    std::vector<double> neg(pred.size());
    std::transform(pred.begin(), pred.end(), neg.begin(), [](double v) { return -v; });
    EXPECT_NEAR(weighted_kendall_tau(neg, truth), -weighted_kendall_tau(pred, truth), 1e-15);
  }
}

TEST(WeightedTau, Errors) {
  EXPECT_EQ(code_of([] { weighted_kendall_tau({1, 2}, {1, 2, 3}); }), Errc::LengthMismatch);
  EXPECT_EQ(code_of([] { weighted_kendall_tau({1}, {1}); }), Errc::DegenerateInput);
  EXPECT_EQ(code_of([] { weighted_kendall_tau({1, NAN}, {1, 2}); }), Errc::NonFinite);
}

TEST(Ranks, BloodRowAndMissingEntries) {
  const std::vector<std::optional<double>> blood{0.11, 0.30, 0.30, 0.07, 0.48, 0.75, 0.78};
  EXPECT_EQ(ordinal_ranks(blood, TieMode::ordinal_by_column_order), (std::vector<double>{6, 4, 5, 7, 3, 2, 1}));
  EXPECT_EQ(ordinal_ranks(blood, TieMode::average), (std::vector<double>{6, 4.5, 4.5, 7, 3, 2, 1}));
  const std::vector<std::optional<double>> gaps{0.2, std::nullopt, 0.5, std::nullopt};
  EXPECT_EQ(ordinal_ranks(gaps, TieMode::ordinal_by_column_order), (std::vector<double>{2, 4, 1, 3}));
}

TEST(Ranks, EveryRowIsAPermutation) {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::optional<double>> row(2 + rng.index(8));
    for (auto& v : row) {
      if (rng.index(5) != 0) v = static_cast<double>(rng.index(3));
    }
    if (std::none_of(row.begin(), row.end(), [](auto& v) { return v.has_value(); })) row[0] = 1.0;
    for (auto mode : {TieMode::ordinal_by_column_order, TieMode::average}) {
      auto r = ordinal_ranks(row, mode);
      const double k = static_cast<double>(row.size());
      EXPECT_DOUBLE_EQ(std::accumulate(r.begin(), r.end(), 0.0), k * (k + 1) / 2);
      if (mode == TieMode::ordinal_by_column_order) {
        std::sort(r.begin(), r.end());
        for (std::size_t i = 0; i < r.size(); ++i) EXPECT_EQ(r[i], static_cast<double>(i + 1));
      }
    }
  }
}

TEST(DatasetTable, AverageRanksMatchPrintedRow) {
  const auto table = load_tau_table(test::fixture("tau_dataset_transfer.csv"));
  ASSERT_EQ(table.targets.size(), 11u);
  const auto report = evaluate_tau_table(table, {});
  const std::vector<double> printed{4.00, 4.00, 5.82, 4.91, 3.91, 3.45, 1.91};
  for (std::size_t m = 0; m < printed.size(); ++m) EXPECT_NEAR(report.avg_ranks[m], printed[m], 0.005) << table.metrics[m];
  EXPECT_NEAR(report.avg_ranks[6], 21.0 / 11.0, 1e-12);
  const auto best = std::min_element(report.avg_ranks.begin(), report.avg_ranks.end()) - report.avg_ranks.begin();
  EXPECT_EQ(table.metrics[static_cast<std::size_t>(best)], "Ours");
  EXPECT_TRUE(has_note(report, "SFDA missing for Breast: assigned rank 7"));
  EXPECT_TRUE(has_note(report, "Pneumonia/NLEEP: computed rank"));
}

TEST(DatasetTable, FriedmanAndCriticalDifference) {
  const auto report = evaluate_tau_table(load_tau_table(test::fixture("tau_dataset_transfer.csv")), {});
  ASSERT_TRUE(report.friedman_chi2 && report.friedman_p && report.critical_difference);
  EXPECT_NEAR(*report.friedman_chi2, 20.8, 0.3);
  EXPECT_GE(*report.friedman_p, 0.001);
  EXPECT_LE(*report.friedman_p, 0.005);
  EXPECT_NEAR(*report.critical_difference, 2.716, 0.001);
  EXPECT_NEAR(critical_difference_q(7, 11, 3.031), 2.792, 0.001);
}

TEST(DatasetTable, AverageTieModeChangesOnlyTiedRows) {
  const auto table = load_tau_table(test::fixture("tau_dataset_transfer.csv"));
  const auto ord = evaluate_tau_table(table, {});
  RankConfig cfg;
  cfg.tie_mode = TieMode::average;
  const auto avg = evaluate_tau_table(table, cfg);
  EXPECT_EQ(avg.tie_mode, "average");
  EXPECT_EQ(avg.ranks[0][1], 4.5);
  EXPECT_EQ(avg.ranks[0][2], 4.5);
  EXPECT_EQ(avg.ranks[1], ord.ranks[1]);
}

TEST(ModelTable, RecomputedAveragesAndDiscrepancyNotes) {
  const auto table = load_tau_table(test::fixture("tau_model_transfer.csv"));
  const auto report = evaluate_tau_table(table, {});
  const std::vector<double> computed{4.91, 4.09, 4.09, 4.73, 2.91, 4.45, 2.82};
  for (std::size_t m = 0; m < computed.size(); ++m) EXPECT_NEAR(report.avg_ranks[m], computed[m], 0.005) << table.metrics[m];
  EXPECT_TRUE(has_note(report, "Tissue/SFDA: computed rank"));
  EXPECT_NEAR(*report.friedman_chi2, 9.818, 0.001);
  EXPECT_NEAR(*report.friedman_p, 0.1325, 0.0005);
}

TEST(Friedman, PerfectAgreementIsHighlySignificant) {
  std::vector<std::vector<double>> m(11, std::vector<double>{1, 2, 3, 4, 5, 6, 7});
  const auto f = friedman_test(m);
  EXPECT_NEAR(f.chi2, 66.0, 1e-9);
  EXPECT_LT(f.p, 1e-6);
}

TEST(Friedman, NullRejectionRateNearAlpha) {
  Rng rng(6);
  int rejected = 0;
  for (int trial = 0; trial < 200; ++trial) rejected += friedman_test(random_rank_matrix(rng, 11, 7)).p < 0.05;
  EXPECT_NEAR(rejected / 200.0, 0.05, 0.03);
}

TEST(Friedman, InvariantUnderTargetOrder) {
  Rng rng(7);
  auto m = random_rank_matrix(rng, 9, 5);
  const auto a = friedman_test(m);
  std::reverse(m.begin(), m.end());
  std::swap(m[1], m[4]);
  const auto b = friedman_test(m);
  EXPECT_NEAR(a.chi2, b.chi2, 1e-12);
  EXPECT_NEAR(a.p, b.p, 1e-15);
}

TEST(Friedman, Errors) {
  EXPECT_EQ(code_of([] { friedman_test({{1, 2, 3}}); }), Errc::DegenerateRanks);
  EXPECT_EQ(code_of([] { friedman_test({{1, 2}, {2, 1}}); }), Errc::DegenerateRanks);
  EXPECT_EQ(code_of([] { friedman_test({{1, 2, 3}, {1, 1, 3}}); }), Errc::DegenerateRanks);
}

TEST(CriticalDifference, ShrinksWithMoreTargetsAndNeedsAConstant) {
  const auto& q = nemenyi_q_table();
  EXPECT_GT(critical_difference(7, 11, 0.05, q), critical_difference(7, 44, 0.05, q));
  EXPECT_NEAR(critical_difference(7, 44, 0.05, q) * 2, critical_difference(7, 11, 0.05, q), 1e-12);
  EXPECT_GT(critical_difference(7, 11, 0.05, q), critical_difference(7, 11, 0.10, q));
  EXPECT_EQ(code_of([&] { critical_difference(11, 11, 0.05, q); }), Errc::MissingQValue);
  EXPECT_EQ(code_of([&] { critical_difference(7, 11, 0.01, q); }), Errc::MissingQValue);
}

TEST(Evaluate, ScoresEqualToTruthGiveTauOne) {
  const auto truth = load_ground_truth(test::fixture("source_ground_truth.csv"));
  std::vector<ScoreTable> tables;
  for (std::size_t c = 0; c < truth.columns.size(); ++c) {
    for (const std::string metric : {"copy", "negated", "flat"}) {
      ScoreTable s = table(metric, truth.columns[c]);
      for (std::size_t r = 0; r < truth.rows.size(); ++r) {
        const auto v = truth.at(r, c);
        if (!v) continue;
        s.scores[truth.rows[r]] = metric == "copy" ? *v : metric == "negated" ? -*v : static_cast<double>(r % 2);
      }
      tables.push_back(s);
    }
  }
  const auto report = evaluate(tables, truth, {});
  ASSERT_EQ(report.targets, truth.columns);
  // Tied truth cells count in the denominator only, so a copy scores 1 exactly
  // on columns without ties.
  for (std::size_t t = 0; t < report.targets.size(); ++t) {
    std::vector<double> col;
    for (std::size_t r = 0; r < truth.rows.size(); ++r) {
      if (auto v = truth.at(r, t)) col.push_back(*v);
    }
    EXPECT_DOUBLE_EQ(*report.tau[t][0], weighted_kendall_tau(col, col));
    EXPECT_DOUBLE_EQ(*report.tau[t][1], -*report.tau[t][0]);
    EXPECT_GT(*report.tau[t][0], 0.98);
  }
  EXPECT_EQ(report.avg_ranks[0], 1.0);
  EXPECT_EQ(report.avg_ranks[1], 3.0);
}

TEST(Evaluate, MissingMetricGetsLowestRankWithNote) {
  const auto truth = load_ground_truth(test::fixture("architecture_ground_truth.csv"));
  std::vector<ScoreTable> tables;
  for (std::size_t c = 0; c < truth.columns.size(); ++c) {
    for (const std::string metric : {"a", "b", "c"}) {
      if (metric == "b" && c == 0) continue;
      ScoreTable s = table(metric, truth.columns[c]);
      for (std::size_t r = 0; r < truth.rows.size(); ++r) s.scores[truth.rows[r]] = *truth.at(r, c) * (metric == "c" ? -1 : 1);
      tables.push_back(s);
    }
  }
  const auto report = evaluate(tables, truth, {});
  // Metric order is order of first appearance.
  ASSERT_EQ(report.metrics, (std::vector<std::string>{"a", "c", "b"}));
  EXPECT_FALSE(report.tau[0][2].has_value());
  EXPECT_EQ(report.ranks[0][2], 3.0);
  EXPECT_EQ(report.ranks[1], (std::vector<double>{1, 3, 2}));  // b ties a, column order decides
  EXPECT_TRUE(has_note(report, "b has no scores for " + truth.columns[0]));
}

TEST(Evaluate, IdentifierMismatchesAreReported) {
  const auto truth = load_ground_truth(test::fixture("architecture_ground_truth.csv"));
  ScoreTable s = table("m", truth.columns[0]);
  for (const auto& r : truth.rows) s.scores[r] = 1.0;
  s.scores["NotAModel"] = 2.0;
  try {
    evaluate({s}, truth, {});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::IdMismatch);
    EXPECT_NE(std::string(e.what()).find("NotAModel"), std::string::npos);
  }
  ScoreTable t = table("m", "Nowhere");
  EXPECT_EQ(code_of([&] { evaluate({t}, truth, {}); }), Errc::IdMismatch);
  ScoreTable partial = table("m", truth.columns[0]);
  partial.scores[truth.rows[0]] = 1.0;
  EXPECT_EQ(code_of([&] { evaluate({partial}, truth, {}); }), Errc::IdMismatch);
}

TEST(TauTable, ParsesCellsAndRejectsGarbage) {
  std::istringstream ok("Target,A,B,C\nX,0.5 (1),- (3),0.1 (2)\nY,,0.2,-0.3 (3)\n");
  const auto t = parse_tau_table(ok);
  EXPECT_EQ(t.metrics, (std::vector<std::string>{"A", "B", "C"}));
  EXPECT_FALSE(t.tau[0][1]);
  EXPECT_EQ(*t.published_rank[0][1], 3.0);
  EXPECT_FALSE(t.tau[1][0]);
  EXPECT_EQ(*t.tau[1][1], 0.2);
  EXPECT_FALSE(t.published_rank[1][1]);
  std::istringstream bad("Target,A\nX,zero\n");
  EXPECT_THROW(parse_tau_table(bad), Error);
}
