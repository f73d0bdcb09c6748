#include <gtest/gtest.h>

#include <cstdlib>
#include <sstream>

#include "support.hpp"
#include "tfr/cli.hpp"
#include "tfr/error.hpp"
#include "tfr/json_io.hpp"

using namespace tfr;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
  std::string err;
};

Run tfr_run(std::vector<std::string> args) {
  std::ostringstream out, err;
  Run r;
  r.code = cli::run(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

bool contains(const std::string& hay, const std::string& needle) { return hay.find(needle) != std::string::npos; }

// Four sources and one 60-sample target with a single fine-tuning setting.
const char* kSmallZoo = R"({
  "targets": 1,
  "zoo": {
    "sources": [
      {"name": "blob-near", "data": {"name": "blob-b", "family": "blob", "num_classes": 3, "samples": 45, "noise": 0.8, "jitter": 1.0, "class_seed": 22, "sample_seed": 1}},
      {"name": "texture-far", "data": {"name": "texture-d", "family": "texture", "num_classes": 3, "samples": 45, "noise": 0.8, "jitter": 1.0, "class_seed": 44, "sample_seed": 2}},
      {"name": "mixed", "data": {"name": "mixed-c", "family": "mixed", "num_classes": 3, "samples": 45, "noise": 0.8, "jitter": 1.0, "class_seed": 33, "sample_seed": 3}},
      {"name": "random-init", "data": null}
    ],
    "targets": [
      {"name": "blob-small", "family": "blob", "num_classes": 3, "samples": 60, "noise": 1.0, "jitter": 1.0, "class_seed": 22, "sample_seed": 9}
    ],
    "pretrain": {"epochs": 1},
    "fine_tune": {"lrs": [0.01], "epochs": [1]}
  }
})";

class SmallZoo : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new test::TempDir("cli_zoo");
    std::ofstream(*dir_ / "zoo.json") << kSmallZoo;
    const auto r = tfr_run({"-q", "synth", "-c", (*dir_ / "zoo.json").string(), "-o", (*dir_ / "zoo").string(), "--seed", "3"});
    ASSERT_EQ(r.code, 0) << r.err;
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }
  static fs::path zoo() { return *dir_ / "zoo"; }
  static fs::path work(const std::string& name) { return *dir_ / name; }
  static fs::path target() { return zoo() / "blob-small" / "target.tfrb"; }
  static fs::path candidates() { return zoo() / "blob-small" / "candidates"; }

  static test::TempDir* dir_;
};
test::TempDir* SmallZoo::dir_ = nullptr;

}  // namespace

// ---------------------------------------------------------------- report on fixtures

TEST(CliReport, SourceFixtureQueries) {
  const auto r = tfr_run({"report", "--truth", test::fixture("source_ground_truth.csv").string(), "--compare", "Breast", "OrganS"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(contains(r.out, "best source for OCT: RadImageNet (96.93)")) << r.out;
  EXPECT_TRUE(contains(r.out, "best source for Blood: ImageNet (99.85)")) << r.out;
  EXPECT_TRUE(contains(r.out, "Breast vs OrganS excluding self targets: Breast wins 7 of 9")) << r.out;
}

TEST(CliReport, ArchitectureFixtureAndCsv) {
  const auto r = tfr_run({"report", "--truth", test::fixture("architecture_ground_truth.csv").string(), "--format", "csv"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(contains(r.out, "target,best_source,auc\n"));
  EXPECT_TRUE(contains(r.out, "Derma,ConvNeXt,92.93\n")) << r.out;
  const auto text = tfr_run({"report", "--truth", test::fixture("architecture_ground_truth.csv").string()});
  EXPECT_TRUE(contains(text.out, "best source for Derma: ConvNeXt (92.93)"));
}

// Self cells are blank in the fixture, so including them leaves the count alone.
TEST(CliReport, IncludeSelfDropsTheExclusionLabel) {
  const auto r = tfr_run({"report", "--truth", test::fixture("source_ground_truth.csv").string(), "--compare", "Breast", "OrganS",
                          "--include-self"});
  ASSERT_EQ(r.code, 0);
  EXPECT_TRUE(contains(r.out, "Breast vs OrganS: Breast wins 7 of 9")) << r.out;
  EXPECT_EQ(tfr_run({"report", "--truth", test::fixture("source_ground_truth.csv").string(), "--compare", "Breast", "Nope"}).code, 2);
}

// ---------------------------------------------------------------- eval

TEST(CliEval, TauTableFixture) {
  test::TempDir dir("cli_eval");
  const auto out = dir / "report.json";
  const auto r = tfr_run({"eval", "--tau-table", test::fixture("tau_dataset_transfer.csv").string(), "-o", out.string(),
                          "--csv-out", (dir / "tau.csv").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(contains(r.out, "Ours=1.91")) << r.out;
  EXPECT_TRUE(contains(r.out, "Friedman chi2 = 20.766")) << r.out;
  EXPECT_TRUE(contains(r.out, "critical difference = 2.716")) << r.out;
  const auto report = eval_report_from_json(nlohmann::json::parse(test::slurp(out)));
  validate(report);
  EXPECT_EQ(report.targets.size(), 11u);
  EXPECT_TRUE(contains(test::slurp(dir / "tau.csv"), "Avg. rank"));

  const auto q = tfr_run({"eval", "--tau-table", test::fixture("tau_dataset_transfer.csv").string(), "-o", out.string(), "--q", "3.031"});
  EXPECT_TRUE(contains(q.out, "critical difference = 2.792")) << q.out;

  const auto rep = tfr_run({"report", "--report", out.string()});
  ASSERT_EQ(rep.code, 0) << rep.err;
  EXPECT_TRUE(contains(rep.out, "Avg. rank"));
  EXPECT_TRUE(contains(rep.out, "critical difference = 2.792; within CD of Ours")) << rep.out;
}

TEST(CliEval, RankingTruthAgainstItself) {
  test::TempDir dir("cli_self");
  const auto truth = load_ground_truth(test::fixture("architecture_ground_truth.csv"));
  for (std::size_t c = 0; c < truth.columns.size(); ++c) {
    for (const std::string metric : {"copy", "flipped", "partial"}) {
      if (metric == "partial" && c == 0) continue;
      ScoreTable s;
      s.metric_name = metric;
      s.target = truth.columns[c];
      for (std::size_t r = 0; r < truth.rows.size(); ++r) s.scores[truth.rows[r]] = (metric == "flipped" ? -1 : 1) * *truth.at(r, c);
      // Directories are searched recursively.
      const fs::path sub = c % 2 ? dir / "nested" : dir.path();
      fs::create_directories(sub);
      std::ofstream(sub / ("scores_" + truth.columns[c] + "_" + metric + ".json")) << to_json(s).dump();
    }
  }
  std::ofstream(dir / "unrelated.json") << "{}";
  const auto r = tfr_run({"eval", "--scores", dir.path().string(), "--truth", test::fixture("architecture_ground_truth.csv").string(),
                          "-o", (dir / "eval.json").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto report = eval_report_from_json(nlohmann::json::parse(test::slurp(dir / "eval.json")));
  const auto copy = std::find(report.metrics.begin(), report.metrics.end(), "copy") - report.metrics.begin();
  EXPECT_EQ(report.avg_ranks[static_cast<std::size_t>(copy)], 1.0);
  EXPECT_TRUE(contains(r.out, "note: partial has no scores for " + truth.columns[0])) << r.out;
}

// ---------------------------------------------------------------- synth + score

TEST_F(SmallZoo, SynthWritesLayoutAndVerifiableManifest) {
  EXPECT_TRUE(fs::exists(target()));
  EXPECT_TRUE(fs::exists(zoo() / "ground_truth.csv"));
  EXPECT_TRUE(fs::exists(zoo() / "blob-small" / "dataset.json"));
  for (const auto* id : {"blob-near", "texture-far", "mixed", "random-init"}) EXPECT_TRUE(fs::exists(candidates() / (std::string(id) + ".tfrb")));
  const auto manifest = nlohmann::json::parse(test::slurp(zoo() / "manifest.json"));
  EXPECT_EQ(manifest.at("schema"), "tfr.manifest");
  EXPECT_EQ(manifest.at("seed"), 3);
  for (const auto& [rel, hash] : manifest.at("files").items()) EXPECT_EQ(cli::sha256_hex(test::slurp(zoo() / rel)), hash) << rel;
  const auto v = tfr_run({"validate", (zoo() / "manifest.json").string(), target().string(), (zoo() / "ground_truth.csv").string()});
  EXPECT_EQ(v.code, 0) << v.err;
  EXPECT_TRUE(contains(v.out, "files verified"));
}

TEST_F(SmallZoo, SynthIsByteReproducible) {
  const auto again = work("again");
  const auto r = tfr_run({"-q", "synth", "-c", work("zoo.json").string(), "-o", again.string(), "--seed", "3"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto a = nlohmann::json::parse(test::slurp(zoo() / "manifest.json"));
  const auto b = nlohmann::json::parse(test::slurp(again / "manifest.json"));
  EXPECT_EQ(a.at("files"), b.at("files"));
  EXPECT_EQ(a.at("zoo"), b.at("zoo"));
}

TEST_F(SmallZoo, ScoreWritesAllMetricsWithComponents) {
  const auto out = work("scores");
  std::vector<std::string> args{"-q", "score", "--target", target().string(), "--candidates"};
  for (const auto* id : {"blob-near", "texture-far", "mixed"}) args.push_back((candidates() / (std::string(id) + ".tfrb")).string());
  args.insert(args.end(), {"--metrics", "ours", "ours-sum", "ours-lp", "leep", "nleep", "logme", "parc", "-o", out.string(), "--seed", "1"});
  const auto r = tfr_run(args);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(contains(r.out, "best by ours for blob-small: ")) << r.out;
  for (const auto* m : {"ours", "ours-sum", "ours-lp", "leep", "nleep", "logme", "parc"}) {
    const auto t = score_table_from_json(nlohmann::json::parse(test::slurp(out / (std::string("scores_") + m + ".json"))));
    EXPECT_EQ(t.scores.size(), 3u) << m;
    EXPECT_EQ(t.target, "blob-small");
  }
  const auto ours = score_table_from_json(nlohmann::json::parse(test::slurp(out / "scores_ours.json")));
  ASSERT_TRUE(ours.components.has_value());
  for (const auto& [id, c] : *ours.components) {
    EXPECT_GT(c.s_lp, 0.0) << id;
    EXPECT_TRUE(c.s_fu.has_value()) << id;
    EXPECT_GE(c.s_lp_norm, 0.0);
    EXPECT_LE(c.s_lp_norm, 1.0);
  }
  const auto v = tfr_run({"validate", (out / "scores_ours.json").string()});
  EXPECT_EQ(v.code, 0) << v.err;
}

TEST_F(SmallZoo, ScoreIsByteReproducibleAcrossThreadCounts) {
  auto score_into = [&](const std::string& name, const std::string& threads) {
    const auto r = tfr_run({"-q", "score", "--target", target().string(), "--candidates", candidates().string(), "--metrics", "ours",
                            "nleep", "-o", work(name).string(), "--seed", "4", "--threads", threads});
    EXPECT_EQ(r.code, 0) << r.err;
  };
  score_into("s1", "1");
  score_into("s2", "1");
  score_into("s3", "3");
  for (const auto* f : {"scores_ours.json", "scores_nleep.json"}) {
    const auto a = test::slurp(work("s1") / f);
    EXPECT_FALSE(a.empty());
    EXPECT_EQ(a, test::slurp(work("s2") / f)) << f;
    EXPECT_EQ(a, test::slurp(work("s3") / f)) << f;
  }
}

TEST_F(SmallZoo, LeepWithoutProbabilitiesNamesTheBundle) {
  const auto r = tfr_run({"score", "--target", target().string(), "--candidates", candidates().string(), "--metrics", "leep", "-o",
                          work("leep").string()});
  EXPECT_EQ(r.code, 3);
  EXPECT_TRUE(contains(r.err, "random-init")) << r.err;
}

TEST_F(SmallZoo, ScoreNeedsTwoCandidates) {
  const auto r = tfr_run({"score", "--target", target().string(), "--candidates", (candidates() / "mixed.tfrb").string(), "-o",
                          work("one").string()});
  EXPECT_EQ(r.code, 3) << r.err;
}

TEST_F(SmallZoo, EvalOfSynthScoresAgainstSynthTruth) {
  const auto out = work("ev_scores");
  ASSERT_EQ(tfr_run({"-q", "score", "--target", target().string(), "--candidates", candidates().string(), "--metrics", "ours", "ours-lp",
                     "logme", "-o", out.string()})
                .code,
            0);
  const auto r = tfr_run({"eval", "--scores", out.string(), "--truth", (zoo() / "ground_truth.csv").string(), "-o",
                          (out / "report.json").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(contains(r.out, "average ranks:"));
  EXPECT_TRUE(contains(r.out, "Friedman test skipped")) << r.out;  // one target
}

// ---------------------------------------------------------------- argument and config handling

TEST(CliArgs, SynthSourceCountOutOfRange) {
  test::TempDir dir("cli_src");
  const auto r = tfr_run({"synth", "--sources", "2", "-o", dir.path().string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_TRUE(contains(r.err, "sources must be between 3 and 5")) << r.err;
}

TEST(CliArgs, UnknownKeysAndSubcommands) {
  EXPECT_EQ(tfr_run({"eval", "--set", "bogus.key=1"}).code, 2);
  EXPECT_EQ(tfr_run({"eval", "--set", "noequals"}).code, 2);
  EXPECT_EQ(tfr_run({}).code, 2);
  EXPECT_EQ(tfr_run({"frobnicate"}).code, 2);
  EXPECT_EQ(tfr_run({"--help"}).code, 0);
  EXPECT_THROW(cli::resolve_config("score", nlohmann::json{{"knn", {{"kk", 3}}}}), Error);
}

TEST(CliArgs, SetOverridesAreTypedAndLayered) {
  test::TempDir dir("cli_cfg");
  std::ofstream(dir / "c.json") << R"({"alpha": 0.10, "tau_table": "nope.csv"})";
  // Config file < flags < --set.
  const auto r = tfr_run({"eval", "-c", (dir / "c.json").string(), "--tau-table", test::fixture("tau_dataset_transfer.csv").string(),
                          "--set", "out=" + (dir / "r.json").string(), "--set", "tie_mode=average"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto report = eval_report_from_json(nlohmann::json::parse(test::slurp(dir / "r.json")));
  EXPECT_EQ(report.alpha, 0.10);
  EXPECT_EQ(report.tie_mode, "average");
  const auto cfg = nlohmann::json::parse(report.config_json);
  EXPECT_EQ(cfg.at("tie_mode"), "average");
}

TEST(CliArgs, SeedFallsBackToEnvironment) {
  ::setenv("TFR_SEED", "17", 1);
  EXPECT_EQ(cli::resolve_config("synth", nullptr).at("seed"), 17);
  EXPECT_EQ(cli::resolve_config("synth", nlohmann::json{{"seed", 2}}).at("seed"), 2);
  ::setenv("TFR_SEED", "x1", 1);
  EXPECT_THROW(cli::resolve_config("score", nullptr), Error);
  ::unsetenv("TFR_SEED");
  EXPECT_EQ(cli::resolve_config("score", nullptr).at("seed"), 0);
}

TEST(CliValidate, FixturesPassAndCorruptionFails) {
  const auto ok = tfr_run({"validate", test::fixture("source_ground_truth.csv").string(), test::fixture("tau_model_transfer.csv").string()});
  EXPECT_EQ(ok.code, 0) << ok.err;
  EXPECT_TRUE(contains(ok.out, "ground truth 15 x 11"));
  EXPECT_TRUE(contains(ok.out, "tau table 11 x 7"));
  test::TempDir dir("cli_bad");
  std::ofstream(dir / "bad.tfrb") << "not a bundle";
  EXPECT_EQ(tfr_run({"validate", (dir / "bad.tfrb").string()}).code, 2);
  EXPECT_EQ(tfr_run({"validate", (dir / "missing.csv").string()}).code, 2);
}

TEST(CliValidate, Sha256KnownAnswer) {
  EXPECT_EQ(cli::sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}
