#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace tfr {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Labels = std::vector<int>;

/// Labeled target dataset in embedding form. Rows of `embeddings` are samples.
struct TargetSet {
  std::string name;
  Matrix embeddings;  // n x D
  Labels labels;      // n entries in [0, num_classes)
  int num_classes = 0;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t dim() const noexcept { return static_cast<std::size_t>(embeddings.cols()); }
};

/// Throws tfr::Error naming the violated invariant.
void validate(const TargetSet& target);

struct GradNorms {
  double conv1 = 0.0;
  double conv2 = 0.0;

  friend bool operator==(const GradNorms&, const GradNorms&) = default;
};

/// One candidate source model's exported artifacts for a given target set.
struct CandidateBundle {
  std::string model_id;
  std::string source_dataset;
  std::string architecture;
  Matrix embeddings;                   // n x D
  std::optional<Matrix> source_probs;  // n x Z, rows on the simplex
  std::optional<GradNorms> grad_norms;
  std::map<std::string, std::string> provenance;

  // Only set when the file stores a labeled target set.
  std::optional<Labels> labels;
  std::optional<int> num_classes;
};

void validate(const CandidateBundle& bundle);

bool bitwise_equal(const CandidateBundle& a, const CandidateBundle& b);

// Binary bundle file plus `<path>.meta.json` sidecar; see docs/formats.md.
void save_bundle(const CandidateBundle& bundle, const std::filesystem::path& path);
CandidateBundle load_bundle(const std::filesystem::path& path);

void save_target_set(const TargetSet& target, const std::filesystem::path& path);
TargetSet load_target_set(const std::filesystem::path& path);

std::filesystem::path sidecar_path(const std::filesystem::path& bundle_path);

enum class Direction { in_domain, cross_domain };

std::string to_string(Direction d);
Direction direction_from_string(const std::string& s);

struct ScoreComponents {
  double s_lp = 0.0;
  std::optional<double> s_fu;
  double s_lp_norm = 0.0;
  std::optional<double> s_fu_norm;

  friend bool operator==(const ScoreComponents&, const ScoreComponents&) = default;
};

/// metric -> candidate -> score for one target.
struct ScoreTable {
  std::string metric_name;
  std::string target;
  Direction mode = Direction::in_domain;
  std::map<std::string, double> scores;
  std::optional<std::map<std::string, ScoreComponents>> components;

  friend bool operator==(const ScoreTable&, const ScoreTable&) = default;
};

/// Row/column labeled matrix with optional cells, as read from CSV.
struct LabeledTable {
  std::string corner;  // header of the identifier column
  std::vector<std::string> rows;
  std::vector<std::string> columns;
  std::vector<std::optional<double>> values;  // row-major

  std::optional<double> at(std::size_t r, std::size_t c) const { return values[r * columns.size() + c]; }
  std::optional<std::size_t> row_index(const std::string& id) const;
  std::optional<std::size_t> column_index(const std::string& id) const;
};

/// Source x target fine-tuned test AUC x 100. Missing cells are self-source.
struct GroundTruthTable : LabeledTable {
  std::optional<double> value(const std::string& row, const std::string& column) const;
  std::size_t missing_count() const;
};

GroundTruthTable parse_ground_truth(std::istream& in);
GroundTruthTable load_ground_truth(const std::filesystem::path& path);
void write_ground_truth(const GroundTruthTable& table, std::ostream& out);
void validate(const GroundTruthTable& table);

/// Output of the ranking evaluation. Per-target vectors follow `metrics` order.
struct EvalReport {
  std::vector<std::string> targets;
  std::vector<std::string> metrics;
  std::vector<std::vector<std::optional<double>>> tau;  // [target][metric]
  std::vector<std::vector<double>> ranks;               // [target][metric]
  std::vector<double> avg_ranks;                        // [metric]
  std::optional<double> friedman_chi2;
  std::optional<double> friedman_p;
  std::optional<double> critical_difference;
  double alpha = 0.05;
  std::string tie_mode;
  std::vector<std::string> notes;
  std::string config_json = "{}";  // echo of the run configuration
};

void validate(const EvalReport& report);

}  // namespace tfr
