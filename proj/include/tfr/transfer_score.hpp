#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tfr/data_model.hpp"
#include "tfr/nca.hpp"

namespace tfr::score {

struct KnnConfig {
  int k = 5;
};

enum class Reduction { mean_all, mean_nonzero };

struct TripletConfig {
  double margin = 0.05;
  int triplets_per_anchor = 1;
  std::uint64_t seed = 0;
  Reduction reduction = Reduction::mean_all;
};

enum class Variant { product, sum };

struct CombineMode {
  Variant variant = Variant::product;
  Direction direction = Direction::in_domain;
};

// Fields left empty fall back to NcaConfig::defaults_for(n, D, C) of each bundle.
struct NcaOverrides {
  std::optional<int> out_dim;
  std::optional<double> l2_penalty;
  std::optional<int> max_iters;
  std::optional<double> step_size;
  std::optional<double> tol;

  nca::NcaConfig resolve(std::size_t n, std::size_t dim, int num_classes) const;
};

struct ScoreConfig {
  NcaOverrides nca;
  KnnConfig knn;
  CombineMode mode;
  int threads = 1;
};

struct Triplet {
  std::size_t anchor = 0;
  std::size_t positive = 0;
  std::size_t negative = 0;

  friend bool operator==(const Triplet&, const Triplet&) = default;
};

std::string to_string(Reduction r);
Reduction reduction_from_string(const std::string& s);
std::string to_string(Variant v);
Variant variant_from_string(const std::string& s);

/// Indices of the k nearest other rows of `xp` (Euclidean), nearest first;
/// equal distances are ordered by index.
std::vector<std::vector<std::size_t>> knn_neighbors(const Matrix& xp, int k);

/// Leave-one-out fraction of each point's k nearest neighbors sharing its label.
Vector knn_label_probability(const Matrix& xp, const Labels& y, const KnnConfig& cfg);

/// NCA fit on the bundle embeddings, then the sum of k-NN label probabilities.
double s_lp(const TargetSet& target, const CandidateBundle& bundle, const NcaOverrides& nca_cfg = {},
            const KnnConfig& knn_cfg = {});

/// Anchors in ascending index order, each used triplets_per_anchor times.
/// Positive: index(|class| - 1) over the anchor's class members without the
/// anchor. Negative: index(n - |class|) over all non-members. Both lists are in
/// ascending sample order and draws come from one Rng(seed) stream.
std::vector<Triplet> sample_triplets(const Labels& y, const TripletConfig& cfg);

struct TripletLoss {
  double loss = 0.0;
  Matrix grad;  // n x D, d loss / d embeddings
  std::size_t active = 0;
};

TripletLoss triplet_loss_and_embedding_grads(const Matrix& embeddings, const std::vector<Triplet>& triplets,
                                             double margin, Reduction reduction = Reduction::mean_all);

/// ||grad conv2|| / ||grad conv1||.
double s_fu(double grad_norm_conv1, double grad_norm_conv2);

std::map<std::string, double> minmax_normalize(const std::map<std::string, double>& values, Direction direction);

struct RawScore {
  std::string model_id;
  double s_lp = 0.0;
  std::optional<double> s_fu;
};

/// S_LP and S_FU for every bundle; runs bundles on up to cfg.threads threads.
std::vector<RawScore> raw_scores(const TargetSet& target, const std::vector<CandidateBundle>& bundles,
                                 const ScoreConfig& cfg);

/// Pool-normalizes and combines. Candidates without S_FU score their
/// normalized S_LP alone.
ScoreTable combine(const std::string& target_name, const std::vector<RawScore>& raw, const CombineMode& mode,
                   const std::string& metric_name = "ours");

/// Normalized S_LP only (the feature-quality ablation).
ScoreTable lp_only(const std::string& target_name, const std::vector<RawScore>& raw, Direction direction,
                   const std::string& metric_name = "ours-lp");

ScoreTable combined_score(const TargetSet& target, const std::vector<CandidateBundle>& bundles,
                          const ScoreConfig& cfg);

/// Highest score; ties go to the lexicographically first id.
std::string argmax_model(const ScoreTable& table);

}  // namespace tfr::score
