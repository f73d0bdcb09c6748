#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "tfr/data_model.hpp"
#include "tfr/transfer_score.hpp"

// A two-conv micro CNN with hand-written backprop, synthetic image data, and
// a fine-tuning oracle, so the whole scoring pipeline runs without an ML
// framework.
namespace tfr::micro {

inline constexpr int kChannels = 3;
inline constexpr int kSide = 32;
inline constexpr int kPixels = kChannels * kSide * kSide;
inline constexpr int kConv1 = 8;
inline constexpr int kConv2 = 16;
inline constexpr int kEmbedDim = kConv2;

// n x 3072, row layout channel-major then row then column.
using Images = Matrix;

struct MicroNet {
  Matrix conv1_w;  // 8 x 27; column = in_channel * 9 + ky * 3 + kx
  Vector conv1_b;  // 8
  Matrix conv2_w;  // 16 x 72
  Vector conv2_b;  // 16
  Matrix head_w;   // Z x 16; 0 x 16 when headless
  Vector head_b;   // Z

  bool has_head() const { return head_w.rows() > 0; }
  int outputs() const { return static_cast<int>(head_w.rows()); }
};

/// He-normal weights, zero biases; head of `outputs` classes (0 for none).
MicroNet init_net(int outputs, std::uint64_t seed);
MicroNet zero_net(int outputs);
/// Replaces the head with a freshly initialized one.
void reset_head(MicroNet& net, int outputs, std::uint64_t seed);
void validate(const MicroNet& net);
/// FNV-1a over the parameter bytes.
std::uint64_t fingerprint(const MicroNet& net);

struct ActivationCache {
  std::uint64_t net_fingerprint = 0;
  Images images;
  std::vector<Matrix> pre1;                    // 8 x 1024 per image
  std::vector<std::vector<int>> pool_argmax;   // 8 * 256 per image, index into 1024
  std::vector<Matrix> pooled;                  // 8 x 256
  std::vector<Matrix> pre2;                    // 16 x 256
  Matrix embeddings;                           // n x 16
};

struct ForwardResult {
  Matrix embeddings;              // n x 16
  std::optional<Matrix> logits;   // n x Z when the head is present
  ActivationCache cache;
};

ForwardResult forward(const MicroNet& net, const Images& images);

/// Embeddings only, without keeping a cache.
Matrix embed(const MicroNet& net, const Images& images);

struct Gradients {
  Matrix conv1_w;
  Vector conv1_b;
  Matrix conv2_w;
  Vector conv2_b;
  Matrix head_w;
  Vector head_b;
};

/// Gradients of a loss whose derivative w.r.t. the embeddings is `d_emb` and,
/// optionally, w.r.t. the logits is `d_logits`. Throws StaleCache if the net
/// changed since `cache` was made or the batch size differs.
Gradients backward(const MicroNet& net, const ActivationCache& cache, const Matrix& d_emb,
                   const Matrix* d_logits = nullptr);

Gradients backward_from_embedding_grads(const MicroNet& net, const ActivationCache& cache, const Matrix& d_emb);

struct LossAndGrads {
  double loss = 0.0;
  Gradients grads;
};

/// Mean softmax cross-entropy over the batch.
double cross_entropy(const Matrix& logits, const Labels& y);
LossAndGrads cross_entropy_loss_and_grads(const MicroNet& net, const Images& images, const Labels& y);

/// Triplet loss on the embeddings, backpropagated to the conv layers.
LossAndGrads triplet_loss_and_grads(const MicroNet& net, const Images& images,
                                    const std::vector<score::Triplet>& triplets, double margin,
                                    score::Reduction reduction = score::Reduction::mean_all);

// ---------------------------------------------------------------- data

enum class Family { texture, blob, mixed };

std::string to_string(Family f);
Family family_from_string(const std::string& s);

struct SyntheticSpec {
  std::string name = "synthetic";
  Family family = Family::texture;
  int num_classes = 3;
  int samples = 120;
  double noise = 0.3;
  double jitter = 1.0;                 // scales within-class variation
  std::uint64_t class_seed = 1;       // class prototypes; shared seeds give related tasks
  std::uint64_t sample_seed = 1;
};

nlohmann::ordered_json to_json(const SyntheticSpec& spec);
SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j);

struct SyntheticDataset {
  SyntheticSpec spec;
  Images images;
  Labels labels;  // sample i has label i % num_classes
  int num_classes = 0;

  std::size_t size() const { return labels.size(); }
};

SyntheticDataset generate(const SyntheticSpec& spec);

/// Rows `idx` of a dataset.
SyntheticDataset subset(const SyntheticDataset& data, const std::vector<std::size_t>& idx);

// ---------------------------------------------------------------- training

struct TrainConfig {
  int epochs = 10;
  double lr = 1e-2;
  double momentum = 0.9;
  int batch_size = 16;
  std::uint64_t seed = 0;
};

struct TrainResult {
  MicroNet net;
  std::vector<double> loss_trace;  // full-data loss before training, then mean minibatch loss per epoch
};

/// Minibatch SGD with momentum on cross-entropy. `on_epoch(epoch, net)` is
/// called after every epoch when set.
TrainResult train(const MicroNet& net, const SyntheticDataset& data, const TrainConfig& cfg,
                  const std::function<void(int, const MicroNet&)>& on_epoch = {});

double accuracy(const MicroNet& net, const SyntheticDataset& data);

/// Binary AUC by Mann-Whitney U with half credit for ties.
double binary_auc(const std::vector<double>& scores, const std::vector<bool>& positive);

/// One-vs-rest macro AUC from n x C class scores.
double macro_auc(const Matrix& scores, const Labels& y, int num_classes);

struct SplitSpec {
  double train = 0.5;
  double val = 0.2;  // remainder is test
};

/// Per-class stratified split in sample order.
struct Split {
  std::vector<std::size_t> train, val, test;
};
Split stratified_split(const Labels& y, int num_classes, const SplitSpec& spec);

struct FineTuneGrid {
  std::vector<double> lrs{1e-1, 1e-2, 1e-3};
  std::vector<int> epochs{2, 4};
  double momentum = 0.9;
  int batch_size = 16;
};

struct FineTuneResult {
  double auc = 0.0;
  double lr = 0.0;
  int epochs = 0;
  double val_loss = 0.0;
};

/// Full fine-tuning from `source` with a fresh head, selected on validation
/// loss over the grid; returns macro test AUC of the selected run.
FineTuneResult fine_tune_auc(const MicroNet& source, const SyntheticDataset& target, const SplitSpec& split,
                             const FineTuneGrid& grid, std::uint64_t seed);

// ---------------------------------------------------------------- zoo

struct SourceSpec {
  std::string name;
  std::optional<SyntheticSpec> data;  // empty: random initialization, no pre-training
};

struct ZooSpec {
  std::vector<SourceSpec> sources;
  std::vector<SyntheticSpec> targets;
  TrainConfig pretrain{.epochs = 8, .lr = 1e-2};
  FineTuneGrid grid;
  SplitSpec split;
  score::TripletConfig triplet;
  int threads = 1;
};

/// Five sources and one or three targets; see docs/formats.md for the presets.
ZooSpec default_zoo_spec(int num_targets = 1);

nlohmann::ordered_json to_json(const ZooSpec& spec);
/// Keys present in `j` replace the corresponding parts of `base`.
ZooSpec zoo_spec_from_json(const nlohmann::json& j, const ZooSpec& base);

struct ZooTarget {
  SyntheticDataset data;
  TargetSet target_set;  // embeddings from an untrained reference net, labels from data
  std::vector<CandidateBundle> bundles;  // one per source, in source order
};

struct MicroZoo {
  std::vector<ZooTarget> targets;
  GroundTruthTable ground_truth;  // sources x targets, AUC x 100
};

/// Embeddings, head probabilities and triplet gradient norms of `net` on the data.
CandidateBundle extract_bundle(const MicroNet& net, const SyntheticDataset& data, const score::TripletConfig& triplet,
                               const std::string& model_id, const std::string& source_dataset);

MicroZoo make_micro_zoo(const ZooSpec& spec, std::uint64_t seed);

}  // namespace tfr::micro
