#include "tfr/micronet.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <exception>
#include <numbers>
#include <set>
#include <thread>

#include "tfr/error.hpp"
#include "tfr/log.hpp"
#include "tfr/rng.hpp"
#include "tfr/stats.hpp"

namespace tfr::micro {

namespace {

constexpr int kArea1 = kSide * kSide;              // 1024
constexpr int kSide2 = kSide / 2;                  // 16
constexpr int kArea2 = kSide2 * kSide2;            // 256
constexpr int kTaps1 = kChannels * 9;              // 27
constexpr int kTaps2 = kConv1 * 9;                 // 72

// 3x3 patches with zero padding 1: cols(c * 9 + ky * 3 + kx, y * side + x).
void im2col(const double* in, int channels, int side, Matrix& cols) {
  const int area = side * side;
  cols.setZero(channels * 9, area);
  for (int c = 0; c < channels; ++c) {
    const double* plane = in + static_cast<std::ptrdiff_t>(c) * area;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        double* row = &cols(c * 9 + ky * 3 + kx, 0);
        const Eigen::Index stride = cols.rows();
        for (int y = 0; y < side; ++y) {
          const int sy = y + ky - 1;
          if (sy < 0 || sy >= side) continue;
          for (int x = 0; x < side; ++x) {
            const int sx = x + kx - 1;
            if (sx < 0 || sx >= side) continue;
            row[(y * side + x) * stride] = plane[sy * side + sx];
          }
        }
      }
    }
  }
}

void col2im(const Matrix& cols, int channels, int side, double* out) {
  const int area = side * side;
  std::fill(out, out + static_cast<std::ptrdiff_t>(channels) * area, 0.0);
  for (int c = 0; c < channels; ++c) {
    double* plane = out + static_cast<std::ptrdiff_t>(c) * area;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const int r = c * 9 + ky * 3 + kx;
        for (int y = 0; y < side; ++y) {
          const int sy = y + ky - 1;
          if (sy < 0 || sy >= side) continue;
          for (int x = 0; x < side; ++x) {
            const int sx = x + kx - 1;
            if (sx < 0 || sx >= side) continue;
            plane[sy * side + sx] += cols(r, y * side + x);
          }
        }
      }
    }
  }
}

void check_images(const Images& images) {
  if (images.cols() != kPixels) {
    throw Error(Errc::ShapeMismatch, "images must have " + std::to_string(kPixels) + " columns, got " +
                                         std::to_string(images.cols()));
  }
  if (images.rows() < 1) throw Error(Errc::ShapeMismatch, "empty image batch");
}

struct ImageActs {
  Matrix pre1;
  std::vector<int> argmax;
  Matrix pooled;
  Matrix pre2;
  Vector embedding;
};

ImageActs forward_one(const MicroNet& net, const double* image, Matrix& cols1, Matrix& cols2) {
  ImageActs a;
  im2col(image, kChannels, kSide, cols1);
  a.pre1 = net.conv1_w * cols1;
  a.pre1.colwise() += net.conv1_b;

  a.pooled.resize(kConv1, kArea2);
  a.argmax.resize(static_cast<std::size_t>(kConv1 * kArea2));
  for (int c = 0; c < kConv1; ++c) {
    for (int py = 0; py < kSide2; ++py) {
      for (int px = 0; px < kSide2; ++px) {
        int best = (2 * py) * kSide + 2 * px;
        double best_v = std::max(a.pre1(c, best), 0.0);
        for (int d = 1; d < 4; ++d) {
          const int idx = (2 * py + d / 2) * kSide + 2 * px + d % 2;
          const double v = std::max(a.pre1(c, idx), 0.0);
          if (v > best_v) {
            best_v = v;
            best = idx;
          }
        }
        a.pooled(c, py * kSide2 + px) = best_v;
        a.argmax[static_cast<std::size_t>(c * kArea2 + py * kSide2 + px)] = best;
      }
    }
  }

  // pooled is column-major 8 x 256, so channel planes are not contiguous; transpose first.
  const Matrix planes = a.pooled.transpose();  // 256 x 8, column c is plane c
  im2col(planes.data(), kConv1, kSide2, cols2);
  a.pre2 = net.conv2_w * cols2;
  a.pre2.colwise() += net.conv2_b;
  a.embedding = a.pre2.cwiseMax(0.0).rowwise().mean();
  return a;
}

Matrix softmax(const Matrix& logits) {
  Matrix p(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double m = logits.row(i).maxCoeff();
    p.row(i) = (logits.row(i).array() - m).exp();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

void fnv(std::uint64_t& h, const void* data, std::size_t bytes) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < bytes; ++i) {
    h ^= p[i];
    h *= 0x100000001B3ULL;
  }
}

template <typename M>
void fnv_matrix(std::uint64_t& h, const M& m) {
  const std::int64_t dims[2] = {static_cast<std::int64_t>(m.rows()), static_cast<std::int64_t>(m.cols())};
  fnv(h, dims, sizeof dims);
  fnv(h, m.data(), static_cast<std::size_t>(m.size()) * sizeof(double));
}

Gradients zero_grads(const MicroNet& net) {
  Gradients g;
  g.conv1_w = Matrix::Zero(net.conv1_w.rows(), net.conv1_w.cols());
  g.conv1_b = Vector::Zero(net.conv1_b.size());
  g.conv2_w = Matrix::Zero(net.conv2_w.rows(), net.conv2_w.cols());
  g.conv2_b = Vector::Zero(net.conv2_b.size());
  g.head_w = Matrix::Zero(net.head_w.rows(), net.head_w.cols());
  g.head_b = Vector::Zero(net.head_b.size());
  return g;
}

bool all_finite(const MicroNet& n) {
  return n.conv1_w.allFinite() && n.conv1_b.allFinite() && n.conv2_w.allFinite() && n.conv2_b.allFinite() &&
         n.head_w.allFinite() && n.head_b.allFinite();
}

Images rows_of(const Images& images, const std::vector<std::size_t>& idx) {
  Images out(static_cast<Eigen::Index>(idx.size()), images.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = images.row(static_cast<Eigen::Index>(idx[i]));
  return out;
}

Labels labels_of(const Labels& y, const std::vector<std::size_t>& idx) {
  Labels out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(y[i]);
  return out;
}

}  // namespace

// ---------------------------------------------------------------- network

MicroNet zero_net(int outputs) {
  if (outputs < 0) throw Error(Errc::InvariantViolation, "head size must be >= 0");
  MicroNet net;
  net.conv1_w = Matrix::Zero(kConv1, kTaps1);
  net.conv1_b = Vector::Zero(kConv1);
  net.conv2_w = Matrix::Zero(kConv2, kTaps2);
  net.conv2_b = Vector::Zero(kConv2);
  net.head_w = Matrix::Zero(outputs, kEmbedDim);
  net.head_b = Vector::Zero(outputs);
  return net;
}

MicroNet init_net(int outputs, std::uint64_t seed) {
  MicroNet net = zero_net(outputs);
  Rng rng(seed);
  const double s1 = std::sqrt(2.0 / kTaps1);
  const double s2 = std::sqrt(2.0 / kTaps2);
  for (Eigen::Index i = 0; i < net.conv1_w.size(); ++i) net.conv1_w.data()[i] = s1 * rng.normal();
  for (Eigen::Index i = 0; i < net.conv2_w.size(); ++i) net.conv2_w.data()[i] = s2 * rng.normal();
  reset_head(net, outputs, rng());
  return net;
}

void reset_head(MicroNet& net, int outputs, std::uint64_t seed) {
  if (outputs < 0) throw Error(Errc::InvariantViolation, "head size must be >= 0");
  Rng rng(seed);
  const double s = std::sqrt(1.0 / kEmbedDim);
  net.head_w.resize(outputs, kEmbedDim);
  for (Eigen::Index i = 0; i < net.head_w.size(); ++i) net.head_w.data()[i] = s * rng.normal();
  net.head_b = Vector::Zero(outputs);
}

void validate(const MicroNet& net) {
  if (net.conv1_w.rows() != kConv1 || net.conv1_w.cols() != kTaps1 || net.conv1_b.size() != kConv1 ||
      net.conv2_w.rows() != kConv2 || net.conv2_w.cols() != kTaps2 || net.conv2_b.size() != kConv2 ||
      net.head_w.cols() != kEmbedDim || net.head_b.size() != net.head_w.rows()) {
    throw Error(Errc::ShapeMismatch, "micro net parameters have the wrong shapes");
  }
  if (!all_finite(net)) throw Error(Errc::NonFinite, "micro net parameters are not finite");
}

std::uint64_t fingerprint(const MicroNet& net) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  fnv_matrix(h, net.conv1_w);
  fnv_matrix(h, net.conv1_b);
  fnv_matrix(h, net.conv2_w);
  fnv_matrix(h, net.conv2_b);
  fnv_matrix(h, net.head_w);
  fnv_matrix(h, net.head_b);
  return h;
}

ForwardResult forward(const MicroNet& net, const Images& images) {
  validate(net);
  check_images(images);
  const auto n = images.rows();
  ForwardResult out;
  auto& cache = out.cache;
  cache.net_fingerprint = fingerprint(net);
  cache.images = images;
  cache.pre1.reserve(static_cast<std::size_t>(n));
  cache.pool_argmax.reserve(static_cast<std::size_t>(n));
  cache.pooled.reserve(static_cast<std::size_t>(n));
  cache.pre2.reserve(static_cast<std::size_t>(n));
  out.embeddings.resize(n, kEmbedDim);

  // Row-major copy so each image is contiguous.
  const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rows = images;
  Matrix cols1;
  Matrix cols2;
  for (Eigen::Index i = 0; i < n; ++i) {
    auto a = forward_one(net, rows.row(i).data(), cols1, cols2);
    out.embeddings.row(i) = a.embedding.transpose();
    cache.pre1.push_back(std::move(a.pre1));
    cache.pool_argmax.push_back(std::move(a.argmax));
    cache.pooled.push_back(std::move(a.pooled));
    cache.pre2.push_back(std::move(a.pre2));
  }
  cache.embeddings = out.embeddings;
  if (net.has_head()) {
    Matrix logits = out.embeddings * net.head_w.transpose();
    logits.rowwise() += net.head_b.transpose();
    out.logits = std::move(logits);
  }
  return out;
}

Matrix embed(const MicroNet& net, const Images& images) {
  validate(net);
  check_images(images);
  const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rows = images;
  Matrix out(images.rows(), kEmbedDim);
  Matrix cols1;
  Matrix cols2;
  for (Eigen::Index i = 0; i < images.rows(); ++i) {
    out.row(i) = forward_one(net, rows.row(i).data(), cols1, cols2).embedding.transpose();
  }
  return out;
}

Gradients backward(const MicroNet& net, const ActivationCache& cache, const Matrix& d_emb, const Matrix* d_logits) {
  const auto n = cache.images.rows();
  if (fingerprint(net) != cache.net_fingerprint) {
    throw Error(Errc::StaleCache, "network parameters changed since the forward pass");
  }
  if (d_emb.rows() != n || d_emb.cols() != kEmbedDim) {
    throw Error(Errc::StaleCache, "embedding gradient is " + std::to_string(d_emb.rows()) + " x " +
                                      std::to_string(d_emb.cols()) + " but the cached batch has " + std::to_string(n) +
                                      " images");
  }
  Gradients g = zero_grads(net);
  Matrix d_total = d_emb;
  if (d_logits) {
    if (!net.has_head() || d_logits->rows() != n || d_logits->cols() != net.outputs()) {
      throw Error(Errc::ShapeMismatch, "logit gradient does not match the head");
    }
    g.head_w = d_logits->transpose() * cache.embeddings;
    g.head_b = d_logits->colwise().sum().transpose();
    d_total += *d_logits * net.head_w;
  }

  const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rows = cache.images;
  Matrix cols1;
  Matrix cols2;
  Matrix d_pre2(kConv2, kArea2);
  Matrix d_pooled_planes(kArea2, kConv1);
  Matrix d_pre1(kConv1, kArea1);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto idx = static_cast<std::size_t>(i);
    const Matrix& pre2 = cache.pre2[idx];
    for (int c = 0; c < kConv2; ++c) {
      const double gc = d_total(i, c) / kArea2;
      for (int p = 0; p < kArea2; ++p) d_pre2(c, p) = pre2(c, p) > 0.0 ? gc : 0.0;
    }
    const Matrix planes = cache.pooled[idx].transpose();
    im2col(planes.data(), kConv1, kSide2, cols2);
    g.conv2_w.noalias() += d_pre2 * cols2.transpose();
    g.conv2_b += d_pre2.rowwise().sum();

    const Matrix d_cols2 = net.conv2_w.transpose() * d_pre2;
    col2im(d_cols2, kConv1, kSide2, d_pooled_planes.data());

    d_pre1.setZero();
    const Matrix& pre1 = cache.pre1[idx];
    const auto& arg = cache.pool_argmax[idx];
    for (int c = 0; c < kConv1; ++c) {
      for (int p = 0; p < kArea2; ++p) {
        const int src = arg[static_cast<std::size_t>(c * kArea2 + p)];
        if (pre1(c, src) > 0.0) d_pre1(c, src) += d_pooled_planes(p, c);
      }
    }
    im2col(rows.row(i).data(), kChannels, kSide, cols1);
    g.conv1_w.noalias() += d_pre1 * cols1.transpose();
    g.conv1_b += d_pre1.rowwise().sum();
  }
  return g;
}

Gradients backward_from_embedding_grads(const MicroNet& net, const ActivationCache& cache, const Matrix& d_emb) {
  return backward(net, cache, d_emb, nullptr);
}

double cross_entropy(const Matrix& logits, const Labels& y) {
  if (static_cast<std::size_t>(logits.rows()) != y.size()) throw Error(Errc::ShapeMismatch, "logits/labels mismatch");
  double total = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double m = logits.row(i).maxCoeff();
    const double lse = m + std::log((logits.row(i).array() - m).exp().sum());
    total += lse - logits(i, y[static_cast<std::size_t>(i)]);
  }
  return total / static_cast<double>(logits.rows());
}

LossAndGrads cross_entropy_loss_and_grads(const MicroNet& net, const Images& images, const Labels& y) {
  if (!net.has_head()) throw Error(Errc::InvariantViolation, "cross-entropy needs a classification head");
  if (static_cast<std::size_t>(images.rows()) != y.size()) throw Error(Errc::ShapeMismatch, "images/labels mismatch");
  for (int label : y) {
    if (label < 0 || label >= net.outputs()) throw Error(Errc::LabelOutOfRange, "label outside the head's classes");
  }
  auto fwd = forward(net, images);
  LossAndGrads out;
  out.loss = cross_entropy(*fwd.logits, y);
  Matrix d_logits = softmax(*fwd.logits);
  for (std::size_t i = 0; i < y.size(); ++i) d_logits(static_cast<Eigen::Index>(i), y[i]) -= 1.0;
  d_logits /= static_cast<double>(y.size());
  out.grads = backward(net, fwd.cache, Matrix::Zero(images.rows(), kEmbedDim), &d_logits);
  return out;
}

LossAndGrads triplet_loss_and_grads(const MicroNet& net, const Images& images,
                                    const std::vector<score::Triplet>& triplets, double margin,
                                    score::Reduction reduction) {
  auto fwd = forward(net, images);
  const auto tl = score::triplet_loss_and_embedding_grads(fwd.embeddings, triplets, margin, reduction);
  LossAndGrads out;
  out.loss = tl.loss;
  out.grads = backward_from_embedding_grads(net, fwd.cache, tl.grad);
  return out;
}

// ---------------------------------------------------------------- data

std::string to_string(Family f) {
  switch (f) {
    case Family::texture: return "texture";
    case Family::blob: return "blob";
    case Family::mixed: return "mixed";
  }
  return "texture";
}

Family family_from_string(const std::string& s) {
  if (s == "texture") return Family::texture;
  if (s == "blob") return Family::blob;
  if (s == "mixed") return Family::mixed;
  throw Error(Errc::ParseError, "unknown synthetic family '" + s + "'");
}

namespace {

void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw Error(Errc::ParseError, where + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::none_of(keys.begin(), keys.end(), [&](const char* k) { return it.key() == k; })) {
      throw Error(Errc::ParseError, "unknown key '" + it.key() + "' in " + where);
    }
  }
}

template <typename T>
void read_key(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::ParseError, std::string("bad value for '") + key + "': " + e.what());
  }
}

struct Prototype {
  double theta, freq;
  double cx, cy, radius;
  double color_t[kChannels];
  double color_b[kChannels];
};

Prototype prototype(std::uint64_t class_seed, int c) {
  Rng rng(derive_seed(class_seed, static_cast<std::uint64_t>(c)));
  Prototype p{};
  p.theta = rng.uniform(0.0, std::numbers::pi);
  p.freq = rng.uniform(0.06, 0.22);
  p.cx = rng.uniform(9.0, 23.0);
  p.cy = rng.uniform(9.0, 23.0);
  p.radius = rng.uniform(3.0, 6.0);
  for (double& v : p.color_t) v = rng.normal();
  for (double& v : p.color_b) v = rng.normal();
  return p;
}

}  // namespace

nlohmann::ordered_json to_json(const SyntheticSpec& s) {
  return {{"name", s.name},           {"family", to_string(s.family)}, {"num_classes", s.num_classes},
          {"samples", s.samples},     {"noise", s.noise},              {"jitter", s.jitter},
          {"class_seed", s.class_seed}, {"sample_seed", s.sample_seed}};
}

SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j) {
  reject_unknown(j, {"name", "family", "num_classes", "samples", "noise", "jitter", "class_seed", "sample_seed"},
                 "synthetic dataset spec");
  SyntheticSpec s;
  read_key(j, "name", s.name);
  std::string family = to_string(s.family);
  read_key(j, "family", family);
  s.family = family_from_string(family);
  read_key(j, "num_classes", s.num_classes);
  read_key(j, "samples", s.samples);
  read_key(j, "noise", s.noise);
  read_key(j, "jitter", s.jitter);
  read_key(j, "class_seed", s.class_seed);
  read_key(j, "sample_seed", s.sample_seed);
  return s;
}

SyntheticDataset generate(const SyntheticSpec& spec) {
  if (spec.num_classes < 2) throw Error(Errc::InvariantViolation, "synthetic data needs at least 2 classes");
  if (spec.samples < spec.num_classes) throw Error(Errc::InvariantViolation, "fewer samples than classes");
  if (!(spec.noise >= 0.0) || !(spec.jitter >= 0.0)) throw Error(Errc::InvariantViolation, "noise and jitter must be >= 0");

  std::vector<Prototype> protos;
  for (int c = 0; c < spec.num_classes; ++c) protos.push_back(prototype(spec.class_seed, c));

  SyntheticDataset out;
  out.spec = spec;
  out.num_classes = spec.num_classes;
  out.images.resize(spec.samples, kPixels);
  out.labels.resize(static_cast<std::size_t>(spec.samples));
  std::vector<double> img(kPixels);
  for (int i = 0; i < spec.samples; ++i) {
    const int c = i % spec.num_classes;
    out.labels[static_cast<std::size_t>(i)] = c;
    const auto& p = protos[static_cast<std::size_t>(c)];
    Rng rng(derive_seed(spec.sample_seed, static_cast<std::uint64_t>(i)));
    const double theta = p.theta + 0.15 * spec.jitter * rng.normal();
    const double freq = p.freq * (1.0 + 0.1 * spec.jitter * rng.normal());
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double cx = p.cx + 2.0 * spec.jitter * rng.normal();
    const double cy = p.cy + 2.0 * spec.jitter * rng.normal();
    const double radius = p.radius * std::max(0.3, 1.0 + 0.1 * spec.jitter * rng.normal());
    const double gain = 1.0 + 0.2 * spec.jitter * rng.normal();
    const double wt = spec.family == Family::blob ? 0.0 : spec.family == Family::mixed ? 0.6 : 1.0;
    const double wb = spec.family == Family::texture ? 0.0 : spec.family == Family::mixed ? 0.6 : 1.0;
    const double ct = std::cos(theta);
    const double st = std::sin(theta);
    for (int y = 0; y < kSide; ++y) {
      for (int x = 0; x < kSide; ++x) {
        const double wave = std::sin(2.0 * std::numbers::pi * freq * (x * ct + y * st) + phase);
        const double r2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
        const double blob = 2.0 * std::exp(-r2 / (2.0 * radius * radius));
        for (int ch = 0; ch < kChannels; ++ch) {
          img[static_cast<std::size_t>(ch * kArea1 + y * kSide + x)] =
              gain * (wt * p.color_t[ch] * wave + wb * p.color_b[ch] * blob);
        }
      }
    }
    for (auto& v : img) v += spec.noise * rng.normal();
    out.images.row(i) = Eigen::Map<const Eigen::RowVectorXd>(img.data(), kPixels);
  }
  return out;
}

SyntheticDataset subset(const SyntheticDataset& data, const std::vector<std::size_t>& idx) {
  SyntheticDataset out;
  out.spec = data.spec;
  out.num_classes = data.num_classes;
  for (auto i : idx) {
    if (i >= data.size()) throw Error(Errc::IndexOutOfRange, "subset index out of range");
  }
  out.images = rows_of(data.images, idx);
  out.labels = labels_of(data.labels, idx);
  return out;
}

// ---------------------------------------------------------------- training

TrainResult train(const MicroNet& net, const SyntheticDataset& data, const TrainConfig& cfg,
                  const std::function<void(int, const MicroNet&)>& on_epoch) {
  if (!net.has_head()) throw Error(Errc::InvariantViolation, "training needs a classification head");
  if (cfg.epochs < 0 || cfg.batch_size < 1 || cfg.lr < 0.0 || cfg.momentum < 0.0 || cfg.momentum >= 1.0) {
    throw Error(Errc::InvariantViolation, "invalid training configuration");
  }
  if (data.size() == 0) throw Error(Errc::InvariantViolation, "empty training set");

  TrainResult out;
  out.net = net;
  auto& w = out.net;
  {
    const auto fwd = forward(w, data.images);
    out.loss_trace.push_back(cross_entropy(*fwd.logits, data.labels));
  }
  Gradients vel = zero_grads(w);
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size))));
      const auto lg = cross_entropy_loss_and_grads(w, rows_of(data.images, idx), labels_of(data.labels, idx));
      if (!std::isfinite(lg.loss)) {
        throw Error(Errc::Divergence, "training loss became non-finite in epoch " + std::to_string(epoch + 1));
      }
      total += lg.loss;
      ++batches;
      auto step = [&](Matrix& v, Matrix& p, const Matrix& g) {
        v = cfg.momentum * v - cfg.lr * g;
        p += v;
      };
      auto step_v = [&](Vector& v, Vector& p, const Vector& g) {
        v = cfg.momentum * v - cfg.lr * g;
        p += v;
      };
      step(vel.conv1_w, w.conv1_w, lg.grads.conv1_w);
      step_v(vel.conv1_b, w.conv1_b, lg.grads.conv1_b);
      step(vel.conv2_w, w.conv2_w, lg.grads.conv2_w);
      step_v(vel.conv2_b, w.conv2_b, lg.grads.conv2_b);
      step(vel.head_w, w.head_w, lg.grads.head_w);
      step_v(vel.head_b, w.head_b, lg.grads.head_b);
    }
    if (!all_finite(w)) throw Error(Errc::Divergence, "parameters became non-finite in epoch " + std::to_string(epoch + 1));
    out.loss_trace.push_back(total / static_cast<double>(batches));
    if (on_epoch) on_epoch(epoch + 1, w);
  }
  return out;
}

double accuracy(const MicroNet& net, const SyntheticDataset& data) {
  const auto fwd = forward(net, data.images);
  if (!fwd.logits) throw Error(Errc::InvariantViolation, "accuracy needs a classification head");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    Eigen::Index arg = 0;
    fwd.logits->row(static_cast<Eigen::Index>(i)).maxCoeff(&arg);
    hits += arg == data.labels[i] ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

double binary_auc(const std::vector<double>& scores, const std::vector<bool>& positive) {
  if (scores.size() != positive.size()) throw Error(Errc::LengthMismatch, "scores and labels differ in length");
  const auto ranks = stats::rankdata(scores);
  double pos = 0.0;
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (positive[i]) {
      pos += 1.0;
      rank_sum += ranks[i];
    }
  }
  const double neg = static_cast<double>(scores.size()) - pos;
  if (pos == 0.0 || neg == 0.0) throw Error(Errc::DegenerateInput, "AUC needs both positive and negative samples");
  return (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
}

double macro_auc(const Matrix& scores, const Labels& y, int num_classes) {
  if (static_cast<std::size_t>(scores.rows()) != y.size() || scores.cols() != num_classes) {
    throw Error(Errc::ShapeMismatch, "score matrix does not match labels and classes");
  }
  double total = 0.0;
  for (int c = 0; c < num_classes; ++c) {
    std::vector<double> s(y.size());
    std::vector<bool> pos(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) {
      s[i] = scores(static_cast<Eigen::Index>(i), c);
      pos[i] = y[i] == c;
    }
    total += binary_auc(s, pos);
  }
  return total / num_classes;
}

Split stratified_split(const Labels& y, int num_classes, const SplitSpec& spec) {
  if (!(spec.train > 0.0) || !(spec.val > 0.0) || spec.train + spec.val >= 1.0) {
    throw Error(Errc::InvariantViolation, "split fractions must be positive and leave room for a test fold");
  }
  Split out;
  for (int c = 0; c < num_classes; ++c) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < y.size(); ++i) {
      if (y[i] == c) members.push_back(i);
    }
    const auto m = members.size();
    const auto n_train = static_cast<std::size_t>(std::llround(spec.train * static_cast<double>(m)));
    const auto n_val = static_cast<std::size_t>(std::llround(spec.val * static_cast<double>(m)));
    if (n_train < 1 || n_val < 1 || n_train + n_val >= m) {
      throw Error(Errc::DegenerateInput, "class " + std::to_string(c) + " has too few samples to split");
    }
    for (std::size_t k = 0; k < m; ++k) {
      (k < n_train ? out.train : k < n_train + n_val ? out.val : out.test).push_back(members[k]);
    }
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.val.begin(), out.val.end());
  std::sort(out.test.begin(), out.test.end());
  return out;
}

FineTuneResult fine_tune_auc(const MicroNet& source, const SyntheticDataset& target, const SplitSpec& split_spec,
                             const FineTuneGrid& grid, std::uint64_t seed) {
  if (grid.lrs.empty() || grid.epochs.empty()) throw Error(Errc::InvariantViolation, "empty fine-tuning grid");
  const auto split = stratified_split(target.labels, target.num_classes, split_spec);
  const auto train_set = subset(target, split.train);
  const auto val_set = subset(target, split.val);
  const auto test_set = subset(target, split.test);
  const int max_epochs = *std::max_element(grid.epochs.begin(), grid.epochs.end());
  const std::set<int> checkpoints(grid.epochs.begin(), grid.epochs.end());

  MicroNet start = source;
  reset_head(start, target.num_classes, derive_seed(seed, 1));

  FineTuneResult best;
  best.val_loss = std::numeric_limits<double>::infinity();
  std::optional<MicroNet> best_net;
  std::optional<Error> last_error;
  for (double lr : grid.lrs) {
    TrainConfig cfg{.epochs = max_epochs, .lr = lr, .momentum = grid.momentum, .batch_size = grid.batch_size,
                    .seed = derive_seed(seed, 2)};
    try {
      train(start, train_set, cfg, [&](int epoch, const MicroNet& net) {
        if (!checkpoints.contains(epoch)) return;
        const auto fwd = forward(net, val_set.images);
        const double loss = cross_entropy(*fwd.logits, val_set.labels);
        if (std::isfinite(loss) && loss < best.val_loss) {
          best.val_loss = loss;
          best.lr = lr;
          best.epochs = epoch;
          best_net = net;
        }
      });
    } catch (const Error& e) {
      if (e.code() != Errc::Divergence) throw;
      last_error = e;
    }
  }
  if (!best_net) throw last_error ? *last_error : Error(Errc::Divergence, "every fine-tuning run diverged");
  const auto fwd = forward(*best_net, test_set.images);
  best.auc = macro_auc(softmax(*fwd.logits), test_set.labels, target.num_classes);
  return best;
}

// ---------------------------------------------------------------- zoo

namespace {

SyntheticSpec preset(const std::string& name, Family family, std::uint64_t class_seed, int classes, int samples,
                     double noise) {
  SyntheticSpec s;
  s.name = name;
  s.family = family;
  s.class_seed = class_seed;
  s.sample_seed = derive_seed(class_seed, 0x5A);
  s.num_classes = classes;
  s.samples = samples;
  s.noise = noise;
  return s;
}

SyntheticSpec reseeded(SyntheticSpec s, std::uint64_t seed) {
  s.class_seed = derive_seed(s.class_seed, seed);
  s.sample_seed = derive_seed(s.sample_seed, seed);
  return s;
}

template <typename Job>
void run_parallel(std::size_t jobs, int threads, Job job) {
  std::vector<std::exception_ptr> errors(jobs);
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < jobs; i = next++) {
      try {
        job(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const auto workers = static_cast<std::size_t>(std::clamp<long long>(threads, 1, static_cast<long long>(std::max<std::size_t>(jobs, 1))));
  if (workers <= 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace

ZooSpec default_zoo_spec(int num_targets) {
  if (num_targets != 1 && num_targets != 3) throw Error(Errc::InvariantViolation, "presets exist for 1 or 3 targets");
  ZooSpec z;
  z.sources = {
      {"texture-near", preset("texture-a", Family::texture, 11, 4, 240, 0.8)},
      {"blob-near", preset("blob-b", Family::blob, 22, 4, 240, 0.8)},
      {"mixed", preset("mixed-c", Family::mixed, 33, 4, 240, 0.8)},
      {"texture-far", preset("texture-d", Family::texture, 44, 4, 240, 0.8)},
      {"random-init", std::nullopt},
  };
  z.targets = {preset("texture-target", Family::texture, 11, 3, 300, 3.0)};
  if (num_targets == 3) {
    z.targets.push_back(preset("blob-target", Family::blob, 22, 3, 300, 3.0));
    z.targets.push_back(preset("mixed-target", Family::mixed, 33, 3, 300, 3.0));
  }
  // Heavy noise and jitter keep the targets hard enough that fine-tuned accuracy separates the sources.
  for (std::size_t t = 0; t < z.targets.size(); ++t) {
    z.targets[t].jitter = 2.0;
    z.targets[t].sample_seed = derive_seed(z.targets[t].sample_seed, 0x7A + t);
  }
  z.pretrain.epochs = 16;
  return z;
}

nlohmann::ordered_json to_json(const ZooSpec& z) {
  nlohmann::ordered_json j;
  auto& sources = j["sources"] = nlohmann::ordered_json::array();
  for (const auto& s : z.sources) {
    nlohmann::ordered_json e{{"name", s.name}};
    e["data"] = s.data ? to_json(*s.data) : nlohmann::ordered_json(nullptr);
    sources.push_back(e);
  }
  auto& targets = j["targets"] = nlohmann::ordered_json::array();
  for (const auto& t : z.targets) targets.push_back(to_json(t));
  j["pretrain"] = {{"epochs", z.pretrain.epochs},
                   {"lr", z.pretrain.lr},
                   {"momentum", z.pretrain.momentum},
                   {"batch_size", z.pretrain.batch_size}};
  j["fine_tune"] = {{"lrs", z.grid.lrs},
                    {"epochs", z.grid.epochs},
                    {"momentum", z.grid.momentum},
                    {"batch_size", z.grid.batch_size}};
  j["split"] = {{"train", z.split.train}, {"val", z.split.val}};
  j["triplet"] = {{"margin", z.triplet.margin},
                  {"triplets_per_anchor", z.triplet.triplets_per_anchor},
                  {"reduction", score::to_string(z.triplet.reduction)}};
  j["threads"] = z.threads;
  return j;
}

ZooSpec zoo_spec_from_json(const nlohmann::json& j, const ZooSpec& base) {
  reject_unknown(j, {"sources", "targets", "pretrain", "fine_tune", "split", "triplet", "threads"}, "zoo spec");
  ZooSpec z = base;
  if (j.contains("sources")) {
    z.sources.clear();
    for (const auto& e : j.at("sources")) {
      reject_unknown(e, {"name", "data"}, "zoo source");
      SourceSpec s;
      read_key(e, "name", s.name);
      if (e.contains("data") && !e.at("data").is_null()) s.data = synthetic_spec_from_json(e.at("data"));
      z.sources.push_back(std::move(s));
    }
  }
  if (j.contains("targets")) {
    z.targets.clear();
    for (const auto& e : j.at("targets")) z.targets.push_back(synthetic_spec_from_json(e));
  }
  if (j.contains("pretrain")) {
    const auto& p = j.at("pretrain");
    reject_unknown(p, {"epochs", "lr", "momentum", "batch_size"}, "pretrain");
    read_key(p, "epochs", z.pretrain.epochs);
    read_key(p, "lr", z.pretrain.lr);
    read_key(p, "momentum", z.pretrain.momentum);
    read_key(p, "batch_size", z.pretrain.batch_size);
  }
  if (j.contains("fine_tune")) {
    const auto& f = j.at("fine_tune");
    reject_unknown(f, {"lrs", "epochs", "momentum", "batch_size"}, "fine_tune");
    read_key(f, "lrs", z.grid.lrs);
    read_key(f, "epochs", z.grid.epochs);
    read_key(f, "momentum", z.grid.momentum);
    read_key(f, "batch_size", z.grid.batch_size);
  }
  if (j.contains("split")) {
    const auto& s = j.at("split");
    reject_unknown(s, {"train", "val"}, "split");
    read_key(s, "train", z.split.train);
    read_key(s, "val", z.split.val);
  }
  if (j.contains("triplet")) {
    const auto& t = j.at("triplet");
    reject_unknown(t, {"margin", "triplets_per_anchor", "reduction"}, "triplet");
    read_key(t, "margin", z.triplet.margin);
    read_key(t, "triplets_per_anchor", z.triplet.triplets_per_anchor);
    std::string red = score::to_string(z.triplet.reduction);
    read_key(t, "reduction", red);
    z.triplet.reduction = score::reduction_from_string(red);
  }
  read_key(j, "threads", z.threads);
  return z;
}

CandidateBundle extract_bundle(const MicroNet& net, const SyntheticDataset& data, const score::TripletConfig& triplet,
                               const std::string& model_id, const std::string& source_dataset) {
  auto fwd = forward(net, data.images);
  CandidateBundle b;
  b.model_id = model_id;
  b.source_dataset = source_dataset;
  b.architecture = "micronet";
  b.embeddings = fwd.embeddings;
  if (fwd.logits) b.source_probs = softmax(*fwd.logits);
  const auto triplets = score::sample_triplets(data.labels, triplet);
  const auto tl = score::triplet_loss_and_embedding_grads(fwd.embeddings, triplets, triplet.margin, triplet.reduction);
  const auto g = backward_from_embedding_grads(net, fwd.cache, tl.grad);
  const GradNorms norms{g.conv1_w.norm(), g.conv2_w.norm()};
  if (norms.conv1 > 0.0 && norms.conv2 > 0.0) {
    b.grad_norms = norms;
  } else {
    warn("bundle '" + model_id + "': triplet loss left a conv layer without gradient; norms omitted");
  }
  b.provenance = {{"generator", "micronet"},
                  {"target", data.spec.name},
                  {"triplet_seed", std::to_string(triplet.seed)},
                  {"triplet_margin", std::to_string(triplet.margin)}};
  return b;
}

MicroZoo make_micro_zoo(const ZooSpec& spec, std::uint64_t seed) {
  std::set<std::string> names;
  std::set<std::string> distinct;
  for (const auto& s : spec.sources) {
    if (!names.insert(s.name).second) throw Error(Errc::DuplicateIdentifier, "source '" + s.name + "' repeated");
    distinct.insert(s.data ? to_json(*s.data).dump() : "random");
  }
  if (distinct.size() < 3) throw Error(Errc::InvariantViolation, "a zoo needs at least 3 distinct sources");
  if (spec.targets.empty()) throw Error(Errc::InvariantViolation, "a zoo needs at least one target");
  std::set<std::string> target_names;
  for (const auto& t : spec.targets) {
    if (!target_names.insert(t.name).second) throw Error(Errc::DuplicateIdentifier, "target '" + t.name + "' repeated");
  }

  // Seeds come from the spec contents, so identical specs give identical nets.
  std::vector<MicroNet> nets(spec.sources.size());
  run_parallel(spec.sources.size(), spec.threads, [&](std::size_t s) {
    const auto& src = spec.sources[s];
    const std::uint64_t key = derive_seed(seed, hash_tag(src.name + (src.data ? to_json(*src.data).dump() : "")));
    if (!src.data) {
      nets[s] = init_net(0, key);
      return;
    }
    const auto data = generate(reseeded(*src.data, seed));
    auto cfg = spec.pretrain;
    cfg.seed = derive_seed(key, 1);
    auto trained = train(init_net(src.data->num_classes, key), data, cfg);
    nets[s] = std::move(trained.net);
  });

  MicroZoo zoo;
  auto& gt = zoo.ground_truth;
  gt.corner = "source";
  for (const auto& s : spec.sources) gt.rows.push_back(s.name);
  for (const auto& t : spec.targets) gt.columns.push_back(t.name);
  gt.values.assign(gt.rows.size() * gt.columns.size(), std::nullopt);

  const MicroNet reference = init_net(0, derive_seed(seed, 0xEF));
  for (const auto& t : spec.targets) {
    ZooTarget zt;
    zt.data = generate(reseeded(t, seed));
    const auto split = stratified_split(zt.data.labels, zt.data.num_classes, spec.split);
    const auto train_set = subset(zt.data, split.train);
    zt.target_set.name = t.name;
    zt.target_set.labels = train_set.labels;
    zt.target_set.num_classes = train_set.num_classes;
    zt.target_set.embeddings = embed(reference, train_set.images);
    auto triplet = spec.triplet;
    triplet.seed = derive_seed(seed, hash_tag(t.name));
    for (std::size_t s = 0; s < spec.sources.size(); ++s) {
      const auto& src = spec.sources[s];
      zt.bundles.push_back(extract_bundle(nets[s], train_set, triplet, src.name, src.data ? src.data->name : "none"));
    }
    zoo.targets.push_back(std::move(zt));
  }

  const std::size_t jobs = spec.sources.size() * spec.targets.size();
  run_parallel(jobs, spec.threads, [&](std::size_t job) {
    const std::size_t s = job / spec.targets.size();
    const std::size_t t = job % spec.targets.size();
    const auto ft_seed = derive_seed(seed, hash_tag("finetune/" + spec.targets[t].name));
    const auto r = fine_tune_auc(nets[s], zoo.targets[t].data, spec.split, spec.grid, ft_seed);
    gt.values[s * gt.columns.size() + t] = 100.0 * r.auc;
  });
  return zoo;
}

}  // namespace tfr::micro
