#include "tfr/transfer_score.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <set>
#include <thread>

#include "tfr/error.hpp"
#include "tfr/log.hpp"
#include "tfr/rng.hpp"

namespace tfr::score {

nca::NcaConfig NcaOverrides::resolve(std::size_t n, std::size_t dim, int num_classes) const {
  auto cfg = nca::NcaConfig::defaults_for(n, dim, num_classes);
  if (out_dim) cfg.out_dim = *out_dim;
  if (l2_penalty) cfg.l2_penalty = *l2_penalty;
  if (max_iters) cfg.max_iters = *max_iters;
  if (step_size) cfg.step_size = *step_size;
  if (tol) cfg.tol = *tol;
  return cfg;
}

std::string to_string(Reduction r) { return r == Reduction::mean_all ? "mean_all" : "mean_nonzero"; }

Reduction reduction_from_string(const std::string& s) {
  if (s == "mean_all") return Reduction::mean_all;
  if (s == "mean_nonzero") return Reduction::mean_nonzero;
  throw Error(Errc::ParseError, "unknown triplet reduction '" + s + "'");
}

std::string to_string(Variant v) { return v == Variant::product ? "product" : "sum"; }

Variant variant_from_string(const std::string& s) {
  if (s == "product") return Variant::product;
  if (s == "sum") return Variant::sum;
  throw Error(Errc::ParseError, "unknown combine variant '" + s + "'");
}

std::vector<std::vector<std::size_t>> knn_neighbors(const Matrix& xp, int k) {
  const auto n = static_cast<std::size_t>(xp.rows());
  if (k < 1) throw Error(Errc::InvariantViolation, "k must be >= 1");
  if (n <= static_cast<std::size_t>(k)) {
    throw Error(Errc::TooFewSamples, "k-NN with k = " + std::to_string(k) + " needs n > k, got n = " + std::to_string(n));
  }
  // Squared distances from the Gram matrix would lose exact ties, so compute differences directly.
  const Matrix pts = xp.transpose();
  std::vector<std::vector<std::size_t>> out(n);
  std::vector<std::pair<double, std::size_t>> cand(n - 1);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t c = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      cand[c++] = {(pts.col(static_cast<Eigen::Index>(i)) - pts.col(static_cast<Eigen::Index>(j))).squaredNorm(), j};
    }
    std::partial_sort(cand.begin(), cand.begin() + k, cand.end());
    out[i].reserve(static_cast<std::size_t>(k));
    for (int t = 0; t < k; ++t) out[i].push_back(cand[static_cast<std::size_t>(t)].second);
  }
  return out;
}

Vector knn_label_probability(const Matrix& xp, const Labels& y, const KnnConfig& cfg) {
  if (static_cast<std::size_t>(xp.rows()) != y.size()) throw Error(Errc::ShapeMismatch, "row count differs from label count");
  const auto nbrs = knn_neighbors(xp, cfg.k);
  Vector p(xp.rows());
  for (std::size_t i = 0; i < nbrs.size(); ++i) {
    int same = 0;
    for (auto j : nbrs[i]) same += y[j] == y[i] ? 1 : 0;
    p(static_cast<Eigen::Index>(i)) = static_cast<double>(same) / cfg.k;
  }
  return p;
}

double s_lp(const TargetSet& target, const CandidateBundle& bundle, const NcaOverrides& nca_cfg,
            const KnnConfig& knn_cfg) {
  if (static_cast<std::size_t>(bundle.embeddings.rows()) != target.size()) {
    throw Error(Errc::ShapeMismatch, "bundle '" + bundle.model_id + "' has " + std::to_string(bundle.embeddings.rows()) +
                                         " rows, target has " + std::to_string(target.size()));
  }
  if (static_cast<std::size_t>(knn_cfg.k) >= target.size()) {
    throw Error(Errc::TooFewSamples, "k-NN with k = " + std::to_string(knn_cfg.k) + " needs n > k");
  }
  const auto cfg = nca_cfg.resolve(target.size(), static_cast<std::size_t>(bundle.embeddings.cols()), target.num_classes);
  const auto model = nca::fit(bundle.embeddings, target.labels, cfg);
  return knn_label_probability(nca::project(model, bundle.embeddings), target.labels, knn_cfg).sum();
}

std::vector<Triplet> sample_triplets(const Labels& y, const TripletConfig& cfg) {
  if (cfg.triplets_per_anchor < 1) throw Error(Errc::InvariantViolation, "triplets_per_anchor must be >= 1");
  if (!(cfg.margin > 0.0)) throw Error(Errc::InvariantViolation, "triplet margin must be > 0");
  std::map<int, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < y.size(); ++i) members[y[i]].push_back(i);
  if (members.size() < 2) throw Error(Errc::NoValidTriplet, "triplets need at least two classes");
  std::map<int, std::vector<std::size_t>> others;
  for (const auto& [c, idx] : members) {
    auto& o = others[c];
    for (std::size_t i = 0; i < y.size(); ++i) {
      if (y[i] != c) o.push_back(i);
    }
  }

  Rng rng(cfg.seed);
  std::vector<Triplet> out;
  for (std::size_t a = 0; a < y.size(); ++a) {
    const auto& same = members[y[a]];
    if (same.size() < 2) continue;
    const auto pos_a = static_cast<std::size_t>(std::lower_bound(same.begin(), same.end(), a) - same.begin());
    const auto& diff = others[y[a]];
    for (int t = 0; t < cfg.triplets_per_anchor; ++t) {
      auto r = static_cast<std::size_t>(rng.index(same.size() - 1));
      if (r >= pos_a) ++r;
      const auto q = static_cast<std::size_t>(rng.index(diff.size()));
      out.push_back({a, same[r], diff[q]});
    }
  }
  if (out.empty()) throw Error(Errc::NoValidTriplet, "no class has two members to form an anchor-positive pair");
  return out;
}

TripletLoss triplet_loss_and_embedding_grads(const Matrix& embeddings, const std::vector<Triplet>& triplets,
                                             double margin, Reduction reduction) {
  const auto n = static_cast<std::size_t>(embeddings.rows());
  TripletLoss out;
  out.grad = Matrix::Zero(embeddings.rows(), embeddings.cols());
  if (triplets.empty()) return out;
  for (const auto& t : triplets) {
    if (t.anchor >= n || t.positive >= n || t.negative >= n) {
      throw Error(Errc::IndexOutOfRange, "triplet index out of range for " + std::to_string(n) + " rows");
    }
  }

  double total = 0.0;
  for (const auto& t : triplets) {
    const auto a = static_cast<Eigen::Index>(t.anchor);
    const auto p = static_cast<Eigen::Index>(t.positive);
    const auto q = static_cast<Eigen::Index>(t.negative);
    const Vector ap = embeddings.row(a) - embeddings.row(p);
    const Vector an = embeddings.row(a) - embeddings.row(q);
    const double d_ap = ap.norm();
    const double d_an = an.norm();
    const double hinge = d_ap - d_an + margin;
    if (hinge <= 0.0) continue;
    total += hinge;
    ++out.active;
    const Vector u_ap = d_ap > 0.0 ? Vector(ap / d_ap) : Vector::Zero(ap.size());
    const Vector u_an = d_an > 0.0 ? Vector(an / d_an) : Vector::Zero(an.size());
    out.grad.row(a) += (u_ap - u_an).transpose();
    out.grad.row(p) -= u_ap.transpose();
    out.grad.row(q) += u_an.transpose();
  }

  const std::size_t denom = reduction == Reduction::mean_all ? triplets.size() : out.active;
  if (denom == 0) return out;
  out.loss = total / static_cast<double>(denom);
  out.grad /= static_cast<double>(denom);
  return out;
}

double s_fu(double grad_norm_conv1, double grad_norm_conv2) {
  if (!std::isfinite(grad_norm_conv1) || !std::isfinite(grad_norm_conv2)) {
    throw Error(Errc::NonFinite, "gradient norms must be finite");
  }
  if (grad_norm_conv1 < 0.0 || grad_norm_conv2 < 0.0) throw Error(Errc::InvariantViolation, "gradient norms must be >= 0");
  if (grad_norm_conv1 == 0.0) throw Error(Errc::ZeroDenominator, "first conv layer gradient is identically zero");
  return grad_norm_conv2 / grad_norm_conv1;
}

std::map<std::string, double> minmax_normalize(const std::map<std::string, double>& values, Direction direction) {
  if (values.size() < 2) {
    throw Error(Errc::TooFewCandidates, "min-max normalization needs at least 2 candidates, got " +
                                            std::to_string(values.size()));
  }
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (const auto& [id, v] : values) {
    if (!std::isfinite(v)) throw Error(Errc::NonFinite, "score of '" + id + "' is not finite");
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  std::map<std::string, double> out;
  if (hi == lo) {
    warn("all " + std::to_string(values.size()) + " candidates have the same value; normalizing to 0.5");
    for (const auto& [id, v] : values) out[id] = 0.5;
    return out;
  }
  for (const auto& [id, v] : values) {
    out[id] = direction == Direction::in_domain ? (v - lo) / (hi - lo) : (v - hi) / (lo - hi);
  }
  return out;
}

std::vector<RawScore> raw_scores(const TargetSet& target, const std::vector<CandidateBundle>& bundles,
                                 const ScoreConfig& cfg) {
  if (bundles.empty()) throw Error(Errc::EmptyPool, "no candidate bundles to score");
  std::set<std::string> ids;
  for (const auto& b : bundles) {
    if (!ids.insert(b.model_id).second) throw Error(Errc::DuplicateIdentifier, "model id '" + b.model_id + "' repeated");
  }

  std::vector<RawScore> out(bundles.size());
  std::vector<std::exception_ptr> errors(bundles.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < bundles.size(); i = next++) {
      try {
        const auto& b = bundles[i];
        out[i].model_id = b.model_id;
        out[i].s_lp = s_lp(target, b, cfg.nca, cfg.knn);
        if (b.grad_norms) out[i].s_fu = s_fu(b.grad_norms->conv1, b.grad_norms->conv2);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const auto workers = static_cast<std::size_t>(std::clamp<int>(cfg.threads, 1, static_cast<int>(bundles.size())));
  if (workers == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

ScoreTable combine(const std::string& target_name, const std::vector<RawScore>& raw, const CombineMode& mode,
                   const std::string& metric_name) {
  if (raw.empty()) throw Error(Errc::EmptyPool, "no candidates to combine");
  std::map<std::string, double> lp;
  std::map<std::string, double> fu;
  for (const auto& r : raw) {
    lp[r.model_id] = r.s_lp;
    if (r.s_fu) fu[r.model_id] = *r.s_fu;
  }
  const auto lp_norm = minmax_normalize(lp, mode.direction);
  std::map<std::string, double> fu_norm;
  if (fu.size() >= 2) {
    fu_norm = minmax_normalize(fu, mode.direction);
  } else if (!fu.empty()) {
    warn("only one candidate has gradient norms; scoring every candidate by S_LP alone");
  }
  if (!fu_norm.empty() && fu_norm.size() < lp.size()) {
    warn(std::to_string(lp.size() - fu_norm.size()) + " candidates lack gradient norms; they are scored by S_LP alone");
  }

  ScoreTable table;
  table.metric_name = metric_name;
  table.target = target_name;
  table.mode = mode.direction;
  table.components.emplace();
  for (const auto& r : raw) {
    ScoreComponents c;
    c.s_lp = r.s_lp;
    c.s_lp_norm = lp_norm.at(r.model_id);
    double score = c.s_lp_norm;
    if (auto it = fu_norm.find(r.model_id); it != fu_norm.end()) {
      c.s_fu = r.s_fu;
      c.s_fu_norm = it->second;
      score = mode.variant == Variant::product ? c.s_lp_norm * it->second : c.s_lp_norm + it->second;
    } else {
      c.s_fu = r.s_fu;
    }
    table.scores[r.model_id] = score;
    (*table.components)[r.model_id] = c;
  }
  return table;
}

ScoreTable lp_only(const std::string& target_name, const std::vector<RawScore>& raw, Direction direction,
                   const std::string& metric_name) {
  std::vector<RawScore> stripped = raw;
  for (auto& r : stripped) r.s_fu.reset();
  return combine(target_name, stripped, CombineMode{Variant::product, direction}, metric_name);
}

ScoreTable combined_score(const TargetSet& target, const std::vector<CandidateBundle>& bundles,
                          const ScoreConfig& cfg) {
  return combine(target.name, raw_scores(target, bundles, cfg), cfg.mode);
}

std::string argmax_model(const ScoreTable& table) {
  if (table.scores.empty()) throw Error(Errc::EmptyPool, "score table is empty");
  auto best = table.scores.begin();
  for (auto it = table.scores.begin(); it != table.scores.end(); ++it) {
    if (it->second > best->second) best = it;
  }
  return best->first;
}

}  // namespace tfr::score
