#include "tfr/data_model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <mutex>
#include <set>
#include <sstream>

#include "tfr/csv.hpp"
#include "tfr/error.hpp"
#include "tfr/log.hpp"

namespace tfr {

std::string_view to_string(Errc code) noexcept {
  switch (code) {
    case Errc::MalformedHeader: return "MalformedHeader";
    case Errc::DimensionMismatch: return "DimensionMismatch";
    case Errc::NonFiniteValue: return "NonFiniteValue";
    case Errc::LabelOutOfRange: return "LabelOutOfRange";
    case Errc::IoError: return "IoError";
    case Errc::InvariantViolation: return "InvariantViolation";
    case Errc::DuplicateIdentifier: return "DuplicateIdentifier";
    case Errc::ValueOutOfRange: return "ValueOutOfRange";
    case Errc::ParseError: return "ParseError";
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::DegenerateInput: return "DegenerateInput";
    case Errc::NonFinite: return "NonFinite";
    case Errc::TooFewSamples: return "TooFewSamples";
    case Errc::NoValidTriplet: return "NoValidTriplet";
    case Errc::IndexOutOfRange: return "IndexOutOfRange";
    case Errc::ZeroDenominator: return "ZeroDenominator";
    case Errc::DegeneratePool: return "DegeneratePool";
    case Errc::TooFewCandidates: return "TooFewCandidates";
    case Errc::EmptyPool: return "EmptyPool";
    case Errc::StaleCache: return "StaleCache";
    case Errc::Divergence: return "Divergence";
    case Errc::EmptyColumn: return "EmptyColumn";
    case Errc::RowNotNormalized: return "RowNotNormalized";
    case Errc::EmCollapse: return "EmCollapse";
    case Errc::SvdFailure: return "SvdFailure";
    case Errc::ZeroVariance: return "ZeroVariance";
    case Errc::RankDeficiency: return "RankDeficiency";
    case Errc::LengthMismatch: return "LengthMismatch";
    case Errc::DegenerateRanks: return "DegenerateRanks";
    case Errc::MissingQValue: return "MissingQValue";
    case Errc::IdMismatch: return "IdMismatch";
    case Errc::MetricPrecondition: return "MetricPrecondition";
  }
  return "Unknown";
}

namespace {

std::mutex& handler_mutex() {
  static std::mutex m;
  return m;
}

WarningHandler& handler_slot() {
  static WarningHandler h = [](std::string_view msg) { std::cerr << "warning: " << msg << '\n'; };
  return h;
}

void check_finite(const Matrix& m, const std::string& field) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      if (!std::isfinite(m(r, c))) {
        throw Error(Errc::NonFiniteValue, field + " has a non-finite value at row " + std::to_string(r) +
                                              ", column " + std::to_string(c));
      }
    }
  }
}

}  // namespace

void warn(std::string_view message) {
  std::lock_guard lock(handler_mutex());
  if (handler_slot()) handler_slot()(message);
}

WarningHandler set_warning_handler(WarningHandler handler) {
  std::lock_guard lock(handler_mutex());
  auto previous = std::move(handler_slot());
  handler_slot() = std::move(handler);
  return previous;
}

void validate(const TargetSet& target) {
  const auto n = target.labels.size();
  if (static_cast<std::size_t>(target.embeddings.rows()) != n) {
    throw Error(Errc::DimensionMismatch, "target '" + target.name + "': embeddings have " +
                                             std::to_string(target.embeddings.rows()) + " rows but " +
                                             std::to_string(n) + " labels");
  }
  if (n < 2) throw Error(Errc::InvariantViolation, "target '" + target.name + "': n must be >= 2");
  if (target.embeddings.cols() < 1) throw Error(Errc::InvariantViolation, "target '" + target.name + "': D must be >= 1");
  if (target.num_classes < 2) throw Error(Errc::InvariantViolation, "target '" + target.name + "': C must be >= 2");
  std::vector<std::size_t> counts(static_cast<std::size_t>(target.num_classes), 0);
  for (std::size_t i = 0; i < n; ++i) {
    const int y = target.labels[i];
    if (y < 0 || y >= target.num_classes) {
      throw Error(Errc::LabelOutOfRange, "target '" + target.name + "': labels[" + std::to_string(i) +
                                             "] = " + std::to_string(y) + " not in [0, " +
                                             std::to_string(target.num_classes) + ")");
    }
    ++counts[static_cast<std::size_t>(y)];
  }
  const auto present = std::count_if(counts.begin(), counts.end(), [](auto c) { return c > 0; });
  if (present < 2) {
    throw Error(Errc::InvariantViolation, "target '" + target.name + "': fewer than 2 classes present");
  }
  check_finite(target.embeddings, "embeddings");
}

void validate(const CandidateBundle& bundle) {
  const auto n = bundle.embeddings.rows();
  if (n == 0) throw Error(Errc::InvariantViolation, "bundle '" + bundle.model_id + "': empty sample set (n = 0)");
  if (bundle.embeddings.cols() == 0) throw Error(Errc::InvariantViolation, "bundle '" + bundle.model_id + "': D = 0");
  check_finite(bundle.embeddings, "embeddings");
  if (bundle.source_probs) {
    const auto& p = *bundle.source_probs;
    if (p.rows() != n) {
      throw Error(Errc::DimensionMismatch, "bundle '" + bundle.model_id + "': source_probs has " +
                                               std::to_string(p.rows()) + " rows, expected " + std::to_string(n));
    }
    if (p.cols() == 0) throw Error(Errc::InvariantViolation, "bundle '" + bundle.model_id + "': source_probs has Z = 0");
    check_finite(p, "source_probs");
    for (Eigen::Index r = 0; r < n; ++r) {
      if ((p.row(r).array() < 0.0).any()) {
        throw Error(Errc::InvariantViolation,
                    "bundle '" + bundle.model_id + "': source_probs row " + std::to_string(r) + " has a negative entry");
      }
      const double s = p.row(r).sum();
      if (std::abs(s - 1.0) > 1e-6) {
        std::ostringstream os;
        os << "bundle '" << bundle.model_id << "': source_probs row " << r << " sums to " << s;
        throw Error(Errc::InvariantViolation, os.str());
      }
    }
  }
  if (bundle.grad_norms) {
    for (auto [name, v] : {std::pair{"grad_norm_conv1", bundle.grad_norms->conv1},
                           std::pair{"grad_norm_conv2", bundle.grad_norms->conv2}}) {
      if (!std::isfinite(v) || v <= 0.0) {
        std::ostringstream os;
        os << "bundle '" << bundle.model_id << "': " << name << " = " << v << " must be finite and > 0";
        throw Error(Errc::InvariantViolation, os.str());
      }
    }
  }
  if (bundle.labels) {
    if (static_cast<Eigen::Index>(bundle.labels->size()) != n) {
      throw Error(Errc::DimensionMismatch, "bundle '" + bundle.model_id + "': label count differs from n");
    }
    const int limit = bundle.num_classes.value_or(std::numeric_limits<int>::max());
    for (std::size_t i = 0; i < bundle.labels->size(); ++i) {
      const int y = (*bundle.labels)[i];
      if (y < 0 || y >= limit) {
        throw Error(Errc::LabelOutOfRange, "labels[" + std::to_string(i) + "] = " + std::to_string(y));
      }
    }
  }
}

namespace {

bool bits_equal(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  return std::equal(a.data(), a.data() + a.size(), b.data(), [](double x, double y) {
    return std::memcmp(&x, &y, sizeof(double)) == 0;
  });
}

bool bits_equal(double x, double y) { return std::memcmp(&x, &y, sizeof(double)) == 0; }

}  // namespace

bool bitwise_equal(const CandidateBundle& a, const CandidateBundle& b) {
  if (a.model_id != b.model_id || a.source_dataset != b.source_dataset || a.architecture != b.architecture ||
      a.provenance != b.provenance || a.labels != b.labels || a.num_classes != b.num_classes) {
    return false;
  }
  if (!bits_equal(a.embeddings, b.embeddings)) return false;
  if (a.source_probs.has_value() != b.source_probs.has_value()) return false;
  if (a.source_probs && !bits_equal(*a.source_probs, *b.source_probs)) return false;
  if (a.grad_norms.has_value() != b.grad_norms.has_value()) return false;
  if (a.grad_norms) {
    return bits_equal(a.grad_norms->conv1, b.grad_norms->conv1) && bits_equal(a.grad_norms->conv2, b.grad_norms->conv2);
  }
  return true;
}

std::string to_string(Direction d) { return d == Direction::in_domain ? "in_domain" : "cross_domain"; }

Direction direction_from_string(const std::string& s) {
  if (s == "in_domain") return Direction::in_domain;
  if (s == "cross_domain") return Direction::cross_domain;
  throw Error(Errc::ParseError, "unknown direction '" + s + "' (expected in_domain or cross_domain)");
}

std::optional<std::size_t> LabeledTable::row_index(const std::string& id) const {
  const auto it = std::find(rows.begin(), rows.end(), id);
  if (it == rows.end()) return std::nullopt;
  return static_cast<std::size_t>(it - rows.begin());
}

std::optional<std::size_t> LabeledTable::column_index(const std::string& id) const {
  const auto it = std::find(columns.begin(), columns.end(), id);
  if (it == columns.end()) return std::nullopt;
  return static_cast<std::size_t>(it - columns.begin());
}

std::optional<double> GroundTruthTable::value(const std::string& row, const std::string& column) const {
  const auto r = row_index(row);
  const auto c = column_index(column);
  if (!r || !c) return std::nullopt;
  return at(*r, *c);
}

std::size_t GroundTruthTable::missing_count() const {
  return static_cast<std::size_t>(std::count(values.begin(), values.end(), std::nullopt));
}

void validate(const GroundTruthTable& table) {
  for (const auto* ids : {&table.rows, &table.columns}) {
    std::set<std::string> seen;
    for (const auto& id : *ids) {
      if (!seen.insert(id).second) throw Error(Errc::DuplicateIdentifier, "duplicate identifier '" + id + "'");
    }
  }
  if (table.values.size() != table.rows.size() * table.columns.size()) {
    throw Error(Errc::DimensionMismatch, "ground-truth value count does not match rows x columns");
  }
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    for (std::size_t c = 0; c < table.columns.size(); ++c) {
      const auto v = table.at(r, c);
      if (v && (!(*v >= 0.0) || *v > 100.0)) {
        throw Error(Errc::ValueOutOfRange, "ground truth " + table.rows[r] + "/" + table.columns[c] + " = " +
                                               csv::format_number(*v) + " not in [0, 100]");
      }
    }
  }
}

GroundTruthTable parse_ground_truth(std::istream& in) {
  const auto rows = csv::read(in);
  if (rows.empty()) throw Error(Errc::ParseError, "ground-truth CSV is empty");
  GroundTruthTable table;
  const auto& header = rows.front();
  if (header.size() < 2) throw Error(Errc::ParseError, "ground-truth header needs at least one target column");
  table.corner = std::string(csv::trim(header[0]));
  for (std::size_t c = 1; c < header.size(); ++c) table.columns.emplace_back(csv::trim(header[c]));
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& row = rows[r];
    if (row.size() != header.size()) {
      throw Error(Errc::ParseError, "line " + std::to_string(r + 1) + ": expected " + std::to_string(header.size()) +
                                        " cells, found " + std::to_string(row.size()));
    }
    table.rows.emplace_back(csv::trim(row[0]));
    for (std::size_t c = 1; c < row.size(); ++c) {
      const auto cell = csv::trim(row[c]);
      if (cell.empty()) {
        table.values.emplace_back(std::nullopt);
        continue;
      }
      const auto v = csv::parse_number(cell);
      if (!v) {
        throw Error(Errc::ParseError, "line " + std::to_string(r + 1) + ", column '" + table.columns[c - 1] +
                                          "': not a number: '" + std::string(cell) + "'");
      }
      table.values.emplace_back(*v);
    }
  }
  validate(table);
  return table;
}

GroundTruthTable load_ground_truth(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::IoError, "cannot open " + path.string());
  return parse_ground_truth(in);
}

void write_ground_truth(const GroundTruthTable& table, std::ostream& out) {
  csv::Row header{table.corner.empty() ? std::string("Source") : table.corner};
  header.insert(header.end(), table.columns.begin(), table.columns.end());
  csv::write_row(out, header);
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    csv::Row row{table.rows[r]};
    for (std::size_t c = 0; c < table.columns.size(); ++c) {
      const auto v = table.at(r, c);
      row.push_back(v ? csv::format_number(*v) : std::string());
    }
    csv::write_row(out, row);
  }
}

void validate(const EvalReport& report) {
  const auto k = report.metrics.size();
  if (report.tau.size() != report.targets.size() || report.ranks.size() != report.targets.size()) {
    throw Error(Errc::InvariantViolation, "report rows do not match target count");
  }
  if (report.avg_ranks.size() != k) throw Error(Errc::InvariantViolation, "avg_ranks length differs from metric count");
  std::vector<double> sums(k, 0.0);
  for (std::size_t t = 0; t < report.targets.size(); ++t) {
    if (report.tau[t].size() != k || report.ranks[t].size() != k) {
      throw Error(Errc::InvariantViolation, "report row for " + report.targets[t] + " has wrong width");
    }
    double total = 0.0;
    for (std::size_t m = 0; m < k; ++m) {
      const double r = report.ranks[t][m];
      if (r < 1.0 || r > static_cast<double>(k)) {
        throw Error(Errc::InvariantViolation, "rank out of 1..K for " + report.targets[t]);
      }
      if (const auto& tau = report.tau[t][m]; tau && (*tau < -1.0 - 1e-12 || *tau > 1.0 + 1e-12)) {
        throw Error(Errc::InvariantViolation, "tau outside [-1, 1] for " + report.targets[t]);
      }
      total += r;
      sums[m] += r;
    }
    const double expected = static_cast<double>(k * (k + 1)) / 2.0;
    if (std::abs(total - expected) > 1e-9) {
      throw Error(Errc::InvariantViolation, "ranks for " + report.targets[t] + " are not a ranking of 1..K");
    }
  }
  if (!report.targets.empty()) {
    for (std::size_t m = 0; m < k; ++m) {
      if (std::abs(sums[m] / static_cast<double>(report.targets.size()) - report.avg_ranks[m]) > 1e-9) {
        throw Error(Errc::InvariantViolation, "avg_ranks differ from column means of ranks");
      }
    }
  }
}

}  // namespace tfr
