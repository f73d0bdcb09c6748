#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

#include "json.hpp"
#include "tfr/data_model.hpp"
#include "tfr/error.hpp"

namespace tfr {

static_assert(std::endian::native == std::endian::little, "bundle IO assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'T', 'F', 'R', 'B'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint32_t kFlagLabels = 1u << 0;
constexpr std::uint32_t kFlagGradNorms = 1u << 1;
constexpr std::size_t kHeaderBytes = 4 + 4 + 8 + 8 + 8 + 4;

class Writer {
 public:
  template <typename T>
  void put(T v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(T));
  }
  // Eigen storage is column-major; the file is row-major.
  void put_rows(const Matrix& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) put<double>(m(r, c));
    }
  }
  const std::vector<char>& bytes() const { return buf_; }

 private:
  std::vector<char> buf_;
};

class Reader {
 public:
  explicit Reader(const std::vector<char>& buf) : buf_(buf) {}
  template <typename T>
  T get() {
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::size_t offset() const { return pos_; }

 private:
  const std::vector<char>& buf_;
  std::size_t pos_ = 0;
};

std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::IoError, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, const char* data, std::size_t size) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::IoError, "cannot open " + path.string() + " for writing");
  out.write(data, static_cast<std::streamsize>(size));
  if (!out) throw Error(Errc::IoError, "write failed for " + path.string());
}

// Returns a*b + c, or nullopt on overflow.
std::optional<std::uint64_t> mul_add(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  if (a != 0 && b > (std::numeric_limits<std::uint64_t>::max() - c) / a) return std::nullopt;
  return a * b + c;
}

nlohmann::json sidecar_json(const CandidateBundle& b) {
  nlohmann::json j;
  j["schema"] = "tfr.bundle_meta";
  j["version"] = 1;
  j["model_id"] = b.model_id;
  j["source_dataset"] = b.source_dataset;
  j["architecture"] = b.architecture;
  j["provenance"] = b.provenance;
  if (b.num_classes) j["num_classes"] = *b.num_classes;
  return j;
}

void read_sidecar(const std::filesystem::path& path, CandidateBundle& b) {
  const auto meta_path = sidecar_path(path);
  std::ifstream in(meta_path);
  if (!in) throw Error(Errc::IoError, "missing sidecar " + meta_path.string());
  nlohmann::json j;
  try {
    in >> j;
    b.model_id = j.at("model_id").get<std::string>();
    b.source_dataset = j.value("source_dataset", std::string());
    b.architecture = j.value("architecture", std::string());
    if (j.contains("provenance")) b.provenance = j.at("provenance").get<std::map<std::string, std::string>>();
    if (j.contains("num_classes")) b.num_classes = j.at("num_classes").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::MalformedHeader, meta_path.string() + ": " + e.what());
  }
}

}  // namespace

std::filesystem::path sidecar_path(const std::filesystem::path& bundle_path) {
  return std::filesystem::path(bundle_path.string() + ".meta.json");
}

void save_bundle(const CandidateBundle& bundle, const std::filesystem::path& path) {
  validate(bundle);
  const auto n = static_cast<std::uint64_t>(bundle.embeddings.rows());
  const auto d = static_cast<std::uint64_t>(bundle.embeddings.cols());
  const auto z = bundle.source_probs ? static_cast<std::uint64_t>(bundle.source_probs->cols()) : 0;
  std::uint32_t flags = 0;
  if (bundle.labels) flags |= kFlagLabels;
  if (bundle.grad_norms) flags |= kFlagGradNorms;

  Writer w;
  for (char c : kMagic) w.put(c);
  w.put(kVersion);
  w.put(n);
  w.put(d);
  w.put(z);
  w.put(flags);
  if (bundle.labels) {
    for (int y : *bundle.labels) w.put(static_cast<std::int64_t>(y));
  }
  w.put_rows(bundle.embeddings);
  if (bundle.source_probs) w.put_rows(*bundle.source_probs);
  if (bundle.grad_norms) {
    w.put(bundle.grad_norms->conv1);
    w.put(bundle.grad_norms->conv2);
  }
  write_file(path, w.bytes().data(), w.bytes().size());

  const auto meta = sidecar_json(bundle).dump(2) + "\n";
  write_file(sidecar_path(path), meta.data(), meta.size());
}

CandidateBundle load_bundle(const std::filesystem::path& path) {
  const auto buf = read_file(path);
  const auto where = path.string();
  if (buf.size() < kHeaderBytes) {
    throw Error(Errc::MalformedHeader, where + ": file has " + std::to_string(buf.size()) +
                                           " bytes, shorter than the " + std::to_string(kHeaderBytes) + "-byte header");
  }
  if (std::memcmp(buf.data(), kMagic, 4) != 0) throw Error(Errc::MalformedHeader, where + ": bad magic at offset 0");
  Reader r(buf);
  for (int i = 0; i < 4; ++i) r.get<char>();
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion) {
    throw Error(Errc::MalformedHeader, where + ": unsupported version " + std::to_string(version) + " at offset 4");
  }
  const auto n = r.get<std::uint64_t>();
  const auto d = r.get<std::uint64_t>();
  const auto z = r.get<std::uint64_t>();
  const auto flags = r.get<std::uint32_t>();
  if ((flags & ~(kFlagLabels | kFlagGradNorms)) != 0) {
    throw Error(Errc::MalformedHeader, where + ": unknown flag bits at offset 32");
  }
  if (n == 0 || d == 0) throw Error(Errc::InvariantViolation, where + ": n and D must be positive");

  // Payload size in 8-byte words.
  auto words = mul_add(n, d, 0);
  if (words && (flags & kFlagLabels)) words = mul_add(1, *words, n);
  if (words && z > 0) {
    const auto probs = mul_add(n, z, 0);
    words = probs ? mul_add(1, *words, *probs) : std::nullopt;
  }
  if (words && (flags & kFlagGradNorms)) words = mul_add(1, *words, 2);
  const auto payload = words ? mul_add(*words, 8, kHeaderBytes) : std::nullopt;
  if (!payload || *payload != buf.size()) {
    throw Error(Errc::DimensionMismatch, where + ": header declares n=" + std::to_string(n) + ", D=" +
                                             std::to_string(d) + ", Z=" + std::to_string(z) + " but file has " +
                                             std::to_string(buf.size()) + " bytes");
  }

  CandidateBundle b;
  read_sidecar(path, b);
  const auto rows = static_cast<Eigen::Index>(n);
  if (flags & kFlagLabels) {
    Labels labels(n);
    for (std::uint64_t i = 0; i < n; ++i) {
      const auto off = r.offset();
      const auto y = r.get<std::int64_t>();
      if (y < 0 || y > std::numeric_limits<int>::max() || (b.num_classes && y >= *b.num_classes)) {
        throw Error(Errc::LabelOutOfRange, where + ": labels[" + std::to_string(i) + "] = " + std::to_string(y) +
                                               " at offset " + std::to_string(off));
      }
      labels[i] = static_cast<int>(y);
    }
    b.labels = std::move(labels);
  }
  auto read_matrix = [&](std::uint64_t cols, const char* field) {
    Matrix m(rows, static_cast<Eigen::Index>(cols));
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) {
        const auto off = r.offset();
        const double v = r.get<double>();
        if (!std::isfinite(v)) {
          throw Error(Errc::NonFiniteValue, where + ": " + field + "[" + std::to_string(i) + "," + std::to_string(j) +
                                                "] at offset " + std::to_string(off));
        }
        m(i, j) = v;
      }
    }
    return m;
  };
  b.embeddings = read_matrix(d, "embeddings");
  if (z > 0) b.source_probs = read_matrix(z, "source_probs");
  if (flags & kFlagGradNorms) {
    GradNorms g;
    g.conv1 = r.get<double>();
    g.conv2 = r.get<double>();
    b.grad_norms = g;
  }
  validate(b);
  return b;
}

void save_target_set(const TargetSet& target, const std::filesystem::path& path) {
  validate(target);
  CandidateBundle b;
  b.model_id = target.name;
  b.source_dataset = target.name;
  b.architecture = "target";
  b.embeddings = target.embeddings;
  b.labels = target.labels;
  b.num_classes = target.num_classes;
  save_bundle(b, path);
}

TargetSet load_target_set(const std::filesystem::path& path) {
  auto b = load_bundle(path);
  if (!b.labels) throw Error(Errc::MalformedHeader, path.string() + ": labels flag not set; not a target set file");
  TargetSet t;
  t.name = b.model_id;
  t.embeddings = std::move(b.embeddings);
  t.labels = std::move(*b.labels);
  if (b.num_classes) {
    t.num_classes = *b.num_classes;
  } else {
    t.num_classes = *std::max_element(t.labels.begin(), t.labels.end()) + 1;
  }
  validate(t);
  return t;
}

}  // namespace tfr
