#include <cstdlib>

#include <openssl/evp.h>

#include "tfr/cli.hpp"
#include "tfr/error.hpp"

namespace tfr::cli {

namespace {

using nlohmann::json;

void merge_into(json& base, const json& user, const std::string& where) {
  if (!user.is_object()) throw Error(Errc::ParseError, (where.empty() ? "config" : where) + " must be a JSON object");
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string key = where.empty() ? it.key() : where + "." + it.key();
    if (!base.contains(it.key())) throw Error(Errc::ParseError, "unknown config key '" + key + "'");
    auto& slot = base[it.key()];
    if (slot.is_object() && it.value().is_object()) {
      merge_into(slot, it.value(), key);
    } else {
      slot = it.value();
    }
  }
}

}  // namespace

json default_config(const std::string& command) {
  if (command == "score") {
    return {
        {"target", nullptr},
        {"candidates", json::array()},
        {"metrics", {"ours"}},
        {"out_dir", "."},
        {"seed", nullptr},
        {"threads", 1},
        {"mode", "in_domain"},
        {"nca",
         {{"out_dim", nullptr}, {"l2_penalty", nullptr}, {"max_iters", nullptr}, {"step_size", nullptr}, {"tol", nullptr}}},
        {"knn", {{"k", 5}}},
        {"nleep", {{"variance_keep", 0.8}, {"components", 0}}},
    };
  }
  if (command == "eval") {
    return {
        {"scores", json::array()},
        {"truth", nullptr},
        {"tau_table", nullptr},
        {"tie_mode", "ordinal_by_column_order"},
        {"alpha", 0.05},
        {"q", nullptr},
        {"out", "eval_report.json"},
        {"csv_out", nullptr},
    };
  }
  if (command == "synth") {
    return {
        {"out_dir", "zoo"}, {"seed", nullptr}, {"targets", 1}, {"sources", nullptr}, {"threads", 1}, {"zoo", nullptr},
    };
  }
  if (command == "report") {
    return {
        {"report", nullptr}, {"truth", nullptr}, {"compare", json::array()}, {"exclude_self", true}, {"format", "text"},
    };
  }
  throw Error(Errc::ParseError, "unknown command '" + command + "'");
}

json resolve_config(const std::string& command, const json& user) {
  json cfg = default_config(command);
  if (!user.is_null()) merge_into(cfg, user, "");
  if (cfg.contains("seed") && cfg["seed"].is_null()) {
    std::uint64_t seed = 0;
    if (const char* env = std::getenv("TFR_SEED"); env && *env) {
      char* end = nullptr;
      seed = std::strtoull(env, &end, 10);
      if (*end != '\0') throw Error(Errc::ParseError, std::string("TFR_SEED is not an unsigned integer: ") + env);
    }
    cfg["seed"] = seed;
  }
  return cfg;
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error(Errc::IoError, "SHA-256 computation failed");
  }
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xF]);
  }
  return out;
}

}  // namespace tfr::cli
