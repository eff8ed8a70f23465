#include "manifest.hpp"

#include <openssl/evp.h>

#include <cstdio>

#include "qsm/error.hpp"
#include "qsm/volume_io.hpp"

#ifndef QSM_VERSION
#define QSM_VERSION "unknown"
#endif

namespace qsm::tools {

std::string sha256_hex(const std::vector<std::uint8_t>& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    fail(ErrorCode::io_failure, "SHA-256 digest failed");
  }
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", md[i]);
    hex += buf;
  }
  return hex;
}

RunManifest::RunManifest(std::string subcommand, std::vector<std::string> argv)
    : subcommand_(std::move(subcommand)), argv_(std::move(argv)) {}

void RunManifest::set_execution(int threads, bool strict) {
  threads_ = threads;
  strict_ = strict;
}

void RunManifest::add_input(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  inputs_.push_back({{"path", path.string()}, {"bytes", bytes.size()}, {"sha256", sha256_hex(bytes)}});
}

nlohmann::json RunManifest::to_json() const {
  nlohmann::json t = timings_;
  t["total"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  return {{"tool", "qsmtool"},
          {"version", QSM_VERSION},
          {"subcommand", subcommand_},
          {"argv", argv_},
          {"config", config_},
          {"seed", seed_},
          {"threads", threads_},
          {"strict_deterministic", strict_},
          {"inputs", inputs_},
          {"outputs", outputs_},
          {"results", results_},
          {"timings_s", t}};
}

}  // namespace qsm::tools
