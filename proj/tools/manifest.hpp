#pragma once

#include <chrono>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

namespace qsm::tools {

std::string sha256_hex(const std::vector<std::uint8_t>& bytes);

/// Collects everything needed to rerun a command: resolved config, hashed
/// inputs, outputs, seed and per-stage wall-clock timings.
class RunManifest {
 public:
  RunManifest(std::string subcommand, std::vector<std::string> argv);

  void set_config(nlohmann::json config) { config_ = std::move(config); }
  nlohmann::json& config() { return config_; }
  void set_seed(std::uint64_t seed) { seed_ = seed; }
  void set_execution(int threads, bool strict);
  /// Hashes the file's bytes now.
  void add_input(const std::filesystem::path& path);
  void add_output(const std::filesystem::path& path) { outputs_.push_back(path.string()); }
  void add_result(const std::string& key, nlohmann::json value) { results_[key] = std::move(value); }
  void time_stage(const std::string& name, double seconds) { timings_[name] = seconds; }

  nlohmann::json to_json() const;

 private:
  std::string subcommand_;
  std::vector<std::string> argv_;
  nlohmann::json config_ = nlohmann::json::object();
  nlohmann::json inputs_ = nlohmann::json::array();
  std::vector<std::string> outputs_;
  nlohmann::json results_ = nlohmann::json::object();
  nlohmann::json timings_ = nlohmann::json::object();
  std::uint64_t seed_ = 0;
  int threads_ = 1;
  bool strict_ = false;
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

}  // namespace qsm::tools
