#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include <json.hpp>

#include "qsm/nn/checkpoint.hpp"
#include "qsm/phantom.hpp"
#include "qsm/volume.hpp"

namespace qsm::nn {

struct TrainConfig {
  NetConfig net;
  RmspropConfig optimizer;
  int epochs = 1;
  int batch = 2;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
};

struct TrainLog {
  std::vector<double> step_loss;
  std::vector<double> epoch_loss;  // mean step loss per epoch
  int epochs_completed = 0;
  int resumed_from_epoch = -1;

  nlohmann::json to_json() const;
};

struct TrainResult {
  ParamStore params;
  TrainLog log;
};

/// Trains on (local_field, chi_true, mask) of each pair. Inputs and targets
/// are divided by the masked RMS of the sample's field so the network sees
/// unit-scale data. With a checkpoint path, a checkpoint is written after
/// every epoch; with `resume`, training continues from that file.
TrainResult train(const TrainConfig& cfg, const std::vector<PhantomPair>& data,
                  const std::optional<std::filesystem::path>& checkpoint_path = std::nullopt,
                  bool resume = false);

/// Masked L1 loss of the network on one pair, in the normalized units used by train().
double sample_loss(const NetConfig& cfg, const ParamStore& params, const PhantomPair& pair);

/// Susceptibility estimate (ppm, masked) for a local field. Dims must be
/// multiples of 16; there is no implicit padding.
Volume infer(const NetConfig& cfg, const ParamStore& params, const Volume& field, const Mask& mask);

}  // namespace qsm::nn
