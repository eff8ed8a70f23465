#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <json.hpp>

#include "qsm/nn/net.hpp"
#include "qsm/nn/optim.hpp"

namespace qsm::nn {

// QSMCKPT1 layout:
//   bytes 0-7   "QSMCKPT1"
//   bytes 8-11  u32 LE manifest length M
//   next M      UTF-8 JSON {net, optimizer, step, params: [{name, shape}], state}
//   remainder   per parameter in manifest order: values then accumulator, f64 LE

inline constexpr char kCheckpointMagic[8] = {'Q', 'S', 'M', 'C', 'K', 'P', 'T', '1'};

struct Checkpoint {
  NetConfig net;
  RmspropConfig optimizer;
  ParamStore params;
  nlohmann::json state = nlohmann::json::object();  // trainer bookkeeping
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
/// Rejects bad magic/header and any parameter name, order or shape that does
/// not match the layout implied by the stored network config.
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace qsm::nn
