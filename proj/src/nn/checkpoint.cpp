#include "qsm/nn/checkpoint.hpp"

#include <bit>
#include <cstring>

#include "qsm/error.hpp"
#include "qsm/volume_io.hpp"

namespace qsm::nn {
namespace {

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
}

std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int b = 0; b < 8; ++b) v |= static_cast<std::uint64_t>(p[b]) << (8 * b);
  return v;
}

nlohmann::json shape_json(const Shape5& s) { return {s.n, s.c, s.d, s.h, s.w}; }

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json names = nlohmann::json::array();
  for (const auto& e : ckpt.params.entries()) names.push_back({{"name", e.name}, {"shape", shape_json(e.value.shape())}});
  const nlohmann::json manifest = {{"net", ckpt.net.to_json()},
                                   {"optimizer", ckpt.optimizer.to_json()},
                                   {"step", ckpt.params.step},
                                   {"params", names},
                                   {"state", ckpt.state}};
  const std::string header = manifest.dump();
  std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + 8);
  const auto len = static_cast<std::uint32_t>(header.size());
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<std::uint8_t>(len >> (8 * b)));
  out.insert(out.end(), header.begin(), header.end());
  out.reserve(out.size() + 16 * ckpt.params.parameter_count());
  for (const auto& e : ckpt.params.entries()) {
    for (double v : e.value.value()) put_u64(out, std::bit_cast<std::uint64_t>(v));
    for (double v : e.accum) put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
    fail(ErrorCode::bad_magic, "not a QSMCKPT1 checkpoint");
  }
  std::uint32_t len = 0;
  for (int b = 0; b < 4; ++b) len |= static_cast<std::uint32_t>(bytes[8 + b]) << (8 * b);
  if (bytes.size() - 12 < len) fail(ErrorCode::bad_header, "checkpoint manifest truncated");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + len);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::bad_header, std::string("checkpoint manifest is not valid JSON: ") + e.what());
  }
  if (!manifest.contains("net") || !manifest.contains("params")) {
    fail(ErrorCode::bad_header, "checkpoint manifest lacks net or params");
  }
  Checkpoint ck;
  ck.net = NetConfig::from_json(manifest["net"]);
  ck.optimizer = RmspropConfig::from_json(manifest.value("optimizer", nlohmann::json::object()));
  ck.state = manifest.value("state", nlohmann::json::object());
  ck.params = zero_params(ck.net);
  ck.params.step = manifest.value("step", std::uint64_t{0});

  auto& entries = ck.params.entries();
  const auto& listed = manifest["params"];
  if (!listed.is_array() || listed.size() != entries.size()) {
    fail(ErrorCode::checkpoint_mismatch, "checkpoint parameter list does not match the network config");
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const Shape5& s = entries[i].value.shape();
    if (listed[i].value("name", "") != entries[i].name || listed[i].value("shape", nlohmann::json()) != shape_json(s)) {
      fail(ErrorCode::checkpoint_mismatch, "checkpoint parameter " + std::to_string(i) + " (" +
                                               listed[i].value("name", "?") + ") does not match expected " +
                                               entries[i].name + " " + to_string(s));
    }
  }
  const std::size_t expected = 12 + len + 16 * ck.params.parameter_count();
  if (bytes.size() < expected) fail(ErrorCode::truncated_payload, "checkpoint payload truncated");
  if (bytes.size() > expected) fail(ErrorCode::payload_mismatch, "checkpoint payload has trailing bytes");
  const std::uint8_t* p = bytes.data() + 12 + len;
  for (auto& e : entries) {
    for (double& v : e.value.mutable_value()) {
      v = std::bit_cast<double>(get_u64(p));
      p += 8;
    }
    for (double& v : e.accum) {
      v = std::bit_cast<double>(get_u64(p));
      p += 8;
    }
  }
  return ck;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  atomic_write(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

}  // namespace qsm::nn
