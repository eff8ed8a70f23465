#include "qsm/volume_io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include <json.hpp>

namespace qsm {
namespace {

using json = nlohmann::json;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return std::uint32_t{p[0]} | (std::uint32_t{p[1]} << 8) | (std::uint32_t{p[2]} << 16) |
         (std::uint32_t{p[3]} << 24);
}

std::size_t parse_dim(const json& j) {
  if (!j.is_number_integer() && !j.is_number_unsigned()) {
    fail(ErrorCode::bad_header, "QSMVOL1 header: dims entries must be integers");
  }
  const auto v = j.get<long long>();
  if (v < 1) fail(ErrorCode::invalid_dims, "QSMVOL1 header: dims must be >= 1, got " + j.dump());
  return static_cast<std::size_t>(v);
}

}  // namespace

std::vector<std::uint8_t> encode_volume(const Volume& vol) {
  require_finite(vol.data(), "write_volume");
  json header;
  header["dims"] = {vol.dims().nx, vol.dims().ny, vol.dims().nz};
  header["voxel_size_mm"] = {vol.voxel_mm().dx, vol.voxel_mm().dy, vol.voxel_mm().dz};
  header["unit"] = std::string(unit_name(vol.unit()));
  if (vol.b0()) header["b0_dir"] = {vol.b0()->x(), vol.b0()->y(), vol.b0()->z()};
  const std::string text = header.dump();

  std::vector<std::uint8_t> out(std::begin(kVolumeMagic), std::end(kVolumeMagic));
  out.reserve(12 + text.size() + 4 * vol.size());
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  for (double x : vol.data()) {
    const auto f = static_cast<float>(x);
    if (!std::isfinite(f)) fail(ErrorCode::non_finite, "write_volume: value overflows float32");
    put_u32(out, std::bit_cast<std::uint32_t>(f));
  }
  return out;
}

Volume decode_volume(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kVolumeMagic, 8) != 0) {
    fail(ErrorCode::bad_magic, "not a QSMVOL1 file (bad magic)");
  }
  if (bytes.size() < 12) fail(ErrorCode::bad_header, "QSMVOL1: truncated header length");
  const std::uint32_t hlen = get_u32(bytes.data() + 8);
  if (bytes.size() < 12 + std::size_t{hlen}) fail(ErrorCode::bad_header, "QSMVOL1: truncated header");

  json header;
  try {
    header = json::parse(bytes.begin() + 12, bytes.begin() + 12 + hlen);
  } catch (const json::exception& e) {
    fail(ErrorCode::bad_header, std::string("QSMVOL1: header is not valid JSON: ") + e.what());
  }
  if (!header.is_object() || !header.contains("dims") || !header.contains("voxel_size_mm") ||
      !header.contains("unit")) {
    fail(ErrorCode::bad_header, "QSMVOL1: header needs dims, voxel_size_mm and unit");
  }
  const json& jd = header["dims"];
  const json& jv = header["voxel_size_mm"];
  if (!jd.is_array() || jd.size() != 3 || !jv.is_array() || jv.size() != 3) {
    fail(ErrorCode::bad_header, "QSMVOL1: dims and voxel_size_mm must be 3-element arrays");
  }
  if (!header["unit"].is_string()) fail(ErrorCode::bad_header, "QSMVOL1: unit must be a string");

  const Dims dims{parse_dim(jd[0]), parse_dim(jd[1]), parse_dim(jd[2])};
  VoxelSize vs;
  try {
    vs = VoxelSize{jv[0].get<double>(), jv[1].get<double>(), jv[2].get<double>()};
  } catch (const json::exception&) {
    fail(ErrorCode::bad_header, "QSMVOL1: voxel_size_mm entries must be numbers");
  }
  const Grid grid(dims, vs);
  const Unit unit = parse_unit(header["unit"].get<std::string>());

  const std::size_t payload = bytes.size() - 12 - hlen;
  const std::size_t expected = grid.count() * 4;
  if (payload < expected) {
    fail(ErrorCode::truncated_payload, "QSMVOL1: truncated payload, expected " +
                                           std::to_string(expected) + " bytes, found " +
                                           std::to_string(payload));
  }
  if (payload > expected) {
    fail(ErrorCode::payload_mismatch, "QSMVOL1: payload longer than dims imply (" +
                                          std::to_string(payload) + " > " +
                                          std::to_string(expected) + ")");
  }

  std::vector<double> data(grid.count());
  const std::uint8_t* p = bytes.data() + 12 + hlen;
  for (std::size_t n = 0; n < data.size(); ++n) {
    data[n] = static_cast<double>(std::bit_cast<float>(get_u32(p + 4 * n)));
  }
  Volume vol(grid, unit, std::move(data));
  if (header.contains("b0_dir")) {
    const json& jb = header["b0_dir"];
    if (!jb.is_array() || jb.size() != 3) fail(ErrorCode::bad_header, "QSMVOL1: bad b0_dir");
    vol.set_b0(B0Direction::from_unit(jb[0].get<double>(), jb[1].get<double>(),
                                       jb[2].get<double>()));
  }
  return vol;
}

void write_volume(const Volume& vol, const std::filesystem::path& path) {
  atomic_write(path, encode_volume(vol));
}

Volume read_volume(const std::filesystem::path& path) { return decode_volume(read_file(path)); }

Mask read_mask(const std::filesystem::path& path) {
  return Mask::from_volume(read_volume(path).relabeled(Unit::dimensionless));
}

void write_mask(const Mask& mask, const std::filesystem::path& path) {
  write_volume(mask.volume(), path);
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::io_failure, "cannot open '" + path.string() + "' for reading");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return bytes;
}

void atomic_write(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  namespace fs = std::filesystem;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::random_device rd;
  fs::path tmp = path;
  tmp += ".tmp" + std::to_string(rd());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::io_failure, "cannot open '" + tmp.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorCode::io_failure, "write failed for '" + tmp.string() + "'");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp);
    fail(ErrorCode::io_failure, "rename to '" + path.string() + "' failed: " + ec.message());
  }
}

void atomic_write(const std::filesystem::path& path, const std::string& text) {
  atomic_write(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

}  // namespace qsm
