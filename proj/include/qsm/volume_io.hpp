#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "qsm/volume.hpp"

namespace qsm {

// QSMVOL1 layout:
//   bytes 0-7     "QSMVOL1\n"
//   bytes 8-11    u32 LE header length H
//   bytes 12..    H bytes of UTF-8 JSON {dims, voxel_size_mm, unit, b0_dir?}
//   remainder     nx*ny*nz f32 LE, x-fastest

inline constexpr char kVolumeMagic[8] = {'Q', 'S', 'M', 'V', 'O', 'L', '1', '\n'};

std::vector<std::uint8_t> encode_volume(const Volume& vol);
Volume decode_volume(const std::vector<std::uint8_t>& bytes);

void write_volume(const Volume& vol, const std::filesystem::path& path);
Volume read_volume(const std::filesystem::path& path);

Mask read_mask(const std::filesystem::path& path);
void write_mask(const Mask& mask, const std::filesystem::path& path);

/// Writes to a sibling temp file and renames over the target.
void atomic_write(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
void atomic_write(const std::filesystem::path& path, const std::string& text);
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

}  // namespace qsm
