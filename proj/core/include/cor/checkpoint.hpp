#pragma once

// Checkpoint container:
//   bytes 0..7   magic "MOECKPT1"
//   bytes 8..15  header length H, unsigned little-endian
//   next H bytes UTF-8 JSON {"config": {...}, "tensors": [{name, shape, dtype: "f32", offset}]}
//   then raw little-endian f32 blobs, row-major, in manifest order. Offsets
//   are relative to the first blob byte.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cor/model.hpp"

namespace cor {

inline constexpr char kCheckpointMagic[] = "MOECKPT1";

std::vector<std::uint8_t> encode_checkpoint(const MoeModel& model);
MoeModel decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const MoeModel& model, const std::filesystem::path& path);
MoeModel load_checkpoint(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

}  // namespace cor
