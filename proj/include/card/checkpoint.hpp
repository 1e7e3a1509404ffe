#pragma once

#include <filesystem>

#include "card/model.hpp"

namespace card {

// Binary layout, all integers little-endian:
//   "CARDCKPT"            8-byte magic
//   u32 version           currently 1
//   u64 config digest     ModelConfig::digest()
//   u32 entry count
//   per entry: u32 name length, name bytes, u32 rank, u32 extents[rank],
//              f32 values[product of extents]
// Entries cover every parameter and running statistic of the model.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, Model& model);

// Throws ConfigError on a bad magic, version or digest, or when the entry
// table does not match the model's parameters by name and shape.
void load_checkpoint(const std::filesystem::path& path, Model& model);

}  // namespace card
