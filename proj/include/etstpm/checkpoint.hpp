#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "etstpm/backbone.hpp"

namespace etstpm {

// Binary layout, all integers little-endian:
//   "ETSTPM01"                       8-byte magic
//   u32 entry_count
//   entry_count x { u16 name_len, name bytes (UTF-8), u8 rank, rank x u32 dims,
//                   prod(dims) x f32 row-major data }
//   u32 CRC-32 (IEEE, as in zlib) of every preceding byte
inline constexpr char kCheckpointMagic[8] = {'E', 'T', 'S', 'T', 'P', 'M', '0', '1'};

/// Name of the entry recording the effective backbone layout.
inline constexpr const char* kConfigEntry = "meta.backbone_config";

struct CheckpointEntry {
    std::string name;
    std::vector<std::uint32_t> dims;
    std::vector<float> data;

    friend bool operator==(const CheckpointEntry&, const CheckpointEntry&) = default;
};

std::vector<std::uint8_t> encode_checkpoint(const std::vector<CheckpointEntry>& entries);
/// Throws CorruptionError on CRC failure or malformed structure.
std::vector<CheckpointEntry> decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const Backbone& b, const std::filesystem::path& path);

/// Loads into a backbone built from `cfg`; every entry must match a parameter
/// of that layout (ConfigError names the first offending entry).
Backbone load_checkpoint(const std::filesystem::path& path, const BackboneConfig& cfg);

/// Loads using the layout recorded in the checkpoint itself.
Backbone load_checkpoint(const std::filesystem::path& path);

/// Layout recorded in a checkpoint (depth_scale folded into the widths).
BackboneConfig checkpoint_config(const std::filesystem::path& path);

} // namespace etstpm
