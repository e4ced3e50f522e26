#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>

#include "attune/network.hpp"

ATTUNE_NAMESPACE_BEGIN

struct TrainingMetadata {
  std::size_t epoch = 0;
  std::uint64_t seed = 0;
  std::map<std::string, double> metrics;

  friend bool operator==(const TrainingMetadata&, const TrainingMetadata&) = default;
};

struct Checkpoint {
  BayesianNetwork model;
  TrainingMetadata metadata;
};

// Layout:
//   "BCNN" | version byte (1) | u32 LE manifest length | UTF-8 JSON manifest |
//   raw little-endian f32 payloads, in manifest order.
// The manifest holds {"architecture", "tensors": [{name, dtype, shape,
// offset}], "metadata": {epoch, seed, metrics}}; offsets are relative to the
// first payload byte.

inline constexpr std::string_view kCheckpointMagic = "BCNN";
inline constexpr std::uint8_t kCheckpointVersion = 1;

std::string encode_checkpoint(const BayesianNetwork& model, const TrainingMetadata& metadata);
/// Throws FormatError on a bad magic, version, manifest, or payload size.
Checkpoint decode_checkpoint(std::string_view bytes);

/// Writes to a sibling temporary file and renames it over `path`.
void save_checkpoint(const std::filesystem::path& path, const BayesianNetwork& model,
                     const TrainingMetadata& metadata);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::string architecture_to_json(const ArchitectureDescriptor& arch);
ArchitectureDescriptor architecture_from_json(std::string_view json);

/// Reads a whole file; throws FormatError when it cannot be opened.
std::string read_file(const std::filesystem::path& path);
/// Replaces `path` atomically with `contents`.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

ATTUNE_NAMESPACE_END
