#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mlma/tensor.hpp"

MLMA_NAMESPACE_BEGIN

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

// Binary layout, all integers little-endian:
//   "MLMA" | u32 version (=1) | u32 count
//   per tensor: u16 name length | UTF-8 name | u8 dtype (0 f32, 1 f64)
//               | u8 rank | rank x u64 extents | raw values
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> encode_checkpoint(const NamedTensors& tensors);
/// Values stored as the other precision are converted to Real.
NamedTensors decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors);
NamedTensors load_checkpoint(const std::filesystem::path& path);

/// Copies values from `source` into same-named tensors of `target`.
/// Every target name must be present with an identical shape.
void assign_by_name(const NamedTensors& target, const NamedTensors& source);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

/// FNV-1a over the encoded form; used to audit that parameters are untouched.
std::uint64_t parameter_hash(const NamedTensors& tensors);

/// Ordered UTF-8 key=value records (metadata sidecars, run configs).
/// Blank lines and lines starting with '#' are skipped on read.
using KeyValues = std::map<std::string, std::string>;

KeyValues parse_key_values(const std::string& text, const std::string& origin = "<string>");
KeyValues read_key_values(const std::filesystem::path& path);
std::string format_key_values(const KeyValues& kv);
void write_key_values(const std::filesystem::path& path, const KeyValues& kv);

MLMA_NAMESPACE_END
