#pragma once

// Binary checkpoint container, shared by the LM and the classifier.
//
// Layout (all integers little-endian):
//   magic "CSTR" | u32 version | u64 header_len | header JSON (UTF-8)
//   u32 tensor_count
//   per tensor: u32 name_len | name | u32 ndims | u64 dims[] | f32 data
// Tensor data is row-major 32-bit floats. Truncated or malformed files
// raise FormatError. Writes go to a temp file renamed into place, so a
// reader never sees a half-written checkpoint and training can never
// clobber a checkpoint a decode currently holds open.

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace capsteer {

struct NamedTensor {
  std::string name;
  std::vector<std::uint64_t> dims;
  std::vector<float> data;  // row-major
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_checkpoint(const std::string& path, const nlohmann::json& header,
                      const std::vector<NamedTensor>& tensors);

struct Checkpoint {
  nlohmann::json header;
  std::vector<NamedTensor> tensors;
};

Checkpoint read_checkpoint(const std::string& path);

// FNV-1a 64 over tensors in name-sorted order: name bytes, a NUL, dims,
// then the little-endian float bytes. Proves parameters are untouched by
// guidance and stable across save/load.
std::uint64_t fingerprint(const std::vector<NamedTensor>& tensors);

std::string fingerprint_hex(std::uint64_t fp);

}  // namespace capsteer
