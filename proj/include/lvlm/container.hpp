#pragma once

// Named-tensor container ("LVLM" files), all integers little-endian:
//   magic "LVLM" | u32 version (1) | u32 entry count
//   per entry: u16 name length | name bytes (UTF-8) | u8 dtype (0 = f32) | u8 ndim |
//              ndim x u32 dims | payload, row-major little-endian

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "lvlm/tensor.hpp"

namespace lvlm {

inline constexpr std::uint32_t kContainerVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor value;
};

using NamedTensors = std::vector<NamedTensor>;

std::string encode_tensors(const NamedTensors& tensors);
/// `source` only labels error messages.
NamedTensors decode_tensors(std::string_view bytes, std::string_view source = "<memory>");

void save_tensors(const std::filesystem::path& path, const NamedTensors& tensors);
NamedTensors load_tensors(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

}  // namespace lvlm
