#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

namespace bisync {

// Container shared by float checkpoints and quantized models: the 8-byte
// magic "BISYNCCK", a u64 little-endian header length, a JSON header, then
// the raw little-endian tensor bytes in header order.
struct TensorBlob {
  std::string name;
  std::string dtype;  // "float32" or "int8"
  int rows = 0;
  int cols = 0;
  std::vector<std::uint8_t> bytes;
};

inline constexpr int kTensorFileVersion = 1;

void write_tensor_file(const std::filesystem::path& path, nlohmann::json header, const std::vector<TensorBlob>& tensors);

struct TensorFile {
  nlohmann::json header;
  std::vector<TensorBlob> tensors;

  const TensorBlob& find(const std::string& name) const;
};

TensorFile read_tensor_file(const std::filesystem::path& path);

}  // namespace bisync
