#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "aclstage/nn/parameters.hpp"

namespace aclstage::nn {

// KWTS weights container: "KWTS", u32 version, u32 tensor count, then per
// tensor u32 name length, name bytes, u32 rank, u32 extents, float32 values.
// All integers and floats little-endian.
inline constexpr std::uint32_t kKwtsVersion = 1;

// Raised when a weights file does not belong to the architecture it is
// loaded into (count, names or shapes differ) or has another version.
class WeightsVersionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct WeightsEntry {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

std::vector<std::uint8_t> encode_kwts(const std::vector<WeightsEntry>& entries);
std::vector<WeightsEntry> decode_kwts(std::span<const std::uint8_t> bytes);

template <typename T>
std::vector<WeightsEntry> export_weights(const ParameterSet<T>& params);

template <typename T>
void import_weights(const std::vector<WeightsEntry>& entries, ParameterSet<T>& params);

template <typename T>
void save_weights(const std::filesystem::path& path, const ParameterSet<T>& params);

template <typename T>
void load_weights(const std::filesystem::path& path, ParameterSet<T>& params);

}  // namespace aclstage::nn
