#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "astra/model.hpp"

namespace astra {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// "ASTM", version, config record, parameter tensors (rows, cols, f32 data) in
// declaration order, then codebooks as AVQ1 records and residual moments.
// All integers and reals little-endian.
std::vector<std::uint8_t> serialize_model(const Model& model);
Model deserialize_model(std::span<const std::uint8_t> bytes);

void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);

}  // namespace astra
