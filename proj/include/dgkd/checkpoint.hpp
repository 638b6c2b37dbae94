#pragma once

// Versioned binary checkpoint container (little-endian):
//   "DGKDCKPT" | u32 version | u64 step | str config_hash | str meta_json
//   | u32 n | n x tensor entry      (parameters)
//   | u32 m | m x tensor entry      (optimizer momentum)
// str = u32 length + bytes; tensor entry = str name | u32 rank | rank x i32 dims
//   | numel x f64 values.

#include "dgkd/nn.hpp"
#include "dgkd/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace dgkd::ckpt {

inline constexpr std::uint32_t kVersion = 1;

struct Checkpoint {
    std::uint64_t step = 0;
    std::string config_hash;
    std::string meta_json = "{}";
    std::vector<std::pair<std::string, Tensor>> params;
    std::vector<std::pair<std::string, Tensor>> momentum;
};

void save(const std::filesystem::path& path, const Checkpoint& ck);
Checkpoint load(const std::filesystem::path& path);

Checkpoint capture(const nn::ParamStore& params, const nn::Sgd* opt, std::uint64_t step, std::string config_hash);

/// Copies values into an existing store; names and shapes must match exactly.
void restore(const Checkpoint& ck, nn::ParamStore& params, nn::Sgd* opt = nullptr);

} // namespace dgkd::ckpt
