#pragma once

#include "dgkd/tensor.hpp"

#include <cstdint>
#include <random>
#include <string_view>

namespace dgkd {

/// splitmix64 finalizer; used to derive independent seeds.
std::uint64_t mix_seed(std::uint64_t x);
std::uint64_t hash_name(std::string_view name);

/// Named substream of a root seed: substream_seed(root, "init") etc.
std::uint64_t substream_seed(std::uint64_t root, std::string_view name);

class Rng {
public:
    explicit Rng(std::uint64_t seed)
        : engine_(seed)
    {
    }

    double uniform(double lo = 0.0, double hi = 1.0)
    {
        return std::uniform_real_distribution<double>(lo, hi)(engine_);
    }
    int uniform_int(int lo, int hi) // inclusive
    {
        return std::uniform_int_distribution<int>(lo, hi)(engine_);
    }
    double normal(double mean = 0.0, double stddev = 1.0)
    {
        return std::normal_distribution<double>(mean, stddev)(engine_);
    }
    Tensor normal_tensor(const Shape& shape, double stddev = 1.0);
    Tensor uniform_tensor(const Shape& shape, double lo, double hi);

    std::mt19937_64& engine() noexcept { return engine_; }

private:
    std::mt19937_64 engine_;
};

} // namespace dgkd
