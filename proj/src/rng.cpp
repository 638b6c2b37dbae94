#include "dgkd/rng.hpp"

namespace dgkd {

std::uint64_t mix_seed(std::uint64_t x)
{
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t hash_name(std::string_view name)
{
    // FNV-1a
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : name) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t substream_seed(std::uint64_t root, std::string_view name)
{
    return mix_seed(mix_seed(root) ^ hash_name(name));
}

Tensor Rng::normal_tensor(const Shape& shape, double stddev)
{
    Tensor t(shape);
    std::normal_distribution<double> dist(0.0, stddev);
    for (double& v : t.values())
        v = dist(engine_);
    return t;
}

Tensor Rng::uniform_tensor(const Shape& shape, double lo, double hi)
{
    Tensor t(shape);
    std::uniform_real_distribution<double> dist(lo, hi);
    for (double& v : t.values())
        v = dist(engine_);
    return t;
}

} // namespace dgkd
