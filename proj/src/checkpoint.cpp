#include "dgkd/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace dgkd::ckpt {

namespace {

constexpr char kMagic[8] = {'D', 'G', 'K', 'D', 'C', 'K', 'P', 'T'};

template <typename T> void put(std::ostream& os, T v)
{
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void put_str(std::ostream& os, const std::string& s)
{
    put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

void put_entries(std::ostream& os, const std::vector<std::pair<std::string, Tensor>>& entries)
{
    put<std::uint32_t>(os, static_cast<std::uint32_t>(entries.size()));
    for (const auto& [name, t] : entries) {
        put_str(os, name);
        put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
        for (int d : t.shape())
            put<std::int32_t>(os, d);
        os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    }
}

template <typename T> T get(std::istream& is)
{
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!is)
        throw std::runtime_error("checkpoint: truncated file");
    return v;
}

std::string get_str(std::istream& is)
{
    const auto n = get<std::uint32_t>(is);
    if (n > (1u << 26))
        throw std::runtime_error("checkpoint: implausible string length");
    std::string s(n, '\0');
    is.read(s.data(), n);
    if (!is)
        throw std::runtime_error("checkpoint: truncated file");
    return s;
}

std::vector<std::pair<std::string, Tensor>> get_entries(std::istream& is)
{
    const auto n = get<std::uint32_t>(is);
    std::vector<std::pair<std::string, Tensor>> out;
    for (std::uint32_t i = 0; i < n; ++i) {
        std::string name = get_str(is);
        const auto rank = get<std::uint32_t>(is);
        if (rank > 8)
            throw std::runtime_error("checkpoint: implausible rank for " + name);
        Shape shape(rank);
        for (auto& d : shape) {
            d = get<std::int32_t>(is);
            if (d < 0)
                throw std::runtime_error("checkpoint: negative dimension for " + name);
        }
        Tensor t(shape);
        is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
        if (!is)
            throw std::runtime_error("checkpoint: truncated tensor " + name);
        out.emplace_back(std::move(name), std::move(t));
    }
    return out;
}

} // namespace

void save(const std::filesystem::path& path, const Checkpoint& ck)
{
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os)
            throw std::runtime_error("cannot write " + tmp.string());
        os.write(kMagic, sizeof kMagic);
        put<std::uint32_t>(os, kVersion);
        put<std::uint64_t>(os, ck.step);
        put_str(os, ck.config_hash);
        put_str(os, ck.meta_json);
        put_entries(os, ck.params);
        put_entries(os, ck.momentum);
        if (!os)
            throw std::runtime_error("write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load(const std::filesystem::path& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw std::runtime_error("cannot open checkpoint " + path.string());
    char magic[8];
    is.read(magic, sizeof magic);
    if (!is || std::memcmp(magic, kMagic, sizeof magic) != 0)
        throw std::runtime_error(path.string() + " is not a checkpoint");
    const auto version = get<std::uint32_t>(is);
    if (version != kVersion)
        throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
    Checkpoint ck;
    ck.step = get<std::uint64_t>(is);
    ck.config_hash = get_str(is);
    ck.meta_json = get_str(is);
    ck.params = get_entries(is);
    ck.momentum = get_entries(is);
    return ck;
}

Checkpoint capture(const nn::ParamStore& params, const nn::Sgd* opt, std::uint64_t step, std::string config_hash)
{
    Checkpoint ck;
    ck.step = step;
    ck.config_hash = std::move(config_hash);
    for (const auto& [name, v] : params.items())
        ck.params.emplace_back(name, v.value());
    if (opt)
        for (const auto& [name, m] : opt->momentum())
            ck.momentum.emplace_back(name, m);
    return ck;
}

void restore(const Checkpoint& ck, nn::ParamStore& params, nn::Sgd* opt)
{
    if (ck.params.size() != params.size())
        throw std::runtime_error("checkpoint has " + std::to_string(ck.params.size()) + " tensors, model expects " +
                                 std::to_string(params.size()));
    for (const auto& [name, t] : ck.params) {
        if (!params.contains(name))
            throw std::runtime_error("checkpoint tensor '" + name + "' not present in model");
        ag::Var p = params.get(name);
        if (p.shape() != t.shape())
            throw std::runtime_error("checkpoint tensor '" + name + "' has shape " + shape_str(t.shape()) +
                                     ", model expects " + shape_str(p.shape()));
        p.mutable_value() = t;
    }
    if (opt) {
        opt->momentum().clear();
        for (const auto& [name, m] : ck.momentum)
            opt->momentum()[name] = m;
    }
}

} // namespace dgkd::ckpt
