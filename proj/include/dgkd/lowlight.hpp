#pragma once

// RGB-domain low-light degradation: linearise, scale illumination, jitter
// white balance, add heteroscedastic sensor noise, clamp, re-encode, quantise.

#include "dgkd/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <string>

#include "json.hpp"

namespace dgkd::lowlight {

struct DarkenConfig {
    double gamma = 2.2;
    double illum_lo = 0.05;
    double illum_hi = 0.2;
    double shot_noise = 1e-3;
    double read_noise = 1e-4;
    double wb_jitter = 0.1;
    int quant_bits = 8;
    std::uint64_t seed = 0;

    void validate() const;

    /// Named profiles: "dark-default" and "identity".
    static DarkenConfig profile(const std::string& name);
};

nlohmann::json to_json(const DarkenConfig& cfg);
DarkenConfig from_json(const nlohmann::json& j);

/// image is [3,H,W] in [0,1]; deterministic in (cfg, sample_id).
Tensor darken(const Tensor& image, const DarkenConfig& cfg, std::uint32_t sample_id);

/// Rec. 709 luma averaged over the image (display-encoded values).
double mean_luminance(const Tensor& image);

/// Darkens every split under corpus_dir into out_dir, reusing masks, depth and
/// labels. Returns out_dir.
std::filesystem::path darken_corpus(const std::filesystem::path& corpus_dir, const std::filesystem::path& out_dir,
                                    const DarkenConfig& cfg);

/// Default output location: "<corpus_dir>-dark".
std::filesystem::path sibling_dark_dir(const std::filesystem::path& corpus_dir);

} // namespace dgkd::lowlight
