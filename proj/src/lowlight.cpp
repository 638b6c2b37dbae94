#include "dgkd/lowlight.hpp"

#include "dgkd/rng.hpp"
#include "dgkd/toyscene.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dgkd::lowlight {

using nlohmann::json;

void DarkenConfig::validate() const
{
    if (!(gamma > 0) || !std::isfinite(gamma))
        throw std::invalid_argument("DarkenConfig: gamma must be > 0");
    if (!(illum_lo > 0 && illum_lo <= illum_hi && illum_hi <= 1.0))
        throw std::invalid_argument("DarkenConfig: illum_range must satisfy 0 < k_lo <= k_hi <= 1");
    for (double v : {shot_noise, read_noise, wb_jitter})
        if (!(v >= 0) || !std::isfinite(v))
            throw std::invalid_argument("DarkenConfig: noise coefficients and wb_jitter must be finite and >= 0");
    if (wb_jitter >= 1.0)
        throw std::invalid_argument("DarkenConfig: wb_jitter must be < 1");
    if (quant_bits < 1 || quant_bits > 16)
        throw std::invalid_argument("DarkenConfig: quant_bits must be in [1,16]");
}

DarkenConfig DarkenConfig::profile(const std::string& name)
{
    DarkenConfig c;
    if (name == "dark-default")
        return c;
    if (name == "identity") {
        c.illum_lo = c.illum_hi = 1.0;
        c.shot_noise = c.read_noise = c.wb_jitter = 0.0;
        c.quant_bits = 16;
        return c;
    }
    throw std::invalid_argument("unknown darkening profile '" + name + "'");
}

json to_json(const DarkenConfig& c)
{
    return json{{"gamma", c.gamma},           {"illum_range", {c.illum_lo, c.illum_hi}},
                {"shot_noise", c.shot_noise}, {"read_noise", c.read_noise},
                {"wb_jitter", c.wb_jitter},   {"quant_bits", c.quant_bits},
                {"seed", c.seed}};
}

DarkenConfig from_json(const json& j)
{
    DarkenConfig c;
    if (j.contains("profile"))
        c = DarkenConfig::profile(j.at("profile").get<std::string>());
    c.gamma = j.value("gamma", c.gamma);
    if (j.contains("illum_range")) {
        c.illum_lo = j.at("illum_range").at(0).get<double>();
        c.illum_hi = j.at("illum_range").at(1).get<double>();
    }
    c.shot_noise = j.value("shot_noise", c.shot_noise);
    c.read_noise = j.value("read_noise", c.read_noise);
    c.wb_jitter = j.value("wb_jitter", c.wb_jitter);
    c.quant_bits = j.value("quant_bits", c.quant_bits);
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
}

Tensor darken(const Tensor& image, const DarkenConfig& cfg, std::uint32_t sample_id)
{
    cfg.validate();
    if (image.rank() != 3 || image.dim(0) != 3)
        throw std::invalid_argument("darken: expected [3,H,W] image, got " + shape_str(image.shape()));
    for (double v : image.values())
        if (!(v >= 0.0 && v <= 1.0))
            throw std::invalid_argument("darken: image values must be finite and within [0,1]");

    Rng rng(mix_seed(cfg.seed ^ sample_id));
    const double k = cfg.illum_lo == cfg.illum_hi ? cfg.illum_lo : rng.uniform(cfg.illum_lo, cfg.illum_hi);
    double gain[3];
    for (double& g : gain)
        g = cfg.wb_jitter > 0 ? rng.uniform(1.0 - cfg.wb_jitter, 1.0 + cfg.wb_jitter) : 1.0;
    const bool noisy = cfg.shot_noise > 0 || cfg.read_noise > 0;
    const double levels = std::ldexp(1.0, cfg.quant_bits) - 1.0;
    const std::size_t plane = image.size() / 3;

    Tensor out(image.shape());
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < plane; ++i) {
            double x = std::pow(image[c * plane + i], cfg.gamma);
            x *= k * gain[c];
            if (noisy) {
                const double var = cfg.shot_noise * x + cfg.read_noise;
                x += rng.normal(0.0, std::sqrt(var));
            }
            x = std::clamp(x, 0.0, 1.0);
            x = std::pow(x, 1.0 / cfg.gamma);
            out[c * plane + i] = std::floor(x * levels + 0.5) / levels;
        }
    return out;
}

double mean_luminance(const Tensor& image)
{
    const std::size_t plane = image.size() / 3;
    double s = 0;
    for (std::size_t i = 0; i < plane; ++i)
        s += 0.2126 * image[i] + 0.7152 * image[plane + i] + 0.0722 * image[2 * plane + i];
    return s / static_cast<double>(plane);
}

std::filesystem::path sibling_dark_dir(const std::filesystem::path& corpus_dir)
{
    auto p = corpus_dir;
    if (!p.has_filename())
        p = p.parent_path();
    return p.parent_path() / (p.filename().string() + "-dark");
}

std::filesystem::path darken_corpus(const std::filesystem::path& corpus_dir, const std::filesystem::path& out_dir,
                                    const DarkenConfig& cfg)
{
    cfg.validate();
    bool any = false;
    for (scene::Split split : {scene::Split::train, scene::Split::val}) {
        const auto manifest = corpus_dir / scene::to_string(split) / "manifest.json";
        if (!std::filesystem::exists(manifest)) {
            if (split == scene::Split::train)
                throw std::runtime_error("darken_corpus: missing manifest " + manifest.string());
            continue;
        }
        scene::CorpusSplit data = scene::read_split(corpus_dir, split);
        for (scene::SceneSample& s : data.samples)
            s.image = darken(s.image, cfg, s.id);
        data.image_bits = cfg.quant_bits;
        scene::write_split(out_dir, data, json{{"lowlight", to_json(cfg)}, {"source", corpus_dir.filename().string()}});
        any = true;
    }
    if (!any)
        throw std::runtime_error("darken_corpus: no splits found under " + corpus_dir.string());
    return out_dir;
}

} // namespace dgkd::lowlight
