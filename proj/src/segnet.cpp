#include "dgkd/segnet.hpp"

#include "dgkd/rng.hpp"

#include <stdexcept>

namespace dgkd::wsss {

void SegNetConfig::validate() const
{
    if (num_classes < 1)
        throw std::invalid_argument("segnet: num_classes must be >= 1");
    if (c0 < 1 || c1 < 1 || c2 < 1)
        throw std::invalid_argument("segnet: channel widths must be positive");
    if (!(input_std > 0))
        throw std::invalid_argument("segnet: input_std must be > 0");
    fusion.validate();
}

nlohmann::json to_json(const SegNetConfig& cfg)
{
    nlohmann::json stages = nlohmann::json::array();
    for (auto s : cfg.fusion.stages)
        stages.push_back(fusion::to_string(s));
    return {{"num_classes", cfg.num_classes}, {"c0", cfg.c0},         {"c1", cfg.c1},
            {"c2", cfg.c2},                   {"input_mean", cfg.input_mean}, {"input_std", cfg.input_std}, {"dgf2", cfg.dgf2},     {"lambda", cfg.fusion.lambda},
            {"stages", stages}};
}

SegNetConfig segnet_from_json(const nlohmann::json& j)
{
    SegNetConfig c;
    c.num_classes = j.at("num_classes").get<int>();
    c.c0 = j.at("c0").get<int>();
    c.c1 = j.at("c1").get<int>();
    c.c2 = j.at("c2").get<int>();
    c.input_mean = j.at("input_mean").get<double>();
    c.input_std = j.at("input_std").get<double>();
    c.dgf2 = j.at("dgf2").get<bool>();
    c.fusion.lambda = j.at("lambda").get<double>();
    c.fusion.stages.clear();
    for (const auto& s : j.at("stages"))
        c.fusion.stages.push_back(fusion::stage_from_string(s.get<std::string>()));
    c.validate();
    return c;
}

SegNet::SegNet(const SegNetConfig& cfg, std::uint64_t init_seed)
    : cfg_(cfg)
{
    cfg_.validate();
    Rng rng(init_seed);
    conv0_ = nn::Conv2d(store_, "conv0", 3, cfg_.c0, 3, 1, rng);
    s1a_ = nn::Conv2d(store_, "stage1.down", cfg_.c0, cfg_.c1, 3, 1, rng);
    s1b_ = nn::Conv2d(store_, "stage1.conv", cfg_.c1, cfg_.c1, 3, 1, rng);
    s2a_ = nn::Conv2d(store_, "stage2.down", cfg_.c1, cfg_.c2, 3, 1, rng);
    s2b_ = nn::Conv2d(store_, "stage2.conv", cfg_.c2, cfg_.c2, 3, 1, rng);
    head_ = nn::Conv2d(store_, "head", cfg_.c2, cfg_.num_classes + 1, 1, 1, rng);
    if (cfg_.dgf2) {
        Rng frng(substream_seed(init_seed, "dgf2"));
        for (auto stage : {fusion::Stage::stage1, fusion::Stage::stage2}) {
            if (!cfg_.fusion.active(stage))
                continue;
            const int ch = stage == fusion::Stage::stage1 ? cfg_.c1 : cfg_.c2;
            fusion_.emplace(stage, fusion::Dgf2Block(store_, "dgf2." + fusion::to_string(stage), ch, frng));
        }
    }
}

ag::Var SegNet::fuse(const ag::Var& f, const ag::Var& depth, fusion::Stage stage, bool frozen) const
{
    auto it = fusion_.find(stage);
    if (it == fusion_.end())
        return f;
    if (!depth.defined())
        throw std::invalid_argument("SegNet: depth input required for fusion at " + fusion::to_string(stage));
    return fusion::dgf2_stage(f, depth, it->second, cfg_.fusion, stage, frozen);
}

SegOutput SegNet::forward(const ag::Var& image, const ag::Var& depth, bool frozen) const
{
    if (image.rank() != 4 || image.dim(1) != 3)
        throw std::invalid_argument("SegNet: expected [N,3,H,W] image, got " + shape_str(image.shape()));
    if (image.dim(2) % 4 || image.dim(3) % 4)
        throw std::invalid_argument("SegNet: image size must be a multiple of 4");
    SegOutput out;
    ag::Var x = ag::scale(ag::add_scalar(image, -cfg_.input_mean), 1.0 / cfg_.input_std);
    x = ag::relu(conv0_(x, frozen));
    x = ag::relu(s1b_(ag::relu(s1a_(ag::avg_pool(x, 2), frozen)), frozen));
    out.stage1 = fuse(x, depth, fusion::Stage::stage1, frozen);
    x = ag::relu(s2b_(ag::relu(s2a_(ag::avg_pool(out.stage1, 2), frozen)), frozen));
    out.stage2 = fuse(x, depth, fusion::Stage::stage2, frozen);
    out.mask_logits = head_(out.stage2, frozen);
    out.logits = ag::upsample_bilinear(out.mask_logits, image.dim(2), image.dim(3));
    out.scores = ag::global_avg_pool(ag::slice_channels(out.mask_logits, 1, cfg_.num_classes + 1));
    return out;
}

} // namespace dgkd::wsss
