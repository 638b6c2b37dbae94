#include "dgkd/dgf2.hpp"

#include <algorithm>
#include <tuple>
#include <stdexcept>

namespace dgkd::fusion {

std::string to_string(Stage s)
{
    return s == Stage::stage1 ? "stage1" : "stage2";
}

Stage stage_from_string(const std::string& s)
{
    if (s == "stage1")
        return Stage::stage1;
    if (s == "stage2")
        return Stage::stage2;
    throw std::invalid_argument("unknown fusion stage '" + s + "'");
}

bool FusionConfig::active(Stage s) const
{
    return std::find(stages.begin(), stages.end(), s) != stages.end();
}

void FusionConfig::validate() const
{
    if (!(lambda >= 0.0 && lambda <= 1.0))
        throw std::invalid_argument("FusionConfig: lambda must lie in [0,1]");
}

ag::Var sft_modulate(const ag::Var& feature, const ag::Var& beta, const ag::Var& gamma)
{
    return ag::add(ag::mul(beta, feature), gamma);
}

double attention_value(double att_d, double att_geo, double lambda)
{
    return lambda * ((1.0 - att_d) * (1.0 - att_geo)) + att_d * att_geo;
}

ag::Var attention_map(const ag::Var& feature, const ag::Var& geo_feature, double lambda)
{
    require_same_shape(feature.value(), geo_feature.value(), "attention_map");
    ag::Var att_d = ag::sigmoid(feature);
    ag::Var att_geo = ag::sigmoid(geo_feature);
    ag::Var both_off = ag::mul(ag::one_minus(att_d), ag::one_minus(att_geo));
    return ag::add(ag::scale(both_off, lambda), ag::mul(att_d, att_geo));
}

ag::Var consistency_fuse(const ag::Var& feature, const ag::Var& geo_feature, double lambda)
{
    if (!(lambda >= 0.0 && lambda <= 1.0))
        throw std::invalid_argument("consistency_fuse: lambda must lie in [0,1]");
    ag::Var a = attention_map(feature, geo_feature, lambda);
    return ag::add(geo_feature, ag::mul(a, ag::add(feature, geo_feature)));
}

PriorEncoder::PriorEncoder(nn::ParamStore& store, const std::string& name, int channels, Rng& rng)
    : c1_(store, name + ".conv1", 1, channels, 3, 1, rng)
    , c2_(store, name + ".conv2", channels, channels, 3, 1, rng)
    , c3_(store, name + ".conv3", channels, channels, 3, 1, rng)
{
}

ag::Var PriorEncoder::operator()(const ag::Var& depth_at_stage, bool frozen) const
{
    return ag::relu(c3_(ag::relu(c2_(ag::relu(c1_(depth_at_stage, frozen)), frozen)), frozen));
}

SftBranches::SftBranches(nn::ParamStore& store, const std::string& name, int channels, Rng& rng)
    : beta_a_(store, name + ".beta.conv1", channels, channels, 3, 1, rng)
    , beta_b_(store, name + ".beta.conv2", channels, channels, 1, 1, rng, nn::Init::zero, 1.0)
    , gamma_a_(store, name + ".gamma.conv1", channels, channels, 3, 1, rng)
    , gamma_b_(store, name + ".gamma.conv2", channels, channels, 1, 1, rng, nn::Init::zero, 0.0)
{
}

std::pair<ag::Var, ag::Var> SftBranches::operator()(const ag::Var& prior, bool frozen) const
{
    return {beta_b_(ag::relu(beta_a_(prior, frozen)), frozen), gamma_b_(ag::relu(gamma_a_(prior, frozen)), frozen)};
}

ag::Var depth_to_stage(const ag::Var& depth, int h, int w)
{
    if (depth.rank() != 4 || depth.dim(1) != 1)
        throw std::invalid_argument("depth_to_stage: expected [N,1,H,W] depth");
    const int factor = depth.dim(2) / h;
    if (factor * h != depth.dim(2) || factor * w != depth.dim(3))
        throw std::invalid_argument("depth_to_stage: stage size must divide the depth map size");
    return factor == 1 ? depth : ag::avg_pool(depth, factor);
}

Dgf2Block::Dgf2Block(nn::ParamStore& store, const std::string& name, int channels, Rng& rng)
    : encoder(store, name + ".prior", channels, rng)
    , sft(store, name + ".sft", channels, rng)
{
}

StageTrace dgf2_trace(const ag::Var& feature, const ag::Var& depth, const Dgf2Block& block, double lambda,
                      bool frozen)
{
    StageTrace tr;
    ag::Var prior = block.encoder(depth_to_stage(depth, feature.dim(2), feature.dim(3)), frozen);
    std::tie(tr.beta, tr.gamma) = block.sft(prior, frozen);
    tr.geo_feature = sft_modulate(feature, tr.beta, tr.gamma);
    tr.fused = consistency_fuse(feature, tr.geo_feature, lambda);
    return tr;
}

ag::Var dgf2_stage(const ag::Var& feature, const ag::Var& depth, const Dgf2Block& block, const FusionConfig& cfg,
                   Stage stage, bool frozen)
{
    cfg.validate();
    if (!cfg.active(stage))
        return feature;
    return dgf2_trace(feature, depth, block, cfg.lambda, frozen).fused;
}

} // namespace dgkd::fusion
