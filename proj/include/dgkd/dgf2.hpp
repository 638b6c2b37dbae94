#pragma once

// Depth-guided feature fusion: a depth prior drives a spatial feature
// transform of the dark feature, and a consistency attention map blends the
// original and modulated features.

#include "dgkd/autograd.hpp"
#include "dgkd/nn.hpp"

#include <string>
#include <vector>

namespace dgkd::fusion {

enum class Stage { stage1, stage2 };
std::string to_string(Stage s);
Stage stage_from_string(const std::string& s);

struct FusionConfig {
    double lambda = 0.5;
    std::vector<Stage> stages{Stage::stage1, Stage::stage2};

    bool active(Stage s) const;
    void validate() const;
};

/// beta * F_d + gamma, elementwise.
ag::Var sft_modulate(const ag::Var& feature, const ag::Var& beta, const ag::Var& gamma);

/// lambda (1 - a)(1 - b) + a b for a single pair of sigmoid activations.
double attention_value(double att_d, double att_geo, double lambda);

/// A_att over whole tensors, from the raw (pre-sigmoid) features.
ag::Var attention_map(const ag::Var& feature, const ag::Var& geo_feature, double lambda);

/// F_geo + A_att * (F_d + F_geo).
ag::Var consistency_fuse(const ag::Var& feature, const ag::Var& geo_feature, double lambda);

/// Three 3x3 conv + ReLU layers: 1-channel depth -> C-channel prior, applied
/// after area-averaging depth down to the stage resolution.
class PriorEncoder {
public:
    PriorEncoder() = default;
    PriorEncoder(nn::ParamStore& store, const std::string& name, int channels, Rng& rng);
    ag::Var operator()(const ag::Var& depth_at_stage, bool frozen = false) const;

private:
    nn::Conv2d c1_, c2_, c3_;
};

/// Two conv branches on the prior producing (beta, gamma). The last conv of
/// each branch starts at zero weights with bias 1 (beta) / 0 (gamma), so the
/// initial modulation is the identity.
class SftBranches {
public:
    SftBranches() = default;
    SftBranches(nn::ParamStore& store, const std::string& name, int channels, Rng& rng);
    std::pair<ag::Var, ag::Var> operator()(const ag::Var& prior, bool frozen = false) const;

private:
    nn::Conv2d beta_a_, beta_b_, gamma_a_, gamma_b_;
};

/// Area-average an [N,1,H,W] depth map down to (h, w).
ag::Var depth_to_stage(const ag::Var& depth, int h, int w);

struct Dgf2Block {
    PriorEncoder encoder;
    SftBranches sft;

    Dgf2Block() = default;
    Dgf2Block(nn::ParamStore& store, const std::string& name, int channels, Rng& rng);
};

/// Pieces of one fused stage, exposed for tests and diagnostics.
struct StageTrace {
    ag::Var beta, gamma, geo_feature, fused;
};

StageTrace dgf2_trace(const ag::Var& feature, const ag::Var& depth, const Dgf2Block& block, double lambda,
                      bool frozen = false);

/// Fused feature at `stage`, or the input unchanged when the stage is inactive.
ag::Var dgf2_stage(const ag::Var& feature, const ag::Var& depth, const Dgf2Block& block, const FusionConfig& cfg,
                   Stage stage, bool frozen = false);

} // namespace dgkd::fusion
