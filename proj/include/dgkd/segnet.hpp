#pragma once

// Small fully-convolutional segmenter with named taps:
//   stage1 (stride 2, c1 channels), stage2 (stride 4, c2 channels),
//   mask logits (stride 4, K+1 channels), upsampled logits at input size.
// Downsampling is 2x2 area pooling, so every level stays on the half-pixel
// grid that bilinear upsampling assumes. Optional depth-guided fusion replaces
// the stage outputs in place.

#include "dgkd/autograd.hpp"
#include "dgkd/dgf2.hpp"
#include "dgkd/nn.hpp"

#include <cstdint>
#include <map>

#include "json.hpp"

namespace dgkd::wsss {

struct SegNetConfig {
    int num_classes = 3;
    int c0 = 8;
    int c1 = 16;
    int c2 = 32;
    /// Fixed input standardisation (x - mean) / std, shared by every variant.
    double input_mean = 0.45;
    double input_std = 0.25;
    bool dgf2 = false;
    fusion::FusionConfig fusion;

    void validate() const;
};

nlohmann::json to_json(const SegNetConfig& cfg);
SegNetConfig segnet_from_json(const nlohmann::json& j);

struct SegOutput {
    ag::Var stage1;
    ag::Var stage2;
    ag::Var mask_logits; // [N,K+1,H/4,W/4]
    ag::Var logits;      // [N,K+1,H,W]
    ag::Var scores;      // [N,K] foreground image-level scores
};

class SegNet {
public:
    /// Backbone weights come from `init_seed`; fusion blocks draw from a
    /// separate substream so enabling them leaves the backbone init unchanged.
    SegNet(const SegNetConfig& cfg, std::uint64_t init_seed);
    SegNet(const SegNet&) = delete;
    SegNet& operator=(const SegNet&) = delete;
    SegNet(SegNet&&) = default;
    SegNet& operator=(SegNet&&) = default;

    /// image [N,3,H,W]; depth [N,1,H,W], required only when fusion is active.
    SegOutput forward(const ag::Var& image, const ag::Var& depth = {}, bool frozen = false) const;

    const SegNetConfig& config() const noexcept { return cfg_; }
    nn::ParamStore& params() noexcept { return store_; }
    const nn::ParamStore& params() const noexcept { return store_; }

private:
    ag::Var fuse(const ag::Var& f, const ag::Var& depth, fusion::Stage stage, bool frozen) const;

    SegNetConfig cfg_;
    nn::ParamStore store_;
    nn::Conv2d conv0_, s1a_, s1b_, s2a_, s2b_, head_;
    std::map<fusion::Stage, fusion::Dgf2Block> fusion_;
};

} // namespace dgkd::wsss
