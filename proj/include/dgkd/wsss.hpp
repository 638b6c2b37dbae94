#pragma once

// Weakly-supervised segmentation core: class activation maps, affinity
// refinement, pseudo-masks, the image-level and self-supervised losses, and
// the teacher / student training loops.

#include "dgkd/autograd.hpp"
#include "dgkd/checkpoint.hpp"
#include "dgkd/dgkd.hpp"
#include "dgkd/evalkit.hpp"
#include "dgkd/segnet.hpp"
#include "dgkd/toyscene.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace dgkd::wsss {

inline constexpr int kIgnoreLabel = 255;

struct CamConfig {
    double bg_power = 3.0;
    int pamr_iters = 5;
    int pamr_window = 3;
    double pamr_tau = 0.1;
    double threshold = 0.7;
    int ignore_label = kIgnoreLabel;

    void validate() const;
};

/// Multi-label BCE with logits averaged over classes (and samples).
ag::Var classification_loss(const ag::Var& scores, const Tensor& labels);

/// Per-class maps [N,K+1,H,W] from raw score maps [N,K+1,H,W]; channel 0 of
/// the input is ignored and replaced by the background map. Foreground maps are
/// rectified and max-normalised; classes absent from `labels` ([N,K], may be
/// empty meaning all present) are zeroed; background = (1 - max fg)^bg_power.
Tensor make_cams(const Tensor& score_maps, const Tensor& labels, double bg_power);

/// Per-pixel normalisation of a CAM stack onto the probability simplex.
Tensor cams_to_distribution(const Tensor& cams);

/// Affinity-weighted neighbourhood averaging of per-pixel class distributions.
/// probs [N,C,H,W]; image [N,3,H,W]. Neighbours outside the image are skipped.
Tensor pamr_refine(const Tensor& probs, const Tensor& image, int iters, int window, double tau);

/// argmax per pixel, or ignore_label where the top probability < threshold.
std::vector<int> pseudo_mask(const Tensor& probs, double threshold, int ignore_label);

/// make_cams -> simplex -> PAMR -> thresholded argmax.
std::vector<int> pseudo_labels(const Tensor& score_maps, const Tensor& labels, const Tensor& image,
                               const CamConfig& cfg);

ag::Var self_sup_seg_loss(const ag::Var& logits, const std::vector<int>& pseudo, int ignore_label);

/// Per-pixel argmax over channels: [N,C,H,W] -> N*H*W labels.
std::vector<int> argmax_channels(const Tensor& logits);

struct LossReport {
    std::int64_t step = 0;
    double l_cls = 0;
    double l_seg = 0;
    std::vector<double> l_diff;
    std::vector<double> l_kd;
    std::vector<double> weights;
    double l_overall = 0;
    /// Student gradient norm before clipping (diagnostic only).
    double grad_norm = 0;

    /// l_cls + l_seg + sum_i w_i (l_diff_i + l_kd_i), in the order the training
    /// graph sums them.
    double recompute() const;
    double sum_diff() const;
    double sum_kd() const;
};

nlohmann::json to_json(const LossReport& r);

struct MetricRecord {
    std::int64_t step = 0;
    std::string split;
    double miou = 0;
    double pixacc = 0;
    std::vector<double> per_class_iou;
};

nlohmann::json to_json(const MetricRecord& r);

// --- Data ---------------------------------------------------------------------

/// Training data for one run. `normal` feeds the teacher; `input` feeds the
/// network being trained (the same as `normal` for the teacher, the dark twin
/// for the student). Pairing is index-for-index.
struct Dataset {
    std::vector<scene::SceneSample> input;
    std::vector<scene::SceneSample> normal;

    void check_paired() const;
};

struct Batch {
    Tensor image;  // [B,3,H,W] network input
    Tensor normal; // [B,3,H,W] normal-light twin (empty if not requested)
    Tensor depth;  // [B,1,H,W]
    Tensor labels; // [B,K]
    std::vector<int> gt;
};

Batch make_batch(const Dataset& data, const std::vector<std::size_t>& idx, const std::vector<bool>& flip,
                 bool with_normal);

// --- Training -----------------------------------------------------------------

struct DistillConfig {
    bool enabled = false;
    std::vector<distill::TapLocation> taps{distill::TapLocation::stage1, distill::TapLocation::stage2,
                                           distill::TapLocation::mask_logits};
    int ddim_steps = 5;
    int diffusion_steps = 100;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    distill::Distance feature_distance = distill::Distance::mse;
    distill::Distance mask_distance = distill::Distance::kl_div;
    std::vector<double> weights; // empty = unit weights
    int embed_dim = 16;

    void validate() const;
};

struct TrainConfig {
    std::uint64_t seed = 0;
    int steps = 600;
    int batch_size = 8;
    nn::SgdConfig sgd{0.005, 0.9, 5e-4};
    /// l_seg joins the objective after this many steps (pseudo-masks are noise
    /// until the classifier has localised anything).
    int seg_warmup = 150;
    /// Rescale the student gradient to at most this norm; 0 disables.
    double clip_grad_norm = 5;
    bool hflip = true;
    int eval_every = 100;
    CamConfig cam;
    SegNetConfig net;
    DistillConfig distill;

    void validate() const;
};

nlohmann::json to_json(const TrainConfig& cfg);

class DivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct TrainResult {
    SegNet net;
    ckpt::Checkpoint checkpoint;
    std::vector<LossReport> losses;
    std::vector<MetricRecord> metrics;
    /// Per-tap feature scale used by distillation (empty when disabled).
    std::vector<double> tap_scales;
};

/// Optional per-eval hook (step, metric record) for progress output.
using EvalHook = std::function<void(const MetricRecord&)>;

/// Mean-IoU evaluation of `net` on `samples` (argmax of full-resolution logits).
eval::ConfusionMatrix evaluate(const SegNet& net, const std::vector<scene::SceneSample>& samples,
                               int batch_size = 16);
MetricRecord to_record(const eval::ConfusionMatrix& cm, std::int64_t step, const std::string& split);

/// Teacher: l_cls + l_seg on normal-light images; no distillation or fusion.
TrainResult train_teacher(const Dataset& train, const std::vector<scene::SceneSample>& val, TrainConfig cfg,
                          const EvalHook& hook = {});

/// Student on dark images with optional distillation from a frozen teacher and
/// optional depth-guided fusion. `teacher` may be null only when distillation
/// is disabled.
TrainResult train_student(const Dataset& train, const std::vector<scene::SceneSample>& val, const SegNet* teacher,
                          const TrainConfig& cfg, const EvalHook& hook = {});

/// Hex digest of a JSON document (FNV-1a 64 over its canonical dump).
std::string config_hash(const nlohmann::json& j);

} // namespace dgkd::wsss
