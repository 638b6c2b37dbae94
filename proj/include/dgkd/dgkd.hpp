#pragma once

// Diffusion-guided distillation over named taps. Each tap owns a noise
// predictor trained on the (detached) teacher feature; the student feature is
// denoised by that predictor, frozen, and compared against the teacher.

#include "dgkd/autograd.hpp"
#include "dgkd/diffusion.hpp"
#include "dgkd/rng.hpp"

#include <stdexcept>
#include <string>
#include <vector>

namespace dgkd::distill {

enum class TapLocation { stage1, stage2, mask_logits };
enum class Distance { mse, kl_div };

std::string to_string(TapLocation loc);
TapLocation location_from_string(const std::string& s);
std::string to_string(Distance d);
Distance distance_from_string(const std::string& s);

/// mse for feature taps, kl_div for the mask tap.
Distance default_distance(TapLocation loc);

struct DistillTap {
    std::string name;
    TapLocation location = TapLocation::stage1;
    ag::Var teacher_feature;
    ag::Var student_feature;
    const diffusion::EpsilonModel* predictor = nullptr;
    Distance distance = Distance::mse;
    /// Features are divided by this before diffusion so the noising model sees
    /// roughly unit-scale data. mse is measured in the scaled space; kl_div on
    /// the rescaled logits.
    double scale = 1.0;
};

struct TapResult {
    std::string name;
    ag::Var denoised_student; // in the tap's original units
    ag::Var loss_diff;
    ag::Var loss_kd;
};

struct DgkdOutput {
    std::vector<TapResult> taps;

    /// sum_i w_i (loss_diff_i + loss_kd_i); unit weights when `weights` is empty.
    ag::Var total(const std::vector<double>& weights = {}) const;
    double sum_diff() const;
    double sum_kd() const;
};

class NonFiniteLoss : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// D(student, teacher); teacher is the target distribution for kl_div.
ag::Var tap_distance(Distance d, const ag::Var& student, const ag::Var& teacher);

DgkdOutput dgkd_step(const std::vector<DistillTap>& taps, const diffusion::NoiseSchedule& sched,
                     const diffusion::DdimPlan& plan, Rng& rng);

/// Per-tap loss weights: all ones, or `override` verbatim when given.
std::vector<double> hierarchical_weights(int m, const std::vector<double>& override_weights = {});

} // namespace dgkd::distill
