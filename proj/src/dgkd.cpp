#include "dgkd/dgkd.hpp"

#include <cmath>
#include <sstream>

namespace dgkd::distill {

std::string to_string(TapLocation loc)
{
    switch (loc) {
    case TapLocation::stage1:
        return "stage1";
    case TapLocation::stage2:
        return "stage2";
    case TapLocation::mask_logits:
        return "mask";
    }
    return "?";
}

TapLocation location_from_string(const std::string& s)
{
    if (s == "stage1")
        return TapLocation::stage1;
    if (s == "stage2")
        return TapLocation::stage2;
    if (s == "mask" || s == "mask_logits")
        return TapLocation::mask_logits;
    throw std::invalid_argument("unknown distillation tap '" + s + "'");
}

std::string to_string(Distance d)
{
    return d == Distance::mse ? "mse" : "kl_div";
}

Distance distance_from_string(const std::string& s)
{
    if (s == "mse")
        return Distance::mse;
    if (s == "kl_div" || s == "kl")
        return Distance::kl_div;
    throw std::invalid_argument("unknown distance '" + s + "'");
}

Distance default_distance(TapLocation loc)
{
    return loc == TapLocation::mask_logits ? Distance::kl_div : Distance::mse;
}

ag::Var DgkdOutput::total(const std::vector<double>& weights) const
{
    if (!weights.empty() && weights.size() != taps.size())
        throw std::invalid_argument("DgkdOutput::total: one weight per tap required");
    std::vector<ag::Var> terms;
    for (std::size_t i = 0; i < taps.size(); ++i) {
        ag::Var t = ag::add(taps[i].loss_diff, taps[i].loss_kd);
        terms.push_back(weights.empty() ? t : ag::scale(t, weights[i]));
    }
    return ag::sum(terms);
}

double DgkdOutput::sum_diff() const
{
    double s = 0;
    for (const auto& t : taps)
        s += t.loss_diff.item();
    return s;
}

double DgkdOutput::sum_kd() const
{
    double s = 0;
    for (const auto& t : taps)
        s += t.loss_kd.item();
    return s;
}

ag::Var tap_distance(Distance d, const ag::Var& student, const ag::Var& teacher)
{
    require_same_shape(student.value(), teacher.value(), "tap_distance");
    return d == Distance::mse ? ag::mean_squared_error(student, teacher) : ag::kl_div_logits(student, teacher);
}

namespace {

void check_finite(const ag::Var& loss, const char* what, const DistillTap& tap)
{
    if (std::isfinite(loss.item()))
        return;
    std::ostringstream os;
    os << "non-finite " << what << " at tap '" << tap.name << "': loss=" << loss.item()
       << " max|teacher|=" << tap.teacher_feature.value().max_abs()
       << " max|student|=" << tap.student_feature.value().max_abs();
    throw NonFiniteLoss(os.str());
}

} // namespace

DgkdOutput dgkd_step(const std::vector<DistillTap>& taps, const diffusion::NoiseSchedule& sched,
                     const diffusion::DdimPlan& plan, Rng& rng)
{
    DgkdOutput out;
    for (const auto& tap : taps) {
        if (!tap.predictor)
            throw std::invalid_argument("dgkd_step: tap '" + tap.name + "' has no predictor");
        if (tap.teacher_feature.shape() != tap.student_feature.shape())
            throw std::invalid_argument("dgkd_step: tap '" + tap.name + "' teacher " +
                                        shape_str(tap.teacher_feature.shape()) + " vs student " +
                                        shape_str(tap.student_feature.shape()));
        if (!(tap.scale > 0) || !std::isfinite(tap.scale))
            throw std::invalid_argument("dgkd_step: tap '" + tap.name + "' needs a positive finite scale");
        const double inv = 1.0 / tap.scale;
        ag::Var teacher = ag::scale(ag::detach(tap.teacher_feature), inv);
        ag::Var student = ag::scale(tap.student_feature, inv);

        TapResult r;
        r.name = tap.name;
        r.loss_diff = diffusion::diffusion_loss(*tap.predictor, teacher, sched, rng).loss;
        check_finite(r.loss_diff, "diffusion loss", tap);
        ag::Var denoised = diffusion::ddim_denoise(student, *tap.predictor, sched, plan, &rng);
        r.denoised_student = ag::scale(denoised, tap.scale);
        r.loss_kd = tap.distance == Distance::mse
                        ? tap_distance(tap.distance, denoised, teacher)
                        : tap_distance(tap.distance, r.denoised_student, ag::detach(tap.teacher_feature));
        check_finite(r.loss_kd, "distillation loss", tap);
        out.taps.push_back(std::move(r));
    }
    return out;
}

std::vector<double> hierarchical_weights(int m, const std::vector<double>& override_weights)
{
    if (m < 1)
        throw std::invalid_argument("hierarchical_weights: m must be >= 1");
    if (override_weights.empty())
        return std::vector<double>(static_cast<std::size_t>(m), 1.0);
    if (override_weights.size() != static_cast<std::size_t>(m))
        throw std::invalid_argument("hierarchical_weights: override must have one weight per tap");
    return override_weights;
}

} // namespace dgkd::distill
