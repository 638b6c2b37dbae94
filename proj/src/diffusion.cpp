#include "dgkd/diffusion.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace dgkd::diffusion {

NoiseSchedule::NoiseSchedule(std::vector<double> betas)
    : beta_(std::move(betas))
{
    if (beta_.empty())
        throw std::invalid_argument("NoiseSchedule: need at least one timestep");
    alpha_bar_.resize(beta_.size());
    double running = 1.0;
    for (std::size_t i = 0; i < beta_.size(); ++i) {
        if (!(beta_[i] > 0.0 && beta_[i] < 1.0))
            throw std::invalid_argument("NoiseSchedule: beta must lie in (0,1)");
        running *= 1.0 - beta_[i];
        alpha_bar_[i] = running;
    }
}

std::size_t NoiseSchedule::checked(int t) const
{
    if (t < 1 || t > steps())
        throw std::out_of_range("timestep " + std::to_string(t) + " outside [1, " + std::to_string(steps()) + "]");
    return static_cast<std::size_t>(t);
}

NoiseSchedule make_schedule(int steps, double beta_start, double beta_end)
{
    if (steps < 1)
        throw std::invalid_argument("make_schedule: T_train must be >= 1");
    if (!(beta_start > 0 && beta_start <= beta_end && beta_end < 1))
        throw std::invalid_argument("make_schedule: need 0 < beta_start <= beta_end < 1");
    std::vector<double> betas(static_cast<std::size_t>(steps));
    for (int i = 0; i < steps; ++i)
        betas[static_cast<std::size_t>(i)]
            = steps == 1 ? beta_start : beta_start + (beta_end - beta_start) * i / static_cast<double>(steps - 1);
    return NoiseSchedule(std::move(betas));
}

NoisedSample forward_sample(const Tensor& z0, int t, const NoiseSchedule& sched, const Tensor& noise)
{
    require_same_shape(z0, noise, "forward_sample");
    const double ab = sched.alpha_bar(t);
    const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    Tensor zt(z0.shape());
    for (std::size_t i = 0; i < zt.size(); ++i)
        zt[i] = a * z0[i] + b * noise[i];
    return {std::move(zt), noise};
}

Tensor forward_chain(const Tensor& z0, int t, const NoiseSchedule& sched, std::uint64_t seed)
{
    if (t < 0 || t > sched.steps())
        throw std::out_of_range("forward_chain: timestep out of range");
    Rng rng(seed);
    Tensor z = z0;
    for (int s = 1; s <= t; ++s) {
        const double keep = std::sqrt(1.0 - sched.beta(s));
        const double sd = std::sqrt(sched.beta(s));
        for (double& v : z.values())
            v = keep * v + sd * rng.normal();
    }
    return z;
}

std::vector<double> timestep_embedding(int t, int dim)
{
    std::vector<double> e(static_cast<std::size_t>(dim));
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * i / half);
        e[static_cast<std::size_t>(i)] = std::sin(t * freq);
        e[static_cast<std::size_t>(half + i)] = std::cos(t * freq);
    }
    return e;
}

NoisePredictor::NoisePredictor(nn::ParamStore& store, const std::string& name, int channels, Rng& rng, int embed_dim)
    : channels_(channels)
    , embed_dim_(embed_dim)
    , in_(store, name + ".conv_in", channels, channels, 3, 1, rng)
    , out_(store, name + ".conv_out", channels, channels, 3, 1, rng, nn::Init::zero)
    , time_proj_(store, name + ".time_proj", embed_dim, channels, rng)
{
}

ag::Var NoisePredictor::predict(const ag::Var& zt, const std::vector<int>& t, bool frozen) const
{
    const int n = zt.dim(0);
    if (t.size() != static_cast<std::size_t>(n))
        throw std::invalid_argument("NoisePredictor: one timestep per sample required");
    Tensor emb(Shape{n, embed_dim_});
    for (int i = 0; i < n; ++i) {
        auto e = timestep_embedding(t[static_cast<std::size_t>(i)], embed_dim_);
        std::copy(e.begin(), e.end(), emb.data() + static_cast<std::size_t>(i) * embed_dim_);
    }
    ag::Var h = in_(zt, frozen);
    h = ag::add_sample_channel(h, time_proj_(ag::constant(std::move(emb)), frozen));
    return out_(ag::silu(h), frozen);
}

DiffusionLoss diffusion_loss(const EpsilonModel& model, const ag::Var& z0, const NoiseSchedule& sched, Rng& rng)
{
    const int n = z0.dim(0);
    DiffusionLoss out;
    out.t.resize(static_cast<std::size_t>(n));
    std::vector<double> keep(static_cast<std::size_t>(n)), spread(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const int t = rng.uniform_int(1, sched.steps());
        out.t[static_cast<std::size_t>(i)] = t;
        keep[static_cast<std::size_t>(i)] = std::sqrt(sched.alpha_bar(t));
        spread[static_cast<std::size_t>(i)] = std::sqrt(1.0 - sched.alpha_bar(t));
    }
    out.eps = rng.normal_tensor(z0.shape());
    ag::Var noise = ag::scale_samples(ag::constant(out.eps), spread);
    ag::Var zt = ag::add(ag::scale_samples(z0, keep), noise);
    ag::Var pred = model.predict(zt, out.t, false);
    out.loss = ag::mean_squared_error(pred, ag::constant(out.eps));
    return out;
}

bool DdimPlan::deterministic() const
{
    for (double s : sigma)
        if (s != 0.0)
            return false;
    return true;
}

void DdimPlan::validate(const NoiseSchedule& sched) const
{
    if (tau.empty())
        throw std::invalid_argument("DdimPlan: need at least one step");
    if (!sigma.empty() && sigma.size() != tau.size())
        throw std::invalid_argument("DdimPlan: sigma length must match tau");
    for (std::size_t i = 0; i < tau.size(); ++i) {
        if (tau[i] < 1 || tau[i] > sched.steps())
            throw std::out_of_range("DdimPlan: timestep " + std::to_string(tau[i]) + " outside schedule");
        if (i && tau[i] >= tau[i - 1])
            throw std::invalid_argument("DdimPlan: tau must be strictly decreasing");
    }
    for (double s : sigma)
        if (!(s >= 0))
            throw std::invalid_argument("DdimPlan: sigma must be >= 0");
}

DdimPlan DdimPlan::evenly_strided(int total_steps, int k)
{
    if (k < 1 || k > total_steps)
        throw std::invalid_argument("DdimPlan: need 1 <= K <= T");
    DdimPlan p;
    for (int i = 0; i < k; ++i)
        p.tau.push_back(total_steps - static_cast<int>(std::lround(static_cast<double>(i) * total_steps / k)));
    p.sigma.assign(static_cast<std::size_t>(k), 0.0);
    return p;
}

ag::Var ddim_denoise(const ag::Var& z_init, const EpsilonModel& model, const NoiseSchedule& sched, const DdimPlan& plan,
                     Rng* rng)
{
    plan.validate(sched);
    if (!plan.deterministic() && !rng)
        throw std::invalid_argument("ddim_denoise: stochastic plan needs an rng");
    const int n = z_init.dim(0);
    ag::Var z = z_init;
    for (int i = 0; i < plan.steps(); ++i) {
        const int t = plan.tau[static_cast<std::size_t>(i)];
        const int t_prev = i + 1 < plan.steps() ? plan.tau[static_cast<std::size_t>(i + 1)] : 0;
        const double ab = sched.alpha_bar(t);
        const double ab_prev = sched.alpha_bar(t_prev);
        if (ab < kMinAlphaBar)
            throw std::runtime_error("ddim_denoise: alpha_bar(" + std::to_string(t) + ") below numerical guard");
        const double sigma = plan.sigma.empty() ? 0.0 : plan.sigma[static_cast<std::size_t>(i)];
        if (sigma * sigma > 1.0 - ab_prev)
            throw std::invalid_argument("ddim_denoise: sigma exceeds the admissible transition variance");

        ag::Var eps_hat = model.predict(z, std::vector<int>(static_cast<std::size_t>(n), t), true);
        ag::Var z0_hat = ag::scale(ag::sub(z, ag::scale(eps_hat, std::sqrt(1.0 - ab))), 1.0 / std::sqrt(ab));
        ag::Var next = ag::add(ag::scale(z0_hat, std::sqrt(ab_prev)),
                               ag::scale(eps_hat, std::sqrt(1.0 - ab_prev - sigma * sigma)));
        if (sigma > 0)
            next = ag::add(next, ag::constant(rng->normal_tensor(z.shape(), sigma)));
        z = next;
    }
    return z;
}

} // namespace dgkd::diffusion
