#pragma once

// Diffusion over feature maps: variance schedule, closed-form and iterated
// forward noising, epsilon-prediction loss and deterministic DDIM reversal.

#include "dgkd/autograd.hpp"
#include "dgkd/nn.hpp"
#include "dgkd/rng.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace dgkd::diffusion {

/// Timesteps run 1..steps(); index 0 is the clean sample (alpha_bar = 1).
class NoiseSchedule {
public:
    NoiseSchedule() = default;
    explicit NoiseSchedule(std::vector<double> betas);

    int steps() const noexcept { return static_cast<int>(beta_.size()); }
    double beta(int t) const { return beta_.at(checked(t) - 1); }
    double alpha(int t) const { return 1.0 - beta(t); }
    double alpha_bar(int t) const { return t == 0 ? 1.0 : alpha_bar_.at(checked(t) - 1); }

    const std::vector<double>& betas() const noexcept { return beta_; }
    const std::vector<double>& alpha_bars() const noexcept { return alpha_bar_; }

private:
    std::size_t checked(int t) const;

    std::vector<double> beta_;
    std::vector<double> alpha_bar_;
};

/// Linear betas from beta_start (t = 1) to beta_end (t = T).
NoiseSchedule make_schedule(int steps, double beta_start, double beta_end);

struct NoisedSample {
    Tensor zt;
    Tensor eps;
};

/// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.
NoisedSample forward_sample(const Tensor& z0, int t, const NoiseSchedule& sched, const Tensor& noise);

/// Applies the one-step transition t times with fresh noise from `seed`.
Tensor forward_chain(const Tensor& z0, int t, const NoiseSchedule& sched, std::uint64_t seed);

std::vector<double> timestep_embedding(int t, int dim);

/// Anything that predicts the noise in z_t. `frozen` asks the model to treat
/// its parameters as constants for this evaluation.
class EpsilonModel {
public:
    virtual ~EpsilonModel() = default;
    virtual ag::Var predict(const ag::Var& zt, const std::vector<int>& t, bool frozen) const = 0;
};

/// conv3x3 -> + proj(sinusoidal(t)) -> SiLU -> conv3x3, channel preserving.
/// The output conv starts at zero, so an untrained predictor returns eps = 0.
class NoisePredictor final : public EpsilonModel {
public:
    NoisePredictor() = default;
    NoisePredictor(nn::ParamStore& store, const std::string& name, int channels, Rng& rng, int embed_dim = 16);

    ag::Var predict(const ag::Var& zt, const std::vector<int>& t, bool frozen) const override;
    int channels() const noexcept { return channels_; }

private:
    int channels_ = 0;
    int embed_dim_ = 16;
    nn::Conv2d in_;
    nn::Conv2d out_;
    nn::Linear time_proj_;
};

struct DiffusionLoss {
    ag::Var loss;
    std::vector<int> t;
    Tensor eps;
};

/// One noising pass per call: t ~ U{1..T} per sample, eps ~ N(0, I),
/// loss = mean((eps - model(z_t, t))^2). Differentiable in z0 and model params.
DiffusionLoss diffusion_loss(const EpsilonModel& model, const ag::Var& z0, const NoiseSchedule& sched, Rng& rng);

struct DdimPlan {
    std::vector<int> tau;      // strictly decreasing, tau[0] largest
    std::vector<double> sigma; // per step, >= 0

    int steps() const noexcept { return static_cast<int>(tau.size()); }
    bool deterministic() const;
    void validate(const NoiseSchedule& sched) const;

    /// K evenly strided timesteps starting at T: tau_i = T - round(i T / K).
    static DdimPlan evenly_strided(int total_steps, int k);
};

inline constexpr double kMinAlphaBar = 1e-8;

/// Starts the reverse chain at plan.tau[0] with z_init as-is (no re-noising).
/// The model is evaluated frozen; gradients flow only through z_init.
/// `rng` is only consulted when some sigma > 0.
ag::Var ddim_denoise(const ag::Var& z_init, const EpsilonModel& model, const NoiseSchedule& sched, const DdimPlan& plan,
                     Rng* rng = nullptr);

} // namespace dgkd::diffusion
