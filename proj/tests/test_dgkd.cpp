#include "dgkd/dgkd.hpp"

#include "test_support.hpp"

#include <gtest/gtest.h>

using namespace dgkd;
using namespace dgkd::distill;
using dgkd::testkit::random_tensor;

namespace {

const diffusion::NoiseSchedule& schedule()
{
    static const auto s = diffusion::make_schedule(100, 1e-4, 0.02);
    return s;
}

// Predicts the noise that maps z_t back onto a fixed target, so DDIM lands on it.
class TowardTarget final : public diffusion::EpsilonModel {
public:
    explicit TowardTarget(Tensor target)
        : target_(std::move(target))
    {
    }
    ag::Var predict(const ag::Var& zt, const std::vector<int>& t, bool) const override
    {
        Tensor eps(zt.shape());
        const std::size_t per = eps.size() / t.size();
        for (std::size_t i = 0; i < eps.size(); ++i) {
            const double ab = schedule().alpha_bar(t[i / per]);
            eps[i] = (zt.value()[i] - std::sqrt(ab) * target_[i]) / std::sqrt(1 - ab);
        }
        return ag::constant(std::move(eps));
    }

private:
    Tensor target_;
};

struct Predictors {
    nn::ParamStore store;
    std::vector<diffusion::NoisePredictor> models;

    explicit Predictors(const std::vector<int>& channels)
    {
        Rng rng(5);
        for (std::size_t i = 0; i < channels.size(); ++i)
            models.emplace_back(store, "tap" + std::to_string(i), channels[i], rng, 8);
        Rng w(6);
        for (auto [name, p] : store.items())
            p.mutable_value() = w.uniform_tensor(p.shape(), -0.3, 0.3);
    }
};

DistillTap make_tap(const std::string& name, TapLocation loc, const ag::Var& teacher, const ag::Var& student,
                    const diffusion::EpsilonModel& pred, double scale = 1.0)
{
    DistillTap t;
    t.name = name;
    t.location = loc;
    t.teacher_feature = teacher;
    t.student_feature = student;
    t.predictor = &pred;
    t.distance = default_distance(loc);
    t.scale = scale;
    return t;
}

} // namespace

TEST(Distill, NamesRoundTrip)
{
    for (auto loc : {TapLocation::stage1, TapLocation::stage2, TapLocation::mask_logits})
        EXPECT_EQ(location_from_string(to_string(loc)), loc);
    EXPECT_EQ(distance_from_string("kl_div"), Distance::kl_div);
    EXPECT_EQ(distance_from_string("mse"), Distance::mse);
    EXPECT_THROW(distance_from_string("l1"), std::invalid_argument);
    EXPECT_EQ(default_distance(TapLocation::stage2), Distance::mse);
    EXPECT_EQ(default_distance(TapLocation::mask_logits), Distance::kl_div);
}

TEST(Distill, HierarchicalWeights)
{
    EXPECT_EQ(hierarchical_weights(3), (std::vector<double>{1, 1, 1}));
    EXPECT_EQ(hierarchical_weights(1), (std::vector<double>{1}));
    EXPECT_EQ(hierarchical_weights(3, {1, 1, 2}), (std::vector<double>{1, 1, 2}));
    EXPECT_THROW(hierarchical_weights(3, {1, 2}), std::invalid_argument);
    EXPECT_THROW(hierarchical_weights(0), std::invalid_argument);
}

TEST(Distill, IdenticalFeaturesWithExactPredictorGiveZeroKd)
{
    const Tensor f = random_tensor({2, 4, 6, 6}, 1, -2, 2);
    for (int k : {1, 5}) {
        TowardTarget pred(f * 0.5);
        Rng rng(3);
        const auto out = dgkd_step({make_tap("s1", TapLocation::stage1, ag::constant(f), ag::constant(f), pred, 2.0)},
                                   schedule(), diffusion::DdimPlan::evenly_strided(100, k), rng);
        EXPECT_LT(out.taps[0].loss_kd.item(), 1e-20) << "K=" << k;
        EXPECT_LT(testkit::max_abs_diff(out.taps[0].denoised_student.value(), f), 1e-10);
    }
}

TEST(Distill, IdenticalMaskLogitsGiveZeroKl)
{
    const Tensor f = random_tensor({2, 4, 3, 3}, 2);
    EXPECT_NEAR(tap_distance(Distance::kl_div, ag::constant(f), ag::constant(f)).item(), 0.0, 1e-15);
    TowardTarget pred(f);
    Rng rng(4);
    const auto out = dgkd_step({make_tap("mask", TapLocation::mask_logits, ag::constant(f), ag::constant(f), pred)},
                               schedule(), diffusion::DdimPlan::evenly_strided(100, 5), rng);
    EXPECT_NEAR(out.taps[0].loss_kd.item(), 0.0, 1e-12);
}

TEST(Distill, TotalIsWeightedSumOfParts)
{
    Predictors p({3, 3});
    auto teacher = ag::constant(random_tensor({2, 3, 4, 4}, 7));
    auto student = ag::parameter(random_tensor({2, 3, 4, 4}, 8));
    Rng rng(9);
    const auto out = dgkd_step({make_tap("a", TapLocation::stage1, teacher, student, p.models[0]),
                                make_tap("b", TapLocation::mask_logits, teacher, student, p.models[1])},
                               schedule(), diffusion::DdimPlan::evenly_strided(100, 5), rng);
    const double a = out.taps[0].loss_diff.item() + out.taps[0].loss_kd.item();
    const double b = out.taps[1].loss_diff.item() + out.taps[1].loss_kd.item();
    EXPECT_NEAR(out.total().item(), a + b, 1e-14);
    EXPECT_NEAR(out.total({1, 2}).item(), a + 2 * b, 1e-14);
    EXPECT_NEAR(out.sum_diff() + out.sum_kd(), a + b, 1e-14);
    EXPECT_THROW(out.total({1}), std::invalid_argument);
}

TEST(Distill, RejectsBadTaps)
{
    Predictors p({3});
    auto a = ag::constant(random_tensor({1, 3, 4, 4}, 1));
    auto b = ag::constant(random_tensor({1, 3, 2, 2}, 2));
    Rng rng(1);
    const auto plan = diffusion::DdimPlan::evenly_strided(100, 5);
    EXPECT_THROW(dgkd_step({make_tap("x", TapLocation::stage1, a, b, p.models[0])}, schedule(), plan, rng),
                 std::invalid_argument);
    auto bad = make_tap("x", TapLocation::stage1, a, a, p.models[0]);
    bad.predictor = nullptr;
    EXPECT_THROW(dgkd_step({bad}, schedule(), plan, rng), std::invalid_argument);
    bad = make_tap("x", TapLocation::stage1, a, a, p.models[0], 0.0);
    EXPECT_THROW(dgkd_step({bad}, schedule(), plan, rng), std::invalid_argument);
}

TEST(Distill, NonFiniteLossIsReported)
{
    Predictors p({3});
    Tensor t = random_tensor({1, 3, 4, 4}, 3);
    t[5] = std::numeric_limits<double>::infinity();
    Rng rng(2);
    EXPECT_THROW(dgkd_step({make_tap("s1", TapLocation::stage1, ag::constant(t),
                                     ag::constant(random_tensor({1, 3, 4, 4}, 4)), p.models[0])},
                           schedule(), diffusion::DdimPlan::evenly_strided(100, 5), rng),
                 NonFiniteLoss);
}

TEST(Distill, GradientsMatchFiniteDifferences)
{
    Predictors p({3});
    auto teacher = ag::constant(random_tensor({2, 3, 4, 4}, 11, -2, 2));
    auto student = ag::parameter(random_tensor({2, 3, 4, 4}, 12, -2, 2));
    const auto plan = diffusion::DdimPlan::evenly_strided(100, 5);
    for (auto loc : {TapLocation::stage1, TapLocation::mask_logits}) {
        auto run = [&](auto pick) {
            return [&, pick] {
                Rng rng(21);
                auto out = dgkd_step({make_tap("t", loc, teacher, student, p.models[0], 1.7)}, schedule(), plan, rng);
                return pick(out.taps[0]);
            };
        };
        const auto kd = testkit::check_gradients({student}, run([](const TapResult& r) { return r.loss_kd; }));
        EXPECT_LT(kd.max_rel, 1e-6) << to_string(loc);

        std::vector<ag::Var> params;
        for (auto [name, v] : p.store.items())
            params.push_back(v);
        const auto diff = testkit::check_gradients(params, run([](const TapResult& r) { return r.loss_diff; }));
        EXPECT_LT(diff.max_rel, 1e-6) << to_string(loc);
    }
}

// Each loss reaches only the parameters it is supposed to train.
TEST(Distill, StopGradientDiscipline)
{
    Predictors p({3});
    auto teacher = ag::parameter(random_tensor({2, 3, 4, 4}, 13));
    auto student = ag::parameter(random_tensor({2, 3, 4, 4}, 14));
    const auto plan = diffusion::DdimPlan::evenly_strided(100, 5);
    auto step = [&] {
        Rng rng(31);
        return dgkd_step({make_tap("t", TapLocation::stage1, teacher, student, p.models[0], 1.3)}, schedule(), plan,
                         rng);
    };

    p.store.zero_grad();
    ag::backward(step().taps[0].loss_kd);
    EXPECT_EQ(p.store.grad_norm(), 0.0);
    EXPECT_EQ(teacher.grad().max_abs(), 0.0);
    EXPECT_GT(student.grad().max_abs(), 0.0);

    teacher.zero_grad();
    student.zero_grad();
    ag::backward(step().taps[0].loss_diff);
    EXPECT_GT(p.store.grad_norm(), 0.0);
    EXPECT_EQ(teacher.grad().max_abs(), 0.0);
    EXPECT_EQ(student.grad().max_abs(), 0.0);

    // Perturbation: loss_diff does not move with the student, loss_kd moves with the predictor
    // only in value (its parameters are frozen inside the reverse pass).
    const double base_diff = step().taps[0].loss_diff.item();
    student.mutable_value()[0] += 0.5;
    EXPECT_EQ(step().taps[0].loss_diff.item(), base_diff);
    const double base_kd = step().taps[0].loss_kd.item();
    auto w = p.store.items().back().second;
    w.mutable_value()[0] += 0.5;
    EXPECT_NE(step().taps[0].loss_kd.item(), base_kd);
}
