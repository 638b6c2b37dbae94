#include "dgkd/lowlight.hpp"
#include "dgkd/wsss.hpp"

#include "test_support.hpp"

#include <gtest/gtest.h>

#include <fstream>

using namespace dgkd;
using namespace dgkd::wsss;
namespace fs = std::filesystem;

namespace {

struct Toy {
    Dataset teacher_data, student_data;
    std::vector<scene::SceneSample> val_normal, val_dark;
};

const Toy& toy()
{
    static const Toy t = [] {
        scene::SceneSpec spec = scene::SceneSpec::toy_default();
        spec.image_size = 32;
        spec.seed = 4;
        auto train = scene::generate_corpus(spec, 24, scene::Split::train);
        auto val = scene::generate_corpus(spec, 6, scene::Split::val);
        const auto dk = lowlight::DarkenConfig::profile("dark-default");
        auto dark = [&](std::vector<scene::SceneSample> v) {
            for (auto& s : v)
                s.image = lowlight::darken(s.image, dk, s.id);
            return v;
        };
        Toy out;
        out.teacher_data = {train, train};
        out.student_data = {dark(train), train};
        out.val_normal = val;
        out.val_dark = dark(val);
        return out;
    }();
    return t;
}

TrainConfig small_config()
{
    TrainConfig c;
    c.seed = 3;
    c.steps = 6;
    c.batch_size = 4;
    c.seg_warmup = 2;
    c.eval_every = 3;
    c.clip_grad_norm = 5;
    c.sgd.lr = 0.005;
    c.sgd.momentum = 0.9;
    c.sgd.weight_decay = 5e-4;
    return c;
}

const TrainResult& teacher()
{
    static const TrainResult t = train_teacher(toy().teacher_data, toy().val_normal, small_config());
    return t;
}

TrainConfig distilling(TrainConfig c)
{
    c.distill.enabled = true;
    c.distill.ddim_steps = 3;
    return c;
}

void expect_same_history(const TrainResult& a, const TrainResult& b)
{
    ASSERT_EQ(a.losses.size(), b.losses.size());
    for (std::size_t i = 0; i < a.losses.size(); ++i)
        EXPECT_EQ(to_json(a.losses[i]), to_json(b.losses[i])) << "step " << i + 1;
    ASSERT_EQ(a.metrics.size(), b.metrics.size());
    for (std::size_t i = 0; i < a.metrics.size(); ++i)
        EXPECT_EQ(to_json(a.metrics[i]), to_json(b.metrics[i]));
}

} // namespace

TEST(SegNet, OutputShapes)
{
    SegNetConfig cfg;
    SegNet net(cfg, 1);
    const auto out = net.forward(ag::constant(testkit::random_tensor({2, 3, 32, 32}, 1, 0, 1)));
    EXPECT_EQ(out.stage1.shape(), (Shape{2, cfg.c1, 16, 16}));
    EXPECT_EQ(out.stage2.shape(), (Shape{2, cfg.c2, 8, 8}));
    EXPECT_EQ(out.mask_logits.shape(), (Shape{2, 4, 8, 8}));
    EXPECT_EQ(out.logits.shape(), (Shape{2, 4, 32, 32}));
    EXPECT_EQ(out.scores.shape(), (Shape{2, 3}));
}

TEST(SegNet, FusionNeedsDepth)
{
    SegNetConfig cfg;
    cfg.dgf2 = true;
    SegNet net(cfg, 1);
    EXPECT_THROW(net.forward(ag::constant(Tensor({1, 3, 16, 16}))), std::invalid_argument);
}

TEST(Training, LossReportIsAdditive)
{
    const auto r = train_student(toy().student_data, toy().val_dark, &teacher().net, distilling(small_config()));
    for (const auto& l : r.losses) {
        EXPECT_EQ(l.l_overall, l.recompute()) << "step " << l.step;
        EXPECT_EQ(l.l_diff.size(), 3u);
        EXPECT_EQ(l.weights, (std::vector<double>{1, 1, 1}));
    }
    EXPECT_EQ(r.losses[0].l_seg, 0.0);
    EXPECT_GT(r.losses.back().l_seg, 0.0);
    EXPECT_EQ(r.tap_scales.size(), 3u);
}

TEST(Training, DistillationOffReproducesBaseline)
{
    const TrainConfig c = small_config();
    const auto plain = train_student(toy().student_data, toy().val_dark, nullptr, c);
    const auto with_teacher = train_student(toy().student_data, toy().val_dark, &teacher().net, c);
    expect_same_history(plain, with_teacher);
    for (const auto& l : plain.losses) {
        EXPECT_TRUE(l.l_diff.empty());
        EXPECT_EQ(l.l_overall, l.l_cls + l.l_seg);
    }
}

TEST(Training, EmptyFusionStagesMatchFusionFreeBuild)
{
    TrainConfig off = small_config();
    TrainConfig empty = off;
    empty.net.dgf2 = true;
    empty.net.fusion.stages.clear();
    expect_same_history(train_student(toy().student_data, toy().val_dark, nullptr, off),
                        train_student(toy().student_data, toy().val_dark, nullptr, empty));
}

TEST(Training, FusionChangesTheRun)
{
    TrainConfig on = small_config();
    on.net.dgf2 = true;
    const auto a = train_student(toy().student_data, toy().val_dark, nullptr, small_config());
    const auto b = train_student(toy().student_data, toy().val_dark, nullptr, on);
    EXPECT_NE(a.losses.back().l_overall, b.losses.back().l_overall);
}

TEST(Training, RepeatRunsAreIdentical)
{
    TrainConfig c = distilling(small_config());
    c.net.dgf2 = true;
    expect_same_history(train_student(toy().student_data, toy().val_dark, &teacher().net, c),
                        train_student(toy().student_data, toy().val_dark, &teacher().net, c));
    expect_same_history(train_teacher(toy().teacher_data, toy().val_normal, small_config()), teacher());
}

TEST(Training, TeacherIsUntouchedByDistillation)
{
    std::vector<Tensor> before;
    for (const auto& [name, p] : teacher().net.params().items())
        before.push_back(p.value());
    TrainConfig c = distilling(small_config());
    c.net.dgf2 = true;
    train_student(toy().student_data, toy().val_dark, &teacher().net, c);
    std::size_t i = 0;
    for (const auto& [name, p] : teacher().net.params().items()) {
        EXPECT_EQ(p.value().storage(), before[i++].storage()) << name;
        EXPECT_EQ(p.grad().max_abs(), 0.0) << name;
    }
}

TEST(Training, RejectsInconsistentSetups)
{
    EXPECT_THROW(train_student(toy().student_data, toy().val_dark, nullptr, distilling(small_config())),
                 std::invalid_argument);
    TrainConfig fused = small_config();
    fused.net.dgf2 = true;
    EXPECT_THROW(train_teacher(toy().teacher_data, toy().val_normal, fused), std::invalid_argument);
    Dataset broken = toy().student_data;
    broken.normal.pop_back();
    EXPECT_THROW(train_student(broken, toy().val_dark, nullptr, small_config()), std::invalid_argument);
    TrainConfig no_taps = distilling(small_config());
    no_taps.distill.taps.clear();
    EXPECT_THROW(train_student(toy().student_data, toy().val_dark, &teacher().net, no_taps), std::invalid_argument);
}

TEST(Training, MetricsAreRecordedAtEvalPoints)
{
    const auto& m = teacher().metrics;
    ASSERT_EQ(m.size(), 2u);
    EXPECT_EQ(m[0].step, 3);
    EXPECT_EQ(m[1].step, 6);
    for (const auto& r : m) {
        EXPECT_GE(r.miou, 0.0);
        EXPECT_LE(r.miou, 1.0);
        EXPECT_EQ(r.split, "val");
    }
}

TEST(Checkpoint, RoundTripRestoresNetwork)
{
    const fs::path dir = testkit::scratch_dir("ckpt");
    fs::create_directories(dir);
    ckpt::save(dir / "t.ckpt", teacher().checkpoint);
    const auto back = ckpt::load(dir / "t.ckpt");
    EXPECT_EQ(back.step, 6u);
    EXPECT_EQ(back.config_hash, teacher().checkpoint.config_hash);
    EXPECT_EQ(back.meta_json, teacher().checkpoint.meta_json);
    ASSERT_EQ(back.params.size(), teacher().checkpoint.params.size());
    ASSERT_EQ(back.momentum.size(), teacher().checkpoint.momentum.size());

    SegNet net(segnet_from_json(nlohmann::json::parse(back.meta_json).at("net")), 999);
    ckpt::restore(back, net.params());
    const Tensor x = testkit::random_tensor({1, 3, 32, 32}, 2, 0, 1);
    EXPECT_EQ(net.forward(ag::constant(x)).logits.value().storage(),
              teacher().net.forward(ag::constant(x)).logits.value().storage());
    EXPECT_EQ(evaluate(net, toy().val_normal), evaluate(teacher().net, toy().val_normal));

    SegNetConfig other;
    other.c1 = 8;
    SegNet wrong(other, 1);
    EXPECT_THROW(ckpt::restore(back, wrong.params()), std::exception);
    {
        std::ofstream(dir / "junk.ckpt") << "not a checkpoint";
    }
    EXPECT_THROW(ckpt::load(dir / "junk.ckpt"), std::exception);
    fs::remove_all(dir);
}
