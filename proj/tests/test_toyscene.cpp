#include "dgkd/toyscene.hpp"

#include "test_support.hpp"

#include <gtest/gtest.h>

using namespace dgkd;
using namespace dgkd::scene;
namespace fs = std::filesystem;

namespace {

SceneSpec spec_with_seed(std::uint64_t seed)
{
    SceneSpec s = SceneSpec::toy_default();
    s.seed = seed;
    return s;
}

} // namespace

TEST(Scene, DefaultSpecIsValid)
{
    const SceneSpec s = SceneSpec::toy_default();
    EXPECT_EQ(s.image_size, 64);
    EXPECT_EQ(s.num_classes, 3);
    EXPECT_EQ(static_cast<int>(s.palette.size()), s.num_classes);
    EXPECT_NO_THROW(s.validate());
    SceneSpec bad = s;
    bad.shapes_max = 0;
    EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(Scene, GenerationIsDeterministic)
{
    const auto a = generate_corpus(spec_with_seed(7), 1, Split::train);
    const auto b = generate_corpus(spec_with_seed(7), 1, Split::train);
    EXPECT_EQ(a[0].image.storage(), b[0].image.storage());
    EXPECT_EQ(a[0].gt_mask, b[0].gt_mask);
    EXPECT_EQ(a[0].depth.storage(), b[0].depth.storage());
    const auto c = generate_corpus(spec_with_seed(8), 1, Split::train);
    EXPECT_NE(a[0].image.storage(), c[0].image.storage());
    const auto v = generate_corpus(spec_with_seed(7), 1, Split::val);
    EXPECT_NE(a[0].image.storage(), v[0].image.storage());
}

TEST(Scene, SingleShapeScenesHaveOneLabel)
{
    SceneSpec s = spec_with_seed(3);
    s.shapes_min = s.shapes_max = 1;
    for (const auto& sample : generate_corpus(s, 100, Split::train)) {
        int on = 0;
        for (auto v : sample.label_vec)
            on += v;
        EXPECT_EQ(on, 1);
    }
}

TEST(Scene, TrainSplitCoversEveryClass)
{
    const auto corpus = generate_corpus(spec_with_seed(0), 200, Split::train);
    std::vector<int> freq(3);
    for (const auto& s : corpus)
        for (int c = 0; c < 3; ++c)
            freq[static_cast<std::size_t>(c)] += s.label_vec[static_cast<std::size_t>(c)];
    for (int f : freq)
        EXPECT_GE(f, 10);
}

TEST(Scene, LabelsMaskAndDepthAgree)
{
    for (const auto& s : generate_corpus(spec_with_seed(11), 40, Split::train)) {
        EXPECT_EQ(labels_from_mask(s.gt_mask, s.num_classes), s.label_vec);
        EXPECT_EQ(render_mask(s), s.gt_mask);
        EXPECT_EQ(render_depth(s).storage(), s.depth.storage());
        for (double v : s.image.values()) {
            ASSERT_GE(v, 0.0);
            ASSERT_LE(v, 1.0);
        }
        for (const auto& sh : s.shapes) {
            EXPECT_EQ(sh.kind, shape_for_class(sh.class_id));
            EXPECT_GT(sh.depth, kBackgroundDepth);
            EXPECT_LE(sh.depth, 1.0);
        }
    }
}

// Per-pixel oracle: the covering shape with the largest encoded depth wins.
TEST(Scene, NearestShapeWinsContestedPixels)
{
    SceneSpec spec = spec_with_seed(12);
    spec.shapes_min = spec.shapes_max = 4;
    int contested = 0;
    for (const auto& s : generate_corpus(spec, 20, Split::val)) {
        const int n = s.size;
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x) {
                double best = -1;
                int cls = 0, covering = 0;
                for (const auto& sh : s.shapes)
                    if (sh.covers(x + 0.5, y + 0.5)) {
                        ++covering;
                        if (sh.depth > best) {
                            best = sh.depth;
                            cls = sh.class_id;
                        }
                    }
                const std::size_t i = static_cast<std::size_t>(y) * n + x;
                EXPECT_EQ(s.gt_mask[i], cls);
                if (covering) {
                    EXPECT_EQ(s.depth[i], best);
                }
                contested += covering > 1;
            }
    }
    EXPECT_GT(contested, 0);
}

TEST(Scene, EmptyAndSingleShapeDepth)
{
    SceneSample s = generate_corpus(spec_with_seed(5), 1, Split::train)[0];
    s.shapes.clear();
    const Tensor empty = render_depth(s);
    for (double v : empty.values())
        EXPECT_EQ(v, empty[0]);
    EXPECT_NEAR(empty[0], kBackgroundDepth, 1.0 / 65535);

    ShapeInstance sh;
    sh.kind = ShapeKind::rectangle;
    sh.cx = sh.cy = 32;
    sh.half_w = sh.half_h = 10;
    sh.depth = 0.7;
    s.shapes = {sh};
    const Tensor one = render_depth(s);
    for (double v : one.values())
        EXPECT_TRUE(v == empty[0] || v == 0.7);
    EXPECT_EQ(one[32 * 64 + 32], 0.7);
}

TEST(Scene, QuantiserRoundTrip)
{
    for (int bits : {8, 16})
        for (int q = 0; q < (1 << bits); q += bits == 8 ? 1 : 97)
            EXPECT_EQ(quantize_unit(dequantize_unit(static_cast<std::uint16_t>(q), bits), bits), q);
    EXPECT_EQ(quantize_unit(-1, 8), 0);
    EXPECT_EQ(quantize_unit(2, 8), 255);
}

TEST(Scene, CorpusFilesRoundTrip)
{
    const fs::path root = testkit::scratch_dir("corpus");
    CorpusSplit cs;
    cs.spec = spec_with_seed(21);
    cs.split = Split::train;
    cs.samples = generate_corpus(cs.spec, 5, Split::train);
    write_split(root, cs, nlohmann::json{{"note", "x"}});
    const CorpusSplit back = read_split(root, Split::train);
    ASSERT_EQ(back.samples.size(), 5u);
    EXPECT_EQ(spec_to_json(back.spec), spec_to_json(cs.spec));
    EXPECT_EQ(read_manifest(root, Split::train).at("note"), "x");
    for (std::size_t i = 0; i < 5; ++i) {
        const auto& a = cs.samples[i];
        const auto& b = back.samples[i];
        EXPECT_EQ(a.gt_mask, b.gt_mask);
        EXPECT_EQ(a.label_vec, b.label_vec);
        EXPECT_EQ(a.depth.storage(), b.depth.storage());
        for (std::size_t k = 0; k < a.image.size(); ++k)
            ASSERT_NEAR(a.image[k], b.image[k], 0.5 / 255 + 1e-12);
    }
    EXPECT_THROW(read_split(root, Split::val), std::exception);
    fs::remove_all(root);
}

TEST(Scene, SpecJsonRoundTrip)
{
    const SceneSpec s = spec_with_seed(99);
    EXPECT_EQ(spec_to_json(spec_from_json(spec_to_json(s))), spec_to_json(s));
}
