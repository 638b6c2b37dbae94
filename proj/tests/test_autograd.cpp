#include "dgkd/autograd.hpp"

#include "test_support.hpp"

#include <gtest/gtest.h>

using namespace dgkd;
using dgkd::testkit::away_from_zero;
using dgkd::testkit::check_gradients;
using dgkd::testkit::random_tensor;

namespace {

// Scalar probe: mse against a fixed random target exercises every output element.
ag::Var probe(const ag::Var& y, std::uint64_t seed = 99)
{
    return ag::mean_squared_error(y, ag::constant(random_tensor(y.shape(), seed)));
}

constexpr double kTol = 1e-6;

} // namespace

TEST(Autograd, ElementwiseOps)
{
    auto a = ag::parameter(away_from_zero({2, 3, 4, 4}, 1));
    auto b = ag::parameter(away_from_zero({2, 3, 4, 4}, 2));
    EXPECT_LT(check_gradients({a, b}, [&] { return probe(ag::add(a, b)); }).max_rel, kTol);
    EXPECT_LT(check_gradients({a, b}, [&] { return probe(ag::sub(a, b)); }).max_rel, kTol);
    EXPECT_LT(check_gradients({a, b}, [&] { return probe(ag::mul(a, b)); }).max_rel, kTol);
    EXPECT_LT(check_gradients({a}, [&] { return probe(ag::scale(a, -1.7)); }).max_rel, kTol);
    EXPECT_LT(check_gradients({a}, [&] { return probe(ag::scale_samples(a, {0.3, -2.0})); }).max_rel, kTol);
    EXPECT_LT(check_gradients({a}, [&] { return probe(ag::add_scalar(a, 0.25)); }).max_rel, kTol);
    EXPECT_LT(check_gradients({a}, [&] { return probe(ag::one_minus(a)); }).max_rel, kTol);
    EXPECT_LT(check_gradients({a}, [&] { return probe(ag::sigmoid(a)); }).max_rel, kTol);
    EXPECT_LT(check_gradients({a}, [&] { return probe(ag::relu(a)); }).max_rel, kTol);
    EXPECT_LT(check_gradients({a}, [&] { return probe(ag::silu(a)); }).max_rel, kTol);
}

TEST(Autograd, BroadcastsAndLinear)
{
    auto x = ag::parameter(random_tensor({2, 3, 4, 4}, 3));
    auto bias = ag::parameter(random_tensor({3}, 4));
    auto per = ag::parameter(random_tensor({2, 3}, 5));
    EXPECT_LT(check_gradients({x, bias}, [&] { return probe(ag::add_channel_bias(x, bias)); }).max_rel, kTol);
    EXPECT_LT(check_gradients({x, per}, [&] { return probe(ag::add_sample_channel(x, per)); }).max_rel, kTol);

    auto in = ag::parameter(random_tensor({3, 5}, 6));
    auto w = ag::parameter(random_tensor({4, 5}, 7));
    auto b = ag::parameter(random_tensor({4}, 8));
    EXPECT_LT(check_gradients({in, w, b}, [&] { return probe(ag::linear(in, w, b)); }).max_rel, kTol);
}

TEST(Autograd, ConvolutionGradients)
{
    for (int stride : {1, 2})
        for (int k : {1, 3}) {
            auto x = ag::parameter(random_tensor({2, 3, 6, 6}, 10 + stride * k));
            auto w = ag::parameter(random_tensor({4, 3, k, k}, 20 + k));
            auto b = ag::parameter(random_tensor({4}, 30));
            const int pad = k / 2;
            const auto r = check_gradients({x, w, b}, [&] { return probe(ag::conv2d(x, w, b, stride, pad)); });
            EXPECT_LT(r.max_rel, kTol) << "stride " << stride << " k " << k;
        }
}

TEST(Autograd, ConvolutionMatchesDirectSum)
{
    const Tensor x = random_tensor({2, 3, 7, 5}, 40);
    const Tensor w = random_tensor({4, 3, 3, 3}, 41);
    const Tensor b = random_tensor({4}, 42);
    for (int stride : {1, 2}) {
        const Tensor y = ag::conv2d(ag::constant(x), ag::constant(w), ag::constant(b), stride, 1).value();
        const int ho = (7 + 2 - 3) / stride + 1, wo = (5 + 2 - 3) / stride + 1;
        ASSERT_EQ(y.shape(), (Shape{2, 4, ho, wo}));
        for (int n = 0; n < 2; ++n)
            for (int o = 0; o < 4; ++o)
                for (int i = 0; i < ho; ++i)
                    for (int j = 0; j < wo; ++j) {
                        double s = b[static_cast<std::size_t>(o)];
                        for (int c = 0; c < 3; ++c)
                            for (int ky = 0; ky < 3; ++ky)
                                for (int kx = 0; kx < 3; ++kx) {
                                    const int yy = i * stride - 1 + ky, xx = j * stride - 1 + kx;
                                    if (yy < 0 || yy >= 7 || xx < 0 || xx >= 5)
                                        continue;
                                    s += w.at(o, c, ky, kx) * x.at(n, c, yy, xx);
                                }
                        EXPECT_NEAR(y.at(n, o, i, j), s, 1e-12);
                    }
    }
}

TEST(Autograd, ResamplingGradients)
{
    auto x = ag::parameter(random_tensor({2, 2, 4, 4}, 50));
    EXPECT_LT(check_gradients({x}, [&] { return probe(ag::upsample_bilinear(x, 16, 16)); }).max_rel, kTol);
    EXPECT_LT(check_gradients({x}, [&] { return probe(ag::upsample_bilinear(x, 7, 5)); }).max_rel, kTol);
    EXPECT_LT(check_gradients({x}, [&] { return probe(ag::avg_pool(x, 2)); }).max_rel, kTol);
    EXPECT_LT(check_gradients({x}, [&] { return probe(ag::global_avg_pool(x)); }).max_rel, kTol);
    EXPECT_LT(check_gradients({x}, [&] { return probe(ag::slice_channels(x, 1, 2)); }).max_rel, kTol);
    EXPECT_LT(check_gradients({x}, [&] { return probe(ag::flip_horizontal(x)); }).max_rel, kTol);
}

// Half-pixel-centre bilinear sampling with edge clamping, written out per output pixel.
TEST(Autograd, UpsampleMatchesHalfPixelFormula)
{
    const Tensor x = random_tensor({1, 1, 3, 4}, 51);
    const int oh = 9, ow = 10;
    const Tensor y = ag::upsample_bilinear(ag::constant(x), oh, ow).value();
    auto src = [](int o, int in, int out) {
        const double s = (o + 0.5) * in / static_cast<double>(out) - 0.5;
        return std::max(s, 0.0);
    };
    for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j) {
            const double sy = src(i, 3, oh), sx = src(j, 4, ow);
            const int y0 = std::min(static_cast<int>(sy), 2), x0 = std::min(static_cast<int>(sx), 3);
            const int y1 = std::min(y0 + 1, 2), x1 = std::min(x0 + 1, 3);
            const double fy = sy - y0, fx = sx - x0;
            const double v = (1 - fy) * ((1 - fx) * x.at(0, 0, y0, x0) + fx * x.at(0, 0, y0, x1))
                             + fy * ((1 - fx) * x.at(0, 0, y1, x0) + fx * x.at(0, 0, y1, x1));
            EXPECT_NEAR(y.at(0, 0, i, j), v, 1e-12) << i << "," << j;
        }
}

TEST(Autograd, LossGradients)
{
    auto a = ag::parameter(random_tensor({2, 3, 3, 3}, 60, -3, 3));
    auto b = ag::parameter(random_tensor({2, 3, 3, 3}, 61, -3, 3));
    EXPECT_LT(check_gradients({a, b}, [&] { return ag::mean_squared_error(a, b); }).max_rel, kTol);
    EXPECT_LT(check_gradients({a, b}, [&] { return ag::kl_div_logits(a, b); }).max_rel, kTol);

    Tensor targets({2, 3});
    targets[0] = 1;
    targets[4] = 1;
    targets[5] = 1;
    auto s = ag::parameter(random_tensor({2, 3}, 62, -4, 4));
    EXPECT_LT(check_gradients({s}, [&] { return ag::bce_with_logits(s, targets); }).max_rel, kTol);

    std::vector<int> labels(2 * 9);
    for (std::size_t i = 0; i < labels.size(); ++i)
        labels[i] = i % 4 == 3 ? 255 : static_cast<int>(i % 3);
    EXPECT_LT(check_gradients({a}, [&] { return ag::cross_entropy(a, labels, 255); }).max_rel, kTol);

    auto parts = std::vector<ag::Var>{ag::mean_squared_error(a, b), ag::scale(ag::kl_div_logits(a, b), 2.0)};
    EXPECT_NEAR(ag::sum(parts).item(), parts[0].item() + parts[1].item(), 1e-15);
}

TEST(Autograd, LossClosedForms)
{
    const Tensor zeros({4, 3});
    Tensor labels({4, 3});
    labels[1] = labels[5] = labels[6] = 1;
    EXPECT_NEAR(ag::bce_with_logits(ag::constant(zeros), labels).item(), std::log(2.0), 1e-15);

    const Tensor logits = random_tensor({1, 3, 2, 2}, 70);
    EXPECT_NEAR(ag::kl_div_logits(ag::constant(logits), ag::constant(logits)).item(), 0.0, 1e-15);

    std::vector<int> all_ignored(4, 255);
    auto x = ag::parameter(logits);
    auto ce = ag::cross_entropy(x, all_ignored, 255);
    EXPECT_EQ(ce.item(), 0.0);
    ag::backward(ce);
    EXPECT_EQ(x.grad().max_abs(), 0.0);
}

TEST(Autograd, DetachBlocksGradient)
{
    auto x = ag::parameter(random_tensor({1, 2, 3, 3}, 80));
    auto y = ag::add(ag::mul(ag::detach(x), x), ag::detach(x));
    ag::backward(probe(y));
    // d/dx of stop(x) * x is stop(x) alone.
    auto x2 = ag::parameter(x.value());
    auto ref = ag::mul(ag::constant(x.value()), x2);
    ag::backward(probe(ag::add(ref, ag::constant(x.value()))));
    EXPECT_LT(dgkd::testkit::max_abs_diff(x.grad(), x2.grad()), 1e-15);
}
