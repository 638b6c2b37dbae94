#include "dgkd/evalkit.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

using namespace dgkd::eval;

namespace {

struct Brute {
    double miou, pixacc;
    std::vector<double> iou;
};

// Straight from the masks: |gt = c and pred = c| / |gt = c or pred = c| per class.
Brute brute_force(const std::vector<int>& pred, const std::vector<int>& gt, int n, int ignore)
{
    Brute b{0, 0, std::vector<double>(static_cast<std::size_t>(n), std::nan(""))};
    std::uint64_t correct = 0, valid = 0;
    for (std::size_t i = 0; i < gt.size(); ++i)
        if (gt[i] != ignore) {
            ++valid;
            correct += pred[i] == gt[i];
        }
    double sum = 0;
    int counted = 0;
    for (int c = 0; c < n; ++c) {
        std::uint64_t inter = 0, uni = 0;
        for (std::size_t i = 0; i < gt.size(); ++i) {
            if (gt[i] == ignore)
                continue;
            inter += gt[i] == c && pred[i] == c;
            uni += gt[i] == c || pred[i] == c;
        }
        if (uni == 0)
            continue;
        b.iou[static_cast<std::size_t>(c)] = static_cast<double>(inter) / static_cast<double>(uni);
        sum += b.iou[static_cast<std::size_t>(c)];
        ++counted;
    }
    b.miou = sum / counted;
    b.pixacc = static_cast<double>(correct) / static_cast<double>(valid);
    return b;
}

std::vector<int> random_mask(std::mt19937_64& rng, int n, std::size_t size, double ignore_p)
{
    std::uniform_int_distribution<int> cls(0, n - 1);
    std::bernoulli_distribution ign(ignore_p);
    std::vector<int> m(size);
    for (int& v : m)
        v = ign(rng) ? 255 : cls(rng);
    return m;
}

} // namespace

TEST(Confusion, PerfectPredictionOnDiagonal)
{
    std::vector<int> m(16);
    for (std::size_t i = 0; i < 16; ++i)
        m[i] = static_cast<int>(i % 2);
    ConfusionMatrix cm(2);
    accumulate(cm, m, m, 255);
    EXPECT_EQ(cm.at(0, 0) + cm.at(1, 1), 16u);
    const Metrics mt = metrics(cm);
    EXPECT_EQ(mt.miou, 1.0);
    EXPECT_EQ(mt.pixacc, 1.0);
}

TEST(Confusion, AllIgnoredLeavesMatrixUnchanged)
{
    ConfusionMatrix cm(3);
    accumulate(cm, {0, 1, 2, 1}, {255, 255, 255, 255}, 255);
    EXPECT_EQ(cm.total(), 0u);
    EXPECT_THROW(metrics(cm), std::invalid_argument);
}

TEST(Confusion, HandExample)
{
    ConfusionMatrix cm(2);
    accumulate(cm, {0, 0, 0, 0}, {0, 0, 1, 1}, 255);
    EXPECT_EQ(cm.counts(), (std::vector<std::uint64_t>{2, 0, 2, 0}));
    const Metrics m = metrics(cm);
    EXPECT_EQ(m.per_class_iou[0], 0.5);
    EXPECT_EQ(m.per_class_iou[1], 0.0);
    EXPECT_EQ(m.miou, 0.25);
    EXPECT_EQ(m.pixacc, 0.5);
}

TEST(Confusion, MatchesBruteForceOnRandomMasks)
{
    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 200; ++trial) {
        const int n = 2 + trial % 4;
        const auto gt = random_mask(rng, n, 256, 0.1);
        const auto pred = random_mask(rng, n, 256, 0.0);
        ConfusionMatrix cm(n);
        accumulate(cm, pred, gt, 255);
        const Metrics m = metrics(cm);
        const Brute b = brute_force(pred, gt, n, 255);
        ASSERT_EQ(m.miou, b.miou) << "trial " << trial;
        ASSERT_EQ(m.pixacc, b.pixacc);
        for (int c = 0; c < n; ++c) {
            const double x = m.per_class_iou[static_cast<std::size_t>(c)];
            const double y = b.iou[static_cast<std::size_t>(c)];
            ASSERT_TRUE((std::isnan(x) && std::isnan(y)) || x == y);
        }
    }
}

TEST(Confusion, AbsentClassIsLeftOutOfMean)
{
    ConfusionMatrix cm(3);
    accumulate(cm, {0, 1, 1, 0}, {0, 1, 0, 0}, 255);
    const Metrics m = metrics(cm);
    EXPECT_TRUE(std::isnan(m.per_class_iou[2]));
    EXPECT_DOUBLE_EQ(m.miou, (m.per_class_iou[0] + m.per_class_iou[1]) / 2);
}

TEST(Confusion, InvariantUnderPixelPermutation)
{
    std::mt19937_64 rng(2);
    const auto gt = random_mask(rng, 3, 256, 0.05);
    const auto pred = random_mask(rng, 3, 256, 0.0);
    std::vector<std::size_t> order(256);
    for (std::size_t i = 0; i < 256; ++i)
        order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<int> g2(256), p2(256);
    for (std::size_t i = 0; i < 256; ++i) {
        g2[i] = gt[order[i]];
        p2[i] = pred[order[i]];
    }
    ConfusionMatrix a(3), b(3);
    accumulate(a, pred, gt, 255);
    accumulate(b, p2, g2, 255);
    EXPECT_EQ(a, b);
}

TEST(Confusion, MergeIsOrderIndependent)
{
    std::mt19937_64 rng(3);
    std::vector<ConfusionMatrix> parts;
    ConfusionMatrix whole(4);
    for (int i = 0; i < 5; ++i) {
        const auto gt = random_mask(rng, 4, 64, 0.1);
        const auto pred = random_mask(rng, 4, 64, 0.0);
        ConfusionMatrix cm(4);
        accumulate(cm, pred, gt, 255);
        accumulate(whole, pred, gt, 255);
        parts.push_back(cm);
    }
    ConfusionMatrix fwd(4), rev(4);
    for (const auto& p : parts)
        fwd.merge(p);
    for (auto it = parts.rbegin(); it != parts.rend(); ++it)
        rev.merge(*it);
    EXPECT_EQ(fwd, whole);
    EXPECT_EQ(rev, whole);
    EXPECT_THROW(fwd.merge(ConfusionMatrix(3)), std::invalid_argument);
}

TEST(Confusion, RejectsBadInput)
{
    ConfusionMatrix cm(2);
    EXPECT_THROW(accumulate(cm, {0, 1}, {0}, 255), std::invalid_argument);
    EXPECT_THROW(accumulate(cm, {0, 2}, {0, 1}, 255), std::out_of_range);
    EXPECT_THROW(ConfusionMatrix(0), std::invalid_argument);
}

TEST(Table, FormatsRowsAndMissingClasses)
{
    ConfusionMatrix cm(3);
    accumulate(cm, {0, 1, 1, 0}, {0, 1, 0, 0}, 255);
    const std::string t = format_table({"run-a"}, {metrics(cm)}, {"background", "class1", "class2"});
    EXPECT_NE(t.find("run-a"), std::string::npos);
    EXPECT_NE(t.find("mIoU"), std::string::npos);
    EXPECT_NE(t.find(" -"), std::string::npos);
    EXPECT_EQ(std::count(t.begin(), t.end(), '\n'), 2);
}
