#include "dgkd/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace dgkd::eval {

ConfusionMatrix::ConfusionMatrix(int num_classes, std::vector<std::string> class_names)
    : n_(num_classes)
    , counts_(static_cast<std::size_t>(num_classes) * num_classes, 0)
    , names_(std::move(class_names))
{
    if (num_classes < 1)
        throw std::invalid_argument("ConfusionMatrix: need at least one class");
    if (names_.empty())
        for (int c = 0; c < n_; ++c)
            names_.push_back(c == 0 ? "background" : "class" + std::to_string(c));
    if (static_cast<int>(names_.size()) != n_)
        throw std::invalid_argument("ConfusionMatrix: class name count mismatch");
}

std::uint64_t ConfusionMatrix::total() const
{
    return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0});
}

ConfusionMatrix& ConfusionMatrix::merge(const ConfusionMatrix& other)
{
    if (other.n_ != n_)
        throw std::invalid_argument("ConfusionMatrix::merge: class count mismatch");
    for (std::size_t i = 0; i < counts_.size(); ++i)
        counts_[i] += other.counts_[i];
    return *this;
}

void accumulate(ConfusionMatrix& cm, const std::vector<int>& pred, const std::vector<int>& gt, int ignore_label)
{
    if (pred.size() != gt.size())
        throw std::invalid_argument("accumulate: prediction and ground truth differ in size");
    const int n = cm.num_classes();
    for (std::size_t i = 0; i < gt.size(); ++i) {
        const int g = gt[i];
        if (g == ignore_label)
            continue;
        const int p = pred[i];
        if (g < 0 || g >= n || p < 0 || p >= n)
            throw std::out_of_range("accumulate: class id out of range at pixel " + std::to_string(i));
        ++cm.at(g, p);
    }
}

Metrics metrics(const ConfusionMatrix& cm)
{
    const std::uint64_t total = cm.total();
    if (total == 0)
        throw std::invalid_argument("metrics: confusion matrix is empty");
    const int n = cm.num_classes();
    Metrics m;
    m.per_class_iou.assign(static_cast<std::size_t>(n), std::numeric_limits<double>::quiet_NaN());
    std::uint64_t trace = 0;
    double iou_sum = 0;
    int counted = 0;
    for (int c = 0; c < n; ++c) {
        std::uint64_t row = 0, col = 0;
        for (int k = 0; k < n; ++k) {
            row += cm.at(c, k);
            col += cm.at(k, c);
        }
        const std::uint64_t tp = cm.at(c, c);
        trace += tp;
        const std::uint64_t uni = row + col - tp;
        if (uni == 0)
            continue;
        const double iou = static_cast<double>(tp) / static_cast<double>(uni);
        m.per_class_iou[static_cast<std::size_t>(c)] = iou;
        iou_sum += iou;
        ++counted;
    }
    m.miou = iou_sum / counted;
    m.pixacc = static_cast<double>(trace) / static_cast<double>(total);
    return m;
}

std::string format_table(const std::vector<std::string>& row_names, const std::vector<Metrics>& rows,
                         const std::vector<std::string>& class_names)
{
    std::ostringstream os;
    char buf[64];
    std::size_t width = 24;
    for (const auto& n : row_names)
        width = std::max(width, n.size());
    os << std::left << std::setw(static_cast<int>(width)) << "run" << std::right;
    for (const auto& c : class_names) {
        std::snprintf(buf, sizeof buf, " %10.10s", c.c_str());
        os << buf;
    }
    os << "       mIoU     PixAcc\n";
    for (std::size_t r = 0; r < rows.size(); ++r) {
        os << std::left << std::setw(static_cast<int>(width)) << row_names.at(r) << std::right;
        for (std::size_t c = 0; c < class_names.size(); ++c) {
            const double v = c < rows[r].per_class_iou.size() ? rows[r].per_class_iou[c] : std::nan("");
            if (std::isnan(v))
                std::snprintf(buf, sizeof buf, " %10s", "-");
            else
                std::snprintf(buf, sizeof buf, " %10.2f", 100 * v);
            os << buf;
        }
        std::snprintf(buf, sizeof buf, " %10.2f %10.2f\n", 100 * rows[r].miou, 100 * rows[r].pixacc);
        os << buf;
    }
    return os.str();
}

} // namespace dgkd::eval
