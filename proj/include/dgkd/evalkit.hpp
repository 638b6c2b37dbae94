#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace dgkd::eval {

/// counts[g * n + p]: pixels with ground truth g predicted as p.
class ConfusionMatrix {
public:
    ConfusionMatrix() = default;
    explicit ConfusionMatrix(int num_classes, std::vector<std::string> class_names = {});

    int num_classes() const noexcept { return n_; }
    std::uint64_t at(int gt, int pred) const { return counts_.at(static_cast<std::size_t>(gt) * n_ + pred); }
    std::uint64_t& at(int gt, int pred) { return counts_.at(static_cast<std::size_t>(gt) * n_ + pred); }
    std::uint64_t total() const;
    const std::vector<std::uint64_t>& counts() const noexcept { return counts_; }
    const std::vector<std::string>& class_names() const noexcept { return names_; }

    /// Elementwise sum; associative and commutative.
    ConfusionMatrix& merge(const ConfusionMatrix& other);

    bool operator==(const ConfusionMatrix& o) const { return n_ == o.n_ && counts_ == o.counts_; }

private:
    int n_ = 0;
    std::vector<std::uint64_t> counts_;
    std::vector<std::string> names_;
};

void accumulate(ConfusionMatrix& cm, const std::vector<int>& pred, const std::vector<int>& gt, int ignore_label);

struct Metrics {
    double miou = 0;
    double pixacc = 0;
    /// NaN for classes with zero union; those are left out of miou.
    std::vector<double> per_class_iou;
};

Metrics metrics(const ConfusionMatrix& cm);

/// Plain-text table: one header row, one row per entry.
std::string format_table(const std::vector<std::string>& row_names, const std::vector<Metrics>& rows,
                         const std::vector<std::string>& class_names);

} // namespace dgkd::eval
