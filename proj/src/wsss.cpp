#include "dgkd/wsss.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace dgkd::wsss {

void CamConfig::validate() const
{
    if (!(bg_power > 0))
        throw std::invalid_argument("cam.bg_power must be > 0");
    if (pamr_iters < 0)
        throw std::invalid_argument("cam.pamr_iters must be >= 0");
    if (pamr_window < 1 || pamr_window % 2 == 0)
        throw std::invalid_argument("cam.pamr_window must be a positive odd size");
    if (!(pamr_tau > 0))
        throw std::invalid_argument("cam.pamr_tau must be > 0");
    if (!(threshold >= 0 && threshold <= 1))
        throw std::invalid_argument("cam.threshold must lie in [0,1]");
}

ag::Var classification_loss(const ag::Var& scores, const Tensor& labels)
{
    return ag::bce_with_logits(scores, labels);
}

Tensor make_cams(const Tensor& score_maps, const Tensor& labels, double bg_power)
{
    if (score_maps.rank() != 4)
        throw std::invalid_argument("make_cams: expected [N,K+1,H,W] score maps");
    const int n = score_maps.dim(0), c = score_maps.dim(1), hw = score_maps.dim(2) * score_maps.dim(3);
    if (!labels.empty() && (labels.rank() != 2 || labels.dim(0) != n || labels.dim(1) != c - 1))
        throw std::invalid_argument("make_cams: labels must be [N,K]");
    Tensor cams(score_maps.shape());
    for (int i = 0; i < n; ++i) {
        double* out = cams.data() + static_cast<std::size_t>(i) * c * hw;
        const double* in = score_maps.data() + static_cast<std::size_t>(i) * c * hw;
        for (int k = 1; k < c; ++k) {
            const bool present = labels.empty() || labels[static_cast<std::size_t>(i) * (c - 1) + (k - 1)] > 0.5;
            if (!present)
                continue;
            double mx = 0;
            for (int p = 0; p < hw; ++p)
                mx = std::max(mx, in[static_cast<std::size_t>(k) * hw + p]);
            if (mx <= 0)
                continue;
            for (int p = 0; p < hw; ++p)
                out[static_cast<std::size_t>(k) * hw + p] = std::max(0.0, in[static_cast<std::size_t>(k) * hw + p]) / mx;
        }
        for (int p = 0; p < hw; ++p) {
            double fg = 0;
            for (int k = 1; k < c; ++k)
                fg = std::max(fg, out[static_cast<std::size_t>(k) * hw + p]);
            out[p] = std::pow(1.0 - fg, bg_power);
        }
    }
    return cams;
}

Tensor cams_to_distribution(const Tensor& cams)
{
    const int n = cams.dim(0), c = cams.dim(1), hw = cams.dim(2) * cams.dim(3);
    Tensor out(cams.shape());
    for (int i = 0; i < n; ++i)
        for (int p = 0; p < hw; ++p) {
            const std::size_t base = static_cast<std::size_t>(i) * c * hw + p;
            double z = 0;
            for (int k = 0; k < c; ++k)
                z += cams[base + static_cast<std::size_t>(k) * hw];
            for (int k = 0; k < c; ++k)
                out[base + static_cast<std::size_t>(k) * hw]
                    = z > 0 ? cams[base + static_cast<std::size_t>(k) * hw] / z : 1.0 / c;
        }
    return out;
}

Tensor pamr_refine(const Tensor& probs, const Tensor& image, int iters, int window, double tau)
{
    if (iters < 0)
        throw std::invalid_argument("pamr_refine: iters must be >= 0");
    if (window < 1 || window % 2 == 0)
        throw std::invalid_argument("pamr_refine: window must be a positive odd size");
    if (!(tau > 0))
        throw std::invalid_argument("pamr_refine: tau must be > 0");
    if (probs.rank() != 4 || image.rank() != 4 || image.dim(0) != probs.dim(0) || image.dim(2) != probs.dim(2)
        || image.dim(3) != probs.dim(3))
        throw std::invalid_argument("pamr_refine: image and probabilities disagree in shape");
    if (iters == 0)
        return probs;
    const int n = probs.dim(0), c = probs.dim(1), h = probs.dim(2), w = probs.dim(3), ic = image.dim(1);
    const int r = window / 2, taps = window * window;
    const std::size_t hw = static_cast<std::size_t>(h) * w;

    // Affinity weights per pixel and offset; zero for neighbours off the image.
    std::vector<double> aff(static_cast<std::size_t>(n) * hw * taps, 0.0);
    for (int i = 0; i < n; ++i) {
        const double* img = image.data() + static_cast<std::size_t>(i) * ic * hw;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double* a = aff.data() + (static_cast<std::size_t>(i) * hw + static_cast<std::size_t>(y) * w + x) * taps;
                double mx = -INFINITY;
                for (int dy = -r; dy <= r; ++dy)
                    for (int dx = -r; dx <= r; ++dx) {
                        const int yy = y + dy, xx = x + dx;
                        const int t = (dy + r) * window + (dx + r);
                        if (yy < 0 || yy >= h || xx < 0 || xx >= w) {
                            a[t] = -INFINITY;
                            continue;
                        }
                        double d2 = 0;
                        for (int ch = 0; ch < ic; ++ch) {
                            const double d = img[ch * hw + static_cast<std::size_t>(y) * w + x]
                                             - img[ch * hw + static_cast<std::size_t>(yy) * w + xx];
                            d2 += d * d;
                        }
                        a[t] = -d2 / tau;
                        mx = std::max(mx, a[t]);
                    }
                double z = 0;
                for (int t = 0; t < taps; ++t) {
                    a[t] = std::isinf(a[t]) ? 0.0 : std::exp(a[t] - mx);
                    z += a[t];
                }
                for (int t = 0; t < taps; ++t)
                    a[t] /= z;
            }
    }

    Tensor cur = probs, next(probs.shape());
    for (int it = 0; it < iters; ++it) {
        for (int i = 0; i < n; ++i)
            for (int k = 0; k < c; ++k) {
                const double* src = cur.data() + (static_cast<std::size_t>(i) * c + k) * hw;
                double* dst = next.data() + (static_cast<std::size_t>(i) * c + k) * hw;
                for (int y = 0; y < h; ++y)
                    for (int x = 0; x < w; ++x) {
                        const double* a
                            = aff.data() + (static_cast<std::size_t>(i) * hw + static_cast<std::size_t>(y) * w + x) * taps;
                        double s = 0;
                        for (int dy = -r; dy <= r; ++dy) {
                            const int yy = y + dy;
                            if (yy < 0 || yy >= h)
                                continue;
                            for (int dx = -r; dx <= r; ++dx) {
                                const int xx = x + dx;
                                if (xx < 0 || xx >= w)
                                    continue;
                                s += a[(dy + r) * window + (dx + r)] * src[static_cast<std::size_t>(yy) * w + xx];
                            }
                        }
                        dst[static_cast<std::size_t>(y) * w + x] = s;
                    }
            }
        std::swap(cur, next);
    }
    return cur;
}

std::vector<int> pseudo_mask(const Tensor& probs, double threshold, int ignore_label)
{
    const int n = probs.dim(0), c = probs.dim(1), hw = probs.dim(2) * probs.dim(3);
    std::vector<int> out(static_cast<std::size_t>(n) * hw);
    for (int i = 0; i < n; ++i)
        for (int p = 0; p < hw; ++p) {
            const std::size_t base = static_cast<std::size_t>(i) * c * hw + p;
            int best = 0;
            for (int k = 1; k < c; ++k)
                if (probs[base + static_cast<std::size_t>(k) * hw] > probs[base + static_cast<std::size_t>(best) * hw])
                    best = k;
            out[static_cast<std::size_t>(i) * hw + p]
                = probs[base + static_cast<std::size_t>(best) * hw] < threshold ? ignore_label : best;
        }
    return out;
}

std::vector<int> pseudo_labels(const Tensor& score_maps, const Tensor& labels, const Tensor& image,
                               const CamConfig& cfg)
{
    Tensor probs = cams_to_distribution(make_cams(score_maps, labels, cfg.bg_power));
    probs = pamr_refine(probs, image, cfg.pamr_iters, cfg.pamr_window, cfg.pamr_tau);
    return pseudo_mask(probs, cfg.threshold, cfg.ignore_label);
}

ag::Var self_sup_seg_loss(const ag::Var& logits, const std::vector<int>& pseudo, int ignore_label)
{
    return ag::cross_entropy(logits, pseudo, ignore_label);
}

std::vector<int> argmax_channels(const Tensor& logits)
{
    return pseudo_mask(logits, -INFINITY, -1);
}

double LossReport::recompute() const
{
    double distill_total = 0;
    for (std::size_t i = 0; i < l_diff.size(); ++i) {
        const double t = l_diff[i] + l_kd[i];
        distill_total += weights.empty() ? t : t * weights[i];
    }
    double total = 0;
    total += l_cls;
    total += l_seg;
    total += distill_total;
    return total;
}

double LossReport::sum_diff() const
{
    double s = 0;
    for (double v : l_diff)
        s += v;
    return s;
}

double LossReport::sum_kd() const
{
    double s = 0;
    for (double v : l_kd)
        s += v;
    return s;
}

nlohmann::json to_json(const LossReport& r)
{
    return {{"step", r.step},   {"l_cls", r.l_cls}, {"l_seg", r.l_seg},          {"l_diff", r.l_diff},
            {"l_kd", r.l_kd}, {"weights", r.weights}, {"l_overall", r.l_overall},
            {"grad_norm", r.grad_norm}};
}

nlohmann::json to_json(const MetricRecord& r)
{
    nlohmann::json iou = nlohmann::json::array();
    for (double v : r.per_class_iou)
        iou.push_back(std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v));
    return {{"step", r.step}, {"split", r.split}, {"miou", r.miou}, {"pixacc", r.pixacc}, {"per_class_iou", iou}};
}

std::string config_hash(const nlohmann::json& j)
{
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash_name(j.dump())));
    return buf;
}

} // namespace dgkd::wsss
