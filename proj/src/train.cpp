#include "dgkd/wsss.hpp"

#include "dgkd/diffusion.hpp"
#include "dgkd/rng.hpp"

#include <cmath>
#include <memory>
#include <sstream>

namespace dgkd::wsss {

void Dataset::check_paired() const
{
    if (input.empty())
        throw std::invalid_argument("training set is empty");
    if (normal.size() != input.size())
        throw std::invalid_argument("dark and normal corpora differ in size (" + std::to_string(input.size()) + " vs " +
                                    std::to_string(normal.size()) + ")");
    for (std::size_t i = 0; i < input.size(); ++i)
        if (input[i].id != normal[i].id || input[i].gt_mask != normal[i].gt_mask)
            throw std::invalid_argument("dark/normal pairing broken at index " + std::to_string(i));
}

Batch make_batch(const Dataset& data, const std::vector<std::size_t>& idx, const std::vector<bool>& flip,
                 bool with_normal)
{
    const auto& first = data.input.at(idx.at(0));
    const int b = static_cast<int>(idx.size()), s = first.size, k = first.num_classes;
    const std::size_t hw = static_cast<std::size_t>(s) * s;
    Batch out;
    out.image = Tensor(Shape{b, 3, s, s});
    if (with_normal)
        out.normal = Tensor(Shape{b, 3, s, s});
    out.depth = Tensor(Shape{b, 1, s, s});
    out.labels = Tensor(Shape{b, k});
    out.gt.resize(static_cast<std::size_t>(b) * hw);
    for (int i = 0; i < b; ++i) {
        const auto& in = data.input.at(idx[static_cast<std::size_t>(i)]);
        const scene::SceneSample* nm = with_normal ? &data.normal.at(idx[static_cast<std::size_t>(i)]) : nullptr;
        if (in.size != s)
            throw std::invalid_argument("make_batch: mixed image sizes");
        const bool f = !flip.empty() && flip[static_cast<std::size_t>(i)];
        for (int y = 0; y < s; ++y)
            for (int x = 0; x < s; ++x) {
                const int sx = f ? s - 1 - x : x;
                const std::size_t src = static_cast<std::size_t>(y) * s + sx;
                const std::size_t dst = static_cast<std::size_t>(y) * s + x;
                for (int c = 0; c < 3; ++c) {
                    out.image[(static_cast<std::size_t>(i) * 3 + c) * hw + dst] = in.image[c * hw + src];
                    if (nm)
                        out.normal[(static_cast<std::size_t>(i) * 3 + c) * hw + dst] = nm->image[c * hw + src];
                }
                out.depth[static_cast<std::size_t>(i) * hw + dst] = in.depth[src];
                out.gt[static_cast<std::size_t>(i) * hw + dst] = in.gt_mask[src];
            }
        for (int c = 0; c < k; ++c)
            out.labels[static_cast<std::size_t>(i) * k + c] = in.label_vec[static_cast<std::size_t>(c)];
    }
    return out;
}

void DistillConfig::validate() const
{
    if (!enabled)
        return;
    if (taps.empty())
        throw std::invalid_argument("dgkd.taps must not be empty when dgkd is enabled");
    if (ddim_steps < 1 || ddim_steps > diffusion_steps)
        throw std::invalid_argument("dgkd.ddim_steps must lie in [1, diffusion.steps]");
    if (!weights.empty() && weights.size() != taps.size())
        throw std::invalid_argument("dgkd.weights must have one entry per tap");
}

void TrainConfig::validate() const
{
    if (steps < 0)
        throw std::invalid_argument("train.steps must be >= 0");
    if (batch_size < 1)
        throw std::invalid_argument("train.batch_size must be >= 1");
    if (!(sgd.lr > 0))
        throw std::invalid_argument("train.lr must be > 0");
    if (clip_grad_norm < 0)
        throw std::invalid_argument("train.clip_grad_norm must be >= 0");
    if (eval_every < 0)
        throw std::invalid_argument("train.eval_every must be >= 0");
    cam.validate();
    net.validate();
    distill.validate();
}

nlohmann::json to_json(const TrainConfig& cfg)
{
    nlohmann::json taps = nlohmann::json::array();
    for (auto t : cfg.distill.taps)
        taps.push_back(distill::to_string(t));
    return {
        {"seed", cfg.seed},
        {"steps", cfg.steps},
        {"batch_size", cfg.batch_size},
        {"lr", cfg.sgd.lr},
        {"momentum", cfg.sgd.momentum},
        {"weight_decay", cfg.sgd.weight_decay},
        {"seg_warmup", cfg.seg_warmup},
        {"clip_grad_norm", cfg.clip_grad_norm},
        {"hflip", cfg.hflip},
        {"eval_every", cfg.eval_every},
        {"cam",
         {{"bg_power", cfg.cam.bg_power},
          {"pamr_iters", cfg.cam.pamr_iters},
          {"pamr_window", cfg.cam.pamr_window},
          {"pamr_tau", cfg.cam.pamr_tau},
          {"threshold", cfg.cam.threshold},
          {"ignore_label", cfg.cam.ignore_label}}},
        {"net", to_json(cfg.net)},
        {"dgkd",
         {{"enabled", cfg.distill.enabled},
          {"taps", taps},
          {"ddim_steps", cfg.distill.ddim_steps},
          {"diffusion_steps", cfg.distill.diffusion_steps},
          {"beta_start", cfg.distill.beta_start},
          {"beta_end", cfg.distill.beta_end},
          {"feature_distance", distill::to_string(cfg.distill.feature_distance)},
          {"mask_distance", distill::to_string(cfg.distill.mask_distance)},
          {"weights", cfg.distill.weights},
          {"embed_dim", cfg.distill.embed_dim}}},
    };
}

eval::ConfusionMatrix evaluate(const SegNet& net, const std::vector<scene::SceneSample>& samples, int batch_size)
{
    const int k = net.config().num_classes;
    eval::ConfusionMatrix cm(k + 1);
    Dataset view;
    view.input = samples;
    for (std::size_t start = 0; start < samples.size(); start += static_cast<std::size_t>(batch_size)) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < std::min(samples.size(), start + batch_size); ++i)
            idx.push_back(i);
        Batch b = make_batch(view, idx, {}, false);
        ag::Var depth = net.config().dgf2 ? ag::constant(b.depth) : ag::Var{};
        SegOutput out = net.forward(ag::constant(b.image), depth, true);
        accumulate(cm, argmax_channels(out.logits.value()), b.gt, kIgnoreLabel);
    }
    return cm;
}

MetricRecord to_record(const eval::ConfusionMatrix& cm, std::int64_t step, const std::string& split)
{
    const auto m = eval::metrics(cm);
    return {step, split, m.miou, m.pixacc, m.per_class_iou};
}

namespace {

/// Epoch-wise shuffled index stream (Fisher-Yates driven by the data substream).
class Sampler {
public:
    Sampler(std::size_t n, std::uint64_t seed)
        : order_(n)
        , rng_(seed)
    {
        for (std::size_t i = 0; i < n; ++i)
            order_[i] = i;
        pos_ = n;
    }

    std::vector<std::size_t> next(int count)
    {
        std::vector<std::size_t> out;
        while (static_cast<int>(out.size()) < count) {
            if (pos_ == order_.size()) {
                for (std::size_t i = order_.size() - 1; i > 0; --i)
                    std::swap(order_[i], order_[static_cast<std::size_t>(rng_.uniform_int(0, static_cast<int>(i)))]);
                pos_ = 0;
            }
            out.push_back(order_[pos_++]);
        }
        return out;
    }

private:
    std::vector<std::size_t> order_;
    Rng rng_;
    std::size_t pos_ = 0;
};

ag::Var tap_feature(const SegOutput& o, distill::TapLocation loc)
{
    switch (loc) {
    case distill::TapLocation::stage1:
        return o.stage1;
    case distill::TapLocation::stage2:
        return o.stage2;
    case distill::TapLocation::mask_logits:
        return o.mask_logits;
    }
    return {};
}

int tap_channels(const SegNetConfig& net, distill::TapLocation loc)
{
    switch (loc) {
    case distill::TapLocation::stage1:
        return net.c1;
    case distill::TapLocation::stage2:
        return net.c2;
    case distill::TapLocation::mask_logits:
        return net.num_classes + 1;
    }
    return 0;
}

/// Root-mean-square of each teacher tap over (up to) the first 64 normal-light
/// training images; fixed for the whole run.
std::vector<double> teacher_tap_scales(const SegNet& teacher, const Dataset& train,
                                       const std::vector<distill::TapLocation>& taps)
{
    std::vector<double> sq(taps.size(), 0.0);
    std::vector<std::size_t> count(taps.size(), 0);
    const std::size_t n = std::min<std::size_t>(64, train.normal.size());
    Dataset view;
    view.input = train.normal;
    for (std::size_t start = 0; start < n; start += 16) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < std::min(n, start + 16); ++i)
            idx.push_back(i);
        Batch b = make_batch(view, idx, {}, false);
        SegOutput o = teacher.forward(ag::constant(b.image), {}, true);
        for (std::size_t t = 0; t < taps.size(); ++t) {
            const Tensor& v = tap_feature(o, taps[t]).value();
            sq[t] += v.squared_norm();
            count[t] += v.size();
        }
    }
    std::vector<double> out(taps.size());
    for (std::size_t t = 0; t < taps.size(); ++t) {
        const double rms = std::sqrt(sq[t] / static_cast<double>(count[t]));
        out[t] = rms > 1e-8 ? rms : 1.0;
    }
    return out;
}

TrainResult run(const Dataset& train, const std::vector<scene::SceneSample>& val, const SegNet* teacher,
                const TrainConfig& cfg, const EvalHook& hook)
{
    cfg.validate();
    train.check_paired();
    if (cfg.distill.enabled && !teacher)
        throw std::invalid_argument("dgkd is enabled but no teacher checkpoint was supplied");
    if (teacher && teacher->config().num_classes != cfg.net.num_classes)
        throw std::invalid_argument("teacher and student disagree on the number of classes");

    TrainResult res{SegNet(cfg.net, substream_seed(cfg.seed, "init")), {}, {}, {}, {}};
    SegNet& net = res.net;
    nn::Sgd opt(cfg.sgd);

    nn::ParamStore pred_store;
    nn::Sgd pred_opt(cfg.sgd);
    std::vector<std::unique_ptr<diffusion::NoisePredictor>> predictors;
    diffusion::NoiseSchedule sched;
    diffusion::DdimPlan plan;
    std::vector<double> weights;
    if (cfg.distill.enabled) {
        Rng prng(substream_seed(cfg.seed, "diffusion.init"));
        for (auto loc : cfg.distill.taps)
            predictors.push_back(std::make_unique<diffusion::NoisePredictor>(
                pred_store, "predictor." + distill::to_string(loc), tap_channels(cfg.net, loc), prng,
                cfg.distill.embed_dim));
        sched = diffusion::make_schedule(cfg.distill.diffusion_steps, cfg.distill.beta_start, cfg.distill.beta_end);
        plan = diffusion::DdimPlan::evenly_strided(cfg.distill.diffusion_steps, cfg.distill.ddim_steps);
        weights = distill::hierarchical_weights(static_cast<int>(cfg.distill.taps.size()), cfg.distill.weights);
        res.tap_scales = teacher_tap_scales(*teacher, train, cfg.distill.taps);
    }

    Sampler sampler(train.input.size(), substream_seed(cfg.seed, "data"));
    Rng aug(substream_seed(cfg.seed, "augmentation"));
    Rng diff_rng(substream_seed(cfg.seed, "diffusion"));
    const bool need_normal = cfg.distill.enabled;

    auto run_eval = [&](std::int64_t step) {
        if (val.empty())
            return;
        MetricRecord rec = to_record(evaluate(net, val), step, "val");
        if (hook)
            hook(rec);
        res.metrics.push_back(std::move(rec));
    };

    for (int step = 1; step <= cfg.steps; ++step) {
        auto idx = sampler.next(cfg.batch_size);
        std::vector<bool> flip(idx.size(), false);
        if (cfg.hflip)
            for (std::size_t i = 0; i < idx.size(); ++i)
                flip[i] = aug.uniform() < 0.5;
        Batch b = make_batch(train, idx, flip, need_normal);

        ag::Var depth = cfg.net.dgf2 ? ag::constant(b.depth) : ag::Var{};
        SegOutput out = net.forward(ag::constant(b.image), depth, false);

        LossReport rep;
        rep.step = step;
        ag::Var l_cls = classification_loss(out.scores, b.labels);
        ag::Var l_seg = ag::constant(Tensor(Shape{1}, 0.0));
        if (step > cfg.seg_warmup) {
            auto pseudo = pseudo_labels(out.logits.value(), b.labels, b.image, cfg.cam);
            l_seg = self_sup_seg_loss(out.logits, pseudo, cfg.cam.ignore_label);
        }
        std::vector<ag::Var> terms{l_cls, l_seg};

        if (cfg.distill.enabled) {
            SegOutput t_out = teacher->forward(ag::constant(b.normal), {}, true);
            std::vector<distill::DistillTap> taps;
            for (std::size_t i = 0; i < cfg.distill.taps.size(); ++i) {
                const auto loc = cfg.distill.taps[i];
                taps.push_back({distill::to_string(loc), loc, tap_feature(t_out, loc), tap_feature(out, loc),
                                predictors[i].get(),
                                loc == distill::TapLocation::mask_logits ? cfg.distill.mask_distance
                                                                         : cfg.distill.feature_distance,
                                res.tap_scales[i]});
            }
            distill::DgkdOutput d;
            try {
                d = distill::dgkd_step(taps, sched, plan, diff_rng);
            } catch (const distill::NonFiniteLoss& e) {
                throw DivergenceError("step " + std::to_string(step) + ": " + e.what());
            }
            for (const auto& t : d.taps) {
                rep.l_diff.push_back(t.loss_diff.item());
                rep.l_kd.push_back(t.loss_kd.item());
            }
            rep.weights = weights;
            terms.push_back(d.total(weights));
        }

        ag::Var overall = ag::sum(terms);
        rep.l_cls = l_cls.item();
        rep.l_seg = l_seg.item();
        rep.l_overall = overall.item();
        if (!std::isfinite(rep.l_overall)) {
            std::ostringstream os;
            os << "training diverged at step " << step << ": l_cls=" << rep.l_cls << " l_seg=" << rep.l_seg
               << " l_overall=" << rep.l_overall;
            throw DivergenceError(os.str());
        }

        ag::backward(overall);
        rep.grad_norm = net.params().grad_norm();
        if (cfg.clip_grad_norm > 0 && rep.grad_norm > cfg.clip_grad_norm)
            net.params().scale_grad(cfg.clip_grad_norm / rep.grad_norm);
        opt.step(net.params());
        net.params().zero_grad();
        if (cfg.distill.enabled) {
            pred_opt.step(pred_store);
            pred_store.zero_grad();
        }
        res.losses.push_back(std::move(rep));

        if (cfg.eval_every > 0 && step % cfg.eval_every == 0 && step != cfg.steps)
            run_eval(step);
    }
    run_eval(cfg.steps);

    res.checkpoint = ckpt::capture(net.params(), &opt, static_cast<std::uint64_t>(cfg.steps),
                                   config_hash(to_json(cfg)));
    res.checkpoint.meta_json = nlohmann::json{{"net", to_json(cfg.net)}, {"tap_scales", res.tap_scales}}.dump();
    return res;
}

} // namespace

TrainResult train_teacher(const Dataset& train, const std::vector<scene::SceneSample>& val, TrainConfig cfg,
                          const EvalHook& hook)
{
    if (cfg.distill.enabled || cfg.net.dgf2)
        throw std::invalid_argument("the teacher is trained without distillation or depth fusion");
    return run(train, val, nullptr, cfg, hook);
}

TrainResult train_student(const Dataset& train, const std::vector<scene::SceneSample>& val, const SegNet* teacher,
                          const TrainConfig& cfg, const EvalHook& hook)
{
    return run(train, val, teacher, cfg, hook);
}

} // namespace dgkd::wsss
