#include "dgkd/harness.hpp"
#include "harness_internal.hpp"

#include "dgkd/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <sstream>

namespace dgkd::harness {

namespace {

const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};

std::string fmt(const char* f, double v)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

std::string xml_escape(const std::string& s)
{
    std::string out;
    for (char c : s) {
        switch (c) {
        case '<': out += "&lt;"; break;
        case '>': out += "&gt;"; break;
        case '&': out += "&amp;"; break;
        case '"': out += "&quot;"; break;
        default: out += c;
        }
    }
    return out;
}

double median(std::vector<double> v)
{
    if (v.empty())
        return std::nan("");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double mean(const std::vector<double>& v)
{
    return v.empty() ? std::nan("") : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double stdev(const std::vector<double>& v)
{
    if (v.size() < 2)
        return 0.0;
    const double m = mean(v);
    double s = 0;
    for (double x : v)
        s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size() - 1));
}

std::string pct(double v)
{
    return std::isnan(v) ? "-" : fmt("%.1f", 100 * v);
}

std::string slug_file(const std::string& s)
{
    std::string out;
    for (char c : s)
        out += std::isalnum(static_cast<unsigned char>(c)) ? c : '_';
    return out;
}

// Averages the curves of several runs on their shared steps.
Series mean_curve(const std::string& label, const std::vector<std::vector<wsss::MetricRecord>>& runs)
{
    Series s;
    s.label = label;
    if (runs.empty())
        return s;
    std::map<std::int64_t, std::vector<double>> by_step;
    for (const auto& r : runs)
        for (const auto& m : r)
            by_step[m.step].push_back(m.miou);
    for (const auto& [step, vals] : by_step) {
        if (vals.size() != runs.size())
            continue;
        s.x.push_back(static_cast<double>(step));
        s.y.push_back(100 * mean(vals));
    }
    return s;
}

Series smoothed(const std::string& label, const std::vector<wsss::LossReport>& losses,
                double (*term)(const wsss::LossReport&))
{
    Series s;
    s.label = label;
    const std::size_t w = std::max<std::size_t>(1, losses.size() / 50);
    for (std::size_t i = 0; i < losses.size(); i += w) {
        double acc = 0;
        std::size_t n = 0;
        for (std::size_t j = i; j < std::min(losses.size(), i + w); ++j, ++n)
            acc += term(losses[j]);
        s.x.push_back(static_cast<double>(losses[i].step));
        s.y.push_back(acc / static_cast<double>(n));
    }
    return s;
}

std::vector<Series> loss_series(const std::vector<wsss::LossReport>& losses)
{
    std::vector<Series> out{
        smoothed("total", losses, [](const wsss::LossReport& r) { return r.l_overall; }),
        smoothed("l_cls", losses, [](const wsss::LossReport& r) { return r.l_cls; }),
        smoothed("l_seg", losses, [](const wsss::LossReport& r) { return r.l_seg; }),
    };
    if (!losses.empty() && !losses.front().l_diff.empty()) {
        out.push_back(smoothed("sum l_diff", losses, [](const wsss::LossReport& r) { return r.sum_diff(); }));
        out.push_back(smoothed("sum l_kd", losses, [](const wsss::LossReport& r) { return r.sum_kd(); }));
    }
    return out;
}

std::array<std::uint8_t, 3> mask_color(int label, const scene::SceneSpec& spec)
{
    if (label == 0)
        return {0, 0, 0};
    if (label >= 1 && label <= spec.num_classes) {
        const auto& c = spec.palette[static_cast<std::size_t>(label - 1)];
        return {static_cast<std::uint8_t>(std::lround(255 * c[0])), static_cast<std::uint8_t>(std::lround(255 * c[1])),
                static_cast<std::uint8_t>(std::lround(255 * c[2]))};
    }
    return {255, 255, 255}; // ignore
}

} // namespace

std::string svg_line_plot(const std::string& title, const std::string& x_label, const std::string& y_label,
                          const std::vector<Series>& series)
{
    const double W = 640, H = 380, L = 64, R = 150, T = 36, B = 48;
    double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
    for (const auto& s : series)
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            if (!std::isfinite(s.y[i]))
                continue;
            x0 = std::min(x0, s.x[i]);
            x1 = std::max(x1, s.x[i]);
            y0 = std::min(y0, s.y[i]);
            y1 = std::max(y1, s.y[i]);
        }
    if (x0 > x1) {
        x0 = 0;
        x1 = 1;
        y0 = 0;
        y1 = 1;
    }
    if (x1 == x0)
        x1 = x0 + 1;
    if (y1 == y0) {
        y0 -= 0.5;
        y1 += 0.5;
    }
    const double pad = 0.05 * (y1 - y0);
    y0 -= pad;
    y1 += pad;
    auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
    auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };

    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
       << " " << H << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << W / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">" << xml_escape(title)
       << "</text>\n";
    os << "<rect x=\"" << L << "\" y=\"" << T << "\" width=\"" << W - L - R << "\" height=\"" << H - T - B
       << "\" fill=\"none\" stroke=\"#444\"/>\n";
    for (int i = 0; i <= 4; ++i) {
        const double xv = x0 + (x1 - x0) * i / 4.0, yv = y0 + (y1 - y0) * i / 4.0;
        os << "<line x1=\"" << px(xv) << "\" y1=\"" << H - B << "\" x2=\"" << px(xv) << "\" y2=\"" << H - B + 4
           << "\" stroke=\"#444\"/>";
        os << "<text x=\"" << px(xv) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">" << fmt("%g", xv)
           << "</text>\n";
        os << "<line x1=\"" << L - 4 << "\" y1=\"" << py(yv) << "\" x2=\"" << L << "\" y2=\"" << py(yv)
           << "\" stroke=\"#444\"/>";
        os << "<text x=\"" << L - 6 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\">" << fmt("%.3g", yv)
           << "</text>\n";
    }
    os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\">"
       << xml_escape(x_label) << "</text>\n";
    os << "<text x=\"14\" y=\"" << (T + H - B) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 14 "
       << (T + H - B) / 2 << ")\">" << xml_escape(y_label) << "</text>\n";
    for (std::size_t k = 0; k < series.size(); ++k) {
        const auto& s = series[k];
        const char* color = kColors[k % std::size(kColors)];
        os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.8\" points=\"";
        for (std::size_t i = 0; i < s.x.size(); ++i)
            if (std::isfinite(s.y[i]))
                os << fmt("%.2f", px(s.x[i])) << "," << fmt("%.2f", py(s.y[i])) << " ";
        os << "\"/>\n";
        const double ly = T + 14 + 16 * static_cast<double>(k);
        os << "<line x1=\"" << W - R + 10 << "\" y1=\"" << ly - 4 << "\" x2=\"" << W - R + 28 << "\" y2=\"" << ly - 4
           << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>";
        os << "<text x=\"" << W - R + 32 << "\" y=\"" << ly << "\">" << xml_escape(s.label) << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

std::pair<int, int> write_panel(const fs::path& path, const Tensor& image, const Tensor& dark,
                                const std::vector<std::uint8_t>& pseudo, const std::vector<std::uint8_t>& pred,
                                const std::vector<std::uint8_t>& gt, const scene::SceneSpec& spec, int scale)
{
    if (image.rank() != 3 || image.dim(0) != 3 || image.shape() != dark.shape())
        throw std::invalid_argument("write_panel: images must be [3,H,W] and equal in shape");
    const int h = image.dim(1), w = image.dim(2);
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    if (pseudo.size() != hw || pred.size() != hw || gt.size() != hw)
        throw std::invalid_argument("write_panel: masks must match the image size");
    const int tile_w = w * scale, tile_h = h * scale, gap = 2;
    const int pw = 5 * tile_w + 4 * gap, ph = tile_h;
    std::vector<std::uint16_t> px(static_cast<std::size_t>(pw) * ph * 3, 255);
    auto put = [&](int tile, int y, int x, std::array<std::uint8_t, 3> c) {
        for (int dy = 0; dy < scale; ++dy)
            for (int dx = 0; dx < scale; ++dx) {
                const std::size_t o
                    = (static_cast<std::size_t>(y * scale + dy) * pw + tile * (tile_w + gap) + x * scale + dx) * 3;
                px[o] = c[0];
                px[o + 1] = c[1];
                px[o + 2] = c[2];
            }
    };
    auto rgb = [&](const Tensor& t, int y, int x) {
        std::array<std::uint8_t, 3> c{};
        for (int ch = 0; ch < 3; ++ch)
            c[static_cast<std::size_t>(ch)] = static_cast<std::uint8_t>(
                std::lround(255 * std::clamp(t[(static_cast<std::size_t>(ch) * h + y) * w + x], 0.0, 1.0)));
        return c;
    };
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * w + x;
            put(0, y, x, rgb(image, y, x));
            put(1, y, x, rgb(dark, y, x));
            put(2, y, x, mask_color(pseudo[i], spec));
            put(3, y, x, mask_color(pred[i], spec));
            put(4, y, x, mask_color(gt[i], spec));
        }
    io::write_png(path, pw, ph, 3, 8, px);
    return {pw, ph};
}

LossDecomposition decompose(const std::vector<wsss::LossReport>& losses, double tail)
{
    LossDecomposition d;
    if (losses.empty())
        return d;
    const std::size_t n = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::ceil(tail * static_cast<double>(losses.size()))));
    const std::size_t start = losses.size() - std::min(n, losses.size());
    for (std::size_t i = start; i < losses.size(); ++i) {
        const auto& r = losses[i];
        d.l_cls += r.l_cls;
        d.l_seg += r.l_seg;
        d.sum_diff += r.sum_diff();
        d.sum_kd += r.sum_kd();
        d.total += r.l_overall;
        d.max_recompute_error = std::max(d.max_recompute_error, std::abs(r.recompute() - r.l_overall));
    }
    const double m = static_cast<double>(losses.size() - start);
    d.l_cls /= m;
    d.l_seg /= m;
    d.sum_diff /= m;
    d.sum_kd /= m;
    d.total /= m;
    return d;
}

namespace {

struct PanelInputs {
    Tensor image, dark;
    std::vector<std::uint8_t> pseudo, pred, gt;
};

std::vector<PanelInputs> panel_inputs(const RunManifest& m, const wsss::SegNet& net, int count)
{
    const Experiment e = experiment_from(m.config);
    const auto normal = scene::read_split(m.artifacts.at("corpus_normal").get<std::string>(), scene::Split::val).samples;
    const auto dark = scene::read_split(m.artifacts.at("corpus_dark").get<std::string>(), scene::Split::val).samples;
    const bool student = e.kind == RunKind::student;
    std::vector<PanelInputs> out;
    for (int i = 0; i < count && i < static_cast<int>(normal.size()); ++i) {
        const std::vector<scene::SceneSample> one_in{student ? dark[static_cast<std::size_t>(i)]
                                                             : normal[static_cast<std::size_t>(i)]};
        const std::vector<scene::SceneSample> one_normal{normal[static_cast<std::size_t>(i)]};
        wsss::Dataset view{one_in, one_normal};
        wsss::Batch b = wsss::make_batch(view, {0}, {}, false);
        ag::Var depth = net.config().dgf2 ? ag::constant(b.depth) : ag::Var{};
        wsss::SegOutput o = net.forward(ag::constant(b.image), depth, true);
        PanelInputs p;
        p.image = normal[static_cast<std::size_t>(i)].image;
        p.dark = dark[static_cast<std::size_t>(i)].image;
        for (int v : wsss::pseudo_labels(o.logits.value(), b.labels, b.image, e.train.cam))
            p.pseudo.push_back(static_cast<std::uint8_t>(v));
        for (int v : wsss::argmax_channels(o.logits.value()))
            p.pred.push_back(static_cast<std::uint8_t>(v));
        p.gt = normal[static_cast<std::size_t>(i)].gt_mask;
        out.push_back(std::move(p));
    }
    return out;
}

std::vector<std::string> class_names(int k)
{
    std::vector<std::string> names{"background"};
    for (int c = 1; c <= k; ++c)
        names.push_back("class" + std::to_string(c));
    return names;
}

} // namespace

std::vector<std::string> report(const fs::path& root, const std::vector<std::string>& run_ids, const fs::path& out_dir,
                                int panels)
{
    fs::create_directories(out_dir);
    std::vector<std::string> missing;
    std::vector<std::string> artifacts;
    std::ostringstream md;
    md << "# Run report\n\n";

    std::vector<std::string> names;
    std::vector<eval::Metrics> rows;
    std::vector<std::string> classes;
    std::vector<Series> curves;
    std::ostringstream body;
    for (const auto& id : run_ids) {
        RunManifest m;
        try {
            m = read_manifest(root, id);
        } catch (const std::exception&) {
            missing.push_back(id);
            continue;
        }
        const auto metrics = read_metrics(root, id);
        body << "## " << id << "\n\n";
        body << "- status: " << m.status << (m.error.empty() ? "" : " (" + m.error + ")") << "\n";
        body << "- kind: " << m.config.at("run").at("kind").get<std::string>()
             << ", seed: " << m.config.at("seed").get<std::uint64_t>() << ", config hash: " << m.config_hash << "\n";
        body << "- started " << m.started << ", finished " << m.finished << "\n\n";
        if (!metrics.empty()) {
            const auto& last = metrics.back();
            names.push_back(id);
            rows.push_back({last.miou, last.pixacc, last.per_class_iou});
            if (classes.empty())
                classes = class_names(static_cast<int>(last.per_class_iou.size()) - 1);
            Series s;
            s.label = id;
            for (const auto& r : metrics) {
                s.x.push_back(static_cast<double>(r.step));
                s.y.push_back(100 * r.miou);
            }
            curves.push_back(s);
        }
        const fs::path loss_path = run_dir(root, id) / "losses.jsonl";
        if (fs::exists(loss_path)) {
            const auto losses = read_losses(root, id);
            const std::string file = slug_file(id) + "_losses.svg";
            io::write_text_atomic(out_dir / file, svg_line_plot("Training losses: " + id, "step", "loss",
                                                                loss_series(losses)));
            artifacts.push_back(file);
            body << "![losses](" << file << ")\n\n";
            const LossDecomposition d = decompose(losses);
            body << "| l_cls | l_seg | sum l_diff | sum l_kd | total | max recompute error |\n|---|---|---|---|---|---|\n";
            body << "| " << fmt("%.4f", d.l_cls) << " | " << fmt("%.4f", d.l_seg) << " | " << fmt("%.4f", d.sum_diff)
                 << " | " << fmt("%.4f", d.sum_kd) << " | " << fmt("%.4f", d.total) << " | "
                 << fmt("%.2e", d.max_recompute_error) << " |\n\n";
        }
        if (m.status == "ok" && panels > 0) {
            const wsss::SegNet net = load_network(root, id);
            const scene::SceneSpec spec = experiment_from(m.config).data.spec;
            int k = 0;
            for (const auto& p : panel_inputs(m, net, panels)) {
                const std::string file = slug_file(id) + "_panel" + std::to_string(k++) + ".png";
                write_panel(out_dir / file, p.image, p.dark, p.pseudo, p.pred, p.gt, spec);
                artifacts.push_back(file);
                body << "![panel](" << file << ")\n";
            }
            body << "\nTiles: image, dark image, pseudo-mask, prediction, ground truth.\n\n";
        }
    }
    if (!rows.empty()) {
        md << "## Final validation metrics (%)\n\n```\n" << eval::format_table(names, rows, classes) << "```\n\n";
        io::write_text_atomic(out_dir / "miou.svg", svg_line_plot("Validation mIoU", "step", "mIoU (%)", curves));
        artifacts.push_back("miou.svg");
        md << "![mIoU](miou.svg)\n\n";
    }
    md << body.str();
    if (!missing.empty()) {
        md << "## Missing runs\n\n";
        for (const auto& id : missing)
            md << "- " << id << "\n";
        md << "\n";
    }
    for (const auto& a : artifacts)
        if (!fs::exists(out_dir / a))
            throw std::runtime_error("report artifact missing: " + a);
    io::write_text_atomic(out_dir / "report.md", md.str());
    return missing;
}

namespace detail {

void write_ablation_report(const fs::path& root, const AblationPlan& plan, const AblationResult& res)
{
    const fs::path dir = res.report_dir;
    fs::create_directories(dir);
    std::ostringstream md;
    json results{{"plan", plan.name}, {"seeds", plan.seeds}};
    md << "# Ablation: " << plan.name << "\n\n";
    md << "Validation mIoU (%) at the final step. Medians and means are over seeds.\n\n";
    md << "| variant |";
    for (auto s : plan.seeds)
        md << " seed " << s << " |";
    md << " median | mean ± std | PixAcc mean | failed |\n|---|";
    for (std::size_t i = 0; i < plan.seeds.size(); ++i)
        md << "---|";
    md << "---|---|---|---|\n";

    std::vector<Series> curves;
    std::ostringstream losses_md;
    losses_md << "## Loss decomposition\n\n"
              << "Means over the last 10% of steps, averaged over seeds. total = l_cls + l_seg + sum of "
                 "weighted (l_diff + l_kd) over taps; the last column is the largest gap between the logged total "
                 "and the sum recomputed from the logged terms.\n\n"
              << "| variant | l_cls | l_seg | sum l_diff | sum l_kd | total | max recompute error |\n"
              << "|---|---|---|---|---|---|---|\n";
    for (const auto& v : plan.variants) {
        std::vector<double> mious, pix;
        std::vector<std::vector<wsss::MetricRecord>> histories;
        std::vector<LossDecomposition> decs;
        int failed = 0;
        md << "| " << v.name << " |";
        json per_seed = json::array();
        for (auto seed : plan.seeds) {
            auto it = std::find_if(res.cells.begin(), res.cells.end(),
                                   [&](const CellResult& c) { return c.variant == v.name && c.seed == seed; });
            if (it == res.cells.end() || !it->ok) {
                ++failed;
                md << " failed |";
                per_seed.push_back(nullptr);
                continue;
            }
            mious.push_back(it->miou);
            pix.push_back(it->pixacc);
            per_seed.push_back(it->miou);
            md << " " << pct(it->miou) << " |";
            histories.push_back(read_metrics(root, it->run_id));
            decs.push_back(decompose(read_losses(root, it->run_id)));
        }
        md << " " << pct(median(mious)) << " | " << pct(mean(mious)) << " ± " << pct(stdev(mious)) << " | "
           << pct(mean(pix)) << " | " << failed << " |\n";
        results["variants"][v.name] = json{{"miou", per_seed},
                                           {"median", mious.empty() ? json(nullptr) : json(median(mious))},
                                           {"mean", mious.empty() ? json(nullptr) : json(mean(mious))},
                                           {"std", stdev(mious)},
                                           {"pixacc_mean", pix.empty() ? json(nullptr) : json(mean(pix))},
                                           {"failed", failed}};
        if (!histories.empty())
            curves.push_back(mean_curve(v.name, histories));
        if (!decs.empty()) {
            LossDecomposition a;
            for (const auto& d : decs) {
                a.l_cls += d.l_cls / static_cast<double>(decs.size());
                a.l_seg += d.l_seg / static_cast<double>(decs.size());
                a.sum_diff += d.sum_diff / static_cast<double>(decs.size());
                a.sum_kd += d.sum_kd / static_cast<double>(decs.size());
                a.total += d.total / static_cast<double>(decs.size());
                a.max_recompute_error = std::max(a.max_recompute_error, d.max_recompute_error);
            }
            losses_md << "| " << v.name << " | " << fmt("%.4f", a.l_cls) << " | " << fmt("%.4f", a.l_seg) << " | "
                      << fmt("%.4f", a.sum_diff) << " | " << fmt("%.4f", a.sum_kd) << " | " << fmt("%.4f", a.total)
                      << " | " << fmt("%.2e", a.max_recompute_error) << " |\n";
            results["variants"][v.name]["losses"] = json{{"l_cls", a.l_cls},
                                                         {"l_seg", a.l_seg},
                                                         {"sum_l_diff", a.sum_diff},
                                                         {"sum_l_kd", a.sum_kd},
                                                         {"total", a.total},
                                                         {"max_recompute_error", a.max_recompute_error}};
        }
    }
    md << "\n";
    for (const auto& c : res.cells)
        if (!c.ok)
            md << "- failed: " << c.variant << " seed " << c.seed << ": " << c.error << "\n";
    io::write_text_atomic(dir / "miou_vs_step.svg",
                          svg_line_plot("Validation mIoU vs step (mean over seeds)", "step", "mIoU (%)", curves));
    md << "\n![mIoU vs step](miou_vs_step.svg)\n\n" << losses_md.str() << "\n";

    for (const auto& [name, cells] : res.sweeps) {
        const auto sw = std::find_if(plan.sweeps.begin(), plan.sweeps.end(), [&](const Sweep& s) { return s.name == name; });
        md << "## Sweep: " << sw->key << " (" << sw->variant << ")\n\n";
        md << "| " << sw->key << " | mIoU (%) mean | runs | paper, full scale — not an acceptance target |\n"
           << "|---|---|---|---|\n";
        for (std::size_t i = 0; i < sw->values.size(); ++i) {
            const std::string label = sw->values[i].is_string() ? sw->values[i].get<std::string>() : sw->values[i].dump();
            std::vector<double> vals;
            int failed = 0;
            for (const auto& c : cells)
                if (c.variant == label) {
                    if (c.ok)
                        vals.push_back(c.miou);
                    else
                        ++failed;
                }
            md << "| " << label << " | " << pct(mean(vals)) << " | " << vals.size()
               << (failed ? " (" + std::to_string(failed) + " failed)" : "") << " | "
               << (i < sw->reference.size() ? fmt("%.1f", sw->reference[i]) : "-") << " |\n";
            results["sweeps"][name][label] = json{{"miou_mean", vals.empty() ? json(nullptr) : json(mean(vals))},
                                                  {"runs", vals.size()},
                                                  {"failed", failed},
                                                  {"reference", i < sw->reference.size() ? json(sw->reference[i]) : json(nullptr)}};
        }
        md << "\n";
    }
    io::write_text_atomic(dir / "results.json", results.dump(2) + "\n");
    io::write_text_atomic(dir / "report.md", md.str());
}

} // namespace detail

} // namespace dgkd::harness
