#include "dgkd/toyscene.hpp"

#include "dgkd/image_io.hpp"
#include "dgkd/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <stdexcept>

namespace dgkd::scene {

using nlohmann::json;

std::string to_string(Split split)
{
    return split == Split::train ? "train" : "val";
}

Split split_from_string(const std::string& s)
{
    if (s == "train")
        return Split::train;
    if (s == "val")
        return Split::val;
    throw std::invalid_argument("unknown split '" + s + "'");
}

std::string to_string(ShapeKind kind)
{
    switch (kind) {
    case ShapeKind::rectangle:
        return "rectangle";
    case ShapeKind::circle:
        return "circle";
    case ShapeKind::triangle:
        return "triangle";
    }
    return "?";
}

namespace {

ShapeKind kind_from_string(const std::string& s)
{
    if (s == "rectangle")
        return ShapeKind::rectangle;
    if (s == "circle")
        return ShapeKind::circle;
    if (s == "triangle")
        return ShapeKind::triangle;
    throw std::invalid_argument("unknown shape kind '" + s + "'");
}

double edge_sign(double px, double py, double ax, double ay, double bx, double by)
{
    return (px - bx) * (ay - by) - (ax - bx) * (py - by);
}

} // namespace

SceneSpec SceneSpec::toy_default()
{
    SceneSpec s;
    s.palette = {{0.78, 0.36, 0.30}, {0.30, 0.62, 0.38}, {0.34, 0.42, 0.78}};
    return s;
}

void SceneSpec::validate() const
{
    if (num_classes < 2 || num_classes > 254)
        throw std::invalid_argument("SceneSpec: num_classes must be in [2, 254], got " + std::to_string(num_classes));
    if (image_size < 32)
        throw std::invalid_argument("SceneSpec: image_size must be >= 32, got " + std::to_string(image_size));
    if (static_cast<int>(palette.size()) != num_classes)
        throw std::invalid_argument("SceneSpec: palette has " + std::to_string(palette.size()) + " entries but num_classes = "
                                    + std::to_string(num_classes));
    for (const Rgb& c : palette)
        for (double v : c)
            if (!(v >= 0.0 && v <= 1.0))
                throw std::invalid_argument("SceneSpec: palette colours must lie in [0,1]");
    if (shapes_min < 0 || shapes_max < shapes_min)
        throw std::invalid_argument("SceneSpec: shapes_per_image range is invalid");
    if (!(depth_near < depth_far))
        throw std::invalid_argument("SceneSpec: depth near must be < far");
}

ShapeKind shape_for_class(int class_id)
{
    switch ((class_id - 1) % 3) {
    case 0:
        return ShapeKind::rectangle;
    case 1:
        return ShapeKind::circle;
    default:
        return ShapeKind::triangle;
    }
}

bool ShapeInstance::covers(double px, double py) const
{
    const double dx = px - cx, dy = py - cy;
    switch (kind) {
    case ShapeKind::rectangle:
        return std::abs(dx) <= half_w && std::abs(dy) <= half_h;
    case ShapeKind::circle:
        return dx * dx + dy * dy <= half_w * half_w;
    case ShapeKind::triangle: {
        // Apex up, base down.
        const double ax = cx, ay = cy - half_h;
        const double bx = cx - half_w, by = cy + half_h;
        const double qx = cx + half_w, qy = cy + half_h;
        const double d1 = edge_sign(px, py, ax, ay, bx, by);
        const double d2 = edge_sign(px, py, bx, by, qx, qy);
        const double d3 = edge_sign(px, py, qx, qy, ax, ay);
        const bool neg = d1 < 0 || d2 < 0 || d3 < 0;
        const bool pos = d1 > 0 || d2 > 0 || d3 > 0;
        return !(neg && pos);
    }
    }
    return false;
}

std::uint16_t quantize_unit(double v, int bits)
{
    const double levels = std::ldexp(1.0, bits) - 1.0;
    const double c = std::clamp(v, 0.0, 1.0);
    return static_cast<std::uint16_t>(std::floor(c * levels + 0.5));
}

double dequantize_unit(std::uint16_t q, int bits)
{
    return q / (std::ldexp(1.0, bits) - 1.0);
}

Tensor render_depth(const SceneSample& sample)
{
    const int n = sample.size;
    // Stored at 16-bit precision so in-memory and on-disk corpora agree exactly.
    Tensor depth(Shape{n, n}, dequantize_unit(quantize_unit(kBackgroundDepth, 16), 16));
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            double& d = depth[static_cast<std::size_t>(y) * n + x];
            for (const ShapeInstance& s : sample.shapes)
                if (s.covers(x + 0.5, y + 0.5))
                    d = std::max(d, s.depth);
        }
    return depth;
}

std::vector<std::uint8_t> render_mask(const SceneSample& sample)
{
    const int n = sample.size;
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(n) * n, 0);
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            double best = kBackgroundDepth;
            for (const ShapeInstance& s : sample.shapes)
                if (s.depth > best && s.covers(x + 0.5, y + 0.5)) {
                    best = s.depth;
                    mask[static_cast<std::size_t>(y) * n + x] = static_cast<std::uint8_t>(s.class_id);
                }
        }
    return mask;
}

std::vector<std::uint8_t> labels_from_mask(const std::vector<std::uint8_t>& mask, int num_classes)
{
    std::vector<std::uint8_t> labels(static_cast<std::size_t>(num_classes), 0);
    for (std::uint8_t m : mask)
        if (m > 0 && m <= num_classes)
            labels[m - 1u] = 1;
    return labels;
}

SceneSample generate_sample(const SceneSpec& spec, std::uint64_t sample_seed, std::uint32_t id)
{
    spec.validate();
    Rng rng(sample_seed);
    const int n = spec.image_size;
    SceneSample s;
    s.id = id;
    s.size = n;
    s.num_classes = spec.num_classes;

    const std::uint16_t bg_q = quantize_unit(kBackgroundDepth, 16);
    std::set<std::uint16_t> used_depths{bg_q};
    const int count = rng.uniform_int(spec.shapes_min, spec.shapes_max);
    for (int i = 0; i < count; ++i) {
        ShapeInstance sh;
        sh.class_id = rng.uniform_int(1, spec.num_classes);
        sh.kind = shape_for_class(sh.class_id);
        const double r = rng.uniform(0.12, 0.24) * n;
        sh.half_w = r;
        sh.half_h = sh.kind == ShapeKind::rectangle ? r * rng.uniform(0.6, 1.0) : r;
        sh.cx = rng.uniform(0.2, 0.8) * n;
        sh.cy = rng.uniform(0.2, 0.8) * n;
        std::uint16_t q = 0;
        do {
            const double dist = rng.uniform(spec.depth_near, spec.depth_far);
            const double enc = 1.0 - (1.0 - kBackgroundDepth) * (dist - spec.depth_near) / (spec.depth_far - spec.depth_near);
            q = quantize_unit(enc, 16);
        } while (q <= bg_q || used_depths.count(q));
        used_depths.insert(q);
        sh.depth = dequantize_unit(q, 16);
        const Rgb& base = spec.palette[static_cast<std::size_t>(sh.class_id - 1)];
        for (int c = 0; c < 3; ++c)
            sh.color[static_cast<std::size_t>(c)] = std::clamp(base[static_cast<std::size_t>(c)] + rng.uniform(-kColorJitter, kColorJitter), 0.0, 1.0);
        s.shapes.push_back(sh);
    }

    Rgb bg;
    const double gray = rng.uniform(0.3, 0.6);
    for (double& c : bg)
        c = std::clamp(gray + rng.uniform(-0.05, 0.05), 0.0, 1.0);

    s.gt_mask = render_mask(s);
    s.depth = render_depth(s);
    s.label_vec = labels_from_mask(s.gt_mask, spec.num_classes);

    // Owner colour per pixel: the nearest covering shape.
    s.image = Tensor(Shape{3, n, n});
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            const Rgb* col = &bg;
            double best = kBackgroundDepth;
            for (const ShapeInstance& sh : s.shapes)
                if (sh.depth > best && sh.covers(x + 0.5, y + 0.5)) {
                    best = sh.depth;
                    col = &sh.color;
                }
            for (int c = 0; c < 3; ++c) {
                const double v = (*col)[static_cast<std::size_t>(c)] + rng.normal(0.0, kTextureSigma);
                s.image[(static_cast<std::size_t>(c) * n + y) * n + x] = dequantize_unit(quantize_unit(v, 8), 8);
            }
        }
    return s;
}

std::vector<SceneSample> generate_corpus(const SceneSpec& spec, int count, Split split)
{
    spec.validate();
    if (count < 1)
        throw std::invalid_argument("generate_corpus: count must be >= 1");
    const std::string stream = to_string(split);
    const std::uint64_t split_seed = substream_seed(spec.seed, stream);

    // Train split: every class must appear in at least 5% of samples (rounded down).
    const int quota = split == Split::train ? count / 20 : 0;
    std::vector<int> have(static_cast<std::size_t>(spec.num_classes), 0);
    std::vector<SceneSample> out;
    out.reserve(static_cast<std::size_t>(count));
    const long max_attempts = 10L * count;
    for (long attempt = 0; static_cast<int>(out.size()) < count; ++attempt) {
        if (attempt >= max_attempts)
            throw std::runtime_error("generate_corpus: class-coverage constraint unreachable after "
                                     + std::to_string(max_attempts) + " attempts");
        SceneSample s = generate_sample(spec, mix_seed(split_seed + static_cast<std::uint64_t>(attempt)),
                                        static_cast<std::uint32_t>(out.size()));
        if (quota > 0) {
            const int remaining_after = count - static_cast<int>(out.size()) - 1;
            bool feasible = true;
            for (int c = 0; c < spec.num_classes; ++c) {
                const int deficit = quota - have[static_cast<std::size_t>(c)] - s.label_vec[static_cast<std::size_t>(c)];
                if (deficit > remaining_after)
                    feasible = false;
            }
            if (!feasible)
                continue;
            for (int c = 0; c < spec.num_classes; ++c)
                have[static_cast<std::size_t>(c)] += s.label_vec[static_cast<std::size_t>(c)];
        }
        out.push_back(std::move(s));
    }
    return out;
}

// --- persistence ---------------------------------------------------------------

json spec_to_json(const SceneSpec& spec)
{
    json palette = json::array();
    for (const Rgb& c : spec.palette)
        palette.push_back({c[0], c[1], c[2]});
    return json{{"image_size", spec.image_size},
                {"num_classes", spec.num_classes},
                {"shapes_per_image", {spec.shapes_min, spec.shapes_max}},
                {"color_palette", palette},
                {"depth_range", {spec.depth_near, spec.depth_far}},
                {"seed", spec.seed}};
}

SceneSpec spec_from_json(const json& j)
{
    SceneSpec s;
    s.image_size = j.at("image_size").get<int>();
    s.num_classes = j.at("num_classes").get<int>();
    s.shapes_min = j.at("shapes_per_image").at(0).get<int>();
    s.shapes_max = j.at("shapes_per_image").at(1).get<int>();
    s.palette.clear();
    for (const auto& c : j.at("color_palette"))
        s.palette.push_back({c.at(0).get<double>(), c.at(1).get<double>(), c.at(2).get<double>()});
    s.depth_near = j.at("depth_range").at(0).get<double>();
    s.depth_far = j.at("depth_range").at(1).get<double>();
    s.seed = j.at("seed").get<std::uint64_t>();
    return s;
}

namespace {

std::string sample_stem(std::uint32_t id)
{
    char buf[16];
    std::snprintf(buf, sizeof buf, "%05u", id);
    return buf;
}

json shape_to_json(const ShapeInstance& s)
{
    return json{{"class", s.class_id}, {"kind", to_string(s.kind)}, {"center", {s.cx, s.cy}},
                {"half_extent", {s.half_w, s.half_h}}, {"depth", s.depth}, {"color", {s.color[0], s.color[1], s.color[2]}}};
}

ShapeInstance shape_from_json(const json& j)
{
    ShapeInstance s;
    s.class_id = j.at("class").get<int>();
    s.kind = kind_from_string(j.at("kind").get<std::string>());
    s.cx = j.at("center").at(0).get<double>();
    s.cy = j.at("center").at(1).get<double>();
    s.half_w = j.at("half_extent").at(0).get<double>();
    s.half_h = j.at("half_extent").at(1).get<double>();
    s.depth = j.at("depth").get<double>();
    for (int c = 0; c < 3; ++c)
        s.color[static_cast<std::size_t>(c)] = j.at("color").at(c).get<double>();
    return s;
}

std::vector<std::array<std::uint8_t, 3>> mask_palette(const SceneSpec& spec)
{
    std::vector<std::array<std::uint8_t, 3>> pal{{0, 0, 0}};
    for (const Rgb& c : spec.palette)
        pal.push_back({static_cast<std::uint8_t>(quantize_unit(c[0], 8)), static_cast<std::uint8_t>(quantize_unit(c[1], 8)),
                       static_cast<std::uint8_t>(quantize_unit(c[2], 8))});
    return pal;
}

} // namespace

void write_split(const std::filesystem::path& root, const CorpusSplit& split, const json& extra)
{
    const auto dir = root / to_string(split.split);
    std::filesystem::create_directories(dir);
    json samples = json::array();
    const auto palette = mask_palette(split.spec);
    for (const SceneSample& s : split.samples) {
        const std::string stem = sample_stem(s.id);
        const int n = s.size;
        std::vector<std::uint16_t> rgb(static_cast<std::size_t>(n) * n * 3);
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x)
                for (int c = 0; c < 3; ++c)
                    rgb[(static_cast<std::size_t>(y) * n + x) * 3 + c]
                        = quantize_unit(s.image[(static_cast<std::size_t>(c) * n + y) * n + x], split.image_bits);
        io::write_png(dir / (stem + "_image.png"), n, n, 3, split.image_bits > 8 ? 16 : 8, rgb);
        io::write_png_palette(dir / (stem + "_mask.png"), n, n, s.gt_mask, palette);
        std::vector<std::uint16_t> d(s.depth.size());
        for (std::size_t i = 0; i < d.size(); ++i)
            d[i] = quantize_unit(s.depth[i], 16);
        io::write_png(dir / (stem + "_depth.png"), n, n, 1, 16, d);

        json shapes = json::array();
        for (const ShapeInstance& sh : s.shapes)
            shapes.push_back(shape_to_json(sh));
        samples.push_back(json{{"id", s.id},
                               {"image", stem + "_image.png"},
                               {"mask", stem + "_mask.png"},
                               {"depth", stem + "_depth.png"},
                               {"labels", s.label_vec},
                               {"shapes", shapes}});
    }
    json manifest{{"format", "dgkd-corpus"},
                  {"version", 1},
                  {"split", to_string(split.split)},
                  {"spec", spec_to_json(split.spec)},
                  {"image_bits", split.image_bits},
                  {"count", split.samples.size()},
                  {"samples", samples}};
    for (const auto& [k, v] : extra.items())
        manifest[k] = v;
    io::write_text_atomic(dir / "manifest.json", manifest.dump(1));
}

json read_manifest(const std::filesystem::path& root, Split split)
{
    const auto path = root / to_string(split) / "manifest.json";
    if (!std::filesystem::exists(path))
        throw std::runtime_error("corpus manifest missing: " + path.string());
    json j = json::parse(io::read_text(path));
    if (j.value("format", "") != "dgkd-corpus")
        throw std::runtime_error("not a corpus manifest: " + path.string());
    return j;
}

CorpusSplit read_split(const std::filesystem::path& root, Split split)
{
    const json m = read_manifest(root, split);
    const auto dir = root / to_string(split);
    CorpusSplit out;
    out.split = split;
    out.spec = spec_from_json(m.at("spec"));
    out.image_bits = m.value("image_bits", 8);
    for (const auto& js : m.at("samples")) {
        SceneSample s;
        s.id = js.at("id").get<std::uint32_t>();
        s.num_classes = out.spec.num_classes;
        const io::PngData img = io::read_png(dir / js.at("image").get<std::string>());
        const int n = img.width;
        if (img.height != n || img.channels != 3)
            throw std::runtime_error("corpus image must be square RGB: " + js.at("image").get<std::string>());
        s.size = n;
        s.image = Tensor(Shape{3, n, n});
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x)
                for (int c = 0; c < 3; ++c)
                    s.image[(static_cast<std::size_t>(c) * n + y) * n + x]
                        = dequantize_unit(img.samples[(static_cast<std::size_t>(y) * n + x) * 3 + c], out.image_bits);
        const io::PngData mask = io::read_png(dir / js.at("mask").get<std::string>());
        s.gt_mask.assign(mask.samples.begin(), mask.samples.end());
        const io::PngData depth = io::read_png(dir / js.at("depth").get<std::string>());
        s.depth = Tensor(Shape{n, n});
        for (std::size_t i = 0; i < s.depth.size(); ++i)
            s.depth[i] = dequantize_unit(depth.samples[i], 16);
        s.label_vec = js.at("labels").get<std::vector<std::uint8_t>>();
        if (js.contains("shapes"))
            for (const auto& sh : js.at("shapes"))
                s.shapes.push_back(shape_from_json(sh));
        out.samples.push_back(std::move(s));
    }
    return out;
}

} // namespace dgkd::scene
