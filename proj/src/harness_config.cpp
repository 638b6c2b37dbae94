#include "dgkd/harness.hpp"

#include "dgkd/image_io.hpp"

#include <set>
#include <sstream>

namespace dgkd::harness {

namespace {

json darken_tree(const lowlight::DarkenConfig& c)
{
    json j = lowlight::to_json(c);
    j.erase("seed");
    return j;
}

json scene_tree(const scene::SceneSpec& s)
{
    json j = scene::spec_to_json(s);
    j.erase("seed");
    return j;
}

bool is_number(const json& j)
{
    return j.is_number_integer() || j.is_number_unsigned() || j.is_number_float();
}

bool is_integral(const json& j)
{
    return j.is_number_integer() || j.is_number_unsigned();
}

std::string join(const std::string& prefix, const std::string& key)
{
    return prefix.empty() ? key : prefix + "." + key;
}

std::string type_name(const json& j)
{
    if (is_integral(j))
        return "integer";
    if (j.is_number_float())
        return "non-integer number";
    return j.type_name();
}

// Arrays that default to empty still need an element type.
const std::map<std::string, std::string>& empty_array_kinds()
{
    static const std::map<std::string, std::string> kinds{{"dgkd.weights", "number"}};
    return kinds;
}

void check_value(const json& def, const json& val, const std::string& path)
{
    if (def.is_object()) {
        if (!val.is_object())
            throw ConfigError(path, "expected an object, got " + type_name(val));
        for (const auto& [k, v] : val.items()) {
            if (!def.contains(k))
                throw ConfigError(join(path, k), "unknown key");
            check_value(def.at(k), v, join(path, k));
        }
        return;
    }
    if (def.is_array()) {
        if (!val.is_array())
            throw ConfigError(path, "expected an array, got " + type_name(val));
        if (def.empty()) {
            auto it = empty_array_kinds().find(path);
            for (std::size_t i = 0; i < val.size(); ++i)
                if (it != empty_array_kinds().end() && it->second == "number" && !is_number(val[i]))
                    throw ConfigError(path + "[" + std::to_string(i) + "]", "expected a number");
            return;
        }
        for (std::size_t i = 0; i < val.size(); ++i)
            check_value(def[0], val[i], path + "[" + std::to_string(i) + "]");
        return;
    }
    if (is_integral(def)) {
        if (!is_integral(val))
            throw ConfigError(path, "expected an integer, got " + type_name(val));
        if (def.is_number_unsigned() && val.is_number_integer() && val.get<std::int64_t>() < 0)
            throw ConfigError(path, "expected a non-negative integer");
        return;
    }
    if (def.is_number_float()) {
        if (!is_number(val))
            throw ConfigError(path, "expected a number, got " + type_name(val));
        return;
    }
    if (def.type() != val.type())
        throw ConfigError(path, "expected " + type_name(def) + ", got " + type_name(val));
}

template <class F>
void section(const std::string& path, F&& f)
{
    try {
        f();
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(path, e.what());
    }
}

std::vector<std::string> strings(const json& j)
{
    std::vector<std::string> out;
    for (const auto& v : j)
        out.push_back(v.get<std::string>());
    return out;
}

void merge_into(json& dst, const json& src)
{
    for (const auto& [k, v] : src.items()) {
        if (v.is_object() && dst.contains(k) && dst[k].is_object())
            merge_into(dst[k], v);
        else
            dst[k] = v;
    }
}

json resolve_layers_impl(const json& doc, const fs::path& base_dir, std::set<std::string>& stack)
{
    if (!doc.is_object())
        throw ConfigError("", "config must be a JSON object");
    json out = json::object();
    if (doc.contains("include")) {
        const json& inc = doc.at("include");
        std::vector<std::string> names;
        if (inc.is_string())
            names.push_back(inc.get<std::string>());
        else if (inc.is_array()) {
            for (std::size_t i = 0; i < inc.size(); ++i) {
                if (!inc[i].is_string())
                    throw ConfigError("include[" + std::to_string(i) + "]", "expected a string");
                names.push_back(inc[i].get<std::string>());
            }
        } else
            throw ConfigError("include", "expected a string or an array of strings");
        const auto builtins = profile_names();
        for (const auto& name : names) {
            if (std::find(builtins.begin(), builtins.end(), name) != builtins.end()) {
                merge_into(out, builtin_profile(name));
                continue;
            }
            fs::path p = fs::path(name).is_absolute() ? fs::path(name) : base_dir / name;
            if (!fs::exists(p))
                throw ConfigError("include", "no profile or file named '" + name + "'");
            const std::string key = fs::weakly_canonical(p).string();
            if (stack.count(key))
                throw ConfigError("include", "include cycle through '" + name + "'");
            stack.insert(key);
            json sub;
            try {
                sub = json::parse(io::read_text(p));
            } catch (const json::parse_error& e) {
                throw ConfigError("include", p.string() + ": " + e.what());
            }
            merge_into(out, resolve_layers_impl(sub, p.parent_path(), stack));
            stack.erase(key);
        }
    }
    json own = doc;
    own.erase("include");
    merge_into(out, own);
    return out;
}

} // namespace

std::vector<std::string> profile_names()
{
    return {"toy-default", "dark-default", "paper-protocol"};
}

json default_tree()
{
    const wsss::TrainConfig t;
    const wsss::SegNetConfig net;
    json taps = json::array();
    for (auto loc : t.distill.taps)
        taps.push_back(distill::to_string(loc));
    json stages = json::array();
    for (auto s : net.fusion.stages)
        stages.push_back(fusion::to_string(s));
    return json{
        {"seed", std::uint64_t{0}},
        {"run", {{"kind", "student"}, {"name", ""}, {"teacher", ""}}},
        {"data",
         {{"scene", scene_tree(scene::SceneSpec::toy_default())},
          {"train_count", 200},
          {"val_count", 100},
          {"darken", darken_tree(lowlight::DarkenConfig::profile("dark-default"))}}},
        {"train",
         {{"steps", t.steps},
          {"batch_size", t.batch_size},
          {"lr", t.sgd.lr},
          {"momentum", t.sgd.momentum},
          {"weight_decay", t.sgd.weight_decay},
          {"seg_warmup", t.seg_warmup},
          {"clip_grad_norm", t.clip_grad_norm},
          {"hflip", t.hflip},
          {"eval_every", t.eval_every}}},
        {"cam",
         {{"bg_power", t.cam.bg_power},
          {"pamr_iters", t.cam.pamr_iters},
          {"pamr_window", t.cam.pamr_window},
          {"pamr_tau", t.cam.pamr_tau},
          {"threshold", t.cam.threshold}}},
        {"net",
         {{"c0", net.c0}, {"c1", net.c1}, {"c2", net.c2}, {"input_mean", net.input_mean}, {"input_std", net.input_std}}},
        {"dgkd",
         {{"enabled", false},
          {"taps", taps},
          {"ddim_steps", t.distill.ddim_steps},
          {"diffusion_steps", t.distill.diffusion_steps},
          {"beta_range", {t.distill.beta_start, t.distill.beta_end}},
          {"distance",
           {{"feature", distill::to_string(t.distill.feature_distance)},
            {"mask", distill::to_string(t.distill.mask_distance)}}},
          {"weights", json::array()},
          {"embed_dim", t.distill.embed_dim}}},
        {"dgf2",
         {{"enabled", false},
          {"lambda", net.fusion.lambda},
          {"stages", stages},
          {"depth_source", "analytic"},
          {"depth_dir", ""}}},
    };
}

json builtin_profile(const std::string& name)
{
    if (name == "toy-default")
        return default_tree();
    if (name == "dark-default")
        return json{{"data", {{"darken", darken_tree(lowlight::DarkenConfig::profile("dark-default"))}}}};
    if (name == "paper-protocol") {
        // Optimiser, batch and crop of the full-scale recipe. Reference only:
        // far beyond a desk-scale CPU budget.
        return json{{"data", {{"scene", {{"image_size", 320}}}}},
                    {"train",
                     {{"batch_size", 6},
                      {"lr", 0.005},
                      {"momentum", 0.9},
                      {"weight_decay", 5e-4},
                      {"steps", 20000},
                      {"clip_grad_norm", 0.0}}},
                    {"dgkd", {{"ddim_steps", 5}}},
                    {"dgf2", {{"lambda", 0.5}}}};
    }
    throw ConfigError("include", "unknown profile '" + name + "'");
}

json resolve_layers(const json& doc, const fs::path& base_dir)
{
    std::set<std::string> stack;
    return resolve_layers_impl(doc, base_dir, stack);
}

json load_layered(const fs::path& path)
{
    if (!fs::exists(path))
        throw ConfigError("", "config file not found: " + path.string());
    json doc;
    try {
        doc = json::parse(io::read_text(path));
    } catch (const json::parse_error& e) {
        throw ConfigError("", path.string() + ": " + e.what());
    }
    std::set<std::string> stack{fs::weakly_canonical(path).string()};
    return resolve_layers_impl(doc, path.parent_path(), stack);
}

json parse_scalar(const std::string& text)
{
    try {
        return json::parse(text);
    } catch (const json::parse_error&) {
        return json(text);
    }
}

void set_dotted(json& tree, const std::string& dotted, const json& value)
{
    json* node = &tree;
    std::stringstream ss(dotted);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(ss, part, '.'))
        parts.push_back(part);
    if (parts.empty())
        throw ConfigError(dotted, "empty key");
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
        if (!node->is_object())
            throw ConfigError(dotted, "'" + parts[i] + "' is not an object");
        node = &(*node)[parts[i]];
        if (node->is_null())
            *node = json::object();
    }
    if (!node->is_object())
        throw ConfigError(dotted, "parent is not an object");
    (*node)[parts.back()] = value;
}

json resolve(const json& overrides)
{
    const json def = default_tree();
    json layered = overrides.contains("include") ? resolve_layers(overrides, fs::current_path()) : overrides;
    check_value(def, layered, "");
    json out = def;
    merge_into(out, layered);
    experiment_from(out); // semantic validation
    return out;
}

std::string to_string(RunKind kind)
{
    return kind == RunKind::teacher ? "teacher" : "student";
}

Experiment experiment_from(const json& r)
{
    Experiment e;
    const std::uint64_t seed = r.at("seed").get<std::uint64_t>();
    const std::string kind = r.at("run").at("kind").get<std::string>();
    if (kind == "teacher")
        e.kind = RunKind::teacher;
    else if (kind == "student")
        e.kind = RunKind::student;
    else
        throw ConfigError("run.kind", "must be 'teacher' or 'student', got '" + kind + "'");
    e.name = r.at("run").at("name").get<std::string>();
    e.teacher = r.at("run").at("teacher").get<std::string>();

    const json& d = r.at("data");
    section("data.scene", [&] {
        json s = d.at("scene");
        if (s.at("shapes_per_image").size() != 2)
            throw ConfigError("data.scene.shapes_per_image", "expected [min, max]");
        if (s.at("depth_range").size() != 2)
            throw ConfigError("data.scene.depth_range", "expected [near, far]");
        for (std::size_t i = 0; i < s.at("color_palette").size(); ++i)
            if (s.at("color_palette")[i].size() != 3)
                throw ConfigError("data.scene.color_palette[" + std::to_string(i) + "]", "expected an RGB triple");
        s["seed"] = seed;
        e.data.spec = scene::spec_from_json(s);
        e.data.spec.validate();
    });
    e.data.train_count = d.at("train_count").get<int>();
    e.data.val_count = d.at("val_count").get<int>();
    if (e.data.train_count < 1)
        throw ConfigError("data.train_count", "must be >= 1");
    if (e.data.val_count < 1)
        throw ConfigError("data.val_count", "must be >= 1");
    section("data.darken", [&] {
        if (d.at("darken").at("illum_range").size() != 2)
            throw ConfigError("data.darken.illum_range", "expected [lo, hi]");
        json dk = d.at("darken");
        dk["seed"] = seed;
        e.data.darken = lowlight::from_json(dk);
    });

    wsss::TrainConfig& t = e.train;
    t.seed = seed;
    const json& tr = r.at("train");
    t.steps = tr.at("steps").get<int>();
    t.batch_size = tr.at("batch_size").get<int>();
    t.sgd.lr = tr.at("lr").get<double>();
    t.sgd.momentum = tr.at("momentum").get<double>();
    t.sgd.weight_decay = tr.at("weight_decay").get<double>();
    t.seg_warmup = tr.at("seg_warmup").get<int>();
    t.clip_grad_norm = tr.at("clip_grad_norm").get<double>();
    t.hflip = tr.at("hflip").get<bool>();
    t.eval_every = tr.at("eval_every").get<int>();

    const json& cam = r.at("cam");
    t.cam.bg_power = cam.at("bg_power").get<double>();
    t.cam.pamr_iters = cam.at("pamr_iters").get<int>();
    t.cam.pamr_window = cam.at("pamr_window").get<int>();
    t.cam.pamr_tau = cam.at("pamr_tau").get<double>();
    t.cam.threshold = cam.at("threshold").get<double>();

    const json& net = r.at("net");
    t.net.num_classes = e.data.spec.num_classes;
    t.net.c0 = net.at("c0").get<int>();
    t.net.c1 = net.at("c1").get<int>();
    t.net.c2 = net.at("c2").get<int>();
    t.net.input_mean = net.at("input_mean").get<double>();
    t.net.input_std = net.at("input_std").get<double>();

    const json& g = r.at("dgf2");
    t.net.dgf2 = g.at("enabled").get<bool>();
    t.net.fusion.lambda = g.at("lambda").get<double>();
    if (g.at("depth_source").get<std::string>() != "analytic")
        throw ConfigError("dgf2.depth_source", "only 'analytic' depth is supported");
    e.depth_dir = g.at("depth_dir").get<std::string>();
    section("dgf2.stages", [&] {
        t.net.fusion.stages.clear();
        for (const auto& s : strings(g.at("stages")))
            t.net.fusion.stages.push_back(fusion::stage_from_string(s));
    });

    const json& k = r.at("dgkd");
    t.distill.enabled = k.at("enabled").get<bool>();
    section("dgkd.taps", [&] {
        t.distill.taps.clear();
        for (const auto& s : strings(k.at("taps")))
            t.distill.taps.push_back(distill::location_from_string(s));
    });
    t.distill.ddim_steps = k.at("ddim_steps").get<int>();
    t.distill.diffusion_steps = k.at("diffusion_steps").get<int>();
    if (k.at("beta_range").size() != 2)
        throw ConfigError("dgkd.beta_range", "expected [start, end]");
    t.distill.beta_start = k.at("beta_range")[0].get<double>();
    t.distill.beta_end = k.at("beta_range")[1].get<double>();
    section("dgkd.distance.feature", [&] {
        t.distill.feature_distance = distill::distance_from_string(k.at("distance").at("feature").get<std::string>());
    });
    section("dgkd.distance.mask", [&] {
        t.distill.mask_distance = distill::distance_from_string(k.at("distance").at("mask").get<std::string>());
    });
    t.distill.weights = k.at("weights").get<std::vector<double>>();
    t.distill.embed_dim = k.at("embed_dim").get<int>();

    section("cam", [&] { t.cam.validate(); });
    section("dgf2", [&] { t.net.fusion.validate(); });
    section("net", [&] { t.net.validate(); });
    section("dgkd", [&] { t.distill.validate(); });
    section("train", [&] { t.validate(); });
    if (e.data.spec.image_size % 4 != 0)
        throw ConfigError("data.scene.image_size", "must be a multiple of 4");

    if (e.kind == RunKind::teacher) {
        if (t.distill.enabled)
            throw ConfigError("dgkd.enabled", "a teacher run cannot distill");
        if (t.net.dgf2)
            throw ConfigError("dgf2.enabled", "a teacher run has no depth fusion");
    } else if (t.distill.enabled && e.teacher.empty()) {
        throw ConfigError("run.teacher", "dgkd.enabled requires a teacher checkpoint (run id or path)");
    }
    return e;
}

std::vector<std::string> diff_keys(const json& a, const json& b)
{
    std::vector<std::string> out;
    std::function<void(const json&, const json&, const std::string&)> walk = [&](const json& x, const json& y,
                                                                                const std::string& path) {
        if (x.is_object() && y.is_object()) {
            std::set<std::string> keys;
            for (const auto& [k, v] : x.items())
                keys.insert(k);
            for (const auto& [k, v] : y.items())
                keys.insert(k);
            for (const auto& k : keys) {
                if (!x.contains(k) || !y.contains(k))
                    out.push_back(join(path, k));
                else
                    walk(x.at(k), y.at(k), join(path, k));
            }
            return;
        }
        if (x != y)
            out.push_back(path);
    };
    walk(a, b, "");
    return out;
}

} // namespace dgkd::harness
