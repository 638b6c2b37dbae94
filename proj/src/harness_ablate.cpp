#include "dgkd/harness.hpp"
#include "harness_internal.hpp"

#include "dgkd/image_io.hpp"

#include <algorithm>
#include <set>

namespace dgkd::harness {

namespace {

std::string slug(const std::string& name)
{
    std::string out;
    for (char c : name) {
        if (std::isalnum(static_cast<unsigned char>(c)))
            out += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        else if (!out.empty() && out.back() != '-')
            out += '-';
    }
    while (!out.empty() && out.back() == '-')
        out.pop_back();
    return out.empty() ? "variant" : out;
}

std::string value_text(const json& v)
{
    return v.is_string() ? v.get<std::string>() : v.dump();
}

const Variant* teacher_variant(const AblationPlan& plan)
{
    for (const auto& v : plan.variants)
        if (v.kind == RunKind::teacher)
            return &v;
    return nullptr;
}

json seeded_base(const AblationPlan& plan, std::uint64_t seed)
{
    json tree = plan.base;
    tree["seed"] = seed;
    return tree;
}

// Reuses a finished run with an identical config instead of training again.
CellResult run_cell(const fs::path& root, const json& cfg, const std::string& variant, std::uint64_t seed,
                    const std::function<void(const std::string&)>& log)
{
    CellResult c;
    c.variant = variant;
    c.seed = seed;
    c.run_id = run_id_for(cfg);
    try {
        RunManifest m;
        bool reused = false;
        if (fs::exists(run_dir(root, c.run_id) / "manifest.json")) {
            m = read_manifest(root, c.run_id);
            reused = m.status == "ok" && m.config_hash == wsss::config_hash(cfg);
        }
        if (!reused) {
            if (log)
                log("run " + c.run_id);
            m = run(root, cfg);
        } else if (log) {
            log("reuse " + c.run_id);
        }
        c.ok = true;
        c.miou = m.metric_summary.at("final_miou").get<double>();
        c.pixacc = m.metric_summary.at("final_pixacc").get<double>();
        if (log)
            log("  " + variant + " seed " + std::to_string(seed) + " miou " + std::to_string(c.miou));
    } catch (const std::exception& e) {
        c.ok = false;
        c.error = e.what();
        if (log)
            log("  " + variant + " seed " + std::to_string(seed) + " FAILED: " + c.error);
    }
    return c;
}

} // namespace

AblationPlan default_plan()
{
    AblationPlan p;
    p.name = "ablation";
    p.base = builtin_profile("toy-default");
    p.variants = {
        {"teacher-normal", RunKind::teacher, json::object()},
        {"baseline-dark", RunKind::student, json::object()},
        {"+dgkd", RunKind::student, json{{"dgkd.enabled", true}}},
        {"+dgkd+dgf2", RunKind::student, json{{"dgkd.enabled", true}, {"dgf2.enabled", true}}},
    };
    p.sweeps = {
        {"lambda", "+dgkd+dgf2", "dgf2.lambda", {0.4, 0.5, 0.6}, {56.6, 57.1, 56.1}, {}},
        {"ddim_steps", "+dgkd+dgf2", "dgkd.ddim_steps", {4, 5, 6}, {57.0, 57.1, 57.1}, {}},
    };
    return p;
}

AblationPlan plan_from_json(const json& j, const fs::path& base_dir)
{
    AblationPlan p;
    if (!j.is_object())
        throw ConfigError("", "plan must be a JSON object");
    for (const auto& [k, v] : j.items())
        if (k != "name" && k != "base" && k != "seeds" && k != "variants" && k != "sweeps")
            throw ConfigError(k, "unknown plan key");
    p.name = j.value("name", p.name);
    if (p.name.empty() || slug(p.name) != p.name)
        throw ConfigError("name", "plan name must be lower-case letters, digits and dashes");
    if (j.contains("base")) {
        const json& b = j.at("base");
        if (b.is_string()) {
            const fs::path bp = fs::path(b.get<std::string>()).is_absolute() ? fs::path(b.get<std::string>())
                                                                            : base_dir / b.get<std::string>();
            p.base = load_layered(bp);
        } else {
            p.base = resolve_layers(b, base_dir);
        }
    } else {
        p.base = resolve_layers(json{{"include", "toy-default"}}, base_dir);
    }
    if (j.contains("seeds")) {
        p.seeds.clear();
        for (std::size_t i = 0; i < j.at("seeds").size(); ++i) {
            const json& s = j.at("seeds")[i];
            if (!s.is_number_unsigned())
                throw ConfigError("seeds[" + std::to_string(i) + "]", "expected a non-negative integer");
            p.seeds.push_back(s.get<std::uint64_t>());
        }
        if (p.seeds.empty())
            throw ConfigError("seeds", "need at least one seed");
    }
    if (j.contains("variants")) {
        p.variants.clear();
        std::set<std::string> names;
        for (std::size_t i = 0; i < j.at("variants").size(); ++i) {
            const json& v = j.at("variants")[i];
            const std::string path = "variants[" + std::to_string(i) + "]";
            Variant var;
            var.name = v.at("name").get<std::string>();
            if (!names.insert(var.name).second)
                throw ConfigError(path + ".name", "duplicate variant '" + var.name + "'");
            const std::string kind = v.value("kind", "student");
            if (kind != "teacher" && kind != "student")
                throw ConfigError(path + ".kind", "must be 'teacher' or 'student'");
            var.kind = kind == "teacher" ? RunKind::teacher : RunKind::student;
            var.set = v.value("set", json::object());
            if (!var.set.is_object())
                throw ConfigError(path + ".set", "expected an object of dotted keys");
            p.variants.push_back(std::move(var));
        }
    } else {
        p.variants = default_plan().variants;
    }
    if (j.contains("sweeps")) {
        p.sweeps.clear();
        for (std::size_t i = 0; i < j.at("sweeps").size(); ++i) {
            const json& s = j.at("sweeps")[i];
            const std::string path = "sweeps[" + std::to_string(i) + "]";
            Sweep sw;
            sw.name = s.at("name").get<std::string>();
            sw.variant = s.at("variant").get<std::string>();
            sw.key = s.at("key").get<std::string>();
            sw.values = s.at("values").get<std::vector<json>>();
            sw.reference = s.value("reference", std::vector<double>{});
            sw.seeds = s.value("seeds", std::vector<std::uint64_t>{});
            if (!sw.reference.empty() && sw.reference.size() != sw.values.size())
                throw ConfigError(path + ".reference", "must have one entry per value");
            if (std::none_of(p.variants.begin(), p.variants.end(),
                             [&](const Variant& v) { return v.name == sw.variant; }))
                throw ConfigError(path + ".variant", "no variant named '" + sw.variant + "'");
            p.sweeps.push_back(std::move(sw));
        }
    }
    // Fail on bad variant configs before anything runs.
    for (const auto& v : p.variants)
        variant_config(p, v, p.seeds.front());
    return p;
}

AblationPlan load_plan(const fs::path& path)
{
    if (!fs::exists(path))
        throw ConfigError("", "plan file not found: " + path.string());
    json j;
    try {
        j = json::parse(io::read_text(path));
    } catch (const json::parse_error& e) {
        throw ConfigError("", path.string() + ": " + e.what());
    }
    return plan_from_json(j, path.parent_path());
}

json variant_config(const AblationPlan& plan, const Variant& v, std::uint64_t seed)
{
    json tree = seeded_base(plan, seed);
    set_dotted(tree, "run.kind", to_string(v.kind));
    set_dotted(tree, "run.name", plan.name + "-" + slug(v.name) + "-s" + std::to_string(seed));
    for (const auto& [k, val] : v.set.items())
        set_dotted(tree, k, val);
    if (v.kind == RunKind::student && tree.contains("dgkd") && tree["dgkd"].value("enabled", false)) {
        const Variant* t = teacher_variant(plan);
        if (!t)
            throw ConfigError("variants", "distilling variant '" + v.name + "' needs a teacher variant");
        set_dotted(tree, "run.teacher", run_id_for(variant_config(plan, *t, seed)));
    }
    const json resolved = resolve(tree);

    json reference = seeded_base(plan, seed);
    const json base_resolved = resolve(reference);
    std::set<std::string> allowed{"run.kind", "run.name", "run.teacher"};
    for (const auto& [k, val] : v.set.items())
        allowed.insert(k);
    for (const auto& key : diff_keys(base_resolved, resolved))
        if (!allowed.count(key))
            throw ConfigError(key, "variant '" + v.name + "' changes an undeclared key");
    return resolved;
}

AblationResult ablate(const fs::path& root, const AblationPlan& plan, bool with_sweeps,
                      const std::function<void(const std::string&)>& log)
{
    AblationResult res;
    std::vector<const Variant*> order;
    for (const auto& v : plan.variants)
        if (v.kind == RunKind::teacher)
            order.push_back(&v);
    for (const auto& v : plan.variants)
        if (v.kind == RunKind::student)
            order.push_back(&v);
    for (std::uint64_t seed : plan.seeds)
        for (const Variant* v : order)
            res.cells.push_back(run_cell(root, variant_config(plan, *v, seed), v->name, seed, log));

    if (with_sweeps) {
        for (const auto& sw : plan.sweeps) {
            const Variant& base = *std::find_if(plan.variants.begin(), plan.variants.end(),
                                                [&](const Variant& v) { return v.name == sw.variant; });
            std::vector<CellResult> cells;
            const std::vector<std::uint64_t> seeds = sw.seeds.empty() ? std::vector{plan.seeds.front()} : sw.seeds;
            for (const json& value : sw.values) {
                Variant v = base;
                v.name = base.name + " " + sw.key + "=" + value_text(value);
                v.set[sw.key] = value;
                for (std::uint64_t seed : seeds) {
                    json cfg = variant_config(plan, v, seed);
                    json same = variant_config(plan, base, seed);
                    if (diff_keys(same, cfg) == std::vector<std::string>{"run.name"})
                        cfg = same;
                    cells.push_back(run_cell(root, cfg, value_text(value), seed, log));
                }
            }
            res.sweeps.emplace_back(sw.name, std::move(cells));
        }
    }
    res.report_dir = root / "reports" / plan.name;
    detail::write_ablation_report(root, plan, res);
    return res;
}

} // namespace dgkd::harness
