#include "dgkd/evalkit.hpp"
#include "dgkd/harness.hpp"
#include "dgkd/image_io.hpp"

#include <cstdio>
#include <iostream>

#include "CLI11.hpp"

namespace fs = std::filesystem;
using namespace dgkd;
using harness::ConfigError;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

json apply_sets(json tree, const std::vector<std::string>& sets)
{
    for (const auto& s : sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos || eq == 0)
            throw ConfigError(s, "--set expects key=value");
        harness::set_dotted(tree, s.substr(0, eq), harness::parse_scalar(s.substr(eq + 1)));
    }
    return tree;
}

json layered(const std::string& config, const std::string& profile)
{
    if (!config.empty())
        return harness::load_layered(config);
    return harness::resolve_layers(json{{"include", profile.empty() ? "toy-default" : profile}}, fs::current_path());
}

std::vector<std::string> class_names(int k)
{
    std::vector<std::string> names{"background"};
    for (int c = 1; c <= k; ++c)
        names.push_back("class" + std::to_string(c));
    return names;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"dgkd-lab: diffusion-guided distillation for low-light segmentation on a synthetic corpus"};
    app.require_subcommand(1);
    const fs::path root = harness::output_root();

    // dataset
    auto* dataset = app.add_subcommand("dataset", "Generate or darken a scene corpus");
    dataset->require_subcommand(1);
    std::string synth_config, synth_profile, synth_out;
    std::vector<std::string> synth_sets;
    auto* synth = dataset->add_subcommand("synth", "Write a synthetic corpus (train and val splits)");
    synth->add_option("--config", synth_config, "Config file (data.* and seed are used)");
    synth->add_option("--profile", synth_profile, "Built-in profile when no config is given");
    synth->add_option("--set", synth_sets, "Override key=value (dotted keys)");
    synth->add_option("--out", synth_out, "Output directory")->required();

    std::string dk_in, dk_out, dk_profile, dk_config;
    std::uint64_t dk_seed = 0;
    auto* darken = dataset->add_subcommand("darken", "Write a low-light copy of a corpus");
    darken->add_option("--in", dk_in, "Corpus directory")->required();
    darken->add_option("--out", dk_out, "Output directory (default: <in>-dark)");
    darken->add_option("--profile", dk_profile, "dark-default | identity | a built-in config profile");
    darken->add_option("--config", dk_config, "Config file; its data.darken section is used");
    darken->add_option("--seed", dk_seed, "Darkening seed");

    // train
    auto* train = app.add_subcommand("train", "Train a teacher or a student");
    std::string kind, train_config, train_name, train_teacher;
    std::vector<std::string> train_sets;
    train->add_option("kind", kind, "teacher | student")->required()->check(CLI::IsMember({"teacher", "student"}));
    train->add_option("--config", train_config, "Config file (defaults to the toy-default profile)");
    train->add_option("--set", train_sets, "Override key=value (dotted keys)");
    train->add_option("--name", train_name, "Run id");
    train->add_option("--teacher", train_teacher, "Teacher run id or checkpoint path");

    // eval
    auto* evalc = app.add_subcommand("eval", "Evaluate a trained run");
    std::string eval_run, eval_split = "val", eval_corpus;
    evalc->add_option("--run", eval_run, "Run id")->required();
    evalc->add_option("--split", eval_split, "train | val")->check(CLI::IsMember({"train", "val"}));
    evalc->add_option("--corpus", eval_corpus, "Corpus directory (default: the run's own input corpus)");

    // ablate
    auto* ablate = app.add_subcommand("ablate", "Run an ablation plan and write its report");
    std::string plan_path;
    bool with_sweeps = false;
    std::vector<std::string> ablate_sets;
    std::vector<std::uint64_t> ablate_seeds;
    ablate->add_option("--plan", plan_path, "Plan file (default: the built-in four-variant plan)");
    ablate->add_flag("--sweeps", with_sweeps, "Also run the declared sweeps");
    ablate->add_option("--set", ablate_sets, "Override key=value on the base config");
    ablate->add_option("--seeds", ablate_seeds, "Replace the plan's seeds")->delimiter(',');

    // report
    auto* rep = app.add_subcommand("report", "Render tables, plots and panels for runs");
    std::vector<std::string> report_runs;
    std::string report_out;
    int report_panels = 3;
    rep->add_option("runs", report_runs, "Run ids")->required();
    rep->add_option("--out", report_out, "Report directory (default: <root>/reports/<first run>)");
    rep->add_option("--panels", report_panels, "Qualitative panels per run");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (synth->parsed()) {
            const json cfg = harness::resolve(apply_sets(layered(synth_config, synth_profile), synth_sets));
            const harness::Experiment e = harness::experiment_from(cfg);
            for (auto [split, count] : {std::pair{scene::Split::train, e.data.train_count},
                                        std::pair{scene::Split::val, e.data.val_count}}) {
                scene::CorpusSplit cs;
                cs.spec = e.data.spec;
                cs.split = split;
                cs.samples = scene::generate_corpus(e.data.spec, count, split);
                scene::write_split(synth_out, cs, json::object());
            }
            std::cout << synth_out << "\n";
        } else if (darken->parsed()) {
            lowlight::DarkenConfig dc;
            if (!dk_config.empty()) {
                const json cfg = harness::resolve(harness::load_layered(dk_config));
                dc = harness::experiment_from(cfg).data.darken;
            } else if (dk_profile.empty() || dk_profile == "dark-default" || dk_profile == "identity") {
                dc = lowlight::DarkenConfig::profile(dk_profile.empty() ? "dark-default" : dk_profile);
            } else {
                const json cfg = harness::resolve(json{{"include", dk_profile}});
                dc = harness::experiment_from(cfg).data.darken;
            }
            dc.seed = dk_seed;
            const fs::path out = dk_out.empty() ? lowlight::sibling_dark_dir(dk_in) : fs::path(dk_out);
            if (!fs::exists(fs::path(dk_in) / "train" / "manifest.json")
                && !fs::exists(fs::path(dk_in) / "val" / "manifest.json"))
                throw std::runtime_error("no corpus manifest under " + dk_in);
            std::cout << lowlight::darken_corpus(dk_in, out, dc).string() << "\n";
        } else if (train->parsed()) {
            json tree = layered(train_config, "");
            harness::set_dotted(tree, "run.kind", kind);
            if (!train_name.empty())
                harness::set_dotted(tree, "run.name", train_name);
            if (!train_teacher.empty())
                harness::set_dotted(tree, "run.teacher", train_teacher);
            const json cfg = harness::resolve(apply_sets(tree, train_sets));
            if (cfg.at("dgkd").at("enabled").get<bool>())
                harness::teacher_checkpoint(root, cfg.at("run").at("teacher").get<std::string>());
            std::cerr << "run " << harness::run_id_for(cfg) << " -> " << harness::run_dir(root, harness::run_id_for(cfg))
                      << "\n";
            const harness::RunManifest m = harness::run(root, cfg);
            std::printf("%s status=%s final_miou=%.4f pixacc=%.4f\n", m.run_id.c_str(), m.status.c_str(),
                        m.metric_summary.value("final_miou", 0.0), m.metric_summary.value("final_pixacc", 0.0));
        } else if (evalc->parsed()) {
            const harness::RunManifest m = harness::read_manifest(root, eval_run);
            const harness::Experiment e = harness::experiment_from(m.config);
            fs::path corpus = eval_corpus;
            if (corpus.empty())
                corpus = m.artifacts
                             .at(e.kind == harness::RunKind::teacher ? "corpus_normal" : "corpus_dark")
                             .get<std::string>();
            const auto samples = scene::read_split(corpus, scene::split_from_string(eval_split)).samples;
            const wsss::SegNet net = harness::load_network(root, eval_run);
            if (net.config().dgf2)
                for (const auto& s : samples)
                    if (s.depth.empty())
                        throw std::runtime_error("depth maps missing from corpus");
            const eval::Metrics mt = eval::metrics(wsss::evaluate(net, samples));
            std::cout << eval::format_table({eval_run}, {mt}, class_names(e.data.spec.num_classes));
        } else if (ablate->parsed()) {
            harness::AblationPlan plan = plan_path.empty() ? harness::default_plan() : harness::load_plan(plan_path);
            plan.base = apply_sets(plan.base, ablate_sets);
            if (!ablate_seeds.empty())
                plan.seeds = ablate_seeds;
            for (const auto& v : plan.variants)
                harness::variant_config(plan, v, plan.seeds.front());
            const auto res = harness::ablate(root, plan, with_sweeps, [](const std::string& s) {
                std::cerr << s << "\n";
            });
            std::cout << (res.report_dir / "report.md").string() << "\n";
            for (const auto& c : res.cells)
                if (!c.ok)
                    return kExitRuntime;
        } else if (rep->parsed()) {
            const fs::path out = report_out.empty() ? root / "reports" / report_runs.front() : fs::path(report_out);
            const auto missing = harness::report(root, report_runs, out, report_panels);
            for (const auto& id : missing)
                std::cerr << "missing run: " << id << "\n";
            std::cout << (out / "report.md").string() << "\n";
            if (missing.size() == report_runs.size())
                return kExitRuntime;
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitOk;
}
