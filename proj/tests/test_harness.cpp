#include "dgkd/harness.hpp"
#include "dgkd/image_io.hpp"

#include "test_support.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

using namespace dgkd;
using namespace dgkd::harness;

namespace {

std::string slurp(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

void put(const fs::path& p, const json& j)
{
    fs::create_directories(p.parent_path());
    std::ofstream(p) << j.dump(2);
}

// Small enough to train in about a second.
json tiny(std::uint64_t seed, const std::string& kind = "teacher")
{
    return json{{"seed", seed},
                {"run", {{"kind", kind}}},
                {"data", {{"scene", {{"image_size", 32}}}, {"train_count", 20}, {"val_count", 6}}},
                {"train", {{"steps", 10}, {"batch_size", 4}, {"seg_warmup", 4}, {"eval_every", 5}}},
                {"dgkd", {{"ddim_steps", 2}}}};
}

std::string config_error_path(const json& overrides)
{
    try {
        resolve(overrides);
    } catch (const ConfigError& e) {
        return e.path();
    }
    return "<no error>";
}

} // namespace

TEST(Config, DefaultsResolve)
{
    const json r = resolve(json::object());
    EXPECT_EQ(r, default_tree());
    EXPECT_EQ(experiment_from(r).kind, RunKind::student);
    for (const auto& name : profile_names())
        EXPECT_NO_THROW(resolve(builtin_profile(name))) << name;
}

TEST(Config, RejectsUnknownKeysAndWrongTypes)
{
    EXPECT_EQ(config_error_path({{"train", {{"stepz", 5}}}}), "train.stepz");
    EXPECT_EQ(config_error_path({{"bogus", 1}}), "bogus");
    EXPECT_EQ(config_error_path({{"train", {{"steps", 1.5}}}}), "train.steps");
    EXPECT_EQ(config_error_path({{"train", {{"steps", "10"}}}}), "train.steps");
    EXPECT_EQ(config_error_path({{"dgkd", {{"enabled", 1}}}}), "dgkd.enabled");
    EXPECT_EQ(config_error_path({{"dgkd", {{"weights", {1, "x"}}}}}), "dgkd.weights[1]");
    EXPECT_EQ(config_error_path({{"seed", -1}}), "seed");
    // Integers are fine where a real number is expected.
    EXPECT_NO_THROW(resolve({{"train", {{"lr", 1}}}}));
}

TEST(Config, SemanticErrorsNameTheKey)
{
    EXPECT_EQ(config_error_path({{"dgkd", {{"enabled", true}}}}), "run.teacher");
    EXPECT_EQ(config_error_path({{"run", {{"kind", "teacher"}}}, {"dgkd", {{"enabled", true}}}}), "dgkd.enabled");
    EXPECT_EQ(config_error_path({{"run", {{"kind", "teacher"}}}, {"dgf2", {{"enabled", true}}}}), "dgf2.enabled");
    EXPECT_EQ(config_error_path({{"run", {{"kind", "coach"}}}}), "run.kind");
    EXPECT_EQ(config_error_path({{"dgf2", {{"lambda", 1.5}}}}), "dgf2");
    EXPECT_EQ(config_error_path({{"dgf2", {{"stages", {"stage9"}}}}}), "dgf2.stages");
    EXPECT_EQ(config_error_path({{"dgkd", {{"taps", {"nowhere"}}}}}), "dgkd.taps");
    EXPECT_EQ(config_error_path({{"data", {{"scene", {{"image_size", 30}}}}}}).rfind("data.scene", 0), 0u);
    EXPECT_EQ(config_error_path({{"data", {{"darken", {{"illum_range", {0.5, 0.1}}}}}}}), "data.darken");
}

TEST(Config, LayeredIncludesOverrideInOrder)
{
    const fs::path dir = testkit::scratch_dir("layers");
    put(dir / "common.json", {{"include", "toy-default"}, {"train", {{"steps", 50}, {"lr", 0.01}}}});
    put(dir / "sub" / "mid.json", {{"include", "../common.json"}, {"train", {{"steps", 70}}}});
    put(dir / "top.json", {{"include", {"sub/mid.json", "dark-default"}}, {"seed", 9}});
    const json r = resolve(load_layered(dir / "top.json"));
    EXPECT_EQ(r["train"]["steps"], 70);
    EXPECT_EQ(r["train"]["lr"], 0.01);
    EXPECT_EQ(r["seed"], 9);
    EXPECT_FALSE(load_layered(dir / "top.json").contains("include"));

    put(dir / "a.json", {{"include", "b.json"}});
    put(dir / "b.json", {{"include", "a.json"}});
    EXPECT_THROW(load_layered(dir / "a.json"), ConfigError);
    put(dir / "self.json", {{"include", "self.json"}});
    EXPECT_THROW(load_layered(dir / "self.json"), ConfigError);
    put(dir / "missing.json", {{"include", "nope.json"}});
    EXPECT_THROW(load_layered(dir / "missing.json"), ConfigError);
    {
        std::ofstream(dir / "broken.json") << "{ not json";
    }
    EXPECT_THROW(load_layered(dir / "broken.json"), ConfigError);
    fs::remove_all(dir);
}

TEST(Config, DottedKeysAndScalars)
{
    json t = default_tree();
    set_dotted(t, "dgkd.enabled", parse_scalar("true"));
    set_dotted(t, "train.lr", parse_scalar("0.02"));
    set_dotted(t, "run.name", parse_scalar("night-run"));
    EXPECT_EQ(t["dgkd"]["enabled"], true);
    EXPECT_EQ(t["train"]["lr"], 0.02);
    EXPECT_EQ(t["run"]["name"], "night-run");
    EXPECT_EQ(diff_keys(default_tree(), t), (std::vector<std::string>{"dgkd.enabled", "run.name", "train.lr"}));
    EXPECT_THROW(set_dotted(t, "seed.x", 1), ConfigError);
}

TEST(Config, SeedPropagates)
{
    const Experiment e = experiment_from(resolve({{"seed", 42}}));
    EXPECT_EQ(e.train.seed, 42u);
    EXPECT_EQ(e.data.spec.seed, 42u);
    EXPECT_EQ(e.data.darken.seed, 42u);
}

class Runs : public ::testing::Test {
protected:
    static void SetUpTestSuite()
    {
        root_ = new fs::path(testkit::scratch_dir("runs"));
        teacher_ = new RunManifest(run(*root_, resolve(tiny(5))));
    }
    static void TearDownTestSuite()
    {
        fs::remove_all(*root_);
        delete root_;
        delete teacher_;
    }
    static fs::path* root_;
    static RunManifest* teacher_;
};
fs::path* Runs::root_ = nullptr;
RunManifest* Runs::teacher_ = nullptr;

TEST_F(Runs, ManifestIsComplete)
{
    const RunManifest m = read_manifest(*root_, teacher_->run_id);
    EXPECT_EQ(m.status, "ok");
    EXPECT_TRUE(m.error.empty());
    EXPECT_EQ(m.run_id, run_id_for(m.config));
    EXPECT_EQ(m.run_id.rfind("teacher-s5-", 0), 0u);
    EXPECT_EQ(m.config, resolve(tiny(5)));
    EXPECT_EQ(m.config_hash.size(), 16u);
    EXPECT_FALSE(m.code_hash.empty());
    EXPECT_EQ(m.seeds["root"], 5);
    for (const char* s : {"data", "init", "augmentation", "diffusion"})
        EXPECT_TRUE(m.seeds["substreams"].contains(s)) << s;
    EXPECT_EQ(m.corpus_hashes["normal"], content_hash(m.artifacts["corpus_normal"].get<std::string>()));
    EXPECT_EQ(m.corpus_hashes["dark"], content_hash(m.artifacts["corpus_dark"].get<std::string>()));
    EXPECT_FALSE(m.started.empty());
    EXPECT_FALSE(m.finished.empty());
    EXPECT_EQ(m.metric_summary["steps"], 10);
    EXPECT_EQ(m.metric_summary["evals"], 2);
    for (const char* a : {"config", "metrics", "losses", "checkpoint"})
        EXPECT_TRUE(fs::exists(run_dir(*root_, m.run_id) / m.artifacts[a].get<std::string>())) << a;
    EXPECT_EQ(read_losses(*root_, m.run_id).size(), 10u);
    const auto metrics = read_metrics(*root_, m.run_id);
    ASSERT_EQ(metrics.size(), 2u);
    EXPECT_EQ(metrics.back().miou, m.metric_summary["final_miou"].get<double>());
    EXPECT_EQ(to_json(manifest_from_json(to_json(m))), to_json(m));
}

TEST_F(Runs, DuplicateRunsProduceIdenticalArtifacts)
{
    const fs::path other = testkit::scratch_dir("runs-dup");
    const RunManifest b = run(other, resolve(tiny(5)));
    EXPECT_EQ(b.run_id, teacher_->run_id);
    EXPECT_EQ(b.corpus_hashes, teacher_->corpus_hashes);
    EXPECT_EQ(b.metric_summary, teacher_->metric_summary);
    for (const char* f : {"metrics.jsonl", "losses.jsonl", "checkpoint.ckpt", "config.json"})
        EXPECT_EQ(slurp(run_dir(other, b.run_id) / f), slurp(run_dir(*root_, b.run_id) / f)) << f;
    fs::remove_all(other);
}

TEST_F(Runs, StudentDistillsFromTeacherRun)
{
    json cfg = tiny(5, "student");
    cfg["dgkd"]["enabled"] = true;
    cfg["dgf2"]["enabled"] = true;
    cfg["run"]["teacher"] = teacher_->run_id;
    const RunManifest s = run(*root_, resolve(cfg));
    EXPECT_EQ(s.status, "ok");
    EXPECT_EQ(s.corpus_hashes, teacher_->corpus_hashes);
    const auto losses = read_losses(*root_, s.run_id);
    ASSERT_EQ(losses.size(), 10u);
    for (const auto& l : losses) {
        EXPECT_EQ(l.l_diff.size(), 3u);
        EXPECT_EQ(l.l_overall, l.recompute());
    }
    EXPECT_EQ(decompose(losses).max_recompute_error, 0.0);

    // A student cannot learn from a student.
    json again = tiny(6, "student");
    again["dgkd"]["enabled"] = true;
    again["run"]["teacher"] = s.run_id;
    EXPECT_THROW(run(*root_, resolve(again)), ConfigError);
    const RunManifest failed = read_manifest(*root_, run_id_for(resolve(again)));
    EXPECT_EQ(failed.status, "failed");
    EXPECT_NE(failed.error.find("not a teacher"), std::string::npos);
}

TEST_F(Runs, MissingTeacherFailsLoudly)
{
    json cfg = tiny(5, "student");
    cfg["dgkd"]["enabled"] = true;
    cfg["run"]["teacher"] = "no-such-run";
    cfg["run"]["name"] = "orphan";
    EXPECT_THROW(run(*root_, resolve(cfg)), ConfigError);
    EXPECT_EQ(read_manifest(*root_, "orphan").status, "failed");
}

TEST_F(Runs, ReportHasTablesPlotsAndPanels)
{
    const fs::path out = *root_ / "report";
    const auto missing = report(*root_, {teacher_->run_id, "ghost"}, out, 2);
    EXPECT_EQ(missing, (std::vector<std::string>{"ghost"}));
    const std::string md = slurp(out / "report.md");
    EXPECT_NE(md.find("mIoU"), std::string::npos);
    EXPECT_NE(md.find("| l_cls |"), std::string::npos);
    EXPECT_NE(md.find("ghost"), std::string::npos);
    int svgs = 0, panels = 0;
    for (const auto& e : fs::directory_iterator(out)) {
        svgs += e.path().extension() == ".svg";
        if (e.path().extension() == ".png") {
            ++panels;
            const io::PngData png = io::read_png(e.path());
            const int gap = 2, tile = (png.width - 4 * gap) / 5;
            EXPECT_EQ(5 * tile + 4 * gap, png.width);
            EXPECT_EQ(tile, png.height);
            EXPECT_EQ(tile, 2 * 32);
        }
    }
    EXPECT_GE(svgs, 2);
    EXPECT_EQ(panels, 2);
}

TEST(Report, PanelHasFiveEqualTiles)
{
    const fs::path dir = testkit::scratch_dir("panel");
    fs::create_directories(dir);
    const Tensor img = testkit::random_tensor({3, 6, 6}, 1, 0, 1);
    const std::vector<std::uint8_t> mask(36, 1);
    const auto [w, h] = write_panel(dir / "p.png", img, img, mask, mask, mask, scene::SceneSpec::toy_default(), 3);
    EXPECT_EQ(h, 18);
    EXPECT_EQ(w, 5 * 18 + 4 * 2);
    const io::PngData png = io::read_png(dir / "p.png");
    EXPECT_EQ(png.width, w);
    EXPECT_EQ(png.height, h);
    EXPECT_THROW(write_panel(dir / "q.png", img, img, {1, 2}, mask, mask, scene::SceneSpec::toy_default()),
                 std::invalid_argument);
    fs::remove_all(dir);
}

TEST(Report, SvgPlotIsWellFormed)
{
    const std::string svg = svg_line_plot("a < b", "x", "y", {{"s&1", {0, 1, 2}, {1, 3, 2}}, {"s2", {0, 2}, {0, 1}}});
    EXPECT_EQ(svg.rfind("<svg", 0), 0u);
    EXPECT_NE(svg.find("</svg>"), std::string::npos);
    EXPECT_NE(svg.find("a &lt; b"), std::string::npos);
    EXPECT_NE(svg.find("s&amp;1"), std::string::npos);
    EXPECT_EQ(svg.find("s&1"), std::string::npos);
}

TEST(Report, DecomposeAveragesTail)
{
    std::vector<wsss::LossReport> losses(20);
    for (int i = 0; i < 20; ++i) {
        losses[static_cast<std::size_t>(i)].l_cls = i;
        losses[static_cast<std::size_t>(i)].l_overall = i;
    }
    const LossDecomposition d = decompose(losses, 0.1);
    EXPECT_EQ(d.l_cls, 18.5);
    EXPECT_EQ(d.total, 18.5);
    EXPECT_EQ(d.max_recompute_error, 0.0);
}

TEST(Plan, DefaultPlanShape)
{
    const AblationPlan p = default_plan();
    ASSERT_EQ(p.variants.size(), 4u);
    EXPECT_EQ(p.variants[0].kind, RunKind::teacher);
    EXPECT_EQ(p.seeds, (std::vector<std::uint64_t>{1, 2, 3}));
    for (const auto& v : p.variants)
        EXPECT_NO_THROW(variant_config(p, v, 1)) << v.name;
    const json full = variant_config(p, p.variants[3], 2);
    EXPECT_EQ(full["run"]["teacher"], variant_config(p, p.variants[0], 2)["run"]["name"]);
    EXPECT_EQ(full["dgkd"]["enabled"], true);
    EXPECT_EQ(full["dgf2"]["enabled"], true);
}

TEST(Plan, FromJsonValidates)
{
    const fs::path dir = testkit::scratch_dir("plan");
    put(dir / "base.json", tiny(0));
    const json good{{"name", "mini"},
                    {"base", "base.json"},
                    {"seeds", {1, 2}},
                    {"variants",
                     {{{"name", "t"}, {"kind", "teacher"}},
                      {{"name", "s"}, {"set", {{"run.kind", "student"}, {"dgkd.enabled", true}}}}}},
                    {"sweeps", {{{"name", "k"}, {"variant", "s"}, {"key", "dgkd.ddim_steps"}, {"values", {1, 2}}}}}};
    put(dir / "plan.json", good);
    const AblationPlan p = load_plan(dir / "plan.json");
    EXPECT_EQ(p.name, "mini");
    EXPECT_EQ(p.seeds, (std::vector<std::uint64_t>{1, 2}));
    EXPECT_EQ(p.base["train"]["steps"], 10);

    auto bad = [&](json j) { EXPECT_THROW(plan_from_json(j, dir), ConfigError) << j.dump(); };
    json j = good;
    j["colour"] = 1;
    bad(j);
    j = good;
    j["name"] = "Has Spaces";
    bad(j);
    j = good;
    j["seeds"] = json::array();
    bad(j);
    j = good;
    j["seeds"] = {-1};
    bad(j);
    j = good;
    j["variants"][1]["name"] = "t";
    bad(j);
    j = good;
    j["variants"][1]["kind"] = "coach";
    bad(j);
    j = good;
    j["sweeps"][0]["variant"] = "nobody";
    bad(j);
    j = good;
    j["sweeps"][0]["reference"] = {1.0};
    bad(j);
    j = good;
    j["variants"][1]["set"]["train.stepz"] = 3;
    bad(j);
    j = good;
    j["variants"].erase(0);
    bad(j); // distillation without a teacher variant
    fs::remove_all(dir);
}

TEST(Plan, VariantsMayOnlyTouchDeclaredKeys)
{
    AblationPlan p;
    p.base = tiny(0, "student");
    Variant v{"sneaky", RunKind::teacher, json::object()};
    EXPECT_NO_THROW(variant_config(p, v, 1));
    v.set = {{"dgf2.enabled", true}};
    v.kind = RunKind::student;
    EXPECT_NO_THROW(variant_config(p, v, 1));
    const json cfg = variant_config(p, v, 1);
    EXPECT_EQ(cfg["train"], resolve(tiny(1, "student"))["train"]);
}

TEST(Ablation, TableArithmeticOverSeeds)
{
    const fs::path root = testkit::scratch_dir("ablate");
    AblationPlan p = default_plan();
    p.name = "tiny";
    p.base = tiny(0);
    p.seeds = {1, 2, 3};
    p.sweeps = {{"k", "+dgkd+dgf2", "dgkd.ddim_steps", {1, 2}, {57.0, 57.1}, {}}};
    std::vector<std::string> log;
    const AblationResult r = ablate(root, p, true, [&](const std::string& s) { log.push_back(s); });
    ASSERT_EQ(r.cells.size(), 12u);
    for (const auto& c : r.cells)
        EXPECT_TRUE(c.ok) << c.variant << " " << c.error;
    const json res = json::parse(slurp(r.report_dir / "results.json"));
    for (const auto& v : p.variants) {
        std::vector<double> m;
        for (const auto& c : r.cells)
            if (c.variant == v.name)
                m.push_back(c.miou);
        ASSERT_EQ(m.size(), 3u);
        std::vector<double> sorted = m;
        std::sort(sorted.begin(), sorted.end());
        const auto& row = res["variants"][v.name];
        EXPECT_DOUBLE_EQ(row["mean"].get<double>(), (m[0] + m[1] + m[2]) / 3) << v.name;
        EXPECT_EQ(row["median"].get<double>(), sorted[1]) << v.name;
        EXPECT_EQ(row["miou"], json(m)) << v.name;
        EXPECT_EQ(row["failed"], 0);
        EXPECT_EQ(row["losses"]["max_recompute_error"], 0.0);
    }
    // Teachers run before students within each seed.
    EXPECT_EQ(r.cells[0].variant, "teacher-normal");
    EXPECT_EQ(r.cells[4].variant, "teacher-normal");
    // The sweep value equal to the base config reuses the finished run.
    ASSERT_EQ(r.sweeps.size(), 1u);
    const auto& sweep = r.sweeps[0].second;
    ASSERT_EQ(sweep.size(), 2u);
    EXPECT_EQ(sweep[1].run_id, r.cells[3].run_id);
    EXPECT_EQ(sweep[1].miou, r.cells[3].miou);
    EXPECT_NE(std::find(log.begin(), log.end(), "reuse " + r.cells[3].run_id), log.end());

    const std::string md = slurp(r.report_dir / "report.md");
    EXPECT_NE(md.find("paper, full scale — not an acceptance target"), std::string::npos);
    EXPECT_NE(md.find("| +dgkd+dgf2 |"), std::string::npos);
    EXPECT_TRUE(fs::exists(r.report_dir / "miou_vs_step.svg"));

    // A second pass reuses every cell.
    log.clear();
    const AblationResult again = ablate(root, p, false, [&](const std::string& s) { log.push_back(s); });
    for (const auto& l : log)
        EXPECT_NE(l.rfind("run ", 0), 0u) << l;
    for (std::size_t i = 0; i < again.cells.size(); ++i)
        EXPECT_EQ(again.cells[i].miou, r.cells[i].miou);
    fs::remove_all(root);
}
