#include "dgkd/harness.hpp"

#include "dgkd/checkpoint.hpp"
#include "dgkd/image_io.hpp"
#include "dgkd/rng.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iterator>

#ifndef DGKD_CODE_HASH
#define DGKD_CODE_HASH "unknown"
#endif

namespace dgkd::harness {

namespace {

std::string utc_now()
{
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::string hex64(std::uint64_t v)
{
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

void write_json(const fs::path& path, const json& j)
{
    io::write_text_atomic(path, j.dump(2) + "\n");
}

template <class T>
void write_jsonl(const fs::path& path, const std::vector<T>& rows)
{
    std::string text;
    for (const auto& r : rows)
        text += wsss::to_json(r).dump() + "\n";
    io::write_text_atomic(path, text);
}

std::vector<json> read_jsonl(const fs::path& path)
{
    std::vector<json> out;
    std::ifstream in(path);
    if (!in)
        throw std::runtime_error("cannot open " + path.string());
    std::string line;
    while (std::getline(in, line))
        if (!line.empty())
            out.push_back(json::parse(line));
    return out;
}

bool split_present(const fs::path& dir)
{
    return fs::exists(dir / "train" / "manifest.json") && fs::exists(dir / "val" / "manifest.json");
}

// Builds into a scratch directory and renames, so a corpus is either complete or absent.
template <class F>
void build_atomically(const fs::path& dir, F&& build)
{
    if (split_present(dir))
        return;
    const fs::path tmp = dir.string() + ".partial";
    fs::remove_all(tmp);
    fs::create_directories(tmp);
    build(tmp);
    fs::remove_all(dir);
    fs::rename(tmp, dir);
}

std::vector<scene::SceneSample> load_split(const fs::path& dir, scene::Split s, const std::string& depth_dir)
{
    auto samples = scene::read_split(dir, s).samples;
    if (depth_dir.empty())
        return samples;
    for (auto& smp : samples) {
        char name[32];
        std::snprintf(name, sizeof name, "%05u_depth.png", smp.id);
        const fs::path p = fs::path(depth_dir) / scene::to_string(s) / name;
        const io::PngData png = io::read_png(p);
        if (png.width != smp.size || png.height != smp.size || png.channels != 1)
            throw std::runtime_error("imported depth map has the wrong size: " + p.string());
        for (std::size_t i = 0; i < smp.depth.size(); ++i)
            smp.depth[i] = scene::dequantize_unit(png.samples[i], png.bit_depth);
    }
    return samples;
}

} // namespace

fs::path output_root()
{
    const char* env = std::getenv("DGKD_LAB_OUT");
    return env && *env ? fs::path(env) : fs::path("dgkd-runs");
}

std::string content_hash(const fs::path& dir)
{
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file())
            files.push_back(e.path());
    std::sort(files.begin(), files.end());
    std::uint64_t h = 1469598103934665603ull;
    auto feed = [&](const char* p, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i) {
            h ^= static_cast<unsigned char>(p[i]);
            h *= 1099511628211ull;
        }
    };
    for (const auto& f : files) {
        const std::string rel = fs::relative(f, dir).generic_string();
        feed(rel.data(), rel.size() + 1);
        std::ifstream in(f, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        feed(bytes.data(), bytes.size());
    }
    return hex64(h);
}

std::string code_hash()
{
    return DGKD_CODE_HASH;
}

CorpusPaths ensure_corpus(const fs::path& root, const DataConfig& data)
{
    const json scene_key{{"spec", scene::spec_to_json(data.spec)},
                         {"train", data.train_count},
                         {"val", data.val_count}};
    CorpusPaths p;
    p.normal = root / "corpora" / ("scene-" + wsss::config_hash(scene_key));
    p.dark = root / "corpora"
             / ("scene-" + wsss::config_hash(scene_key) + "-dark-" + wsss::config_hash(lowlight::to_json(data.darken)));
    fs::create_directories(root / "corpora");
    build_atomically(p.normal, [&](const fs::path& tmp) {
        for (auto [split, count] :
             {std::pair{scene::Split::train, data.train_count}, std::pair{scene::Split::val, data.val_count}}) {
            scene::CorpusSplit cs;
            cs.spec = data.spec;
            cs.split = split;
            cs.samples = scene::generate_corpus(data.spec, count, split);
            scene::write_split(tmp, cs, json::object());
        }
    });
    build_atomically(p.dark, [&](const fs::path& tmp) { lowlight::darken_corpus(p.normal, tmp, data.darken); });
    return p;
}

json to_json(const RunManifest& m)
{
    return json{{"format", "dgkd-run-manifest"},
                {"version", 1},
                {"run_id", m.run_id},
                {"status", m.status},
                {"error", m.error},
                {"config", m.config},
                {"config_hash", m.config_hash},
                {"code_hash", m.code_hash},
                {"seeds", m.seeds},
                {"corpus_hashes", m.corpus_hashes},
                {"started", m.started},
                {"finished", m.finished},
                {"metric_summary", m.metric_summary},
                {"artifacts", m.artifacts}};
}

RunManifest manifest_from_json(const json& j)
{
    if (j.value("format", "") != "dgkd-run-manifest")
        throw std::runtime_error("not a run manifest");
    RunManifest m;
    m.run_id = j.at("run_id").get<std::string>();
    m.status = j.at("status").get<std::string>();
    m.error = j.value("error", "");
    m.config = j.at("config");
    m.config_hash = j.value("config_hash", "");
    m.code_hash = j.value("code_hash", "");
    m.seeds = j.value("seeds", json::object());
    m.corpus_hashes = j.value("corpus_hashes", json::object());
    m.started = j.value("started", "");
    m.finished = j.value("finished", "");
    m.metric_summary = j.value("metric_summary", json::object());
    m.artifacts = j.value("artifacts", json::object());
    return m;
}

fs::path run_dir(const fs::path& root, const std::string& run_id)
{
    return root / "runs" / run_id;
}

RunManifest read_manifest(const fs::path& root, const std::string& run_id)
{
    const fs::path p = run_dir(root, run_id) / "manifest.json";
    if (!fs::exists(p))
        throw std::runtime_error("no manifest for run '" + run_id + "' under " + root.string());
    return manifest_from_json(json::parse(io::read_text(p)));
}

std::string run_id_for(const json& resolved)
{
    const std::string name = resolved.at("run").at("name").get<std::string>();
    if (!name.empty())
        return name;
    return resolved.at("run").at("kind").get<std::string>() + "-s"
           + std::to_string(resolved.at("seed").get<std::uint64_t>()) + "-" + wsss::config_hash(resolved).substr(0, 8);
}

fs::path teacher_checkpoint(const fs::path& root, const std::string& ref)
{
    if (fs::exists(run_dir(root, ref) / "manifest.json")) {
        const RunManifest m = read_manifest(root, ref);
        if (m.status != "ok")
            throw ConfigError("run.teacher", "teacher run '" + ref + "' has status " + m.status);
        if (m.config.at("run").at("kind") != "teacher")
            throw ConfigError("run.teacher", "run '" + ref + "' is not a teacher run");
        return run_dir(root, ref) / m.artifacts.at("checkpoint").get<std::string>();
    }
    if (fs::is_regular_file(ref))
        return ref;
    throw ConfigError("run.teacher", "no teacher run or checkpoint named '" + ref + "'");
}

namespace {

wsss::SegNet network_from_checkpoint(const fs::path& path)
{
    const ckpt::Checkpoint ck = ckpt::load(path);
    const json meta = json::parse(ck.meta_json);
    wsss::SegNet net(wsss::segnet_from_json(meta.at("net")), 0);
    ckpt::restore(ck, net.params());
    return net;
}

json summary_of(const std::vector<wsss::MetricRecord>& metrics, std::int64_t steps)
{
    json s{{"steps", steps}, {"evals", metrics.size()}};
    if (metrics.empty())
        return s;
    const auto& last = metrics.back();
    double best = 0;
    for (const auto& m : metrics)
        best = std::max(best, m.miou);
    s["final_miou"] = last.miou;
    s["final_pixacc"] = last.pixacc;
    s["best_miou"] = best;
    s["final_per_class_iou"] = wsss::to_json(last).at("per_class_iou");
    return s;
}

} // namespace

wsss::SegNet load_network(const fs::path& root, const std::string& run_id)
{
    const RunManifest m = read_manifest(root, run_id);
    if (!m.artifacts.contains("checkpoint"))
        throw std::runtime_error("run '" + run_id + "' has no checkpoint");
    return network_from_checkpoint(run_dir(root, run_id) / m.artifacts.at("checkpoint").get<std::string>());
}

RunManifest run(const fs::path& root, const json& resolved)
{
    const Experiment e = experiment_from(resolved);
    RunManifest m;
    m.run_id = run_id_for(resolved);
    m.status = "running";
    m.config = resolved;
    m.config_hash = wsss::config_hash(resolved);
    m.code_hash = code_hash();
    const std::uint64_t seed = e.train.seed;
    m.seeds = json{{"root", seed}};
    for (const char* name : {"data", "init", "augmentation", "diffusion"})
        m.seeds["substreams"][name] = hex64(substream_seed(seed, name));
    m.started = utc_now();
    const fs::path dir = run_dir(root, m.run_id);
    fs::create_directories(dir);
    write_json(dir / "config.json", resolved);
    write_json(dir / "manifest.json", to_json(m));

    std::vector<wsss::MetricRecord> metrics;
    auto finish = [&](const std::string& status) {
        m.status = status;
        m.finished = utc_now();
        write_jsonl(dir / "metrics.jsonl", metrics);
        m.artifacts["config"] = "config.json";
        m.artifacts["metrics"] = "metrics.jsonl";
        write_json(dir / "manifest.json", to_json(m));
    };
    try {
        std::optional<wsss::SegNet> teacher;
        if (e.kind == RunKind::student && e.train.distill.enabled) {
            const fs::path tp = teacher_checkpoint(root, e.teacher);
            teacher.emplace(network_from_checkpoint(tp));
            m.artifacts["teacher_checkpoint"] = fs::absolute(tp).string();
        }
        const CorpusPaths corpus = ensure_corpus(root, e.data);
        m.corpus_hashes = json{{"normal", content_hash(corpus.normal)}, {"dark", content_hash(corpus.dark)}};
        m.artifacts["corpus_normal"] = fs::absolute(corpus.normal).string();
        m.artifacts["corpus_dark"] = fs::absolute(corpus.dark).string();
        write_json(dir / "manifest.json", to_json(m));

        auto normal_train = load_split(corpus.normal, scene::Split::train, e.depth_dir);
        auto hook = [&](const wsss::MetricRecord& r) { metrics.push_back(r); };
        wsss::TrainResult result = [&] {
            if (e.kind == RunKind::teacher) {
                wsss::Dataset d{normal_train, normal_train};
                return wsss::train_teacher(d, load_split(corpus.normal, scene::Split::val, e.depth_dir), e.train, hook);
            }
            wsss::Dataset d{load_split(corpus.dark, scene::Split::train, e.depth_dir), normal_train};
            return wsss::train_student(d, load_split(corpus.dark, scene::Split::val, e.depth_dir), teacher ? &*teacher : nullptr,
                                       e.train, hook);
        }();
        metrics = result.metrics;
        ckpt::save(dir / "checkpoint.ckpt", result.checkpoint);
        write_jsonl(dir / "losses.jsonl", result.losses);
        m.artifacts["checkpoint"] = "checkpoint.ckpt";
        m.artifacts["losses"] = "losses.jsonl";
        m.metric_summary = summary_of(metrics, e.train.steps);
        finish("ok");
    } catch (const std::exception& ex) {
        m.error = ex.what();
        m.metric_summary = summary_of(metrics, e.train.steps);
        finish("failed");
        throw;
    }
    return m;
}

std::vector<wsss::MetricRecord> read_metrics(const fs::path& root, const std::string& run_id)
{
    std::vector<wsss::MetricRecord> out;
    for (const json& j : read_jsonl(run_dir(root, run_id) / "metrics.jsonl")) {
        wsss::MetricRecord r;
        r.step = j.at("step").get<std::int64_t>();
        r.split = j.at("split").get<std::string>();
        r.miou = j.at("miou").get<double>();
        r.pixacc = j.at("pixacc").get<double>();
        for (const auto& v : j.at("per_class_iou"))
            r.per_class_iou.push_back(v.is_null() ? std::nan("") : v.get<double>());
        out.push_back(std::move(r));
    }
    return out;
}

std::vector<wsss::LossReport> read_losses(const fs::path& root, const std::string& run_id)
{
    std::vector<wsss::LossReport> out;
    for (const json& j : read_jsonl(run_dir(root, run_id) / "losses.jsonl")) {
        wsss::LossReport r;
        r.step = j.at("step").get<std::int64_t>();
        r.l_cls = j.at("l_cls").get<double>();
        r.l_seg = j.at("l_seg").get<double>();
        r.l_diff = j.at("l_diff").get<std::vector<double>>();
        r.l_kd = j.at("l_kd").get<std::vector<double>>();
        r.weights = j.at("weights").get<std::vector<double>>();
        r.l_overall = j.at("l_overall").get<double>();
        r.grad_norm = j.at("grad_norm").get<double>();
        out.push_back(std::move(r));
    }
    return out;
}

} // namespace dgkd::harness
