#pragma once

// Experiment orchestration: layered JSON configs, corpus caching, training
// runs with manifests, ablation plans and report rendering.

#include "dgkd/lowlight.hpp"
#include "dgkd/toyscene.hpp"
#include "dgkd/wsss.hpp"

#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace dgkd::harness {

namespace fs = std::filesystem;
using nlohmann::json;

/// Bad or inconsistent configuration. `path` is the dotted key path at fault.
class ConfigError : public std::runtime_error {
public:
    ConfigError(std::string path, const std::string& what)
        : std::runtime_error(path.empty() ? what : path + ": " + what)
        , path_(std::move(path))
    {
    }
    const std::string& path() const noexcept { return path_; }

private:
    std::string path_;
};

// --- configuration -----------------------------------------------------------

/// Built-in profiles: "toy-default", "dark-default", "paper-protocol".
std::vector<std::string> profile_names();
json builtin_profile(const std::string& name);

/// The complete default tree. Every accepted key appears here; user configs
/// may only set keys that exist in it, with a compatible type.
json default_tree();

/// Loads a config file and resolves "include" entries (profile names or paths
/// relative to the including file) depth-first, later layers overriding
/// earlier ones. The result carries no "include" key.
json load_layered(const fs::path& path);

/// Same, for an in-memory document whose relative includes resolve against `base_dir`.
json resolve_layers(const json& doc, const fs::path& base_dir);

/// Sets a dotted key ("dgkd.enabled") to a value parsed as JSON, falling back
/// to a plain string.
void set_dotted(json& tree, const std::string& dotted, const json& value);
json parse_scalar(const std::string& text);

/// Defaults merged under `overrides`, then checked key-by-key against the
/// default tree and semantically validated. Throws ConfigError.
json resolve(const json& overrides);

enum class RunKind { teacher, student };
std::string to_string(RunKind kind);

struct DataConfig {
    scene::SceneSpec spec;
    int train_count = 200;
    int val_count = 100;
    lowlight::DarkenConfig darken;
};

struct Experiment {
    RunKind kind = RunKind::student;
    std::string name;
    /// Teacher run id or checkpoint path; required when distillation is on.
    std::string teacher;
    /// Optional directory of imported depth maps (<split>/NNNNN_depth.png)
    /// replacing the corpus's analytic depth.
    std::string depth_dir;
    DataConfig data;
    wsss::TrainConfig train;
};

/// Converts a resolved tree; the root seed is propagated to the scene, the
/// darkening and the trainer.
Experiment experiment_from(const json& resolved);

/// Keys (dotted) whose values differ between two trees.
std::vector<std::string> diff_keys(const json& a, const json& b);

// --- filesystem layout -------------------------------------------------------

/// $DGKD_LAB_OUT, or "./dgkd-runs" when unset.
fs::path output_root();

struct CorpusPaths {
    fs::path normal;
    fs::path dark;
};

/// Generates and darkens the corpus under <root>/corpora unless already there.
CorpusPaths ensure_corpus(const fs::path& root, const DataConfig& data);

/// FNV-1a over every file in a directory tree (sorted by relative path).
std::string content_hash(const fs::path& dir);

/// Hash of the library sources this binary was built from.
std::string code_hash();

// --- runs --------------------------------------------------------------------

struct RunManifest {
    std::string run_id;
    std::string status; // running | ok | failed
    std::string error;
    json config;
    std::string config_hash;
    std::string code_hash;
    json seeds;
    json corpus_hashes;
    std::string started;
    std::string finished;
    json metric_summary;
    json artifacts;
};

json to_json(const RunManifest& m);
RunManifest manifest_from_json(const json& j);

fs::path run_dir(const fs::path& root, const std::string& run_id);
RunManifest read_manifest(const fs::path& root, const std::string& run_id);

/// Default run id: "<kind>-s<seed>-<config hash prefix>" unless run.name is set.
std::string run_id_for(const json& resolved);

/// Executes one resolved config: corpus, training, periodic eval,
/// checkpointing, metrics. On failure the manifest is written with
/// status=failed and the exception is rethrown.
RunManifest run(const fs::path& root, const json& resolved);

/// Metric and loss histories as written by run().
std::vector<wsss::MetricRecord> read_metrics(const fs::path& root, const std::string& run_id);
std::vector<wsss::LossReport> read_losses(const fs::path& root, const std::string& run_id);

/// Network restored from a run's checkpoint.
wsss::SegNet load_network(const fs::path& root, const std::string& run_id);

/// Resolves a teacher reference: an existing run id or a checkpoint path.
fs::path teacher_checkpoint(const fs::path& root, const std::string& ref);

// --- ablation ----------------------------------------------------------------

struct Variant {
    std::string name;
    RunKind kind = RunKind::student;
    /// Dotted key -> value, applied on top of the base config.
    json set = json::object();
};

struct Sweep {
    std::string name;
    std::string variant; // which variant the sweep perturbs
    std::string key;     // dotted
    std::vector<json> values;
    std::vector<double> reference; // full-scale values shown beside the sweep, may be empty
    std::vector<std::uint64_t> seeds; // empty = the plan's first seed
};

struct AblationPlan {
    std::string name = "ablation";
    json base = json::object();
    std::vector<std::uint64_t> seeds{1, 2, 3};
    std::vector<Variant> variants;
    std::vector<Sweep> sweeps;
};

/// Variants: teacher-normal, baseline-dark, +dgkd, +dgkd+dgf2. Sweeps over
/// dgf2.lambda and dgkd.ddim_steps on the last variant.
AblationPlan default_plan();
AblationPlan plan_from_json(const json& j, const fs::path& base_dir);
AblationPlan load_plan(const fs::path& path);

struct CellResult {
    std::string variant;
    std::uint64_t seed = 0;
    std::string run_id;
    bool ok = false;
    std::string error;
    double miou = 0, pixacc = 0;
};

struct AblationResult {
    std::vector<CellResult> cells;
    /// sweep name -> cells (variant field holds the swept value as text)
    std::vector<std::pair<std::string, std::vector<CellResult>>> sweeps;
    fs::path report_dir;
};

/// Resolved config for one variant at one seed; checks that it differs from
/// the base only in the variant's declared keys.
json variant_config(const AblationPlan& plan, const Variant& v, std::uint64_t seed);

/// Runs every variant x seed (teachers first, students pointing at the
/// teacher of the same seed), then optional sweeps, then writes the report.
AblationResult ablate(const fs::path& root, const AblationPlan& plan, bool with_sweeps,
                      const std::function<void(const std::string&)>& log = {});

// --- reporting ---------------------------------------------------------------

struct Series {
    std::string label;
    std::vector<double> x, y;
};

/// Static SVG line plot.
std::string svg_line_plot(const std::string& title, const std::string& x_label, const std::string& y_label,
                          const std::vector<Series>& series);

/// Five equally sized tiles side by side: image, dark image, pseudo-mask,
/// prediction, ground truth. Masks use the class palette. Returns the panel
/// size (width, height).
std::pair<int, int> write_panel(const fs::path& path, const Tensor& image, const Tensor& dark,
                                const std::vector<std::uint8_t>& pseudo, const std::vector<std::uint8_t>& pred,
                                const std::vector<std::uint8_t>& gt, const scene::SceneSpec& spec, int scale = 2);

/// Mean of each loss term over the final `tail` fraction of steps.
struct LossDecomposition {
    double l_cls = 0, l_seg = 0, sum_diff = 0, sum_kd = 0, total = 0;
    /// |recomputed total - logged total|, maximised over the window.
    double max_recompute_error = 0;
};
LossDecomposition decompose(const std::vector<wsss::LossReport>& losses, double tail = 0.1);

/// Renders tables, plots and qualitative panels for the listed runs into
/// `out_dir`. Missing runs are listed in the report; returns their ids.
std::vector<std::string> report(const fs::path& root, const std::vector<std::string>& run_ids,
                                const fs::path& out_dir, int panels = 3);

} // namespace dgkd::harness
