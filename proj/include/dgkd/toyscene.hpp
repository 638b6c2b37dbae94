#pragma once

// Synthetic multi-object scenes with exact masks, image-level labels and an
// analytic depth map. Class identity is carried by (shape kind, base colour).

#include "dgkd/tensor.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

namespace dgkd::scene {

using Rgb = std::array<double, 3>;

/// Depth assigned to pixels not covered by any shape (near = 1, far = 0).
inline constexpr double kBackgroundDepth = 0.1;
inline constexpr double kColorJitter = 0.1;
inline constexpr double kTextureSigma = 0.02;

enum class Split { train, val };
std::string to_string(Split split);
Split split_from_string(const std::string& s);

enum class ShapeKind { rectangle, circle, triangle };
std::string to_string(ShapeKind kind);

struct SceneSpec {
    int image_size = 64;
    int num_classes = 3;
    int shapes_min = 1;
    int shapes_max = 3;
    std::vector<Rgb> palette;
    /// Camera distances mapped onto encoded depth (near -> 1, far -> just above background).
    double depth_near = 1.0;
    double depth_far = 10.0;
    std::uint64_t seed = 0;

    static SceneSpec toy_default();
    void validate() const;
};

ShapeKind shape_for_class(int class_id);

struct ShapeInstance {
    int class_id = 1; // 1..num_classes
    ShapeKind kind = ShapeKind::rectangle;
    double cx = 0, cy = 0;
    double half_w = 0, half_h = 0; // radius for circles
    double depth = 0.5;            // encoded, in (kBackgroundDepth, 1]
    Rgb color{};

    bool covers(double px, double py) const;
};

struct SceneSample {
    std::uint32_t id = 0;
    int size = 0;
    int num_classes = 0;
    Tensor image;                   // [3,H,W] in [0,1]
    std::vector<std::uint8_t> label_vec; // length num_classes, index c-1 for class c
    std::vector<std::uint8_t> gt_mask;   // H*W, 0 = background
    Tensor depth;                   // [H,W] in [0,1]
    std::vector<ShapeInstance> shapes;
};

/// One scene from an explicit seed. The coverage-constrained corpus is built on top.
SceneSample generate_sample(const SceneSpec& spec, std::uint64_t sample_seed, std::uint32_t id);

std::vector<SceneSample> generate_corpus(const SceneSpec& spec, int count, Split split);

/// Per-pixel max over covering shapes; kBackgroundDepth where nothing covers.
Tensor render_depth(const SceneSample& sample);

/// Class id of the nearest covering shape at every pixel.
std::vector<std::uint8_t> render_mask(const SceneSample& sample);

std::vector<std::uint8_t> labels_from_mask(const std::vector<std::uint8_t>& mask, int num_classes);

/// Quantisers shared with the corpus file format.
std::uint16_t quantize_unit(double v, int bits);
double dequantize_unit(std::uint16_t q, int bits);

// --- Corpus directory format ---------------------------------------------------
// <root>/<split>/manifest.json plus per-sample NNNNN_image.png (RGB, 8 or 16 bit),
// NNNNN_mask.png (8-bit palette, index = class id) and NNNNN_depth.png (16-bit gray).

struct CorpusSplit {
    SceneSpec spec;
    Split split = Split::train;
    std::vector<SceneSample> samples;
    int image_bits = 8;
};

nlohmann::json spec_to_json(const SceneSpec& spec);
SceneSpec spec_from_json(const nlohmann::json& j);

/// Writes one split; `extra` is merged into the manifest (e.g. a darkening config).
void write_split(const std::filesystem::path& root, const CorpusSplit& split, const nlohmann::json& extra);
CorpusSplit read_split(const std::filesystem::path& root, Split split);
nlohmann::json read_manifest(const std::filesystem::path& root, Split split);

} // namespace dgkd::scene
