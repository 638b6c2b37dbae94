#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace dgkd::io {

/// Raw decoded PNG: samples in row-major interleaved order. For palette
/// images `samples` holds palette indices and channels == 1.
struct PngData {
    int width = 0;
    int height = 0;
    int channels = 0;
    int bit_depth = 0;
    bool palette = false;
    std::vector<std::uint16_t> samples;
};

void write_png(const std::filesystem::path& path, int width, int height, int channels, int bit_depth,
               const std::vector<std::uint16_t>& samples);
void write_png_palette(const std::filesystem::path& path, int width, int height,
                       const std::vector<std::uint8_t>& indices,
                       const std::vector<std::array<std::uint8_t, 3>>& palette);
PngData read_png(const std::filesystem::path& path);

/// Atomic text write (temp file + rename).
void write_text_atomic(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

} // namespace dgkd::io
