#include "dgkd/image_io.hpp"

#include <png.h>

#include <csetjmp>
#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>
#include <stdexcept>

namespace dgkd::io {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const noexcept
    {
        if (f)
            std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::filesystem::path& path, const char* mode)
{
    FilePtr f(std::fopen(path.c_str(), mode));
    if (!f)
        throw std::runtime_error("cannot open " + path.string());
    return f;
}

void png_warn(png_structp, png_const_charp) {}

class PngWriter {
public:
    explicit PngWriter(std::FILE* f)
    {
        png_ = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, png_warn);
        info_ = png_create_info_struct(png_);
        if (!png_ || !info_)
            throw std::runtime_error("libpng: cannot allocate writer");
        png_init_io(png_, f);
    }
    ~PngWriter() { png_destroy_write_struct(&png_, &info_); }
    PngWriter(const PngWriter&) = delete;
    PngWriter& operator=(const PngWriter&) = delete;

    png_structp png_ = nullptr;
    png_infop info_ = nullptr;
};

class PngReader {
public:
    explicit PngReader(std::FILE* f)
    {
        png_ = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, png_warn);
        info_ = png_create_info_struct(png_);
        if (!png_ || !info_)
            throw std::runtime_error("libpng: cannot allocate reader");
        png_init_io(png_, f);
    }
    ~PngReader() { png_destroy_read_struct(&png_, &info_, nullptr); }
    PngReader(const PngReader&) = delete;
    PngReader& operator=(const PngReader&) = delete;

    png_structp png_ = nullptr;
    png_infop info_ = nullptr;
};

int color_type_for(int channels)
{
    switch (channels) {
    case 1:
        return PNG_COLOR_TYPE_GRAY;
    case 3:
        return PNG_COLOR_TYPE_RGB;
    case 4:
        return PNG_COLOR_TYPE_RGBA;
    default:
        throw std::invalid_argument("write_png: unsupported channel count " + std::to_string(channels));
    }
}

// The setjmp regions below only call libpng and touch memory owned by the
// caller, so nothing with a destructor lives in a frame that longjmp unwinds.
bool write_rows(png_structp png, png_infop info, int width, int height, int bit_depth, int color_type,
                const png_color* plte, int plte_size, const std::vector<png_bytep>& rows)
{
    if (setjmp(png_jmpbuf(png)))
        return false;
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), bit_depth,
                 color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    if (plte)
        png_set_PLTE(png, info, plte, plte_size);
    png_write_info(png, info);
    png_write_image(png, const_cast<png_bytepp>(rows.data()));
    png_write_end(png, nullptr);
    return true;
}

struct ReadHeader {
    int width = 0, height = 0, bit_depth = 0, channels = 0;
    bool palette = false;
    std::size_t rowbytes = 0;
};

bool read_header(png_structp png, png_infop info, ReadHeader* h)
{
    if (setjmp(png_jmpbuf(png)))
        return false;
    png_read_info(png, info);
    h->width = static_cast<int>(png_get_image_width(png, info));
    h->height = static_cast<int>(png_get_image_height(png, info));
    h->bit_depth = png_get_bit_depth(png, info);
    const int color_type = png_get_color_type(png, info);
    h->palette = color_type == PNG_COLOR_TYPE_PALETTE;
    if (h->bit_depth < 8) {
        if (h->palette)
            png_set_packing(png);
        else
            png_set_expand_gray_1_2_4_to_8(png);
        h->bit_depth = 8;
    }
    png_read_update_info(png, info);
    h->channels = png_get_channels(png, info);
    h->rowbytes = png_get_rowbytes(png, info);
    return true;
}

bool read_rows(png_structp png, png_infop info, const std::vector<png_bytep>& rows)
{
    if (setjmp(png_jmpbuf(png)))
        return false;
    png_read_image(png, const_cast<png_bytepp>(rows.data()));
    png_read_end(png, info);
    return true;
}

std::vector<png_bytep> row_pointers(std::vector<png_byte>& buf, int height, std::size_t rowbytes)
{
    std::vector<png_bytep> rows(static_cast<std::size_t>(height));
    for (int y = 0; y < height; ++y)
        rows[static_cast<std::size_t>(y)] = buf.data() + static_cast<std::size_t>(y) * rowbytes;
    return rows;
}

} // namespace

void write_png(const std::filesystem::path& path, int width, int height, int channels, int bit_depth,
               const std::vector<std::uint16_t>& samples)
{
    if (bit_depth != 8 && bit_depth != 16)
        throw std::invalid_argument("write_png: bit depth must be 8 or 16");
    if (samples.size() != static_cast<std::size_t>(width) * height * channels)
        throw std::invalid_argument("write_png: sample count mismatch for " + path.string());
    const int color_type = color_type_for(channels);
    const std::size_t bytes_per_sample = static_cast<std::size_t>(bit_depth / 8);
    const std::size_t rowbytes = static_cast<std::size_t>(width) * channels * bytes_per_sample;
    std::vector<png_byte> buf(rowbytes * height);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (bit_depth == 8) {
            buf[i] = static_cast<png_byte>(samples[i]);
        } else {
            buf[2 * i] = static_cast<png_byte>(samples[i] >> 8);
            buf[2 * i + 1] = static_cast<png_byte>(samples[i] & 0xff);
        }
    }
    auto rows = row_pointers(buf, height, rowbytes);
    FilePtr f = open_file(path, "wb");
    PngWriter w(f.get());
    if (!write_rows(w.png_, w.info_, width, height, bit_depth, color_type, nullptr, 0, rows))
        throw std::runtime_error("libpng failed writing " + path.string());
}

void write_png_palette(const std::filesystem::path& path, int width, int height,
                       const std::vector<std::uint8_t>& indices,
                       const std::vector<std::array<std::uint8_t, 3>>& palette)
{
    if (indices.size() != static_cast<std::size_t>(width) * height)
        throw std::invalid_argument("write_png_palette: index count mismatch");
    if (palette.empty() || palette.size() > 256)
        throw std::invalid_argument("write_png_palette: palette must have 1..256 entries");
    std::vector<png_color> plte(palette.size());
    for (std::size_t i = 0; i < palette.size(); ++i)
        plte[i] = {palette[i][0], palette[i][1], palette[i][2]};
    std::vector<png_byte> buf(indices.begin(), indices.end());
    auto rows = row_pointers(buf, height, static_cast<std::size_t>(width));
    FilePtr f = open_file(path, "wb");
    PngWriter w(f.get());
    if (!write_rows(w.png_, w.info_, width, height, 8, PNG_COLOR_TYPE_PALETTE, plte.data(),
                    static_cast<int>(plte.size()), rows))
        throw std::runtime_error("libpng failed writing " + path.string());
}

PngData read_png(const std::filesystem::path& path)
{
    FilePtr f = open_file(path, "rb");
    PngReader r(f.get());
    ReadHeader h;
    if (!read_header(r.png_, r.info_, &h))
        throw std::runtime_error("libpng failed reading header of " + path.string());
    std::vector<png_byte> buf(h.rowbytes * h.height);
    auto rows = row_pointers(buf, h.height, h.rowbytes);
    if (!read_rows(r.png_, r.info_, rows))
        throw std::runtime_error("libpng failed reading " + path.string());

    PngData out;
    out.width = h.width;
    out.height = h.height;
    out.bit_depth = h.bit_depth;
    out.channels = h.channels;
    out.palette = h.palette;
    const std::size_t per_row = static_cast<std::size_t>(out.width) * out.channels;
    out.samples.resize(per_row * out.height);
    for (int y = 0; y < out.height; ++y) {
        const png_byte* src = buf.data() + static_cast<std::size_t>(y) * h.rowbytes;
        std::uint16_t* dst = out.samples.data() + static_cast<std::size_t>(y) * per_row;
        for (std::size_t i = 0; i < per_row; ++i)
            dst[i] = out.bit_depth == 16 ? static_cast<std::uint16_t>((src[2 * i] << 8) | src[2 * i + 1]) : src[i];
    }
    return out;
}

void write_text_atomic(const std::filesystem::path& path, const std::string& text)
{
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os)
            throw std::runtime_error("cannot write " + tmp.string());
        os << text;
        if (!os)
            throw std::runtime_error("write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

std::string read_text(const std::filesystem::path& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw std::runtime_error("cannot read " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

} // namespace dgkd::io
