#include "medmamba/data.hpp"

#include "medmamba/errors.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <fstream>
#include <memory>

// jpeglib.h expects FILE and size_t to be declared first.
#include <jpeglib.h>

namespace medmamba {

namespace {

struct JpegError {
    jpeg_error_mgr base;
    std::jmp_buf jump;
    char message[JMSG_LENGTH_MAX];
};

extern "C" void jpeg_error_exit(j_common_ptr cinfo) {
    auto* err = reinterpret_cast<JpegError*>(cinfo->err);
    (*cinfo->err->format_message)(cinfo, err->message);
    std::longjmp(err->jump, 1);
}

// Returns false and fills `message` on failure. `rgb` receives HWC bytes.
bool decode_jpeg(std::FILE* file, std::vector<unsigned char>& rgb, int& width, int& height, std::string& message) {
    jpeg_decompress_struct cinfo{};
    JpegError err{};
    cinfo.err = jpeg_std_error(&err.base);
    err.base.error_exit = jpeg_error_exit;
    if (setjmp(err.jump)) {
        message = err.message;
        jpeg_destroy_decompress(&cinfo);
        return false;
    }
    jpeg_create_decompress(&cinfo);
    jpeg_stdio_src(&cinfo, file);
    jpeg_read_header(&cinfo, TRUE);
    cinfo.out_color_space = JCS_RGB;
    jpeg_start_decompress(&cinfo);
    width = static_cast<int>(cinfo.output_width);
    height = static_cast<int>(cinfo.output_height);
    rgb.resize(static_cast<std::size_t>(width) * static_cast<std::size_t>(height) * 3);
    while (cinfo.output_scanline < cinfo.output_height) {
        JSAMPROW row = rgb.data() + static_cast<std::size_t>(cinfo.output_scanline) * static_cast<std::size_t>(width) * 3;
        jpeg_read_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_decompress(&cinfo);
    jpeg_destroy_decompress(&cinfo);
    return true;
}

Tensor<float> hwc_to_chw(const std::vector<unsigned char>& rgb, std::int64_t height, std::int64_t width) {
    std::vector<float> out(static_cast<std::size_t>(3 * height * width));
    const std::int64_t plane = height * width;
    for (std::int64_t p = 0; p < plane; ++p) {
        for (std::int64_t c = 0; c < 3; ++c) {
            out[static_cast<std::size_t>(c * plane + p)] = static_cast<float>(rgb[static_cast<std::size_t>(p * 3 + c)]) / 255.0f;
        }
    }
    return Tensor<float>::from({3, height, width}, std::move(out));
}

} // namespace

Tensor<float> read_image(const std::filesystem::path& path) {
    std::ifstream probe(path, std::ios::binary);
    if (!probe) {
        throw FormatError("cannot open image " + path.string());
    }
    unsigned char magic[8] = {};
    probe.read(reinterpret_cast<char*>(magic), sizeof magic);
    const auto got = probe.gcount();
    probe.close();

    if (got >= 8 && png_sig_cmp(magic, 0, 8) == 0) {
        png_image img{};
        img.version = PNG_IMAGE_VERSION;
        if (!png_image_begin_read_from_file(&img, path.c_str())) {
            throw FormatError("bad PNG " + path.string() + ": " + img.message);
        }
        img.format = PNG_FORMAT_RGB;
        std::vector<unsigned char> rgb(PNG_IMAGE_SIZE(img));
        if (!png_image_finish_read(&img, nullptr, rgb.data(), 0, nullptr)) {
            const std::string msg = img.message;
            png_image_free(&img);
            throw FormatError("bad PNG " + path.string() + ": " + msg);
        }
        return hwc_to_chw(rgb, img.height, img.width);
    }
    if (got >= 3 && magic[0] == 0xFF && magic[1] == 0xD8 && magic[2] == 0xFF) {
        std::unique_ptr<std::FILE, int (*)(std::FILE*)> file(std::fopen(path.c_str(), "rb"), &std::fclose);
        if (!file) {
            throw FormatError("cannot open image " + path.string());
        }
        std::vector<unsigned char> rgb;
        int width = 0;
        int height = 0;
        std::string message;
        if (!decode_jpeg(file.get(), rgb, width, height, message)) {
            throw FormatError("bad JPEG " + path.string() + ": " + message);
        }
        return hwc_to_chw(rgb, height, width);
    }
    throw FormatError("unrecognized image format: " + path.string());
}

void write_png(const std::filesystem::path& path, const Tensor<float>& image) {
    if (image.rank() != 3 || (image.dim(0) != 1 && image.dim(0) != 3)) {
        throw DimensionError("write_png: expects [1|3,H,W], got " + shape_str(image.shape()));
    }
    const auto c = image.dim(0);
    const auto h = image.dim(1);
    const auto w = image.dim(2);
    std::vector<unsigned char> buf(static_cast<std::size_t>(c * h * w));
    const auto v = image.data();
    for (std::int64_t p = 0; p < h * w; ++p) {
        for (std::int64_t ch = 0; ch < c; ++ch) {
            const float x = std::clamp(v[static_cast<std::size_t>(ch * h * w + p)], 0.0f, 1.0f);
            buf[static_cast<std::size_t>(p * c + ch)] = static_cast<unsigned char>(std::lround(x * 255.0f));
        }
    }
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(w);
    img.height = static_cast<png_uint_32>(h);
    img.format = c == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&img, path.c_str(), 0, buf.data(), 0, nullptr)) {
        const std::string msg = img.message;
        png_image_free(&img);
        throw FormatError("cannot write PNG " + path.string() + ": " + msg);
    }
}

} // namespace medmamba
