#include "argen/image.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>

#include "argen/error.hpp"
#include "argen/rng.hpp"

namespace argen {

uint64_t Image::content_hash() const {
    uint64_t h0 = fnv1a64(&w, sizeof(w));
    h0 = fnv1a64(&h, sizeof(h), h0);
    return fnv1a64(px.data(), px.size(), h0);
}

void write_png(const std::string& path, const Image& img) {
    ARGEN_CHECK(img.w > 0 && img.h > 0, DataError, "write_png: empty image");
    FILE* f = std::fopen(path.c_str(), "wb");
    ARGEN_CHECK(f != nullptr, DataError, "write_png: cannot open " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(f);
        throw DataError("write_png: libpng failure for " + path);
    }
    png_init_io(png, f);
    // Fixed settings so identical pixels give identical bytes.
    png_set_compression_level(png, 6);
    png_set_filter(png, 0, PNG_FILTER_NONE);
    png_set_IHDR(png, info, png_uint_32(img.w), png_uint_32(img.h), 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_bytep> rows(size_t(img.h));
    for (int y = 0; y < img.h; ++y)
        rows[size_t(y)] = const_cast<png_bytep>(img.px.data() + size_t(y) * img.w * 3);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(f);
}

Image read_png(const std::string& path) {
    FILE* f = std::fopen(path.c_str(), "rb");
    ARGEN_CHECK(f != nullptr, DataError, "read_png: cannot open " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(f);
        throw DataError("read_png: libpng failure for " + path);
    }
    png_init_io(png, f);
    png_read_info(png, info);
    png_uint_32 w = png_get_image_width(png, info);
    png_uint_32 h = png_get_image_height(png, info);
    int color = png_get_color_type(png, info);
    int depth = png_get_bit_depth(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
        png_set_gray_to_rgb(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);
    Image img(static_cast<int>(w), static_cast<int>(h));
    std::vector<png_bytep> rows(static_cast<size_t>(h));
    for (png_uint_32 y = 0; y < h; ++y) rows[size_t(y)] = img.px.data() + size_t(y) * w * 3;
    png_read_image(png, rows.data());
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(f);
    return img;
}

Tensor image_to_tensor(const Image& img) {
    Tensor t({3, img.h, img.w});
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < img.h; ++y)
            for (int x = 0; x < img.w; ++x)
                t[(int64_t(c) * img.h + y) * img.w + x] = float(img.at(x, y)[c]) / 255.0f;
    return t;
}

Image tensor_to_image(const Tensor& t) {
    ARGEN_CHECK(t.ndim() == 3 && t.size(0) == 3, ShapeError, "tensor_to_image: need [3,H,W]");
    int h = t.size(1), w = t.size(2);
    Image img(w, h);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                float v = t[(int64_t(c) * h + y) * w + x];
                v = std::min(1.0f, std::max(0.0f, v));
                img.at(x, y)[c] = uint8_t(std::lround(v * 255.0f));
            }
    return img;
}

Tensor images_to_batch(const std::vector<Image>& images, size_t i0, size_t n) {
    ARGEN_CHECK(n > 0 && i0 + n <= images.size(), IndexError, "images_to_batch: bad range");
    int h = images[i0].h, w = images[i0].w;
    Tensor out({int(n), 3, h, w});
    for (size_t i = 0; i < n; ++i) {
        const Image& img = images[i0 + i];
        ARGEN_CHECK(img.h == h && img.w == w, ShapeError, "images_to_batch: mixed sizes");
        Tensor t = image_to_tensor(img);
        std::copy(t.data(), t.data() + t.numel(), out.data() + int64_t(i) * t.numel());
    }
    return out;
}

double image_rms(const Tensor& a, const Tensor& b) {
    ARGEN_CHECK(a.shape() == b.shape(), ShapeError, "image_rms: shape mismatch");
    double s = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        double d = double(a[i]) - b[i];
        s += d * d;
    }
    return std::sqrt(s / double(a.numel()));
}

}  // namespace argen
