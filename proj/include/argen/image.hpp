#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "argen/tensor.hpp"

namespace argen {

// 8-bit RGB image, row-major, interleaved channels.
struct Image {
    int w = 0, h = 0;
    std::vector<uint8_t> px;  // 3 * w * h

    Image() = default;
    Image(int width, int height) : w(width), h(height), px(size_t(3) * width * height, 0) {}

    uint8_t* at(int x, int y) { return px.data() + (size_t(y) * w + x) * 3; }
    const uint8_t* at(int x, int y) const { return px.data() + (size_t(y) * w + x) * 3; }
    void set(int x, int y, uint8_t r, uint8_t g, uint8_t b) {
        uint8_t* p = at(x, y);
        p[0] = r;
        p[1] = g;
        p[2] = b;
    }
    bool operator==(const Image& o) const { return w == o.w && h == o.h && px == o.px; }
    uint64_t content_hash() const;
};

void write_png(const std::string& path, const Image& img);
Image read_png(const std::string& path);

// CHW float tensor in [0,1] <-> 8-bit image.
Tensor image_to_tensor(const Image& img);
Image tensor_to_image(const Tensor& t);

// Root-mean-square difference over all channels and pixels, in [0,1] space.
double image_rms(const Tensor& a, const Tensor& b);

// Stack images[i0, i0+n) into a [n,3,H,W] batch.
Tensor images_to_batch(const std::vector<Image>& images, size_t i0, size_t n);

}  // namespace argen
