#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace dawn {

// Interleaved RGB, row-major, values in [0,1].
struct ImageF {
    int h = 0, w = 0;
    std::vector<float> rgb;  // h*w*3

    static ImageF filled(int h, int w, float r, float g, float b);
    float* px(int y, int x) { return rgb.data() + (y * w + x) * 3; }
    const float* px(int y, int x) const { return rgb.data() + (y * w + x) * 3; }
};

struct ImageU8 {
    int h = 0, w = 0;
    std::vector<uint8_t> rgb;  // h*w*3
};

ImageU8 quantize(const ImageF& img);
ImageF dequantize(const ImageU8& img);

// Binary PPM (P6).
void write_ppm(const std::string& path, const ImageU8& img);
void write_ppm(const std::string& path, const ImageF& img);

// Side-by-side montage with a 2px divider, heights must match.
ImageF hstack(const std::vector<ImageF>& imgs);

}  // namespace dawn
