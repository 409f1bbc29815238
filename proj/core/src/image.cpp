#include "dawn/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "dawn/common.hpp"

namespace dawn {

ImageF ImageF::filled(int h, int w, float r, float g, float b) {
    ImageF img;
    img.h = h;
    img.w = w;
    img.rgb.resize(static_cast<size_t>(h) * w * 3);
    for (int i = 0; i < h * w; ++i) {
        img.rgb[i * 3 + 0] = r;
        img.rgb[i * 3 + 1] = g;
        img.rgb[i * 3 + 2] = b;
    }
    return img;
}

ImageU8 quantize(const ImageF& img) {
    ImageU8 out;
    out.h = img.h;
    out.w = img.w;
    out.rgb.resize(img.rgb.size());
    for (size_t i = 0; i < img.rgb.size(); ++i) {
        float v = std::clamp(img.rgb[i], 0.0f, 1.0f);
        out.rgb[i] = static_cast<uint8_t>(std::lround(v * 255.0f));
    }
    return out;
}

ImageF dequantize(const ImageU8& img) {
    ImageF out;
    out.h = img.h;
    out.w = img.w;
    out.rgb.resize(img.rgb.size());
    for (size_t i = 0; i < img.rgb.size(); ++i) out.rgb[i] = img.rgb[i] / 255.0f;
    return out;
}

void write_ppm(const std::string& path, const ImageU8& img) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path);
    f << "P6\n" << img.w << " " << img.h << "\n255\n";
    f.write(reinterpret_cast<const char*>(img.rgb.data()),
            static_cast<std::streamsize>(img.rgb.size()));
    if (!f) throw IoError("short write: " + path);
}

void write_ppm(const std::string& path, const ImageF& img) {
    write_ppm(path, quantize(img));
}

ImageF hstack(const std::vector<ImageF>& imgs) {
    if (imgs.empty()) return {};
    const int h = imgs[0].h;
    int w = 0;
    for (const auto& im : imgs) {
        if (im.h != h) throw ContractError("hstack: height mismatch");
        w += im.w;
    }
    const int div = 2;
    w += div * (static_cast<int>(imgs.size()) - 1);
    ImageF out = ImageF::filled(h, w, 0.1f, 0.1f, 0.1f);
    int x0 = 0;
    for (const auto& im : imgs) {
        for (int y = 0; y < h; ++y)
            std::copy_n(im.px(y, 0), im.w * 3, out.px(y, x0));
        x0 += im.w + div;
    }
    return out;
}

}  // namespace dawn
