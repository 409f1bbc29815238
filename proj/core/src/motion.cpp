#include "dawn/motion.hpp"

#include <algorithm>
#include <cmath>

#include "dawn/common.hpp"

namespace dawn {

PixelMotion PixelMotion::zeros(int h, int w) {
    PixelMotion m;
    m.h = h;
    m.w = w;
    m.u.assign(static_cast<size_t>(h) * w, 0.f);
    m.v.assign(static_cast<size_t>(h) * w, 0.f);
    return m;
}

MotionImage encode_motion(const PixelMotion& m, float d_max) {
    if (d_max <= 0.f) throw ConfigError("encode_motion requires d_max > 0");
    MotionImage img;
    img.h = m.h;
    img.w = m.w;
    img.chw.resize(static_cast<size_t>(3) * m.h * m.w);
    const float inv = 1.0f / d_max;
    const int64_t n = m.numel();
    for (int64_t i = 0; i < n; ++i) {
        const float cu = std::clamp(m.u[i] * inv, -1.f, 1.f);
        const float cv = std::clamp(m.v[i] * inv, -1.f, 1.f);
        img.chw[i] = cu;
        img.chw[n + i] = cv;
        img.chw[2 * n + i] = std::clamp((m.u[i] + m.v[i]) * 0.5f * inv, -1.f, 1.f);
    }
    return img;
}

PixelMotion decode_motion(const MotionImage& img, float d_max, DecodeStats* stats) {
    PixelMotion m = PixelMotion::zeros(img.h, img.w);
    const int64_t n = m.numel();
    DecodeStats local;
    local.total = n;
    for (int64_t i = 0; i < n; ++i) {
        const float c0 = img.chw[i];
        const float c1 = img.chw[n + i];
        const float c2 = img.chw[2 * n + i];
        m.u[i] = c0 * d_max;
        m.v[i] = c1 * d_max;
        if (std::abs(c2 - 0.5f * (c0 + c1)) > 0.1f) ++local.inconsistent;
    }
    local.warned = local.total > 0 && local.inconsistent * 5 > local.total;
    if (stats) *stats = local;
    return m;
}

ImageF colorize_motion(const PixelMotion& m, float d_max) {
    ImageF img = ImageF::filled(m.h, m.w, 1.f, 1.f, 1.f);
    const int64_t n = m.numel();
    for (int64_t i = 0; i < n; ++i) {
        const float u = m.u[i], v = m.v[i];
        const float mag = std::sqrt(u * u + v * v);
        const float sat = std::clamp(mag / d_max, 0.f, 1.f);
        float hue = std::atan2(v, u);  // [-pi, pi]
        if (hue < 0) hue += 2.f * static_cast<float>(M_PI);
        const float hp = hue * 3.f / static_cast<float>(M_PI);  // [0,6)
        const float x = 1.f - std::abs(std::fmod(hp, 2.f) - 1.f);
        float r = 0, g = 0, b = 0;
        switch (static_cast<int>(hp) % 6) {
            case 0: r = 1, g = x; break;
            case 1: r = x, g = 1; break;
            case 2: g = 1, b = x; break;
            case 3: g = x, b = 1; break;
            case 4: r = x, b = 1; break;
            default: r = 1, b = x; break;
        }
        // desaturate toward white for small motion
        img.rgb[i * 3 + 0] = 1.f - sat * (1.f - r);
        img.rgb[i * 3 + 1] = 1.f - sat * (1.f - g);
        img.rgb[i * 3 + 2] = 1.f - sat * (1.f - b);
    }
    return img;
}

double epe(const PixelMotion& est, const PixelMotion& ref) {
    if (est.h != ref.h || est.w != ref.w) throw ShapeError("epe: size mismatch");
    double acc = 0.0;
    const int64_t n = est.numel();
    for (int64_t i = 0; i < n; ++i) {
        const double du = est.u[i] - ref.u[i];
        const double dv = est.v[i] - ref.v[i];
        acc += std::sqrt(du * du + dv * dv);
    }
    return n ? acc / n : 0.0;
}

Tensor motion_to_tensor(const MotionImage& img) {
    return Tensor::from_data({3, img.h, img.w}, img.chw);
}

MotionImage tensor_to_motion(const Tensor& t, int batch_index) {
    MotionImage img;
    const bool batched = t.ndim() == 4;
    img.h = static_cast<int>(batched ? t.size(2) : t.size(1));
    img.w = static_cast<int>(batched ? t.size(3) : t.size(2));
    const int64_t n = static_cast<int64_t>(3) * img.h * img.w;
    const float* base = t.data().data() + (batched ? batch_index * n : 0);
    img.chw.assign(base, base + n);
    for (float& v : img.chw) v = std::clamp(v, -1.f, 1.f);
    return img;
}

}  // namespace dawn
