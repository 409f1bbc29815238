#pragma once

// Small batch-assembly helpers shared by the two training stages.

#include <array>
#include <vector>

#include "dawn/dataset.hpp"
#include "dawn/image.hpp"
#include "dawn/motion.hpp"
#include "dawn/tensor.hpp"

namespace dawn::batching {

// [0,1] image -> [-1,1] CHW floats appended to out.
inline void append_chw_pm1(std::vector<float>& out, const ImageU8& img) {
    const int hw = img.h * img.w;
    const size_t base = out.size();
    out.resize(base + static_cast<size_t>(3) * hw);
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < hw; ++i)
            out[base + c * hw + i] = img.rgb[i * 3 + c] / 255.0f * 2.0f - 1.0f;
}

inline void append_chw_pm1(std::vector<float>& out, const ImageF& img) {
    const int hw = img.h * img.w;
    const size_t base = out.size();
    out.resize(base + static_cast<size_t>(3) * hw);
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < hw; ++i) out[base + c * hw + i] = img.rgb[i * 3 + c] * 2.0f - 1.0f;
}

inline void append_motion(std::vector<float>& out, const MotionImage& img) {
    out.insert(out.end(), img.chw.begin(), img.chw.end());
}

// proprio (x, y, grip, held) -> [-1,1]
inline void append_state_pm1(std::vector<float>& out, const std::array<float, 4>& st) {
    for (float v : st) out.push_back(v * 2.0f - 1.0f);
}

// Index of the first held-out episode; everything before it is the
// training split.
inline int train_split(const Dataset& data) {
    const int n = static_cast<int>(data.episodes.size());
    return n <= 1 ? n : std::max(1, n - std::max(1, n / 20));
}

}  // namespace dawn::batching
