#pragma once

#include <vector>

#include "dawn/image.hpp"
#include "dawn/tensor.hpp"

namespace dawn {

// Dense per-pixel displacement between frame t and t+k, in pixels of the
// static view. +u is rightward, +v is downward.
struct PixelMotion {
    int h = 0, w = 0;
    std::vector<float> u, v;  // h*w each

    static PixelMotion zeros(int h, int w);
    int64_t numel() const { return static_cast<int64_t>(h) * w; }
};

// Three-channel encoding (u, v, (u+v)/2) scaled by 1/d_max and clamped to
// [-1,1]; CHW layout. The third channel is redundant by construction.
struct MotionImage {
    int h = 0, w = 0;
    std::vector<float> chw;  // 3*h*w

    float& at(int c, int y, int x) { return chw[(c * h + y) * w + x]; }
    float at(int c, int y, int x) const { return chw[(c * h + y) * w + x]; }
};

MotionImage encode_motion(const PixelMotion& m, float d_max);

struct DecodeStats {
    int64_t inconsistent = 0;  // pixels with |c2-(c0+c1)/2| > 0.1
    int64_t total = 0;
    bool warned = false;       // more than 20% inconsistent
};
PixelMotion decode_motion(const MotionImage& img, float d_max, DecodeStats* stats = nullptr);

// Flow color wheel: hue from atan2(v,u), saturation from magnitude/d_max;
// zero motion maps to white.
ImageF colorize_motion(const PixelMotion& m, float d_max);

// End-point error, mean over pixels of |est - ref|_2.
double epe(const PixelMotion& est, const PixelMotion& ref);

// Tensor bridging ([3,H,W] <-> MotionImage; [B,3,H,W] row helpers).
Tensor motion_to_tensor(const MotionImage& img);
MotionImage tensor_to_motion(const Tensor& t, int batch_index = 0);

}  // namespace dawn
