#include <cmath>
#include <set>

#include "doctest.h"

#include "dawn/motion.hpp"

using namespace dawn;

TEST_CASE("encode basics") {
    PixelMotion zero = PixelMotion::zeros(4, 4);
    MotionImage img = encode_motion(zero, 16.f);
    for (float v : img.chw) CHECK(v == 0.f);

    PixelMotion m = PixelMotion::zeros(2, 2);
    for (int i = 0; i < 4; ++i) {
        m.u[i] = 16.f;
        m.v[i] = -16.f;
    }
    MotionImage e = encode_motion(m, 16.f);
    for (int i = 0; i < 4; ++i) {
        CHECK(e.chw[i] == 1.f);
        CHECK(e.chw[4 + i] == -1.f);
        CHECK(e.chw[8 + i] == 0.f);
    }

    CHECK_THROWS_AS(encode_motion(zero, 0.f), ConfigError);
    CHECK_THROWS_AS(encode_motion(zero, -1.f), ConfigError);
}

TEST_CASE("decode ignores the redundant channel but reports inconsistency") {
    PixelMotion m = PixelMotion::zeros(3, 3);
    RngStream rng(5);
    for (int i = 0; i < 9; ++i) {
        m.u[i] = static_cast<float>(rng.uniform(-10, 10));
        m.v[i] = static_cast<float>(rng.uniform(-10, 10));
    }
    MotionImage img = encode_motion(m, 16.f);
    DecodeStats st;
    PixelMotion rec = decode_motion(img, 16.f, &st);
    for (int i = 0; i < 9; ++i) {
        CHECK(rec.u[i] == doctest::Approx(m.u[i]).epsilon(1e-7));
        CHECK(rec.v[i] == doctest::Approx(m.v[i]).epsilon(1e-7));
    }
    CHECK(st.inconsistent == 0);
    CHECK(!st.warned);

    // corrupt the third channel everywhere -> diagnostic, still decodes
    for (int i = 0; i < 9; ++i) img.chw[18 + i] = 1.f;
    PixelMotion rec2 = decode_motion(img, 16.f, &st);
    CHECK(rec2.u[0] == rec.u[0]);
    CHECK(st.warned);

    // all-zero image decodes to zero flow
    MotionImage z;
    z.h = z.w = 2;
    z.chw.assign(12, 0.f);
    PixelMotion zf = decode_motion(z, 16.f);
    for (float v : zf.u) CHECK(v == 0.f);
}

TEST_CASE("colorize: neutral at rest, single hue per direction, injective on compass") {
    PixelMotion zero = PixelMotion::zeros(3, 3);
    ImageF white = colorize_motion(zero, 16.f);
    for (float v : white.rgb) CHECK(v == 1.f);

    // pure +u flow: one hue across the image
    PixelMotion right = PixelMotion::zeros(3, 3);
    for (auto& u : right.u) u = 12.f;
    ImageF img = colorize_motion(right, 16.f);
    for (int i = 1; i < 9; ++i) {
        CHECK(img.rgb[i * 3 + 0] == img.rgb[0]);
        CHECK(img.rgb[i * 3 + 1] == img.rgb[1]);
        CHECK(img.rgb[i * 3 + 2] == img.rgb[2]);
    }

    // eight compass directions at fixed magnitude map to distinct colors
    std::set<std::array<int, 3>> seen;
    for (int d = 0; d < 8; ++d) {
        const double ang = d * M_PI / 4.0;
        PixelMotion m = PixelMotion::zeros(1, 1);
        m.u[0] = static_cast<float>(10.0 * std::cos(ang));
        m.v[0] = static_cast<float>(10.0 * std::sin(ang));
        ImageF c = colorize_motion(m, 16.f);
        seen.insert({static_cast<int>(c.rgb[0] * 255), static_cast<int>(c.rgb[1] * 255),
                     static_cast<int>(c.rgb[2] * 255)});
    }
    CHECK(seen.size() == 8);
}

TEST_CASE("motion tensor bridge") {
    PixelMotion m = PixelMotion::zeros(4, 4);
    RngStream rng(9);
    for (int i = 0; i < 16; ++i) {
        m.u[i] = static_cast<float>(rng.uniform(-8, 8));
        m.v[i] = static_cast<float>(rng.uniform(-8, 8));
    }
    MotionImage img = encode_motion(m, 16.f);
    Tensor t = motion_to_tensor(img);
    CHECK(t.shape() == Shape{3, 4, 4});
    MotionImage back = tensor_to_motion(t);
    CHECK(back.chw == img.chw);
}
