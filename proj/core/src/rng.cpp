#include "dawn/rng.hpp"

#include <cmath>

namespace dawn {
namespace {

constexpr uint64_t kGolden = 0x9e3779b97f4a7c15ull;

uint64_t splitmix64(uint64_t x) {
    x += kGolden;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

uint64_t fnv1a(uint64_t h, const void* data, size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

}  // namespace

uint64_t RngStream::next_u64() {
    return splitmix64(seed_ * kGolden + counter_++);
}

double RngStream::uniform() {
    // 53-bit mantissa construction, value in [0, 1).
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngStream::uniform(double lo, double hi) {
    return lo + (hi - lo) * uniform();
}

double RngStream::normal() {
    // Box-Muller without the cached spare: each call consumes exactly two
    // draws, keeping the stream position a pure function of call count.
    double u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log1p(-u1));
    return r * std::cos(2.0 * M_PI * u2);
}

int64_t RngStream::uniform_int(int64_t n) {
    if (n <= 0) return 0;
    const uint64_t bound = static_cast<uint64_t>(n);
    const uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return static_cast<int64_t>(x % bound);
}

RngStream RngStream::derive(std::string_view label) const {
    uint64_t h = fnv1a(0xcbf29ce484222325ull ^ seed_, label.data(), label.size());
    return RngStream(splitmix64(h));
}

RngStream RngStream::derive(std::string_view label, uint64_t index) const {
    uint64_t h = fnv1a(0xcbf29ce484222325ull ^ seed_, label.data(), label.size());
    h = fnv1a(h, &index, sizeof(index));
    return RngStream(splitmix64(h));
}

}  // namespace dawn
