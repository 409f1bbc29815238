#pragma once

#include <cstdint>
#include <string_view>

namespace dawn {

// Counter-based random stream: the state is (seed, counter) and every draw
// is a pure function of it, so identical (seed, counter) always replays the
// identical sequence. Streams derived with distinct labels are independent
// for test purposes.
class RngStream {
  public:
    explicit RngStream(uint64_t seed, uint64_t counter = 0)
        : seed_(seed), counter_(counter) {}

    uint64_t next_u64();
    double uniform();                 // [0, 1)
    double uniform(double lo, double hi);
    double normal();                  // standard normal, consumes two draws
    int64_t uniform_int(int64_t n);   // [0, n)

    // Independent child stream keyed by (seed, label). Does not advance
    // this stream's counter.
    RngStream derive(std::string_view label) const;
    RngStream derive(std::string_view label, uint64_t index) const;

    uint64_t seed() const { return seed_; }
    uint64_t counter() const { return counter_; }

  private:
    uint64_t seed_;
    uint64_t counter_;
};

}  // namespace dawn
