#pragma once

// Deterministic, platform-portable random streams (splitmix64).
//
// Every consumer derives its own substream from (seed, labels), so adding or
// reordering one consumer never perturbs the draws of another. Normal draws
// use the Irwin-Hall sum-of-12-uniforms approximation: it only needs IEEE
// add/sub/mul, so sequences are bit-identical across platforms.

#include <cstdint>
#include <initializer_list>
#include <vector>

#include "common.hpp"

namespace maxglavit {

inline uint64_t mix64(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

class RngState {
public:
    explicit RngState(uint64_t seed) : state_(mix64(seed ^ 0xD1B54A32D192ED03ULL)) {}

    // Independent stream keyed by (seed, labels).
    static RngState substream(uint64_t seed, std::initializer_list<uint64_t> labels) {
        uint64_t x = mix64(seed ^ 0xD1B54A32D192ED03ULL);
        for (uint64_t l : labels) x = mix64(x ^ mix64(l + 0x9E3779B97F4A7C15ULL));
        RngState r(0);
        r.state_ = x;
        return r;
    }

    uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ULL;
        return mix64(state_);
    }

    // [0, 1)
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Irwin-Hall: sum of 12 U(0,1) minus 6 approximates N(0,1), support [-6, 6].
    double normal(double mean, double std) {
        double s = 0.0;
        for (int i = 0; i < 12; ++i) s += uniform();
        return mean + std * (s - 6.0);
    }

    // Rejection-sampled normal clipped to mean +- clip*std.
    double truncated_normal(double mean, double std, double clip = 2.0) {
        for (;;) {
            double s = 0.0;
            for (int i = 0; i < 12; ++i) s += uniform();
            s -= 6.0;
            if (s >= -clip && s <= clip) return mean + std * s;
        }
    }

    // Uniform integer in [0, n), bias-free by rejection.
    int64_t below(int64_t n) {
        check(n > 0, "RngState::below requires n > 0");
        uint64_t un = uint64_t(n);
        uint64_t limit = UINT64_MAX - UINT64_MAX % un;
        for (;;) {
            uint64_t v = next_u64();
            if (v < limit) return int64_t(v % un);
        }
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (int64_t i = int64_t(v.size()) - 1; i > 0; --i) {
            int64_t j = below(i + 1);
            std::swap(v[size_t(i)], v[size_t(j)]);
        }
    }

private:
    uint64_t state_;
};

}  // namespace maxglavit
