#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace segbench {

// SplitMix64 finalizer. Stateless mixing core of the project's PRNG.
inline uint64_t mix64(uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

// Counter-based generator: output i of stream (seed, stream) is
// mix64(key + i) with key = mix64(mix64(seed) ^ mix64(stream)).
// Pure function of (seed, stream, counter), so identical on every platform
// with 64-bit integers; per-sample streams are derived by stream id.
class CounterRng {
public:
    explicit CounterRng(uint64_t seed, uint64_t stream = 0)
        : key_(mix64(mix64(seed) ^ mix64(stream ^ 0xA5A5A5A5DEADBEEFull))) {}

    uint64_t next_u64() { return mix64(key_ + (++counter_)); }

    // [0,1), 53-bit resolution
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [0,n)
    int uniform_int(int n) { return static_cast<int>(next_u64() % static_cast<uint64_t>(n)); }

    // Box-Muller; consumes two uniforms per call, no cached spare
    double normal() {
        double u1 = 1.0 - uniform(); // (0,1], keeps log finite
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Fisher-Yates with this generator; deterministic for a given state
    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(next_u64() % i);
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    uint64_t key_;
    uint64_t counter_ = 0;
};

} // namespace segbench
