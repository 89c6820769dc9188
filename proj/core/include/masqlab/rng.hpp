#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace masqlab {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001B3ull;
    }
    return h;
}

}  // namespace detail

// Deterministic stream RNG with hierarchical splitting. Every consumer
// derives its own child stream from (seed, tag, index), so parallel work
// is order-independent and re-runs are bit-identical. Distributions are
// implemented here rather than via <random> so results do not depend on
// the standard library build.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed ^ 0xA3C59AC2B7F1ull) {
        // burn a few outputs so nearby seeds decorrelate
        next_u64();
        next_u64();
    }

    std::uint64_t next_u64() { return detail::splitmix64(state_); }

    // child stream; does not advance this stream
    Rng split(std::string_view tag, std::uint64_t index = 0) const {
        std::uint64_t s = state_ ^ detail::fnv1a64(tag);
        std::uint64_t tmp = s;
        std::uint64_t mixed = detail::splitmix64(tmp) + 0x9E3779B97F4A7C15ull * (index + 1);
        return Rng(mixed);
    }

    // uniform in [0, 1)
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // integer in [lo, hi] inclusive
    std::int64_t randint(std::int64_t lo, std::int64_t hi) {
        const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
        return lo + static_cast<std::int64_t>(next_u64() % span);
    }

    // standard normal via Box-Muller with a cached spare
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        // keep u1 away from 0 so log() stays finite
        u1 = 0.5 * 0x1.0p-53 + u1 * (1.0 - 0x1.0p-53);
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j =
                static_cast<std::size_t>(randint(0, static_cast<std::int64_t>(i) - 1));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::uint64_t state_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// Convenience for one-shot child seeds (used for per-sample streams).
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag,
                                 std::uint64_t index = 0) {
    std::uint64_t s = seed ^ detail::fnv1a64(tag);
    std::uint64_t out = detail::splitmix64(s);
    out += 0x9E3779B97F4A7C15ull * (index + 1);
    return detail::splitmix64(out);
}

}  // namespace masqlab
