#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace driftweight {

// Deterministic PRNG with platform-independent output. std::mt19937_64 is
// bit-reproducible everywhere, but the standard distributions are not, so
// uniform/normal/shuffle are implemented here from raw 64-bit draws.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {
        // splitmix64 warm-up so nearby seeds give unrelated streams
        next_u64();
        next_u64();
    }

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // uniform in [lo, hi)
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // standard normal via Box-Muller (one value per call, cache the pair)
    double normal() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double two_pi = 6.283185307179586476925286766559;
        cached_ = r * std::sin(two_pi * u2);
        has_cached_ = true;
        return r * std::cos(two_pi * u2);
    }

    bool bernoulli(double p) { return uniform() < p; }

    // uniform integer in [0, n), unbiased via rejection
    std::uint64_t below(std::uint64_t n) {
        const std::uint64_t threshold = (~n + 1) % n;  // 2^64 mod n
        for (;;) {
            const std::uint64_t r = next_u64();
            if (r >= threshold) return r % n;
        }
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[below(i)]);
        }
    }

    // n distinct indices from [0, pool) when possible, in draw order
    std::vector<std::size_t> sample_indices(std::size_t pool, std::size_t n) {
        if (n >= pool) {
            std::vector<std::size_t> all(pool);
            for (std::size_t i = 0; i < pool; ++i) all[i] = i;
            return all;
        }
        std::vector<std::size_t> idx(pool);
        for (std::size_t i = 0; i < pool; ++i) idx[i] = i;
        // partial Fisher-Yates: first n positions
        for (std::size_t i = 0; i < n; ++i) {
            std::swap(idx[i], idx[i + below(pool - i)]);
        }
        idx.resize(n);
        return idx;
    }

private:
    std::uint64_t state_;
    double cached_ = 0.0;
    bool has_cached_ = false;
};

// Derives a child seed from a root seed and a component tag, so every
// consumer (data, init, batch order, meta batches) gets its own stream.
inline std::uint64_t split_seed(std::uint64_t root, std::string_view tag) {
    std::uint64_t h = 0xcbf29ce484222325ULL ^ root;
    for (const char c : tag) {
        h ^= static_cast<std::uint64_t>(static_cast<unsigned char>(c));
        h *= 0x100000001b3ULL;
    }
    h ^= root << 32 | root >> 32;
    return h;
}

inline std::uint64_t split_seed(std::uint64_t root, std::string_view tag, std::uint64_t index) {
    return split_seed(root ^ (0x9e3779b97f4a7c15ULL * (index + 1)), tag);
}

}  // namespace driftweight
