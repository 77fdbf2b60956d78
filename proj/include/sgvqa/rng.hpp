#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>
#include <utility>
#include <vector>

namespace sgvqa {

/// FNV-1a, used to fold purpose strings into stream keys and to hash configs.
constexpr std::uint64_t fnv1a(std::string_view text, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Counter-based random stream keyed by (seed, purpose, index...).
///
/// Every random decision in the project draws from a stream obtained through
/// Rng::stream, so two experiments with the same seed see identical draws no
/// matter which other streams were consumed in between. The generator is
/// hand-rolled (splitmix64 over a counter, Box-Muller normals) because the
/// standard distributions are not bit-reproducible across library vendors.
class Rng {
   public:
    explicit Rng(std::uint64_t key) : key_(splitmix64(key)) {}

    static Rng stream(std::uint64_t seed, std::string_view purpose, std::uint64_t a = 0,
                      std::uint64_t b = 0, std::uint64_t c = 0) {
        std::uint64_t k = splitmix64(seed ^ 0x5851f42d4c957f2dULL);
        k = splitmix64(k ^ fnv1a(purpose));
        k = splitmix64(k ^ a);
        k = splitmix64(k ^ (b * 0x9e3779b97f4a7c15ULL));
        k = splitmix64(k ^ (c * 0xc2b2ae3d27d4eb4fULL));
        return Rng(k);
    }

    std::uint64_t next() { return splitmix64(key_ + 0x9e3779b97f4a7c15ULL * ++counter_); }

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        spare_ = r * std::sin(2.0 * std::numbers::pi * u2);
        has_spare_ = true;
        return r * std::cos(2.0 * std::numbers::pi * u2);
    }
    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    /// Uniform integer in [0, n). n must be positive.
    std::size_t below(std::size_t n) {
        // Rejection keeps the draw unbiased.
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t v = next();
        while (v >= limit) v = next();
        return static_cast<std::size_t>(v % n);
    }

    bool bernoulli(double p) { return uniform() < p; }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[below(i)]);
        }
    }

    std::uint64_t counter() const { return counter_; }

   private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace sgvqa
