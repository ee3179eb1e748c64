#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

#include "suplora/matrix.hpp"

namespace suplora {

inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ull) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

/// Deterministic per-purpose stream seed: mixes the run seed with a textual
/// tag and an index so independent streams never alias.
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view tag,
                                 std::uint64_t index = 0) {
    std::uint64_t h = fnv1a64(tag);
    h = splitmix64(h ^ splitmix64(root));
    h = splitmix64(h ^ splitmix64(index + 0x518cull));
    return h;
}

/// mt19937_64 is fully specified by the standard, so identical seeds give
/// identical streams on every platform. The float mappings are hand-rolled
/// because the distribution classes are implementation-defined.
class Rng {
   public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    /// Uniform in [0, 1) with 53 random mantissa bits.
    double uniform01() {
        return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    /// Marsaglia polar method, deterministic given the stream.
    double gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * uniform01() - 1.0;
            v = 2.0 * uniform01() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        const double m = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * m;
        have_spare_ = true;
        return u * m;
    }

    std::vector<double> gaussian_vector(std::size_t n, double sigma = 1.0) {
        std::vector<double> out(n);
        for (double& x : out) x = sigma * gaussian();
        return out;
    }

    Matrix gaussian_matrix(std::size_t rows, std::size_t cols, double sigma = 1.0) {
        Matrix m(rows, cols);
        for (double& x : m.data) x = sigma * gaussian();
        return m;
    }

    /// Uniform integer in [0, n). Rejection-free is fine here: n is tiny
    /// relative to 2^64 so modulo bias is far below any tolerance in play.
    std::size_t uniform_index(std::size_t n) {
        return static_cast<std::size_t>(eng_() % static_cast<std::uint64_t>(n));
    }

   private:
    std::mt19937_64 eng_;
    bool have_spare_{false};
    double spare_{0.0};
};

}  // namespace suplora
