#include "dcv/rng.hpp"

#include <cmath>
#include <numbers>

#include "dcv/error.hpp"

namespace dcv {

double Rng::normal() {
    // Box-Muller; the second variate is discarded so every draw costs two counters.
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::size_t Rng::below(std::size_t n) {
    if (n == 0) throw ArgumentError("Rng::below(0)");
    // Rejection keeps the draw unbiased.
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t v = next_u64();
    while (v >= limit) v = next_u64();
    return static_cast<std::size_t>(v % n);
}

} // namespace dcv
