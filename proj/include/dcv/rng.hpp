#pragma once

#include <cstddef>
#include <cstdint>
#include <utility>
#include <vector>

namespace dcv {

/// Counter-based generator: the i-th draw of a stream is a pure hash of
/// (key, i), so streams can be split off by tag without sharing state.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : key_(mix(seed ^ 0x6a09e667f3bcc909ULL)) {}

    /// Independent child stream identified by `tag`.
    Rng split(std::uint64_t tag) const { return Rng(key_, tag); }

    std::uint64_t next_u64() { return mix(key_ ^ mix(counter_++ + 0x9e3779b97f4a7c15ULL)); }

    /// Uniform in [0, 1) with 53 bits of resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    double normal();
    /// Uniform integer in [0, n).
    std::size_t below(std::size_t n);

    template <class T>
    void shuffle(std::vector<T>& items) {
        for (std::size_t i = items.size(); i > 1; --i) std::swap(items[i - 1], items[below(i)]);
    }

    std::uint64_t key() const noexcept { return key_; }

private:
    Rng(std::uint64_t parent_key, std::uint64_t tag) : key_(mix(parent_key + mix(tag + 0xbb67ae8584caa73bULL))) {}

    static std::uint64_t mix(std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

} // namespace dcv
