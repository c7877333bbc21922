#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace vagam {

/// Seeded engine for an independent substream. Streams are indexed so that
/// parallel work (simulation replicates, Monte Carlo blocks) can draw from
/// disjoint deterministic sequences regardless of execution order.
inline std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream = 0) {
    std::seed_seq seq{
        static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
        static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
    return std::mt19937_64(seq);
}

/// Empirical quantile by order statistic: the ceil(q*n)-th smallest value.
/// `values` is modified (partially sorted).
inline double empirical_quantile(std::vector<double>& values, double q) {
    const auto n = static_cast<long>(values.size());
    long idx = static_cast<long>(std::ceil(q * static_cast<double>(n))) - 1;
    if (idx < 0) idx = 0;
    if (idx >= n) idx = n - 1;
    std::nth_element(values.begin(), values.begin() + idx, values.end());
    return values[idx];
}

}  // namespace vagam
