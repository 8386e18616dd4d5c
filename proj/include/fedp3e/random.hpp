#pragma once

#include <array>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace fedp3e {

using Rng = std::mt19937_64;

// Independent random streams. Every consumer derives its own sub-seed so
// results never depend on scheduling order.
enum class Stream : std::uint64_t {
    split = 1,
    partition,
    synthesize,
    init,
    train,
    dropout,
    gmm,
    perturb,
    kmeans,
    smote,
};

/// Mixes a base seed with a path of integers into a new 64-bit seed.
inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> path) {
    std::vector<std::uint32_t> words;
    words.reserve(2 * (path.size() + 1));
    auto push = [&](std::uint64_t v) {
        words.push_back(static_cast<std::uint32_t>(v & 0xffffffffu));
        words.push_back(static_cast<std::uint32_t>(v >> 32));
    };
    push(base);
    for (auto v : path) {
        push(v);
    }
    std::seed_seq seq(words.begin(), words.end());
    std::array<std::uint32_t, 2> out{};
    seq.generate(out.begin(), out.end());
    return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

inline std::uint64_t derive_seed(std::uint64_t base, Stream stream, std::initializer_list<std::uint64_t> path = {}) {
    std::vector<std::uint64_t> full{static_cast<std::uint64_t>(stream)};
    full.insert(full.end(), path.begin(), path.end());
    std::uint64_t seed = base;
    for (auto v : full) {
        seed = derive_seed(seed, {v});
    }
    return seed;
}

inline Rng make_rng(std::uint64_t base, Stream stream, std::initializer_list<std::uint64_t> path = {}) {
    return Rng(derive_seed(base, stream, path));
}

}  // namespace fedp3e
