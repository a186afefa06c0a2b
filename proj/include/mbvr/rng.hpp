#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace mbvr {

std::uint64_t fnv1a64(std::string_view s);
std::uint64_t mix64(std::uint64_t a, std::uint64_t b);

// Deterministic random stream. All distributions are hand-rolled on top of
// mt19937_64 so a (seed, stream) pair reproduces the same values on every
// run of the same build.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    // Named sub-stream: independent per purpose so adding a consumer does
    // not perturb the others.
    Rng(std::uint64_t seed, std::string_view stream)
        : gen_(mix64(seed, fnv1a64(stream))) {}

    std::uint64_t next() { return gen_(); }

    // Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(gen_() >> 11) * (1.0 / 9007199254740992.0);
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    std::uint64_t uniform_int(std::uint64_t n);

    // Uniform integer in [0, n) \ {exclude}. Requires n >= 2.
    std::uint64_t uniform_int_except(std::uint64_t n, std::uint64_t exclude);

    bool bernoulli(double p) { return uniform() < p; }

    // Box-Muller with cached spare.
    double gaussian();

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 gen_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

} // namespace mbvr
