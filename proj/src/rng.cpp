#include "transflower/rng.hpp"

#include <cmath>
#include <stdexcept>

namespace transflower {

namespace {
constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;
}

std::uint64_t mix64(std::uint64_t x) {
    x ^= x >> 30;
    x *= 0xBF58476D1CE4E5B9ULL;
    x ^= x >> 27;
    x *= 0x94D049BB133111EBULL;
    x ^= x >> 31;
    return x;
}

std::uint64_t stream_id(std::string_view name) {
    // FNV-1a
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : name) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

std::uint64_t combine_keys(std::initializer_list<std::uint64_t> keys) {
    std::uint64_t h = 0x243F6A8885A308D3ULL;
    for (auto k : keys) h = mix64(h ^ mix64(k + kGolden));
    return h;
}

CounterRng::CounterRng(std::uint64_t seed, std::uint64_t stream)
    : key_(combine_keys({seed, stream})) {}

std::uint64_t CounterRng::next_u64() {
    ++counter_;
    return mix64(key_ + counter_ * kGolden);
}

double CounterRng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double CounterRng::uniform_open() {
    return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
}

double CounterRng::normal() {
    // Box-Muller, one output per pair of uniforms.
    double u1 = uniform_open();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

std::uint64_t CounterRng::below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("CounterRng::below: n must be positive");
    // Lemire-style rejection to remove modulo bias.
    const std::uint64_t limit = (~std::uint64_t{0}) - (~std::uint64_t{0}) % n;
    std::uint64_t x;
    do {
        x = next_u64();
    } while (x >= limit);
    return x % n;
}

std::uint64_t CounterRng::poisson(double mean) {
    if (!(mean >= 0.0) || !std::isfinite(mean))
        throw std::invalid_argument("CounterRng::poisson: mean must be finite and >= 0");
    // Counts unit-rate exponential arrivals inside [0, mean]. Linear in the
    // mean, which is fine for per-region outflows.
    std::uint64_t k = 0;
    double t = -std::log(uniform_open());
    while (t <= mean) {
        ++k;
        t += -std::log(uniform_open());
    }
    return k;
}

}  // namespace transflower
