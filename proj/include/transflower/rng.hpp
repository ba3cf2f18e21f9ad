#ifndef TRANSFLOWER_RNG_HPP
#define TRANSFLOWER_RNG_HPP

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <string_view>
#include <utility>
#include <vector>

namespace transflower {

inline constexpr std::uint64_t kDefaultSeed = 1234;

/// SplitMix64 finalizer.
std::uint64_t mix64(std::uint64_t x);

/// Stable 64-bit hash of a name, used to derive named substreams.
std::uint64_t stream_id(std::string_view name);

/// Combines several keys (seed, stream, origin, epoch, ...) into one.
std::uint64_t combine_keys(std::initializer_list<std::uint64_t> keys);

/// Counter-based generator: output n is mix64(key + n * golden). Any
/// (key, counter) position can be reproduced without replaying the stream.
/// All distributions are implemented here so draws are identical across
/// standard libraries.
class CounterRng {
public:
    CounterRng(std::uint64_t seed, std::uint64_t stream);

    std::uint64_t next_u64();
    /// Uniform on [0, 1).
    double uniform();
    /// Uniform on (0, 1].
    double uniform_open();
    double normal();
    /// Uniform integer on [0, n); n must be positive.
    std::uint64_t below(std::uint64_t n);
    std::uint64_t poisson(double mean);

    template <typename T>
    void shuffle(std::vector<T>& items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(items[i - 1], items[j]);
        }
    }

    std::uint64_t counter() const { return counter_; }

private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

}  // namespace transflower

#endif  // TRANSFLOWER_RNG_HPP
