#ifndef TRANSFLOWER_BATCH_HPP
#define TRANSFLOWER_BATCH_HPP

#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "transflower/geodata.hpp"
#include "transflower/nn.hpp"

namespace transflower {

/// Width of the per-flow geographic input: origin features, destination
/// features and the normalized distance.
inline constexpr std::size_t kGeoInputWidth = 2 * kFeatureCount + 1;

inline constexpr std::size_t kPaddingSlot = std::numeric_limits<std::size_t>::max();

/// One origin with its candidate destinations laid out in fixed slots.
/// Padded slots have mask false, target 0, dest kPaddingSlot and zero inputs.
struct OriginBatch {
    std::string origin_id;
    std::size_t origin = 0;
    std::vector<std::size_t> dests;
    std::vector<double> target;
    nn::Mask mask;
    /// Total outflow O_i of the origin (over all its observed flows).
    double outflow = 0.0;

    /// Model inputs, one row per slot.
    nn::Matrix geo_input;  // slots x kGeoInputWidth
    std::vector<Vec2> rel;  // origin minus destination, planar meters

    std::size_t slots() const { return mask.size(); }
    std::size_t active() const;
};

}  // namespace transflower

#endif  // TRANSFLOWER_BATCH_HPP
