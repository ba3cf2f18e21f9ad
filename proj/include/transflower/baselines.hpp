#ifndef TRANSFLOWER_BASELINES_HPP
#define TRANSFLOWER_BASELINES_HPP

#include <cstddef>
#include <span>
#include <vector>

#include "transflower/geodata.hpp"

namespace transflower {

struct GravityParams {
    double beta = 0.0;   // destination mass exponent
    double gamma = 0.0;  // distance decay exponent
};

/// Production-constrained gravity: P(j) ∝ m_j^β · r_j^{-γ} over the
/// candidates. Throws ValidationError on a zero distance or non-positive mass.
std::vector<double> gravity_probs(std::span<const double> masses, std::span<const double> distances,
                                  GravityParams params);

struct GravityFit {
    GravityParams params;
    /// Mean per-origin cross-entropy at the optimum.
    double loss = 0.0;
    /// Set when the data cannot identify the exponents (no origin with two
    /// or more candidates) or the optimum sits on the search boundary.
    bool warning = false;
};

/// Minimizes the summed cross-entropy over `origins` (their observed,
/// non-self destinations as candidates, destination population as mass) by a
/// grid search on β ∈ [0, 3], γ ∈ [0, 5] at step 0.05, then a local grid at
/// step 0.005 around the best point. Ties go to the lowest β, then γ.
GravityFit fit_gravity(const Dataset& dataset, std::span<const std::size_t> origins);

/// p_i p_j / ((p_i + S)(p_i + p_j + S)).
double radiation_score(double origin_population, double dest_population, double intervening);

struct RadiationResult {
    std::vector<double> probs;
    /// True when every raw score was zero and the uniform fallback was used.
    bool warning = false;
};

/// Raw radiation scores renormalized over the candidates.
RadiationResult radiation_probs(double origin_population, std::span<const double> dest_populations,
                                std::span<const double> intervening);

/// Total population of regions strictly closer to `origin` than `dest`,
/// excluding both endpoints.
double intervening_population(const Dataset& dataset, std::size_t origin, std::size_t dest);

/// intervening_population for every region as destination, in one pass.
std::vector<double> intervening_populations(const Dataset& dataset, std::size_t origin);

}  // namespace transflower

#endif  // TRANSFLOWER_BASELINES_HPP
