#include "transflower/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "transflower/errors.hpp"

namespace transflower {

std::vector<double> gravity_probs(std::span<const double> masses, std::span<const double> distances,
                                  GravityParams params) {
    if (masses.size() != distances.size()) throw ShapeError("gravity_probs: masses and distances differ in length");
    if (masses.empty()) throw ValidationError("gravity_probs: no candidates");
    std::vector<double> logw(masses.size());
    double top = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < masses.size(); ++j) {
        if (!(distances[j] > 0)) throw ValidationError("gravity_probs: zero distance (origin among candidates)");
        if (!(masses[j] > 0)) throw ValidationError("gravity_probs: masses must be positive");
        logw[j] = params.beta * std::log(masses[j]) - params.gamma * std::log(distances[j]);
        top = std::max(top, logw[j]);
    }
    std::vector<double> p(masses.size());
    double z = 0.0;
    for (std::size_t j = 0; j < p.size(); ++j) z += (p[j] = std::exp(logw[j] - top));
    for (double& v : p) v /= z;
    return p;
}

namespace {

struct OriginTerms {
    std::vector<double> log_mass;
    std::vector<double> log_dist;
    std::vector<double> target;
};

double objective(const std::vector<OriginTerms>& data, double beta, double gamma) {
    double total = 0.0;
    std::vector<double> w;
    for (const auto& o : data) {
        const std::size_t n = o.target.size();
        w.resize(n);
        double top = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) top = std::max(top, w[j] = beta * o.log_mass[j] - gamma * o.log_dist[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) z += std::exp(w[j] - top);
        const double log_z = top + std::log(z);
        for (std::size_t j = 0; j < n; ++j)
            if (o.target[j] > 0) total -= o.target[j] * (w[j] - log_z);
    }
    return total;
}

struct GridBest {
    double beta, gamma, value;
};

// Grid coordinates are integers in units of kUnit so every point is the
// double nearest to its decimal value.
constexpr double kUnit = 200.0;  // 0.005

GridBest grid_search(const std::vector<OriginTerms>& data, int b0, int b1, int g0, int g1, int step) {
    GridBest best{b0 / kUnit, g0 / kUnit, std::numeric_limits<double>::infinity()};
    for (int b = b0; b <= b1; b += step) {
        for (int g = g0; g <= g1; g += step) {
            const double v = objective(data, b / kUnit, g / kUnit);
            // Strict improvement keeps the lowest (beta, gamma) among ties.
            if (v < best.value) best = {b / kUnit, g / kUnit, v};
        }
    }
    return best;
}

}  // namespace

GravityFit fit_gravity(const Dataset& dataset, std::span<const std::size_t> origins) {
    std::vector<OriginTerms> data;
    bool identifiable = false;
    for (auto o : origins) {
        OriginTerms t;
        double total = 0.0;
        for (const auto& e : dataset.outgoing(o)) {
            if (e.dest == o || !(e.volume > 0)) continue;
            const double r = dataset.distance(o, e.dest);
            const double m = dataset.regions()[e.dest].population();
            if (!(r > 0) || !(m > 0)) continue;
            t.log_mass.push_back(std::log(m));
            t.log_dist.push_back(std::log(r));
            t.target.push_back(e.volume);
            total += e.volume;
        }
        if (t.target.empty()) continue;
        for (double& v : t.target) v /= total;
        if (t.target.size() >= 2) identifiable = true;
        data.push_back(std::move(t));
    }

    GravityFit fit;
    if (!identifiable) {
        fit.warning = true;
        fit.params = {0.0, 0.0};
        fit.loss = 0.0;
        return fit;
    }

    constexpr double kBetaMax = 3.0, kGammaMax = 5.0;
    constexpr int kBetaEnd = 600, kGammaEnd = 1000, kCoarse = 10, kFine = 1;
    const GridBest coarse = grid_search(data, 0, kBetaEnd, 0, kGammaEnd, kCoarse);
    const int cb = static_cast<int>(std::lround(coarse.beta * kUnit));
    const int cg = static_cast<int>(std::lround(coarse.gamma * kUnit));
    const GridBest fine = grid_search(data, std::max(0, cb - kCoarse), std::min(kBetaEnd, cb + kCoarse),
                                      std::max(0, cg - kCoarse), std::min(kGammaEnd, cg + kCoarse), kFine);

    fit.params = {fine.beta, fine.gamma};
    fit.loss = fine.value / static_cast<double>(data.size());
    const double eps = 1e-9;
    fit.warning = fine.beta < eps || fine.beta > kBetaMax - eps || fine.gamma < eps || fine.gamma > kGammaMax - eps;
    return fit;
}

double radiation_score(double origin_population, double dest_population, double intervening) {
    const double pi = origin_population, pj = dest_population, s = intervening;
    if (!(pi > 0)) throw ValidationError("radiation: origin population must be positive");
    if (!(pj >= 0) || !(s >= 0)) throw ValidationError("radiation: populations must be non-negative");
    return pi * pj / ((pi + s) * (pi + pj + s));
}

RadiationResult radiation_probs(double origin_population, std::span<const double> dest_populations,
                                std::span<const double> intervening) {
    if (dest_populations.size() != intervening.size())
        throw ShapeError("radiation_probs: populations and intervening sums differ in length");
    if (dest_populations.empty()) throw ValidationError("radiation_probs: no candidates");
    RadiationResult r;
    r.probs.resize(dest_populations.size());
    double z = 0.0;
    for (std::size_t j = 0; j < r.probs.size(); ++j)
        z += (r.probs[j] = radiation_score(origin_population, dest_populations[j], intervening[j]));
    if (!(z > 0)) {
        r.warning = true;
        std::fill(r.probs.begin(), r.probs.end(), 1.0 / static_cast<double>(r.probs.size()));
        return r;
    }
    for (double& p : r.probs) p /= z;
    return r;
}

std::vector<double> intervening_populations(const Dataset& dataset, std::size_t origin) {
    const std::size_t n = dataset.regions().size();
    std::vector<double> dist(n);
    for (std::size_t u = 0; u < n; ++u) dist[u] = dataset.distance(origin, u);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dist[a] < dist[b]; });

    // Walk outward in groups of equal distance; a region's circle holds every
    // strictly closer region except the origin.
    std::vector<double> out(n, 0.0);
    double closer = 0.0;
    std::size_t i = 0;
    while (i < n) {
        std::size_t k = i;
        while (k < n && dist[order[k]] == dist[order[i]]) ++k;
        for (std::size_t t = i; t < k; ++t) out[order[t]] = closer;
        for (std::size_t t = i; t < k; ++t)
            if (order[t] != origin) closer += dataset.regions()[order[t]].population();
        i = k;
    }
    out[origin] = 0.0;
    return out;
}

double intervening_population(const Dataset& dataset, std::size_t origin, std::size_t dest) {
    const double r = dataset.distance(origin, dest);
    double s = 0.0;
    for (std::size_t u = 0; u < dataset.regions().size(); ++u) {
        if (u == origin || u == dest) continue;
        if (dataset.distance(origin, u) < r) s += dataset.regions()[u].population();
    }
    return s;
}

}  // namespace transflower
