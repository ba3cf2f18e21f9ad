#include "transflower/geodata.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>
#include <unordered_set>

#include "transflower/csv.hpp"
#include "transflower/errors.hpp"
#include "transflower/rng.hpp"

namespace transflower {

const std::array<std::string_view, kFeatureCount> kFeatureNames = {
    "population",          "food_pt_amenity",      "food_pt_shop",         "food_poly_amenity",
    "food_poly_shop",      "retail_pt_amenity",    "retail_pt_shop",       "retail_poly_amenity",
    "retail_poly_shop",    "edu_pt_amenity",       "edu_poly_amenity",     "edu_poly_building",
    "health_pt_amenity",   "health_poly_amenity",  "health_poly_building", "transport_pt_amenity",
    "transport_pt_public", "transport_poly_amenity", "transport_poly_building",
    "transport_poly_public"};

namespace {

std::string regions_header() {
    std::string header = "region_id,x,y";
    for (auto name : kFeatureNames) {
        header += ',';
        header += name;
    }
    return header;
}

constexpr double kDegToRad = M_PI / 180.0;

void require_finite(Vec2 p, const char* what) {
    if (!std::isfinite(p.x) || !std::isfinite(p.y))
        throw ValidationError(std::string(what) + ": non-finite coordinate");
}

}  // namespace

CrsMode parse_crs(std::string_view text) {
    if (text == "planar") return CrsMode::planar;
    if (text == "geodesic") return CrsMode::geodesic;
    throw ValidationError("unknown crs mode '" + std::string(text) + "' (expected planar or geodesic)");
}

std::string_view to_string(CrsMode mode) {
    return mode == CrsMode::planar ? "planar" : "geodesic";
}

RegionTable::RegionTable(std::vector<Region> regions) : regions_(std::move(regions)) {
    index_.reserve(regions_.size());
    for (std::size_t i = 0; i < regions_.size(); ++i) {
        const Region& r = regions_[i];
        require_finite(r.centroid, "region centroid");
        for (std::size_t k = 0; k < kFeatureCount; ++k) {
            if (!(r.features[k] >= 0.0) || !std::isfinite(r.features[k]))
                throw ValidationError("region '" + r.id + "': feature " + std::string(kFeatureNames[k]) +
                                      " must be finite and >= 0");
        }
        if (!index_.emplace(r.id, i).second)
            throw ValidationError("duplicate region id '" + r.id + "'");
    }
}

std::optional<std::size_t> RegionTable::find(std::string_view id) const {
    auto it = index_.find(std::string(id));
    if (it == index_.end()) return std::nullopt;
    return it->second;
}

std::size_t RegionTable::index_of(std::string_view id) const {
    auto found = find(id);
    if (!found) throw ValidationError("unknown region id '" + std::string(id) + "'");
    return *found;
}

RegionTable load_regions(const std::filesystem::path& path) {
    auto lines = csv::read_lines(path);
    if (lines.empty()) throw ParseError(path.string() + ": empty file, expected header");
    if (csv::split_line(lines[0]) != csv::split_line(regions_header()))
        throw ParseError(path.string() + ":1: header does not match the regions schema");

    std::vector<Region> regions;
    for (std::size_t ln = 1; ln < lines.size(); ++ln) {
        if (lines[ln].empty()) continue;
        const std::string where = path.string() + ":" + std::to_string(ln + 1);
        auto fields = csv::split_line(lines[ln]);
        if (fields.size() != 3 + kFeatureCount)
            throw ParseError(where + ": expected " + std::to_string(3 + kFeatureCount) + " columns, got " +
                             std::to_string(fields.size()));
        Region r;
        r.id = fields[0];
        if (r.id.empty()) throw ParseError(where + ": empty region_id");
        r.centroid = {csv::parse_double(fields[1], where), csv::parse_double(fields[2], where)};
        for (std::size_t k = 0; k < kFeatureCount; ++k)
            r.features[k] = csv::parse_double(fields[3 + k], where);
        regions.push_back(std::move(r));
    }
    return RegionTable(std::move(regions));
}

std::vector<Flow> load_flows(const std::filesystem::path& path, const RegionTable& regions) {
    auto lines = csv::read_lines(path);
    if (lines.empty()) throw ParseError(path.string() + ": empty file, expected header");
    if (csv::split_line(lines[0]) != std::vector<std::string>{"origin_id", "dest_id", "volume"})
        throw ParseError(path.string() + ":1: header must be origin_id,dest_id,volume");

    std::vector<Flow> flows;
    std::set<std::pair<std::size_t, std::size_t>> seen;
    for (std::size_t ln = 1; ln < lines.size(); ++ln) {
        if (lines[ln].empty()) continue;
        const std::string where = path.string() + ":" + std::to_string(ln + 1);
        auto fields = csv::split_line(lines[ln]);
        if (fields.size() != 3)
            throw ParseError(where + ": expected 3 columns, got " + std::to_string(fields.size()));
        Flow f{fields[0], fields[1], csv::parse_double(fields[2], where)};
        auto o = regions.find(f.origin_id);
        auto d = regions.find(f.dest_id);
        if (!o) throw ValidationError(where + ": unknown region id '" + f.origin_id + "'");
        if (!d) throw ValidationError(where + ": unknown region id '" + f.dest_id + "'");
        if (!(f.volume >= 0.0) || !std::isfinite(f.volume))
            throw ValidationError(where + ": negative or non-finite volume");
        if (!seen.emplace(*o, *d).second)
            throw ValidationError(where + ": duplicate flow " + f.origin_id + " -> " + f.dest_id);
        flows.push_back(std::move(f));
    }
    return flows;
}

void write_regions(const std::filesystem::path& path, const RegionTable& regions) {
    auto out = csv::open_output(path);
    out << regions_header() << '\n';
    for (const Region& r : regions) {
        out << r.id << ',' << csv::format_double(r.centroid.x) << ',' << csv::format_double(r.centroid.y);
        for (double f : r.features) out << ',' << csv::format_double(f);
        out << '\n';
    }
}

void write_flows(const std::filesystem::path& path, std::span<const Flow> flows) {
    auto out = csv::open_output(path);
    out << "origin_id,dest_id,volume\n";
    for (const Flow& f : flows)
        out << f.origin_id << ',' << f.dest_id << ',' << csv::format_double(f.volume) << '\n';
}

double distance(Vec2 a, Vec2 b, CrsMode mode) {
    require_finite(a, "distance");
    require_finite(b, "distance");
    if (mode == CrsMode::planar) return (a - b).norm();
    if (std::abs(a.y) > 90.0 || std::abs(b.y) > 90.0)
        throw ValidationError("distance: latitude outside [-90, 90]");
    const double lat1 = a.y * kDegToRad, lat2 = b.y * kDegToRad;
    const double dlat = lat2 - lat1;
    const double dlon = (b.x - a.x) * kDegToRad;
    const double h = std::sin(dlat / 2) * std::sin(dlat / 2) +
                     std::cos(lat1) * std::cos(lat2) * std::sin(dlon / 2) * std::sin(dlon / 2);
    return 2.0 * kEarthRadiusM * std::asin(std::min(1.0, std::sqrt(h)));
}

Vec2 relative_location(Vec2 origin, Vec2 dest) {
    require_finite(origin, "relative_location");
    require_finite(dest, "relative_location");
    return origin - dest;
}

Vec2 project_equirectangular(Vec2 lonlat, Vec2 reference) {
    const double lat0 = reference.y * kDegToRad;
    return {kEarthRadiusM * (lonlat.x - reference.x) * kDegToRad * std::cos(lat0),
            kEarthRadiusM * (lonlat.y - reference.y) * kDegToRad};
}

double total_outflow(std::span<const Flow> flows, const RegionTable& regions, std::string_view origin_id) {
    regions.index_of(origin_id);
    double total = 0.0;
    for (const Flow& f : flows)
        if (f.origin_id == origin_id) total += f.volume;
    return total;
}

Dataset::Dataset(RegionTable regions, std::vector<Flow> flows, CrsMode crs)
    : regions_(std::move(regions)), flows_(std::move(flows)), crs_(crs) {
    const std::size_t n = regions_.size();
    planar_.resize(n);
    if (crs_ == CrsMode::planar) {
        for (std::size_t i = 0; i < n; ++i) planar_[i] = regions_[i].centroid;
    } else {
        Vec2 ref;
        for (const Region& r : regions_) ref = ref + r.centroid;
        if (n > 0) ref = (1.0 / static_cast<double>(n)) * ref;
        for (std::size_t i = 0; i < n; ++i) planar_[i] = project_equirectangular(regions_[i].centroid, ref);
    }

    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) lambda_max_ = std::max(lambda_max_, distance(i, j));

    outgoing_.assign(n, {});
    outflow_.assign(n, 0.0);
    std::set<std::pair<std::size_t, std::size_t>> seen;
    for (const Flow& f : flows_) {
        FlowEdge e{regions_.index_of(f.origin_id), regions_.index_of(f.dest_id), f.volume};
        if (!(e.volume >= 0.0)) throw ValidationError("negative volume on flow " + f.origin_id + " -> " + f.dest_id);
        if (!seen.emplace(e.origin, e.dest).second)
            throw ValidationError("duplicate flow " + f.origin_id + " -> " + f.dest_id);
        outgoing_[e.origin].push_back(e);
        outflow_[e.origin] += e.volume;
    }
}

double Dataset::distance(std::size_t a, std::size_t b) const {
    return transflower::distance(regions_[a].centroid, regions_[b].centroid, crs_);
}

Vec2 Dataset::relative_location(std::size_t origin, std::size_t dest) const {
    return transflower::relative_location(planar_[origin], planar_[dest]);
}

std::vector<std::size_t> Dataset::origins_with_flows() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < outgoing_.size(); ++i)
        if (!outgoing_[i].empty()) out.push_back(i);
    return out;
}

std::string_view to_string(SplitPart part) {
    switch (part) {
        case SplitPart::train: return "train";
        case SplitPart::val: return "val";
        case SplitPart::test: return "test";
    }
    return "?";
}

const std::vector<std::string>& SplitAssignment::part(SplitPart p) const {
    switch (p) {
        case SplitPart::train: return train_origins;
        case SplitPart::val: return val_origins;
        case SplitPart::test: return test_origins;
    }
    return test_origins;
}

SplitAssignment split_by_origin(const Dataset& dataset, SplitRatios ratios, std::uint64_t seed) {
    if (!(ratios.train > 0 && ratios.val > 0 && ratios.test > 0) ||
        std::abs(ratios.train + ratios.val + ratios.test - 1.0) > 1e-9)
        throw ValidationError("split ratios must be positive and sum to 1");
    auto origins = dataset.origins_with_flows();
    const std::size_t n = origins.size();
    if (n < 3) throw ValidationError("split_by_origin: need at least 3 origins with flows, got " + std::to_string(n));

    CounterRng rng(seed, stream_id("split"));
    rng.shuffle(origins);

    std::array<std::size_t, 3> sizes = {static_cast<std::size_t>(std::llround(ratios.train * n)),
                                        static_cast<std::size_t>(std::llround(ratios.val * n)), 0};
    sizes[0] = std::min(sizes[0], n);
    sizes[1] = std::min(sizes[1], n - sizes[0]);
    sizes[2] = n - sizes[0] - sizes[1];
    for (std::size_t k = 0; k < 3; ++k) {
        if (sizes[k] == 0) {
            auto largest = std::max_element(sizes.begin(), sizes.end());
            --*largest;
            sizes[k] = 1;
        }
    }

    SplitAssignment split;
    split.seed = seed;
    std::size_t pos = 0;
    for (std::size_t k = 0; k < 3; ++k) {
        auto& target = k == 0 ? split.train_origins : (k == 1 ? split.val_origins : split.test_origins);
        std::vector<std::size_t> part(origins.begin() + pos, origins.begin() + pos + sizes[k]);
        std::sort(part.begin(), part.end());
        for (auto idx : part) target.push_back(dataset.regions()[idx].id);
        pos += sizes[k];
    }
    return split;
}

void write_split(const std::filesystem::path& path, const SplitAssignment& split) {
    auto out = csv::open_output(path);
    out << "region_id,split\n";
    for (SplitPart p : {SplitPart::train, SplitPart::val, SplitPart::test})
        for (const auto& id : split.part(p)) out << id << ',' << to_string(p) << '\n';
}

SplitAssignment load_split(const std::filesystem::path& path) {
    auto lines = csv::read_lines(path);
    if (lines.empty() || csv::split_line(lines[0]) != std::vector<std::string>{"region_id", "split"})
        throw ParseError(path.string() + ":1: header must be region_id,split");
    SplitAssignment split;
    std::unordered_set<std::string> seen;
    for (std::size_t ln = 1; ln < lines.size(); ++ln) {
        if (lines[ln].empty()) continue;
        auto fields = csv::split_line(lines[ln]);
        const std::string where = path.string() + ":" + std::to_string(ln + 1);
        if (fields.size() != 2) throw ParseError(where + ": expected 2 columns");
        if (!seen.insert(fields[0]).second) throw ValidationError(where + ": region listed twice");
        if (fields[1] == "train") split.train_origins.push_back(fields[0]);
        else if (fields[1] == "val") split.val_origins.push_back(fields[0]);
        else if (fields[1] == "test") split.test_origins.push_back(fields[0]);
        else throw ParseError(where + ": unknown split '" + fields[1] + "'");
    }
    return split;
}

std::vector<std::size_t> split_indices(const Dataset& dataset, const SplitAssignment& split, SplitPart part) {
    std::vector<std::size_t> out;
    for (const auto& id : split.part(part)) out.push_back(dataset.regions().index_of(id));
    return out;
}

void SynthConfig::validate() const {
    auto fail = [](const std::string& what) { throw ValidationError("synth config: " + what); };
    if (n_regions < 4) fail("n_regions must be >= 4");
    if (!(extent_m > 0) || !std::isfinite(extent_m)) fail("extent_m must be positive");
    if (!(jitter >= 0 && jitter < 1)) fail("jitter must be in [0, 1)");
    if (!(pop_log_sigma >= 0) || !std::isfinite(pop_log_mean)) fail("invalid population law");
    if (!(poi_per_thousand >= 0)) fail("poi_per_thousand must be >= 0");
    if (!std::isfinite(beta0)) fail("beta0 must be finite");
    if (!(gamma0 >= 0) || !std::isfinite(gamma0)) fail("gamma0 must be >= 0");
    if (!(epsilon >= 0 && epsilon < 1)) fail("epsilon must be in [0, 1)");
    if (!std::isfinite(theta0)) fail("theta0 must be finite");
    if (!(mean_outflow > 0) || !std::isfinite(mean_outflow)) fail("mean_outflow must be positive");
}

double mean_pairwise_distance(const RegionTable& regions) {
    const std::size_t n = regions.size();
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) total += (regions[i].centroid - regions[j].centroid).norm();
    return n > 1 ? 2.0 * total / static_cast<double>(n * (n - 1)) : 0.0;
}

std::vector<double> synth_flow_probabilities(const RegionTable& regions, const SynthConfig& config,
                                             std::size_t origin, double mean_distance) {
    const std::size_t n = regions.size();
    std::vector<double> logw(n, -INFINITY);
    double top = -INFINITY;
    const Vec2 o = regions[origin].centroid;
    for (std::size_t j = 0; j < n; ++j) {
        if (j == origin) continue;
        const Vec2 rl = relative_location(o, regions[j].centroid);
        const double bearing = std::atan2(rl.y, rl.x);
        const double decay =
            config.gamma0 * (1.0 + config.epsilon * std::cos(2.0 * (bearing - config.theta0)));
        const double mass = std::max(regions[j].population(), 1e-12);
        logw[j] = config.beta0 * std::log(mass) - decay * rl.norm() / mean_distance;
        top = std::max(top, logw[j]);
    }
    std::vector<double> p(n, 0.0);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
        if (j == origin) continue;
        p[j] = std::exp(logw[j] - top);
        z += p[j];
    }
    for (double& v : p) v /= z;
    return p;
}

Dataset synth_city(const SynthConfig& config, std::uint64_t seed) {
    config.validate();
    const int n = config.n_regions;
    const int side = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n))));
    const double cell = config.extent_m / side;

    CounterRng place_rng(seed, stream_id("synth/place"));
    CounterRng feature_rng(seed, stream_id("synth/features"));
    std::vector<Region> regions;
    regions.reserve(n);
    for (int i = 0; i < n; ++i) {
        Region r;
        r.id = "R" + std::to_string(i);
        const int gx = i % side, gy = i / side;
        const double jx = (place_rng.uniform() - 0.5) * config.jitter * cell;
        const double jy = (place_rng.uniform() - 0.5) * config.jitter * cell;
        r.centroid = {(gx + 0.5) * cell + jx, (gy + 0.5) * cell + jy};
        r.features[0] = std::round(std::exp(config.pop_log_mean + config.pop_log_sigma * feature_rng.normal()));
        r.features[0] = std::max(r.features[0], 1.0);
        for (std::size_t k = 1; k < kFeatureCount; ++k) {
            // Place counts scale with population; categories differ in density.
            const double rate =
                config.poi_per_thousand * (0.5 + 0.5 * static_cast<double>(k % 5)) * r.features[0] / 1000.0;
            r.features[k] = static_cast<double>(feature_rng.poisson(rate));
        }
        regions.push_back(std::move(r));
    }
    RegionTable table(std::move(regions));

    const double rbar = mean_pairwise_distance(table);
    CounterRng volume_rng(seed, stream_id("synth/volumes"));
    std::vector<Flow> flows;
    for (int i = 0; i < n; ++i) {
        const auto probs = synth_flow_probabilities(table, config, static_cast<std::size_t>(i), rbar);
        std::vector<double> cdf(probs.size());
        double acc = 0.0;
        for (std::size_t j = 0; j < probs.size(); ++j) cdf[j] = (acc += probs[j]);
        const std::uint64_t trips = volume_rng.poisson(config.mean_outflow);
        std::map<std::size_t, std::uint64_t> counts;
        for (std::uint64_t t = 0; t < trips; ++t) {
            const double u = volume_rng.uniform() * acc;
            auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
            const auto j = std::min<std::size_t>(static_cast<std::size_t>(it - cdf.begin()), cdf.size() - 1);
            ++counts[j];
        }
        for (auto [j, c] : counts)
            flows.push_back({table[static_cast<std::size_t>(i)].id, table[j].id, static_cast<double>(c)});
    }
    return Dataset(std::move(table), std::move(flows), CrsMode::planar);
}

}  // namespace transflower
