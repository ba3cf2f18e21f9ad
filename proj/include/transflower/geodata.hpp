#ifndef TRANSFLOWER_GEODATA_HPP
#define TRANSFLOWER_GEODATA_HPP

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace transflower {

struct Vec2 {
    double x = 0.0;
    double y = 0.0;

    friend Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
    friend Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
    friend Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
    friend bool operator==(Vec2 a, Vec2 b) = default;
    double norm() const { return std::hypot(x, y); }
};

inline double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }

enum class CrsMode { planar, geodesic };

CrsMode parse_crs(std::string_view text);
std::string_view to_string(CrsMode mode);

/// Mean earth radius used by the haversine distance and the local projection.
inline constexpr double kEarthRadiusM = 6371008.8;

/// Population followed by 19 OpenStreetMap-derived place counts.
inline constexpr std::size_t kFeatureCount = 20;
using Features = std::array<double, kFeatureCount>;

/// Column names of the feature block in regions.csv, in file order.
extern const std::array<std::string_view, kFeatureCount> kFeatureNames;

struct Region {
    std::string id;
    Vec2 centroid;
    Features features{};

    double population() const { return features[0]; }
};

/// Regions with unique identifiers and an id -> index lookup.
class RegionTable {
public:
    RegionTable() = default;
    /// Throws ValidationError on duplicate ids, negative features or a
    /// non-finite centroid.
    explicit RegionTable(std::vector<Region> regions);

    std::size_t size() const { return regions_.size(); }
    bool empty() const { return regions_.empty(); }
    const Region& operator[](std::size_t i) const { return regions_[i]; }
    std::optional<std::size_t> find(std::string_view id) const;
    /// Throws ValidationError naming the id when it is unknown.
    std::size_t index_of(std::string_view id) const;

    auto begin() const { return regions_.begin(); }
    auto end() const { return regions_.end(); }

private:
    std::vector<Region> regions_;
    std::unordered_map<std::string, std::size_t> index_;
};

struct Flow {
    std::string origin_id;
    std::string dest_id;
    double volume = 0.0;
};

/// A flow with its endpoints resolved to region indices.
struct FlowEdge {
    std::size_t origin = 0;
    std::size_t dest = 0;
    double volume = 0.0;
};

RegionTable load_regions(const std::filesystem::path& path);
std::vector<Flow> load_flows(const std::filesystem::path& path, const RegionTable& regions);
void write_regions(const std::filesystem::path& path, const RegionTable& regions);
void write_flows(const std::filesystem::path& path, std::span<const Flow> flows);

/// Planar: Euclidean norm. Geodesic: haversine on (lon, lat) degrees.
double distance(Vec2 a, Vec2 b, CrsMode mode);

/// Origin minus destination, componentwise. Both points in planar meters.
Vec2 relative_location(Vec2 origin, Vec2 dest);

/// Local equirectangular projection of (lon, lat) degrees about `reference`.
Vec2 project_equirectangular(Vec2 lonlat, Vec2 reference);

/// Sum of volumes leaving `origin_id`; 0 when it has no flows.
double total_outflow(std::span<const Flow> flows, const RegionTable& regions,
                     std::string_view origin_id);

/// Regions plus validated flows. Immutable after construction.
class Dataset {
public:
    Dataset() = default;
    Dataset(RegionTable regions, std::vector<Flow> flows, CrsMode crs);

    const RegionTable& regions() const { return regions_; }
    std::span<const Flow> flows() const { return flows_; }
    CrsMode crs() const { return crs_; }
    /// Maximum pairwise centroid distance in meters.
    double lambda_max() const { return lambda_max_; }

    /// Centroid in planar meters (projected about the study-area centroid in
    /// geodesic mode).
    Vec2 planar(std::size_t region) const { return planar_[region]; }
    double distance(std::size_t a, std::size_t b) const;
    Vec2 relative_location(std::size_t origin, std::size_t dest) const;

    std::span<const FlowEdge> outgoing(std::size_t origin) const { return outgoing_[origin]; }
    double outflow(std::size_t origin) const { return outflow_[origin]; }
    /// Region indices with at least one flow, ascending.
    std::vector<std::size_t> origins_with_flows() const;

private:
    RegionTable regions_;
    std::vector<Flow> flows_;
    CrsMode crs_ = CrsMode::planar;
    double lambda_max_ = 0.0;
    std::vector<Vec2> planar_;
    std::vector<std::vector<FlowEdge>> outgoing_;
    std::vector<double> outflow_;
};

struct SplitRatios {
    double train = 0.70;
    double val = 0.10;
    double test = 0.20;
};

enum class SplitPart { train, val, test };
std::string_view to_string(SplitPart part);

struct SplitAssignment {
    std::vector<std::string> train_origins;
    std::vector<std::string> val_origins;
    std::vector<std::string> test_origins;
    std::uint64_t seed = 0;

    const std::vector<std::string>& part(SplitPart p) const;
};

/// Shuffles the origins that have flows and cuts them into rounded ratio
/// shares. Every split receives at least one origin.
SplitAssignment split_by_origin(const Dataset& dataset, SplitRatios ratios, std::uint64_t seed);

/// Manifest CSV with header `region_id,split`.
void write_split(const std::filesystem::path& path, const SplitAssignment& split);
SplitAssignment load_split(const std::filesystem::path& path);

/// Region indices of one split part, in manifest order.
std::vector<std::size_t> split_indices(const Dataset& dataset, const SplitAssignment& split,
                                       SplitPart part);

/// Synthetic city with a planted anisotropic ground truth:
///   P(j | i) ∝ m_j^beta0 · exp(-gamma0 · (1 + epsilon · cos(2(θ_ij − theta0))) · r_ij / r̄)
/// where m_j is the destination population and θ_ij the bearing of the
/// relative location.
struct SynthConfig {
    int n_regions = 100;
    double extent_m = 20000.0;
    /// Jitter as a fraction of the grid cell size.
    double jitter = 0.35;
    double pop_log_mean = 7.6;
    double pop_log_sigma = 0.8;
    /// Mean place count per 1000 residents (scaled per feature).
    double poi_per_thousand = 2.0;
    double beta0 = 1.0;
    double gamma0 = 6.0;
    double epsilon = 0.0;
    double theta0 = 0.0;
    double mean_outflow = 50.0;

    void validate() const;
};

Dataset synth_city(const SynthConfig& config, std::uint64_t seed);

/// Mean planar distance over ordered pairs of distinct regions.
double mean_pairwise_distance(const RegionTable& regions);

/// Ground-truth destination distribution of `origin` (length = region count,
/// zero at the origin itself). `mean_distance` is r̄.
std::vector<double> synth_flow_probabilities(const RegionTable& regions, const SynthConfig& config,
                                             std::size_t origin, double mean_distance);

}  // namespace transflower

#endif  // TRANSFLOWER_GEODATA_HPP
