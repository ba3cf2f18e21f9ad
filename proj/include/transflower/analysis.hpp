#ifndef TRANSFLOWER_ANALYSIS_HPP
#define TRANSFLOWER_ANALYSIS_HPP

// Explainability exports: residuals binned by relative location, flow-to-flow
// attention maps with influencer ranking, and hierarchical clustering of the
// relative-location embedding over a regular grid.

#include <cstddef>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "transflower/batch.hpp"
#include "transflower/geodata.hpp"
#include "transflower/locenc.hpp"
#include "transflower/model.hpp"

namespace transflower {

// ---------------------------------------------------------------- residuals

enum class Occupancy { both, a_only, b_only };
std::string_view to_string(Occupancy o);

struct ResidualCell {
    double mean = 0.0;
    std::size_t count = 0;
    /// Only meaningful in difference grids.
    Occupancy occupancy = Occupancy::both;
};

/// Square cells of `cell_size` meters tiling [-λmax, λmax]². Cell (ix, iy)
/// covers x ∈ [-λmax + ix·cell, -λmax + (ix+1)·cell). Empty cells are absent.
struct ResidualGrid {
    double cell_size = 20.0;
    double lambda_max = 0.0;
    std::map<std::pair<long, long>, ResidualCell> cells;
    /// Flows whose relative location fell outside the extent.
    std::size_t clamped = 0;

    long cells_per_axis() const;
    Vec2 center(long ix, long iy) const;
};

struct ResidualPoint {
    Vec2 rl;
    double real = 0.0;
    double predicted = 0.0;
};

/// Each point adds real − predicted to the cell containing its relative
/// location; cells hold the mean.
ResidualGrid residual_grid(std::span<const ResidualPoint> points, double lambda_max, double cell_size = 20.0);

/// a − b over cells occupied in both. One-sided cells carry their own value
/// (negated for b_only) and an occupancy flag. Throws ValidationError when the
/// cell geometries differ.
ResidualGrid residual_diff_grid(const ResidualGrid& a, const ResidualGrid& b);

/// `ix,iy,x_center_m,y_center_m,mean_residual,count` (plus `occupancy` for
/// difference grids).
void write_residual_csv(const std::filesystem::path& path, const ResidualGrid& grid, bool with_occupancy = false);

// ---------------------------------------------------------------- attention

struct Influencer {
    std::string region_id;
    double score = 0.0;
};

struct AttentionMap {
    std::string origin_id;
    /// Destination id per slot; empty for padded slots.
    std::vector<std::string> dest_ids;
    nn::Mask mask;
    /// slots x slots mean over layers and heads; padded rows/columns are 0.
    nn::Matrix matrix;
    /// [layer][head] as returned by the model.
    std::vector<std::vector<nn::Matrix>> per_head;
    /// Column means over unmasked rows, descending, ties by slot order.
    std::vector<Influencer> influencers;
};

/// Runs the model in eval mode on `batch` (inputs attached). Throws
/// ValidationError for a model without attention layers.
AttentionMap attention_map(const OriginBatch& batch, const RegionTable& regions, const ModelParams& params,
                           const ModelConfig& config, std::size_t top_k = 10);

/// Averages row-stochastic [layer][head] matrices and ranks columns.
AttentionMap summarize_attention(std::vector<std::vector<nn::Matrix>> per_head, const nn::Mask& mask,
                                 std::size_t top_k);

/// `row_dest_id,col_dest_id,weight` over unmasked slots.
void write_attention_csv(const std::filesystem::path& path, const AttentionMap& map);
/// `layer,head,row_dest_id,col_dest_id,weight`.
void write_attention_heads_csv(const std::filesystem::path& path, const AttentionMap& map);
/// `rank,region_id,score`.
void write_influencers_csv(const std::filesystem::path& path, const AttentionMap& map);

// ---------------------------------------------------------------- clustering

struct Merge {
    /// Representative points (indices into the clustered rows).
    std::size_t a = 0;
    std::size_t b = 0;
    /// Ward merge cost |A||B|/(|A|+|B|) · ‖c_A − c_B‖².
    double cost = 0.0;
};

struct WardResult {
    /// Cluster label per row, 0-based, numbered by first occurrence.
    std::vector<int> labels;
    /// Full dendrogram of the distinct rows, ascending cost.
    std::vector<Merge> merges;
    /// Set when all rows are identical.
    bool degenerate = false;
};

/// Agglomerative Ward clustering of the rows cut at `k` clusters. Identical
/// rows are pooled first; the result depends only on the multiset of rows,
/// so reordering them changes labels by at most a renaming.
WardResult ward_cluster(const nn::Matrix& points, int k, std::size_t threads = 0);

struct ClusterGrid {
    int grid_n = 100;
    double lambda_max = 0.0;
    /// Row-major over (iy, ix): index = iy · grid_n + ix.
    std::vector<Vec2> centers;
    std::vector<int> labels;
    std::vector<Merge> merges;
    bool degenerate = false;

    double cell_size() const { return 2.0 * lambda_max / grid_n; }
};

/// Cell centers of a grid_n x grid_n grid over [-λmax, λmax]², row-major (iy, ix).
std::vector<Vec2> grid_centers(int grid_n, double lambda_max);

/// Evaluates the relative-location encoder at every cell center and clusters
/// the embeddings with Ward linkage, cut at k.
ClusterGrid cluster_embeddings(const RleParams& rle, const EncoderConfig& config, double lambda_max, int grid_n = 100,
                               int k = 10, std::size_t threads = 0);

/// Pairs of cells mapped onto each other by a quarter turn about the grid
/// center (equal radius, bearings 90° apart) that carry different labels.
std::size_t quarter_turn_disagreements(const ClusterGrid& grid);

/// `ix,iy,x_center_m,y_center_m,label,radius_m,bearing_deg`.
void write_cluster_csv(const std::filesystem::path& path, const ClusterGrid& grid);

// ---------------------------------------------------------------- svg

/// One rect per cell, diverging ramp symmetric about 0, legend included.
void write_residual_svg(const std::filesystem::path& path, const ResidualGrid& grid, const std::string& title);
/// One rect per cell, categorical palette, legend included.
void write_cluster_svg(const std::filesystem::path& path, const ClusterGrid& grid, const std::string& title);

}  // namespace transflower

#endif  // TRANSFLOWER_ANALYSIS_HPP
