#include "transflower/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>

#include "transflower/csv.hpp"
#include "transflower/errors.hpp"
#include "transflower/parallel.hpp"

namespace transflower {

using nn::Matrix;

// ---------------------------------------------------------------- residuals

std::string_view to_string(Occupancy o) {
    switch (o) {
        case Occupancy::both: return "both";
        case Occupancy::a_only: return "a_only";
        case Occupancy::b_only: return "b_only";
    }
    return "both";
}

long ResidualGrid::cells_per_axis() const {
    return std::max(1L, static_cast<long>(std::ceil(2.0 * lambda_max / cell_size - 1e-9)));
}

Vec2 ResidualGrid::center(long ix, long iy) const {
    return {-lambda_max + (static_cast<double>(ix) + 0.5) * cell_size,
            -lambda_max + (static_cast<double>(iy) + 0.5) * cell_size};
}

ResidualGrid residual_grid(std::span<const ResidualPoint> points, double lambda_max, double cell_size) {
    if (!(cell_size > 0) || !(lambda_max > 0)) throw ValidationError("residual_grid: cell size and extent must be positive");
    ResidualGrid grid;
    grid.cell_size = cell_size;
    grid.lambda_max = lambda_max;
    const long n = grid.cells_per_axis();
    auto index = [&](double v, bool& clamped) {
        if (v < -lambda_max || v > lambda_max || !std::isfinite(v)) clamped = true;
        const double raw = std::floor((v + lambda_max) / cell_size);
        if (!(raw >= 0)) return 0L;
        return std::min(n - 1, static_cast<long>(raw));
    };
    std::map<std::pair<long, long>, double> sums;
    for (const auto& p : points) {
        bool clamped = false;
        const long ix = index(p.rl.x, clamped), iy = index(p.rl.y, clamped);
        if (clamped) ++grid.clamped;
        sums[{ix, iy}] += p.real - p.predicted;
        ++grid.cells[{ix, iy}].count;
    }
    for (auto& [key, cell] : grid.cells) cell.mean = sums[key] / static_cast<double>(cell.count);
    return grid;
}

ResidualGrid residual_diff_grid(const ResidualGrid& a, const ResidualGrid& b) {
    if (a.cell_size != b.cell_size || a.lambda_max != b.lambda_max)
        throw ValidationError("residual_diff_grid: grids have different cell geometry");
    ResidualGrid out;
    out.cell_size = a.cell_size;
    out.lambda_max = a.lambda_max;
    for (const auto& [key, ca] : a.cells) {
        auto it = b.cells.find(key);
        if (it == b.cells.end()) {
            out.cells[key] = {ca.mean, ca.count, Occupancy::a_only};
        } else {
            out.cells[key] = {ca.mean - it->second.mean, std::min(ca.count, it->second.count), Occupancy::both};
        }
    }
    for (const auto& [key, cb] : b.cells)
        if (!a.cells.contains(key)) out.cells[key] = {-cb.mean, cb.count, Occupancy::b_only};
    return out;
}

void write_residual_csv(const std::filesystem::path& path, const ResidualGrid& grid, bool with_occupancy) {
    auto out = csv::open_output(path);
    out << "ix,iy,x_center_m,y_center_m,mean_residual,count" << (with_occupancy ? ",occupancy" : "") << '\n';
    for (const auto& [key, cell] : grid.cells) {
        const Vec2 c = grid.center(key.first, key.second);
        out << key.first << ',' << key.second << ',' << csv::format_double(c.x) << ',' << csv::format_double(c.y) << ','
            << csv::format_double(cell.mean) << ',' << cell.count;
        if (with_occupancy) out << ',' << to_string(cell.occupancy);
        out << '\n';
    }
}

// ---------------------------------------------------------------- attention

AttentionMap summarize_attention(std::vector<std::vector<Matrix>> per_head, const nn::Mask& mask, std::size_t top_k) {
    const auto n = static_cast<Eigen::Index>(mask.size());
    AttentionMap map;
    map.mask = mask;
    map.matrix = Matrix::Zero(n, n);
    std::size_t count = 0;
    for (const auto& layer : per_head) {
        for (const auto& head : layer) {
            if (head.rows() != n || head.cols() != n) throw ShapeError("attention map: matrix does not match the mask");
            map.matrix += head;
            ++count;
        }
    }
    if (count == 0) throw ValidationError("attention map: the model has no attention layers");
    map.matrix /= static_cast<double>(count);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j)
            if (!mask[static_cast<std::size_t>(i)] || !mask[static_cast<std::size_t>(j)]) map.matrix(i, j) = 0.0;
    map.per_head = std::move(per_head);

    std::size_t active = 0;
    for (bool m : mask) active += m;
    std::vector<std::pair<std::size_t, double>> scores;
    for (Eigen::Index j = 0; j < n; ++j) {
        if (!mask[static_cast<std::size_t>(j)]) continue;
        double s = 0.0;
        for (Eigen::Index i = 0; i < n; ++i)
            if (mask[static_cast<std::size_t>(i)]) s += map.matrix(i, j);
        scores.emplace_back(static_cast<std::size_t>(j), s / static_cast<double>(active));
    }
    std::stable_sort(scores.begin(), scores.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    scores.resize(std::min(scores.size(), top_k));
    for (const auto& [slot, score] : scores) map.influencers.push_back({std::to_string(slot), score});
    return map;
}

AttentionMap attention_map(const OriginBatch& batch, const RegionTable& regions, const ModelParams& params,
                           const ModelConfig& config, std::size_t top_k) {
    if (config.predictor_variant != PredictorVariant::transformer || config.n_layers == 0)
        throw ValidationError("attention map: the model has no attention layers");
    ForwardOptions opts;
    opts.mode = Mode::eval;
    opts.capture_attention = true;
    PredictionResult pred = forward_origin(batch, params, config, opts);
    AttentionMap map = summarize_attention(std::move(pred.attentions), batch.mask, top_k);
    map.origin_id = batch.origin_id;
    map.dest_ids.resize(batch.slots());
    for (std::size_t s = 0; s < batch.slots(); ++s)
        if (batch.mask[s]) map.dest_ids[s] = regions[batch.dests[s]].id;
    for (auto& inf : map.influencers) inf.region_id = map.dest_ids[std::stoul(inf.region_id)];
    return map;
}

void write_attention_csv(const std::filesystem::path& path, const AttentionMap& map) {
    auto out = csv::open_output(path);
    out << "row_dest_id,col_dest_id,weight\n";
    const auto n = static_cast<std::size_t>(map.matrix.rows());
    for (std::size_t i = 0; i < n; ++i) {
        if (!map.mask[i]) continue;
        for (std::size_t j = 0; j < n; ++j) {
            if (!map.mask[j]) continue;
            out << map.dest_ids[i] << ',' << map.dest_ids[j] << ','
                << csv::format_double(map.matrix(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j))) << '\n';
        }
    }
}

void write_attention_heads_csv(const std::filesystem::path& path, const AttentionMap& map) {
    auto out = csv::open_output(path);
    out << "layer,head,row_dest_id,col_dest_id,weight\n";
    for (std::size_t l = 0; l < map.per_head.size(); ++l) {
        for (std::size_t h = 0; h < map.per_head[l].size(); ++h) {
            const Matrix& w = map.per_head[l][h];
            for (std::size_t i = 0; i < map.mask.size(); ++i) {
                if (!map.mask[i]) continue;
                for (std::size_t j = 0; j < map.mask.size(); ++j) {
                    if (!map.mask[j]) continue;
                    out << l << ',' << h << ',' << map.dest_ids[i] << ',' << map.dest_ids[j] << ','
                        << csv::format_double(w(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j))) << '\n';
                }
            }
        }
    }
}

void write_influencers_csv(const std::filesystem::path& path, const AttentionMap& map) {
    auto out = csv::open_output(path);
    out << "rank,region_id,score\n";
    for (std::size_t r = 0; r < map.influencers.size(); ++r)
        out << r + 1 << ',' << map.influencers[r].region_id << ',' << csv::format_double(map.influencers[r].score) << '\n';
}

// ---------------------------------------------------------------- clustering

namespace {

struct UnionFind {
    std::vector<std::size_t> parent;
    explicit UnionFind(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
    std::size_t find(std::size_t x) {
        while (parent[x] != x) x = parent[x] = parent[parent[x]];
        return x;
    }
    bool unite(std::size_t a, std::size_t b) {
        a = find(a);
        b = find(b);
        if (a == b) return false;
        if (b < a) std::swap(a, b);
        parent[b] = a;
        return true;
    }
};

/// Ward clustering state over pooled distinct points. Clusters live in slots;
/// a merge keeps the lower slot and retires the other.
class NnChain {
public:
    NnChain(std::vector<double> centroids, std::vector<double> sizes, std::size_t dim, std::size_t threads)
        : c_(std::move(centroids)), size_(std::move(sizes)), dim_(dim), threads_(threads) {
        const std::size_t m = size_.size();
        active_.resize(m);
        std::iota(active_.begin(), active_.end(), 0);
        rep_.resize(m);
        std::iota(rep_.begin(), rep_.end(), 0);
        height_.assign(m, 0.0);
    }

    struct Step {
        std::size_t rep_a, rep_b;
        double cost, height;
    };

    std::vector<Step> run() {
        std::vector<Step> steps;
        std::vector<std::size_t> chain;
        while (active_.size() > 1) {
            if (chain.empty()) chain.push_back(active_.front());
            const std::size_t top = chain.back();
            const std::size_t prev = chain.size() >= 2 ? chain[chain.size() - 2] : kNone;
            auto [nn, cost] = nearest(top, prev);
            if (nn == prev) {
                chain.pop_back();
                chain.pop_back();
                steps.push_back(merge(top, nn, cost));
            } else {
                chain.push_back(nn);
            }
        }
        return steps;
    }

private:
    static constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();

    double cost(std::size_t a, std::size_t b) const {
        const double* pa = &c_[a * dim_];
        const double* pb = &c_[b * dim_];
        double d2 = 0.0;
        for (std::size_t k = 0; k < dim_; ++k) {
            const double t = pa[k] - pb[k];
            d2 += t * t;
        }
        return size_[a] * size_[b] / (size_[a] + size_[b]) * d2;
    }

    /// Nearest active cluster to `c`. The previous chain element wins ties,
    /// then the lowest slot.
    std::pair<std::size_t, double> nearest(std::size_t c, std::size_t prev) const {
        constexpr std::size_t kChunk = 1024;
        const std::size_t n = active_.size();
        const std::size_t chunks = (n + kChunk - 1) / kChunk;
        std::vector<std::pair<std::size_t, double>> best(chunks, {kNone, std::numeric_limits<double>::infinity()});
        auto scan = [&](std::size_t ch) {
            const std::size_t end = std::min(n, (ch + 1) * kChunk);
            for (std::size_t t = ch * kChunk; t < end; ++t) {
                const std::size_t j = active_[t];
                if (j == c) continue;
                const double v = cost(c, j);
                if (v < best[ch].second) best[ch] = {j, v};
            }
        };
        parallel_for(chunks, chunks >= 4 ? threads_ : 1, scan);
        std::pair<std::size_t, double> out{kNone, std::numeric_limits<double>::infinity()};
        for (const auto& b : best)
            if (b.second < out.second) out = b;
        if (prev != kNone) {
            const double vp = cost(c, prev);
            if (vp <= out.second) out = {prev, vp};
        }
        return out;
    }

    Step merge(std::size_t a, std::size_t b, double cost_ab) {
        if (b < a) std::swap(a, b);
        const double sa = size_[a], sb = size_[b];
        for (std::size_t k = 0; k < dim_; ++k)
            c_[a * dim_ + k] = (sa * c_[a * dim_ + k] + sb * c_[b * dim_ + k]) / (sa + sb);
        size_[a] = sa + sb;
        const double h = std::max({cost_ab, height_[a], height_[b]});
        height_[a] = h;
        Step s{rep_[a], rep_[b], cost_ab, h};
        active_.erase(std::lower_bound(active_.begin(), active_.end(), b));
        return s;
    }

    std::vector<double> c_;
    std::vector<double> size_;
    std::size_t dim_;
    std::size_t threads_;
    std::vector<std::size_t> active_;  // ascending
    std::vector<std::size_t> rep_;
    std::vector<double> height_;
};

}  // namespace

WardResult ward_cluster(const Matrix& points, int k, std::size_t threads) {
    if (k < 1) throw ValidationError("ward_cluster: k must be at least 1");
    const std::size_t n = static_cast<std::size_t>(points.rows());
    const std::size_t dim = static_cast<std::size_t>(points.cols());
    if (n == 0) throw ValidationError("ward_cluster: no points");
    for (Eigen::Index i = 0; i < points.size(); ++i)
        if (!std::isfinite(points.data()[i])) throw NumericError("ward_cluster: non-finite embedding");

    // Pool identical rows; groups are ordered by row value, not input order.
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    auto row_less = [&](std::size_t a, std::size_t b) {
        for (std::size_t k2 = 0; k2 < dim; ++k2) {
            const double x = points(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(k2));
            const double y = points(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(k2));
            if (x != y) return x < y;
        }
        return false;
    };
    std::stable_sort(order.begin(), order.end(), row_less);
    std::vector<std::size_t> group_of(n);
    std::vector<std::size_t> first_row;  // smallest input row per group
    std::vector<double> centroids, sizes;
    for (std::size_t t = 0; t < n; ++t) {
        const std::size_t r = order[t];
        if (t == 0 || row_less(order[t - 1], r)) {
            first_row.push_back(r);
            sizes.push_back(0.0);
            for (std::size_t k2 = 0; k2 < dim; ++k2)
                centroids.push_back(points(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k2)));
        }
        group_of[r] = sizes.size() - 1;
        sizes.back() += 1.0;
        first_row.back() = std::min(first_row.back(), r);
    }
    const std::size_t m = sizes.size();

    NnChain chain(std::move(centroids), std::move(sizes), dim, threads);
    auto steps = chain.run();
    std::stable_sort(steps.begin(), steps.end(), [](const auto& a, const auto& b) { return a.height < b.height; });

    WardResult result;
    result.degenerate = m == 1;
    UnionFind uf(m);
    const std::size_t cuts = m > static_cast<std::size_t>(k) ? m - static_cast<std::size_t>(k) : 0;
    for (std::size_t s = 0; s < steps.size(); ++s) {
        if (s < cuts) uf.unite(steps[s].rep_a, steps[s].rep_b);
        result.merges.push_back({first_row[steps[s].rep_a], first_row[steps[s].rep_b], steps[s].cost});
    }

    std::vector<int> label_of_root(m, -1);
    int next = 0;
    result.labels.resize(n);
    for (std::size_t r = 0; r < n; ++r) {
        const std::size_t root = uf.find(group_of[r]);
        if (label_of_root[root] < 0) label_of_root[root] = next++;
        result.labels[r] = label_of_root[root];
    }
    return result;
}

std::vector<Vec2> grid_centers(int grid_n, double lambda_max) {
    if (grid_n < 1 || !(lambda_max > 0)) throw ValidationError("grid_centers: grid size and extent must be positive");
    const double cell = 2.0 * lambda_max / grid_n;
    std::vector<Vec2> out;
    out.reserve(static_cast<std::size_t>(grid_n) * static_cast<std::size_t>(grid_n));
    for (int iy = 0; iy < grid_n; ++iy)
        for (int ix = 0; ix < grid_n; ++ix) out.push_back({-lambda_max + (ix + 0.5) * cell, -lambda_max + (iy + 0.5) * cell});
    return out;
}

ClusterGrid cluster_embeddings(const RleParams& rle, const EncoderConfig& config, double lambda_max, int grid_n, int k,
                               std::size_t threads) {
    ClusterGrid grid;
    grid.grid_n = grid_n;
    grid.lambda_max = lambda_max;
    grid.centers = grid_centers(grid_n, lambda_max);
    const Matrix emb = rle_encode(grid.centers, config, rle);
    WardResult w = ward_cluster(emb, k, threads);
    grid.labels = std::move(w.labels);
    grid.merges = std::move(w.merges);
    grid.degenerate = w.degenerate;
    return grid;
}

std::size_t quarter_turn_disagreements(const ClusterGrid& grid) {
    const int n = grid.grid_n;
    std::size_t count = 0;
    for (int iy = 0; iy < n; ++iy) {
        for (int ix = 0; ix < n; ++ix) {
            // (x, y) -> (-y, x)
            const int rx = n - 1 - iy, ry = ix;
            if (grid.labels[static_cast<std::size_t>(iy * n + ix)] != grid.labels[static_cast<std::size_t>(ry * n + rx)])
                ++count;
        }
    }
    return count;
}

void write_cluster_csv(const std::filesystem::path& path, const ClusterGrid& grid) {
    auto out = csv::open_output(path);
    out << "ix,iy,x_center_m,y_center_m,label,radius_m,bearing_deg\n";
    const int n = grid.grid_n;
    for (int iy = 0; iy < n; ++iy) {
        for (int ix = 0; ix < n; ++ix) {
            const std::size_t i = static_cast<std::size_t>(iy * n + ix);
            const Vec2 c = grid.centers[i];
            const double bearing = std::atan2(c.y, c.x) * 180.0 / std::numbers::pi;
            out << ix << ',' << iy << ',' << csv::format_double(c.x) << ',' << csv::format_double(c.y) << ','
                << grid.labels[i] << ',' << csv::format_double(c.norm()) << ',' << csv::format_double(bearing) << '\n';
        }
    }
}

// ---------------------------------------------------------------- svg

namespace {

std::string rgb(double r, double g, double b) {
    auto c = [](double v) { return static_cast<int>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); };
    std::ostringstream s;
    s << "rgb(" << c(r) << ',' << c(g) << ',' << c(b) << ')';
    return s.str();
}

/// Blue for negative, white at 0, red for positive; t in [-1, 1].
std::string diverging(double t) {
    t = std::clamp(t, -1.0, 1.0);
    if (t >= 0) return rgb(1.0, 1.0 - t, 1.0 - t);
    return rgb(1.0 + t, 1.0 + t, 1.0);
}

const char* const kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

}  // namespace

void write_residual_svg(const std::filesystem::path& path, const ResidualGrid& grid, const std::string& title) {
    const long n = grid.cells_per_axis();
    long lo_x = n, hi_x = -1, lo_y = n, hi_y = -1;
    double amp = 0.0;
    for (const auto& [key, cell] : grid.cells) {
        lo_x = std::min(lo_x, key.first);
        hi_x = std::max(hi_x, key.first);
        lo_y = std::min(lo_y, key.second);
        hi_y = std::max(hi_y, key.second);
        amp = std::max(amp, std::abs(cell.mean));
    }
    if (grid.cells.empty()) lo_x = hi_x = lo_y = hi_y = 0;
    if (!(amp > 0)) amp = 1.0;
    const long w = hi_x - lo_x + 1, h = hi_y - lo_y + 1;
    const double px = 600.0 / static_cast<double>(std::max(w, h));

    auto out = csv::open_output(path);
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"760\" height=\"660\">\n";
    out << "<text x=\"10\" y=\"20\" font-size=\"14\">" << title << "</text>\n";
    for (const auto& [key, cell] : grid.cells) {
        // y grows upward in the data and downward in SVG.
        const double x = 10.0 + static_cast<double>(key.first - lo_x) * px;
        const double y = 40.0 + static_cast<double>(hi_y - key.second) * px;
        out << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << px << "\" height=\"" << px << "\" fill=\""
            << diverging(cell.mean / amp) << "\"/>\n";
    }
    for (int i = 0; i <= 10; ++i) {
        const double t = 1.0 - 0.2 * i;
        out << "<rect x=\"630\" y=\"" << 40 + 20 * i << "\" width=\"20\" height=\"20\" fill=\"" << diverging(t) << "\"/>";
        out << "<text x=\"655\" y=\"" << 55 + 20 * i << "\" font-size=\"11\">" << csv::format_double(t * amp)
            << "</text>\n";
    }
    out << "</svg>\n";
}

void write_cluster_svg(const std::filesystem::path& path, const ClusterGrid& grid, const std::string& title) {
    const int n = grid.grid_n;
    const double px = 600.0 / n;
    auto out = csv::open_output(path);
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"760\" height=\"660\">\n";
    out << "<text x=\"10\" y=\"20\" font-size=\"14\">" << title << "</text>\n";
    for (int iy = 0; iy < n; ++iy) {
        for (int ix = 0; ix < n; ++ix) {
            const int label = grid.labels[static_cast<std::size_t>(iy * n + ix)];
            out << "<rect x=\"" << 10.0 + ix * px << "\" y=\"" << 40.0 + (n - 1 - iy) * px << "\" width=\"" << px
                << "\" height=\"" << px << "\" fill=\"" << kPalette[label % 10] << "\"/>\n";
        }
    }
    const int labels = grid.labels.empty() ? 0 : *std::max_element(grid.labels.begin(), grid.labels.end()) + 1;
    for (int i = 0; i < labels; ++i) {
        out << "<rect x=\"630\" y=\"" << 40 + 20 * i << "\" width=\"20\" height=\"20\" fill=\"" << kPalette[i % 10]
            << "\"/><text x=\"655\" y=\"" << 55 + 20 * i << "\" font-size=\"11\">cluster " << i << "</text>\n";
    }
    out << "</svg>\n";
}

}  // namespace transflower
