#include "transflower/pipeline.hpp"

#include "transflower/csv.hpp"
#include "transflower/errors.hpp"
#include "transflower/parallel.hpp"

namespace transflower {

void apply_variant(ModelConfig& config, std::string_view variant) {
    if (variant == "full") {
        apply_rle_variant(config, RleVariant::rle);
        config.predictor_variant = PredictorVariant::transformer;
    } else if (variant == "no-rle") {
        apply_rle_variant(config, RleVariant::none);
        config.predictor_variant = PredictorVariant::transformer;
    } else if (variant == "rle-prime") {
        apply_rle_variant(config, RleVariant::rle_prime);
        config.predictor_variant = PredictorVariant::transformer;
    } else if (variant == "deepgravity") {
        apply_rle_variant(config, RleVariant::none);
        config.predictor_variant = PredictorVariant::feedforward_only;
    } else if (variant == "deepgravity-rle") {
        apply_rle_variant(config, RleVariant::rle);
        config.predictor_variant = PredictorVariant::feedforward_only;
    } else {
        throw ValidationError("unknown variant '" + std::string(variant) +
                              "' (expected full, no-rle, rle-prime, deepgravity or deepgravity-rle)");
    }
}

std::string_view variant_name(const ModelConfig& config) {
    const bool ff = config.predictor_variant == PredictorVariant::feedforward_only;
    switch (config.rle_variant) {
        case RleVariant::rle: return ff ? "deepgravity-rle" : "full";
        case RleVariant::rle_prime: return ff ? "deepgravity-rle-prime" : "rle-prime";
        case RleVariant::none: return ff ? "deepgravity" : "no-rle";
    }
    return "full";
}

std::vector<PredictionRow> predict_model(const Dataset& dataset, std::span<const std::size_t> origins,
                                         const NormalizedRegions& normalized, const ModelParams& params,
                                         const ModelConfig& config, std::size_t threads) {
    std::vector<std::vector<PredictionRow>> per_origin(origins.size());
    parallel_for(origins.size(), threads, [&](std::size_t k) {
        OriginBatch b = build_full_batch(dataset, origins[k], 1);
        attach_inputs(b, dataset, normalized);
        if (b.active() == 0) return;
        ForwardOptions opts;
        opts.capture_attention = false;
        const PredictionResult pred = forward_origin(b, params, config, opts);
        // Full batches keep the flow-file order in their leading slots.
        const auto edges = dataset.outgoing(origins[k]);
        for (std::size_t s = 0; s < edges.size(); ++s)
            per_origin[k].push_back({b.origin, edges[s].dest, pred.volumes[s], edges[s].volume});
    });
    std::vector<PredictionRow> rows;
    for (auto& v : per_origin) rows.insert(rows.end(), v.begin(), v.end());
    return rows;
}

namespace {

/// Observed destinations of `origin` split into non-self candidates and an
/// optional self-flow row.
struct Candidates {
    std::vector<PredictionRow> rows;
    std::vector<std::size_t> candidate_rows;
};

Candidates candidates_of(const Dataset& dataset, std::size_t origin) {
    Candidates c;
    for (const auto& e : dataset.outgoing(origin)) {
        if (e.dest != origin) c.candidate_rows.push_back(c.rows.size());
        c.rows.push_back({origin, e.dest, 0.0, e.volume});
    }
    return c;
}

}  // namespace

std::vector<PredictionRow> predict_gravity(const Dataset& dataset, std::span<const std::size_t> origins,
                                           GravityParams params) {
    std::vector<PredictionRow> out;
    for (auto o : origins) {
        Candidates c = candidates_of(dataset, o);
        if (!c.candidate_rows.empty()) {
            std::vector<double> mass, dist;
            for (auto r : c.candidate_rows) {
                mass.push_back(std::max(dataset.regions()[c.rows[r].dest].population(), 1e-12));
                dist.push_back(dataset.distance(o, c.rows[r].dest));
            }
            const auto p = gravity_probs(mass, dist, params);
            for (std::size_t k = 0; k < p.size(); ++k) c.rows[c.candidate_rows[k]].predicted = p[k] * dataset.outflow(o);
        }
        out.insert(out.end(), c.rows.begin(), c.rows.end());
    }
    return out;
}

RadiationPredictions predict_radiation(const Dataset& dataset, std::span<const std::size_t> origins) {
    RadiationPredictions out;
    for (auto o : origins) {
        Candidates c = candidates_of(dataset, o);
        if (!c.candidate_rows.empty()) {
            const auto s_all = intervening_populations(dataset, o);
            std::vector<double> pop, s;
            for (auto r : c.candidate_rows) {
                pop.push_back(dataset.regions()[c.rows[r].dest].population());
                s.push_back(s_all[c.rows[r].dest]);
            }
            // The formula needs p_i > 0; an empty origin still emits flows.
            const double pi = std::max(dataset.regions()[o].population(), 1.0);
            const RadiationResult res = radiation_probs(pi, pop, s);
            if (res.warning) ++out.warnings;
            for (std::size_t k = 0; k < res.probs.size(); ++k)
                c.rows[c.candidate_rows[k]].predicted = res.probs[k] * dataset.outflow(o);
        }
        out.rows.insert(out.rows.end(), c.rows.begin(), c.rows.end());
    }
    return out;
}

ODMap predicted_map(const Dataset& dataset, std::span<const PredictionRow> rows) {
    ODMap m;
    for (const auto& r : rows)
        if (r.predicted != 0.0) m[{dataset.regions()[r.origin].id, dataset.regions()[r.dest].id}] += r.predicted;
    return m;
}

ODMap real_map(const Dataset& dataset, std::span<const PredictionRow> rows) {
    ODMap m;
    for (const auto& r : rows) m[{dataset.regions()[r.origin].id, dataset.regions()[r.dest].id}] += r.real;
    return m;
}

void write_predictions(const std::filesystem::path& path, const Dataset& dataset, std::span<const PredictionRow> rows) {
    auto out = csv::open_output(path);
    out << "origin_id,dest_id,volume_pred,volume_real\n";
    for (const auto& r : rows)
        out << dataset.regions()[r.origin].id << ',' << dataset.regions()[r.dest].id << ','
            << csv::format_double(r.predicted) << ',' << csv::format_double(r.real) << '\n';
}

std::vector<PredictionRow> load_predictions(const std::filesystem::path& path, const Dataset& dataset) {
    const auto lines = csv::read_lines(path);
    if (lines.empty() || lines[0] != "origin_id,dest_id,volume_pred,volume_real")
        throw ParseError(path.string() + ": expected header origin_id,dest_id,volume_pred,volume_real");
    std::vector<PredictionRow> rows;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        if (lines[i].empty()) continue;
        const auto f = csv::split_line(lines[i]);
        const std::string where = path.string() + ":" + std::to_string(i + 1);
        if (f.size() != 4) throw ParseError(where + ": expected 4 fields");
        rows.push_back({dataset.regions().index_of(f[0]), dataset.regions().index_of(f[1]),
                        csv::parse_double(f[2], where), csv::parse_double(f[3], where)});
    }
    return rows;
}

std::vector<ResidualPoint> residual_points(const Dataset& dataset, std::span<const PredictionRow> rows) {
    std::vector<ResidualPoint> pts;
    pts.reserve(rows.size());
    for (const auto& r : rows) pts.push_back({dataset.relative_location(r.origin, r.dest), r.real, r.predicted});
    return pts;
}

LoadedModel load_model(const std::filesystem::path& checkpoint) {
    Checkpoint ck = load_checkpoint(checkpoint);
    LoadedModel m;
    m.config = std::move(ck.config);
    m.params = std::move(ck.params);
    m.stats = NormalizationStats::from_kv(ck.extra);
    return m;
}

void save_model(const std::filesystem::path& checkpoint, const ModelParams& params, const ModelConfig& config,
                const NormalizationStats& stats) {
    save_checkpoint(checkpoint, params, config, stats.to_kv());
}

}  // namespace transflower
