#include "transflower/train.hpp"

#include <chrono>
#include <cmath>
#include <limits>

#include "transflower/csv.hpp"
#include "transflower/errors.hpp"
#include "transflower/parallel.hpp"

namespace transflower {

using nn::Matrix;

// ---------------------------------------------------------------- normalization

KeyValues NormalizationStats::to_kv() const {
    KeyValues kv;
    for (std::size_t k = 0; k < kFeatureCount; ++k) {
        kv["norm.mean." + std::string(kFeatureNames[k])] = csv::format_double(mean[k]);
        kv["norm.std." + std::string(kFeatureNames[k])] = csv::format_double(std[k]);
    }
    kv["norm.lambda_max"] = csv::format_double(lambda_max);
    return kv;
}

NormalizationStats NormalizationStats::from_kv(const KeyValues& kv) {
    NormalizationStats s;
    for (std::size_t k = 0; k < kFeatureCount; ++k) {
        s.mean[k] = kv_double(kv, "norm.mean." + std::string(kFeatureNames[k]));
        s.std[k] = kv_double(kv, "norm.std." + std::string(kFeatureNames[k]));
    }
    s.lambda_max = kv_double(kv, "norm.lambda_max");
    return s;
}

NormalizedRegions normalize_features(const RegionTable& regions, const std::optional<NormalizationStats>& stats,
                                     std::span<const std::size_t> fit_regions, double lambda_max) {
    NormalizedRegions out;
    if (stats) {
        out.stats = *stats;
    } else {
        std::vector<std::size_t> all;
        if (fit_regions.empty()) {
            for (std::size_t i = 0; i < regions.size(); ++i) all.push_back(i);
            fit_regions = all;
        }
        if (!(lambda_max > 0)) throw ValidationError("normalize_features: lambda_max must be positive");
        out.stats.lambda_max = lambda_max;
        const double n = static_cast<double>(fit_regions.size());
        for (std::size_t k = 0; k < kFeatureCount; ++k) {
            double sum = 0.0;
            for (auto i : fit_regions) sum += std::log1p(regions[i].features[k]);
            const double mean = sum / n;
            double ss = 0.0;
            for (auto i : fit_regions) ss += std::pow(std::log1p(regions[i].features[k]) - mean, 2);
            double sd = std::sqrt(ss / n);
            if (!(sd > 1e-12)) sd = 1.0;
            out.stats.mean[k] = mean;
            out.stats.std[k] = sd;
        }
    }
    out.features.resize(regions.size());
    for (std::size_t i = 0; i < regions.size(); ++i)
        for (std::size_t k = 0; k < kFeatureCount; ++k)
            out.features[i][k] = (std::log1p(regions[i].features[k]) - out.stats.mean[k]) / out.stats.std[k];
    return out;
}

// ---------------------------------------------------------------- batches

namespace {

OriginBatch batch_from_edges(const Dataset& dataset, std::size_t origin, const std::vector<FlowEdge>& edges,
                             std::size_t slots) {
    OriginBatch b;
    b.origin = origin;
    b.origin_id = dataset.regions()[origin].id;
    b.outflow = dataset.outflow(origin);
    if (!(b.outflow > 0)) throw ValidationError("origin '" + b.origin_id + "' has zero total outflow");
    double selected = 0.0;
    for (const auto& e : edges) selected += e.volume;
    if (!(selected > 0)) throw ValidationError("origin '" + b.origin_id + "': selected destinations carry no volume");

    b.dests.assign(slots, kPaddingSlot);
    b.target.assign(slots, 0.0);
    b.mask.assign(slots, false);
    for (std::size_t s = 0; s < edges.size(); ++s) {
        b.dests[s] = edges[s].dest;
        b.target[s] = edges[s].volume / selected;
        b.mask[s] = true;
    }
    b.geo_input = Matrix::Zero(static_cast<Eigen::Index>(slots), static_cast<Eigen::Index>(kGeoInputWidth));
    b.rel.assign(slots, Vec2{});
    return b;
}

}  // namespace

OriginBatch build_origin_batch(const Dataset& dataset, std::size_t origin, std::size_t cap, std::uint64_t seed,
                               std::uint64_t epoch) {
    if (cap == 0) throw ValidationError("build_origin_batch: cap must be positive");
    auto out = dataset.outgoing(origin);
    if (out.empty())
        throw ValidationError("origin '" + dataset.regions()[origin].id + "' has no flows");
    std::vector<FlowEdge> edges(out.begin(), out.end());
    if (edges.size() > cap) {
        CounterRng rng(seed, combine_keys({stream_id("batch/sample"), origin, epoch}));
        std::vector<std::size_t> order(edges.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        // Partial Fisher-Yates: the first `cap` positions are a uniform sample.
        for (std::size_t i = 0; i < cap; ++i) {
            const std::size_t j = i + static_cast<std::size_t>(rng.below(order.size() - i));
            std::swap(order[i], order[j]);
        }
        order.resize(cap);
        std::sort(order.begin(), order.end());
        std::vector<FlowEdge> picked;
        for (auto i : order) picked.push_back(edges[i]);
        edges = std::move(picked);
    }
    return batch_from_edges(dataset, origin, edges, cap);
}

OriginBatch build_full_batch(const Dataset& dataset, std::size_t origin, std::size_t min_slots) {
    auto out = dataset.outgoing(origin);
    if (out.empty())
        throw ValidationError("origin '" + dataset.regions()[origin].id + "' has no flows");
    std::vector<FlowEdge> edges(out.begin(), out.end());
    return batch_from_edges(dataset, origin, edges, std::max(min_slots, edges.size()));
}

void attach_inputs(OriginBatch& batch, const Dataset& dataset, const NormalizedRegions& normalized) {
    const Features& xo = normalized.features[batch.origin];
    for (std::size_t s = 0; s < batch.slots(); ++s) {
        if (!batch.mask[s]) continue;
        const std::size_t d = batch.dests[s];
        const Features& xd = normalized.features[d];
        const auto row = static_cast<Eigen::Index>(s);
        for (std::size_t k = 0; k < kFeatureCount; ++k) {
            batch.geo_input(row, static_cast<Eigen::Index>(k)) = xo[k];
            batch.geo_input(row, static_cast<Eigen::Index>(kFeatureCount + k)) = xd[k];
        }
        batch.geo_input(row, static_cast<Eigen::Index>(2 * kFeatureCount)) =
            dataset.distance(batch.origin, d) / normalized.stats.lambda_max;
        batch.rel[s] = dataset.relative_location(batch.origin, d);
    }
}

// ---------------------------------------------------------------- loss

double cross_entropy(const OriginBatch& batch, std::span<const double> probs) {
    if (probs.size() != batch.slots()) throw ShapeError("cross_entropy: probs length differs from slot count");
    double h = 0.0;
    for (std::size_t s = 0; s < probs.size(); ++s) {
        if (!batch.mask[s]) {
            if (batch.target[s] != 0.0 || probs[s] != 0.0)
                throw ValidationError("cross_entropy: masked slot carries target or probability mass");
            continue;
        }
        if (batch.target[s] > 0) h -= batch.target[s] * std::log(std::max(probs[s], 1e-12));
    }
    return h;
}

double cross_entropy(std::span<const OriginBatch> batches, std::span<const std::vector<double>> probs) {
    if (batches.size() != probs.size()) throw ShapeError("cross_entropy: batch and prediction counts differ");
    double total = 0.0;
    for (std::size_t i = 0; i < batches.size(); ++i) total += cross_entropy(batches[i], probs[i]);
    return total;
}

double loss_and_gradient(const OriginBatch& batch, const ModelParams& params, const ModelConfig& config, Mode mode,
                         CounterRng* rng, ModelParams& grad) {
    ForwardTracePtr trace;
    ForwardOptions opts;
    opts.mode = mode;
    opts.rng = rng;
    opts.capture_attention = false;
    opts.trace = &trace;
    const PredictionResult r = forward_origin(batch, params, config, opts);
    const double loss = cross_entropy(batch, r.probs);

    double target_mass = 0.0;
    for (std::size_t s = 0; s < batch.slots(); ++s)
        if (batch.mask[s]) target_mass += batch.target[s];
    std::vector<double> grad_scores(batch.slots(), 0.0);
    for (std::size_t s = 0; s < batch.slots(); ++s)
        if (batch.mask[s]) grad_scores[s] = r.probs[s] * target_mass - batch.target[s];
    backward_origin(*trace, params, config, grad_scores, grad);
    return loss;
}

// ---------------------------------------------------------------- optimizer

void TrainConfig::validate() const {
    auto fail = [](const std::string& what) { throw ValidationError("train config: " + what); };
    if (!(learning_rate >= 0) || !std::isfinite(learning_rate)) fail("learning_rate must be >= 0");
    if (!(momentum >= 0 && momentum < 1)) fail("momentum must be in [0, 1)");
    if (!(rmsprop_alpha > 0 && rmsprop_alpha < 1)) fail("rmsprop_alpha must be in (0, 1)");
    if (!(rmsprop_eps > 0)) fail("rmsprop_eps must be positive");
    if (batch_origins < 1) fail("batch_origins must be >= 1");
    if (patience < 1) fail("patience must be >= 1");
    if (max_epochs < 1) fail("max_epochs must be >= 1");
}

OptimizerState OptimizerState::zeros_like(const ModelParams& params) {
    return {transflower::zeros_like(params), transflower::zeros_like(params)};
}

void rmsprop_step(ModelParams& params, const ModelParams& grads, OptimizerState& state, const TrainConfig& config) {
    auto p = params.tensors();
    auto g = grads.tensors();
    auto sq = state.square_avg.tensors();
    auto buf = state.momentum.tensors();
    if (p.size() != g.size() || p.size() != sq.size() || p.size() != buf.size())
        throw ShapeError("rmsprop_step: parameter, gradient and state layouts differ");
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i].value->rows() != g[i].second->rows() || p[i].value->cols() != g[i].second->cols())
            throw ShapeError("rmsprop_step: gradient shape differs for '" + p[i].name + "'");
        nn::check_finite(*g[i].second, "gradient of '" + p[i].name + "'");
    }
    const double a = config.rmsprop_alpha;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const Matrix& gi = *g[i].second;
        Matrix& s = *sq[i].value;
        Matrix& b = *buf[i].value;
        s = a * s + (1.0 - a) * gi.cwiseProduct(gi);
        b = config.momentum * b + gi.cwiseQuotient((s.cwiseSqrt().array() + config.rmsprop_eps).matrix());
        *p[i].value -= config.learning_rate * b;
        nn::round_to_float(*p[i].value);
    }
}

// ---------------------------------------------------------------- training loop

namespace {

/// Gradients of a batch are summed in chunks of this many origins, each
/// chunk computed concurrently and reduced in index order, so the result is
/// the same for every thread count.
constexpr std::size_t kReduceChunk = 16;

std::vector<OriginBatch> full_batches(const Dataset& dataset, std::span<const std::size_t> origins,
                                      const NormalizedRegions& normalized, std::size_t min_slots) {
    std::vector<OriginBatch> out;
    out.reserve(origins.size());
    for (auto o : origins) {
        out.push_back(build_full_batch(dataset, o, min_slots));
        attach_inputs(out.back(), dataset, normalized);
    }
    return out;
}

double mean_eval_loss(std::span<const OriginBatch> batches, const ModelParams& params, const ModelConfig& config,
                      std::size_t threads) {
    std::vector<double> losses(batches.size());
    parallel_for(batches.size(), threads, [&](std::size_t i) {
        ForwardOptions opts;
        opts.capture_attention = false;
        losses[i] = cross_entropy(batches[i], forward_origin(batches[i], params, config, opts).probs);
    });
    double total = 0.0;
    for (double l : losses) total += l;
    return batches.empty() ? 0.0 : total / static_cast<double>(batches.size());
}

}  // namespace

double evaluate_loss(const Dataset& dataset, std::span<const std::size_t> origins, const NormalizedRegions& normalized,
                     const ModelParams& params, const ModelConfig& config, std::size_t threads) {
    auto batches = full_batches(dataset, origins, normalized, 1);
    return mean_eval_loss(batches, params, config, threads);
}

TrainResult train(const Dataset& dataset, const SplitAssignment& split, const ModelConfig& model_config,
                  const TrainConfig& train_config, const EpochCallback& on_epoch) {
    model_config.validate();
    train_config.validate();
    const auto train_idx = split_indices(dataset, split, SplitPart::train);
    const auto val_idx = split_indices(dataset, split, SplitPart::val);
    if (train_idx.empty() || val_idx.empty()) throw ValidationError("train: train and validation splits must be non-empty");

    const NormalizedRegions normalized = normalize_features(dataset.regions(), std::nullopt, train_idx, dataset.lambda_max());
    const auto val_batches = full_batches(dataset, val_idx, normalized, 1);
    const std::size_t cap = static_cast<std::size_t>(model_config.max_destinations);

    TrainResult result;
    result.stats = normalized.stats;
    ModelParams params = init_model_params(model_config, train_config.seed);
    OptimizerState state = OptimizerState::zeros_like(params);
    result.best = params;
    result.best_val_loss = std::numeric_limits<double>::infinity();

    std::vector<ModelParams> chunk_grads(kReduceChunk, zeros_like(params));
    std::vector<double> chunk_losses(kReduceChunk);
    int since_best = 0;

    for (int epoch = 1; epoch <= train_config.max_epochs; ++epoch) {
        const auto start = std::chrono::steady_clock::now();
        std::vector<std::size_t> order = train_idx;
        CounterRng shuffle_rng(train_config.seed,
                               combine_keys({stream_id("train/shuffle"), static_cast<std::uint64_t>(epoch)}));
        shuffle_rng.shuffle(order);

        double epoch_loss = 0.0;
        for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(train_config.batch_origins)) {
            const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(train_config.batch_origins));
            ModelParams batch_grad = zeros_like(params);
            try {
            for (std::size_t cb = begin; cb < end; cb += kReduceChunk) {
                const std::size_t ce = std::min(end, cb + kReduceChunk);
                parallel_for(ce - cb, train_config.threads, [&](std::size_t k) {
                    const std::size_t origin = order[cb + k];
                    OriginBatch b = build_origin_batch(dataset, origin, cap, train_config.seed,
                                                       static_cast<std::uint64_t>(epoch));
                    attach_inputs(b, dataset, normalized);
                    CounterRng drop(train_config.seed, combine_keys({stream_id("train/dropout"), origin,
                                                                     static_cast<std::uint64_t>(epoch)}));
                    for (auto& e : chunk_grads[k].tensors()) e.value->setZero();
                    chunk_losses[k] = loss_and_gradient(b, params, model_config, Mode::train, &drop, chunk_grads[k]);
                });
                for (std::size_t k = 0; k < ce - cb; ++k) {
                    add_scaled(batch_grad, chunk_grads[k]);
                    epoch_loss += chunk_losses[k];
                }
            }
                rmsprop_step(params, batch_grad, state, train_config);
            } catch (const NumericError& e) {
                throw NumericError(std::string(e.what()) + " (epoch " + std::to_string(epoch) + ", batch starting at " +
                                   std::to_string(begin) + ")");
            }
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = epoch_loss / static_cast<double>(order.size());
        try {
            rec.val_loss = mean_eval_loss(val_batches, params, model_config, train_config.threads);
        } catch (const NumericError& e) {
            throw NumericError(std::string(e.what()) + " (validation after epoch " + std::to_string(epoch) + ")");
        }
        if (!std::isfinite(rec.val_loss))
            throw NumericError("non-finite validation loss at epoch " + std::to_string(epoch));
        rec.improved = rec.val_loss < result.best_val_loss;
        if (rec.improved) {
            result.best_val_loss = rec.val_loss;
            result.best = params;
            result.best_epoch = epoch;
            since_best = 0;
        } else {
            ++since_best;
        }
        rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        result.log.push_back(rec);
        if (on_epoch) on_epoch(rec);
        if (since_best >= train_config.patience) break;
    }
    return result;
}

void write_training_log(const std::filesystem::path& path, std::span<const EpochRecord> log) {
    auto out = csv::open_output(path);
    out << "epoch,train_loss,val_loss,seconds,improved\n";
    for (const auto& r : log)
        out << r.epoch << ',' << csv::format_double(r.train_loss) << ',' << csv::format_double(r.val_loss) << ','
            << csv::format_double(r.seconds) << ',' << (r.improved ? 1 : 0) << '\n';
}

}  // namespace transflower
