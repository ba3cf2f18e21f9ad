#ifndef TRANSFLOWER_TRAIN_HPP
#define TRANSFLOWER_TRAIN_HPP

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "transflower/batch.hpp"
#include "transflower/geodata.hpp"
#include "transflower/kvconfig.hpp"
#include "transflower/model.hpp"

namespace transflower {

/// Per-feature log(1+x) mean/std fitted on training regions, plus the
/// distance scale.
struct NormalizationStats {
    Features mean{};
    Features std{};
    double lambda_max = 1.0;

    KeyValues to_kv() const;
    static NormalizationStats from_kv(const KeyValues& kv);
    friend bool operator==(const NormalizationStats&, const NormalizationStats&) = default;
};

struct NormalizedRegions {
    std::vector<Features> features;  // one per region, table order
    NormalizationStats stats;
};

/// x -> (log(1+x) - mean) / std per feature. When `stats` is empty they are
/// fitted on `fit_regions` (all regions if that is empty); a zero std is
/// clamped to 1.
NormalizedRegions normalize_features(const RegionTable& regions, const std::optional<NormalizationStats>& stats,
                                     std::span<const std::size_t> fit_regions, double lambda_max);

/// Candidate destinations of one origin in `cap` slots. More than `cap`
/// observed destinations: a uniform sample of `cap` keyed on (seed, origin,
/// epoch). Otherwise every observed destination followed by masked padding.
OriginBatch build_origin_batch(const Dataset& dataset, std::size_t origin, std::size_t cap, std::uint64_t seed,
                               std::uint64_t epoch);

/// Every observed destination of the origin, padded up to `min_slots`.
OriginBatch build_full_batch(const Dataset& dataset, std::size_t origin, std::size_t min_slots);

/// Fills geo_input and rel from normalized features.
void attach_inputs(OriginBatch& batch, const Dataset& dataset, const NormalizedRegions& normalized);

/// -sum_j target_j ln(max(p_j, 1e-12)) over unmasked slots.
double cross_entropy(const OriginBatch& batch, std::span<const double> probs);

/// Sum of cross_entropy over origins.
double cross_entropy(std::span<const OriginBatch> batches, std::span<const std::vector<double>> probs);

struct TrainConfig {
    double learning_rate = 1e-4;
    double momentum = 0.9;
    double rmsprop_alpha = 0.99;
    double rmsprop_eps = 1e-8;
    int batch_origins = 512;
    int patience = 20;
    int max_epochs = 200;
    std::uint64_t seed = kDefaultSeed;
    /// 0 = all hardware threads. Results do not depend on this value.
    std::size_t threads = 0;

    void validate() const;
};

struct OptimizerState {
    ModelParams square_avg;
    ModelParams momentum;

    static OptimizerState zeros_like(const ModelParams& params);
};

/// square_avg <- α·square_avg + (1-α)·g²; buf <- μ·buf + g/(√square_avg + ε);
/// p <- p - lr·buf. Updated parameters are rounded to float32.
void rmsprop_step(ModelParams& params, const ModelParams& grads, OptimizerState& state, const TrainConfig& config);

/// Loss of one origin and its gradient, accumulated into `grad`.
double loss_and_gradient(const OriginBatch& batch, const ModelParams& params, const ModelConfig& config, Mode mode,
                         CounterRng* rng, ModelParams& grad);

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;  // mean per-origin cross-entropy
    double val_loss = 0.0;
    double seconds = 0.0;
    bool improved = false;
};

struct TrainResult {
    ModelParams best;
    NormalizationStats stats;
    std::vector<EpochRecord> log;
    int best_epoch = 0;
    double best_val_loss = 0.0;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

TrainResult train(const Dataset& dataset, const SplitAssignment& split, const ModelConfig& model_config,
                  const TrainConfig& train_config, const EpochCallback& on_epoch = {});

/// CSV with header `epoch,train_loss,val_loss,seconds,improved`.
void write_training_log(const std::filesystem::path& path, std::span<const EpochRecord> log);

/// Mean per-origin cross-entropy of `params` over `origins` in eval mode.
double evaluate_loss(const Dataset& dataset, std::span<const std::size_t> origins, const NormalizedRegions& normalized,
                     const ModelParams& params, const ModelConfig& config, std::size_t threads);

}  // namespace transflower

#endif  // TRANSFLOWER_TRAIN_HPP
