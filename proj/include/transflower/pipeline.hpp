#ifndef TRANSFLOWER_PIPELINE_HPP
#define TRANSFLOWER_PIPELINE_HPP

// Glue between the model, the baselines and the metrics: per-origin volume
// predictions over observed destination sets, their CSV form, and OD maps.

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "transflower/analysis.hpp"
#include "transflower/baselines.hpp"
#include "transflower/geodata.hpp"
#include "transflower/metrics.hpp"
#include "transflower/model.hpp"
#include "transflower/train.hpp"

namespace transflower {

/// Named model variants: full, no-rle, rle-prime, deepgravity, deepgravity-rle.
void apply_variant(ModelConfig& config, std::string_view variant);
std::string_view variant_name(const ModelConfig& config);

struct PredictionRow {
    std::size_t origin = 0;
    std::size_t dest = 0;
    double predicted = 0.0;
    double real = 0.0;
};

/// Every observed destination of every origin, in origin order then
/// destination order of the flow file.
std::vector<PredictionRow> predict_model(const Dataset& dataset, std::span<const std::size_t> origins,
                                         const NormalizedRegions& normalized, const ModelParams& params,
                                         const ModelConfig& config, std::size_t threads = 0);

/// Candidates exclude the origin itself; a self-flow is predicted as 0.
std::vector<PredictionRow> predict_gravity(const Dataset& dataset, std::span<const std::size_t> origins,
                                           GravityParams params);

struct RadiationPredictions {
    std::vector<PredictionRow> rows;
    /// Origins that fell back to a uniform allocation.
    std::size_t warnings = 0;
};
RadiationPredictions predict_radiation(const Dataset& dataset, std::span<const std::size_t> origins);

/// Predicted map keeps only nonzero predictions; the real map holds every
/// observed pair.
ODMap predicted_map(const Dataset& dataset, std::span<const PredictionRow> rows);
ODMap real_map(const Dataset& dataset, std::span<const PredictionRow> rows);

/// `origin_id,dest_id,volume_pred,volume_real`.
void write_predictions(const std::filesystem::path& path, const Dataset& dataset, std::span<const PredictionRow> rows);
std::vector<PredictionRow> load_predictions(const std::filesystem::path& path, const Dataset& dataset);

std::vector<ResidualPoint> residual_points(const Dataset& dataset, std::span<const PredictionRow> rows);

/// Model config and normalization statistics restored from a checkpoint.
struct LoadedModel {
    ModelConfig config;
    ModelParams params;
    NormalizationStats stats;
};
LoadedModel load_model(const std::filesystem::path& checkpoint);
void save_model(const std::filesystem::path& checkpoint, const ModelParams& params, const ModelConfig& config,
                const NormalizationStats& stats);

}  // namespace transflower

#endif  // TRANSFLOWER_PIPELINE_HPP
