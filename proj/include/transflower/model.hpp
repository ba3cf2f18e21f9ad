#ifndef TRANSFLOWER_MODEL_HPP
#define TRANSFLOWER_MODEL_HPP

// End-to-end flow model: geographic feature encoder and relative-location
// encoder produce one embedding per candidate flow; an N-layer post-norm
// transformer lets the flows of one origin attend to each other; a linear
// head scores each flow and a masked softmax allocates the outflow.

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "transflower/batch.hpp"
#include "transflower/locenc.hpp"
#include "transflower/nn.hpp"

namespace transflower {

enum class RleVariant { none, rle, rle_prime };
enum class PredictorVariant { transformer, feedforward_only };

std::string_view to_string(RleVariant v);
std::string_view to_string(PredictorVariant v);
RleVariant parse_rle_variant(std::string_view text);
PredictorVariant parse_predictor_variant(std::string_view text);

struct ModelConfig {
    int d_geo = 256;
    EncoderConfig encoder;
    int n_layers = 2;
    int n_heads = 8;
    int ffn_hidden = 256;
    double dropout = 0.1;
    RleVariant rle_variant = RleVariant::rle;
    PredictorVariant predictor_variant = PredictorVariant::transformer;
    int max_destinations = 256;
    bool scaled_attention = false;

    int d_model() const { return d_geo + encoder.d_loc; }
    /// Also checks that basis_b is present exactly when rle_variant is rle.
    void validate() const;

    /// Canonical key=value form used in checkpoints and run_config echoes.
    std::map<std::string, std::string> to_kv() const;
    static ModelConfig from_kv(const std::map<std::string, std::string>& kv);
};

/// Sets basis_b for the two-branch encoder (basis_a rotated by π/3), clears
/// it otherwise.
void apply_rle_variant(ModelConfig& config, RleVariant variant);

struct TransformerLayerParams {
    nn::AttentionParams attention;
    nn::LayerNormParams norm1;
    nn::LinearParams ffn_in;
    nn::LinearParams ffn_out;
    nn::LayerNormParams norm2;
};

struct ModelParams {
    nn::LinearParams geo;  // 41 -> d_geo, followed by ReLU
    std::optional<RleParams> rle;
    std::vector<TransformerLayerParams> layers;
    nn::LinearParams head;  // d_model -> 1

    struct Entry {
        std::string name;
        nn::Matrix* value;
    };
    /// Every learnable tensor in a fixed order with a stable name.
    std::vector<Entry> tensors();
    std::vector<std::pair<std::string, const nn::Matrix*>> tensors() const;
    std::size_t parameter_count() const;
};

ModelParams init_model_params(const ModelConfig& config, std::uint64_t seed);
/// Same layout as `like`, all zeros.
ModelParams zeros_like(const ModelParams& like);
/// Shapes implied by the config, all zeros.
ModelParams zero_model_params(const ModelConfig& config);
/// Throws ShapeError when `params` does not have the layout `config` implies.
void check_layout(const ModelParams& params, const ModelConfig& config);

std::vector<double> flatten(const ModelParams& params);
void unflatten(std::span<const double> flat, ModelParams& params);
void add_scaled(ModelParams& into, const ModelParams& from, double scale = 1.0);

enum class Mode { train, eval };

struct PredictionResult {
    std::vector<double> probs;
    std::vector<double> volumes;
    std::vector<double> scores;
    /// [layer][head], slots x slots, rows and columns of padded slots are 0.
    std::vector<std::vector<nn::Matrix>> attentions;
    nn::Mask mask;
};

/// Single linear layer plus ReLU over rows of [x_o, x_d, r].
nn::Matrix encode_geo(const nn::Matrix& geo_input, const nn::LinearParams& geo);
/// One flow's [x_o; x_d; r] through the geographic encoder.
std::vector<double> encode_geo(const Features& origin, const Features& dest, double distance,
                               const nn::LinearParams& geo);

/// Embeddings [x_{o,d}; loc_{o,d}] for the active slots of `batch`, in slot
/// order. The location block is zero when the config has no RLE.
nn::Matrix embed_flows(const OriginBatch& batch, const ModelParams& params, const ModelConfig& config);

/// Single-flow embedding from normalized features, normalized distance and
/// the planar relative location.
std::vector<double> embed_flow(const Features& origin, const Features& dest, double distance, Vec2 rel,
                               const ModelParams& params, const ModelConfig& config);

/// Activations kept by forward_origin for backward_origin.
class ForwardTrace;
struct ForwardTraceDeleter {
    void operator()(ForwardTrace* t) const;
};
using ForwardTracePtr = std::unique_ptr<ForwardTrace, ForwardTraceDeleter>;

struct ForwardOptions {
    Mode mode = Mode::eval;
    /// Dropout stream; required in train mode when dropout > 0.
    CounterRng* rng = nullptr;
    bool capture_attention = true;
    /// Filled when non-null, for a later backward_origin.
    ForwardTracePtr* trace = nullptr;
};

/// Only unmasked slots are computed; padded slots receive probability 0.
PredictionResult forward_origin(const OriginBatch& batch, const ModelParams& params, const ModelConfig& config,
                                const ForwardOptions& options = {});

/// Accumulates d(loss)/d(params) into `grad` given d(loss)/d(score) for every
/// slot (entries for padded slots are ignored).
void backward_origin(const ForwardTrace& trace, const ModelParams& params, const ModelConfig& config,
                     std::span<const double> grad_scores, ModelParams& grad);

/// Checkpoint file: "TFLW", u32 version, u64 length + key=value metadata,
/// tensors (u32 name length, name, u32 rank, u64 dims, float32 data), CRC32.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    ModelConfig config;
    ModelParams params;
    /// Extra metadata stored alongside the config (e.g. normalization stats).
    std::map<std::string, std::string> extra;
};

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params, const ModelConfig& config,
                     const std::map<std::string, std::string>& extra = {});
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace transflower

#endif  // TRANSFLOWER_MODEL_HPP
