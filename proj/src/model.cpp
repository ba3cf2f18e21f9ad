#include "transflower/model.hpp"

#include <cmath>

#include "transflower/csv.hpp"
#include "transflower/errors.hpp"
#include "transflower/kvconfig.hpp"

namespace transflower {

using nn::Matrix;

std::size_t OriginBatch::active() const {
    std::size_t n = 0;
    for (bool m : mask) n += m ? 1 : 0;
    return n;
}

std::string_view to_string(RleVariant v) {
    switch (v) {
        case RleVariant::none: return "none";
        case RleVariant::rle: return "rle";
        case RleVariant::rle_prime: return "rle_prime";
    }
    return "?";
}

std::string_view to_string(PredictorVariant v) {
    return v == PredictorVariant::transformer ? "transformer" : "feedforward_only";
}

RleVariant parse_rle_variant(std::string_view text) {
    if (text == "none") return RleVariant::none;
    if (text == "rle") return RleVariant::rle;
    if (text == "rle_prime") return RleVariant::rle_prime;
    throw ValidationError("unknown rle variant '" + std::string(text) + "'");
}

PredictorVariant parse_predictor_variant(std::string_view text) {
    if (text == "transformer") return PredictorVariant::transformer;
    if (text == "feedforward_only") return PredictorVariant::feedforward_only;
    throw ValidationError("unknown predictor variant '" + std::string(text) + "'");
}

void ModelConfig::validate() const {
    auto fail = [](const std::string& what) { throw ValidationError("model config: " + what); };
    if (d_geo < 1) fail("d_geo must be positive");
    encoder.validate();
    if (n_layers < 0) fail("n_layers must be >= 0");
    if (n_heads < 1 || d_model() % n_heads != 0) fail("d_model must be divisible by n_heads");
    if (ffn_hidden < 1) fail("ffn_hidden must be positive");
    if (!(dropout >= 0 && dropout < 1)) fail("dropout must be in [0, 1)");
    if (max_destinations < 1) fail("max_destinations must be >= 1");
    if ((rle_variant == RleVariant::rle) != encoder.basis_b.has_value())
        fail("basis_b must be present exactly for the two-branch encoder");
}

void apply_rle_variant(ModelConfig& config, RleVariant variant) {
    config.rle_variant = variant;
    if (variant == RleVariant::rle) config.encoder.basis_b = rotate_basis(config.encoder.basis_a, M_PI / 3.0);
    else config.encoder.basis_b.reset();
}

std::map<std::string, std::string> ModelConfig::to_kv() const {
    return {
        {"model.d_geo", std::to_string(d_geo)},
        {"model.d_loc", std::to_string(encoder.d_loc)},
        {"model.rle_hidden", std::to_string(encoder.hidden)},
        {"model.n_scales", std::to_string(encoder.n_scales)},
        {"model.lambda_min", csv::format_double(encoder.lambda_min)},
        {"model.lambda_max", csv::format_double(encoder.lambda_max)},
        {"model.n_layers", std::to_string(n_layers)},
        {"model.n_heads", std::to_string(n_heads)},
        {"model.ffn_hidden", std::to_string(ffn_hidden)},
        {"model.dropout", csv::format_double(dropout)},
        {"model.rle_variant", std::string(to_string(rle_variant))},
        {"model.predictor_variant", std::string(to_string(predictor_variant))},
        {"model.max_destinations", std::to_string(max_destinations)},
        {"model.scaled_attention", scaled_attention ? "true" : "false"},
    };
}

ModelConfig ModelConfig::from_kv(const std::map<std::string, std::string>& kv) {
    ModelConfig c;
    c.d_geo = static_cast<int>(kv_int(kv, "model.d_geo"));
    c.encoder.d_loc = static_cast<int>(kv_int(kv, "model.d_loc"));
    c.encoder.hidden = static_cast<int>(kv_int(kv, "model.rle_hidden"));
    c.encoder.n_scales = static_cast<int>(kv_int(kv, "model.n_scales"));
    c.encoder.lambda_min = kv_double(kv, "model.lambda_min");
    c.encoder.lambda_max = kv_double(kv, "model.lambda_max");
    c.n_layers = static_cast<int>(kv_int(kv, "model.n_layers"));
    c.n_heads = static_cast<int>(kv_int(kv, "model.n_heads"));
    c.ffn_hidden = static_cast<int>(kv_int(kv, "model.ffn_hidden"));
    c.dropout = kv_double(kv, "model.dropout");
    c.predictor_variant = parse_predictor_variant(kv_require(kv, "model.predictor_variant"));
    c.max_destinations = static_cast<int>(kv_int(kv, "model.max_destinations"));
    c.scaled_attention = kv_bool(kv, "model.scaled_attention");
    apply_rle_variant(c, parse_rle_variant(kv_require(kv, "model.rle_variant")));
    c.validate();
    return c;
}

// ---------------------------------------------------------------- parameters

namespace {

template <typename Params, typename F>
void visit_linear(Params& p, const std::string& name, F&& f) {
    f(name + ".weight", p.weight);
    f(name + ".bias", p.bias);
}

template <typename Params, typename F>
void visit_params(Params& p, F&& f) {
    visit_linear(p.geo, "geo", f);
    if (p.rle) {
        visit_linear(p.rle->branch_a.first, "rle.a.first", f);
        visit_linear(p.rle->branch_a.second, "rle.a.second", f);
        if (p.rle->branch_b) {
            visit_linear(p.rle->branch_b->first, "rle.b.first", f);
            visit_linear(p.rle->branch_b->second, "rle.b.second", f);
        }
        if (p.rle->fusion) visit_linear(*p.rle->fusion, "rle.fusion", f);
    }
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        auto& layer = p.layers[l];
        const std::string pre = "layer" + std::to_string(l) + ".";
        for (std::size_t h = 0; h < layer.attention.n_heads; ++h) {
            const std::string hs = std::to_string(h);
            f(pre + "attn.w_q" + hs, layer.attention.w_q[h]);
            f(pre + "attn.w_k" + hs, layer.attention.w_k[h]);
            f(pre + "attn.w_v" + hs, layer.attention.w_v[h]);
        }
        f(pre + "attn.w_z", layer.attention.w_z);
        f(pre + "norm1.gain", layer.norm1.gain);
        f(pre + "norm1.bias", layer.norm1.bias);
        visit_linear(layer.ffn_in, pre + "ffn_in", f);
        visit_linear(layer.ffn_out, pre + "ffn_out", f);
        f(pre + "norm2.gain", layer.norm2.gain);
        f(pre + "norm2.bias", layer.norm2.bias);
    }
    visit_linear(p.head, "head", f);
}

}  // namespace

std::vector<ModelParams::Entry> ModelParams::tensors() {
    std::vector<Entry> out;
    visit_params(*this, [&](const std::string& name, Matrix& m) { out.push_back({name, &m}); });
    return out;
}

std::vector<std::pair<std::string, const Matrix*>> ModelParams::tensors() const {
    std::vector<std::pair<std::string, const Matrix*>> out;
    visit_params(*this, [&](const std::string& name, const Matrix& m) { out.emplace_back(name, &m); });
    return out;
}

std::size_t ModelParams::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, m] : tensors()) n += static_cast<std::size_t>(m->size());
    return n;
}

ModelParams zero_model_params(const ModelConfig& config) {
    config.validate();
    const auto d = static_cast<std::size_t>(config.d_model());
    ModelParams p;
    p.geo = nn::LinearParams::zeros(kGeoInputWidth, static_cast<std::size_t>(config.d_geo));
    if (config.rle_variant != RleVariant::none)
        p.rle = zero_rle_params(config.encoder, config.rle_variant == RleVariant::rle);
    if (config.predictor_variant == PredictorVariant::transformer) {
        for (int l = 0; l < config.n_layers; ++l) {
            TransformerLayerParams layer;
            layer.attention = nn::AttentionParams::zeros(d, static_cast<std::size_t>(config.n_heads));
            layer.attention.scaled = config.scaled_attention;
            layer.norm1 = nn::LayerNormParams::identity(d);
            layer.ffn_in = nn::LinearParams::zeros(d, static_cast<std::size_t>(config.ffn_hidden));
            layer.ffn_out = nn::LinearParams::zeros(static_cast<std::size_t>(config.ffn_hidden), d);
            layer.norm2 = nn::LayerNormParams::identity(d);
            p.layers.push_back(std::move(layer));
        }
    }
    p.head = nn::LinearParams::zeros(d, 1);
    return p;
}

ModelParams init_model_params(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    CounterRng rng(seed, stream_id("model/init"));
    const auto d = static_cast<std::size_t>(config.d_model());
    ModelParams p = zero_model_params(config);
    p.geo = nn::LinearParams::init(kGeoInputWidth, static_cast<std::size_t>(config.d_geo), rng);
    if (config.rle_variant != RleVariant::none)
        p.rle = init_rle_params(config.encoder, config.rle_variant == RleVariant::rle, rng);
    for (auto& layer : p.layers) {
        layer.attention = nn::AttentionParams::init(d, static_cast<std::size_t>(config.n_heads), rng);
        layer.attention.scaled = config.scaled_attention;
        layer.ffn_in = nn::LinearParams::init(d, static_cast<std::size_t>(config.ffn_hidden), rng);
        layer.ffn_out = nn::LinearParams::init(static_cast<std::size_t>(config.ffn_hidden), d, rng);
    }
    p.head = nn::LinearParams::init(d, 1, rng);
    return p;
}

ModelParams zeros_like(const ModelParams& like) {
    ModelParams out = like;
    for (auto& e : out.tensors()) e.value->setZero();
    return out;
}

void check_layout(const ModelParams& params, const ModelConfig& config) {
    const ModelParams expected = zero_model_params(config);
    const auto a = params.tensors();
    const auto b = expected.tensors();
    if (a.size() != b.size()) throw ShapeError("model parameters do not match the configured layout");
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].first != b[i].first || a[i].second->rows() != b[i].second->rows() ||
            a[i].second->cols() != b[i].second->cols())
            throw ShapeError("model parameter '" + a[i].first + "' does not match the configured layout");
    }
}

std::vector<double> flatten(const ModelParams& params) {
    std::vector<double> flat;
    flat.reserve(params.parameter_count());
    for (const auto& [name, m] : params.tensors()) flat.insert(flat.end(), m->data(), m->data() + m->size());
    return flat;
}

void unflatten(std::span<const double> flat, ModelParams& params) {
    std::size_t pos = 0;
    for (auto& e : params.tensors()) {
        const auto n = static_cast<std::size_t>(e.value->size());
        if (pos + n > flat.size()) throw ShapeError("unflatten: vector too short");
        std::copy(flat.begin() + static_cast<std::ptrdiff_t>(pos), flat.begin() + static_cast<std::ptrdiff_t>(pos + n),
                  e.value->data());
        pos += n;
    }
    if (pos != flat.size()) throw ShapeError("unflatten: vector too long");
}

void add_scaled(ModelParams& into, const ModelParams& from, double scale) {
    auto a = into.tensors();
    auto b = from.tensors();
    if (a.size() != b.size()) throw ShapeError("add_scaled: layouts differ");
    for (std::size_t i = 0; i < a.size(); ++i) *a[i].value += scale * *b[i].second;
}

// ---------------------------------------------------------------- forward

Matrix encode_geo(const Matrix& geo_input, const nn::LinearParams& geo) {
    if (geo_input.cols() != static_cast<Eigen::Index>(kGeoInputWidth))
        throw ShapeError("encode_geo: expected " + std::to_string(kGeoInputWidth) + " input columns");
    return nn::relu(nn::linear(geo_input, geo));
}

std::vector<double> encode_geo(const Features& origin, const Features& dest, double distance,
                               const nn::LinearParams& geo) {
    Matrix row(1, static_cast<Eigen::Index>(kGeoInputWidth));
    for (std::size_t k = 0; k < kFeatureCount; ++k) {
        row(0, static_cast<Eigen::Index>(k)) = origin[k];
        row(0, static_cast<Eigen::Index>(kFeatureCount + k)) = dest[k];
    }
    row(0, static_cast<Eigen::Index>(2 * kFeatureCount)) = distance;
    Matrix out = encode_geo(row, geo);
    return std::vector<double>(out.data(), out.data() + out.size());
}

class ForwardTrace {
public:
    struct Layer {
        nn::AttentionOutput attention;
        nn::LayerNormCache norm1;
        Matrix n1;
        Matrix hidden;
        nn::DropoutResult hidden_drop;
        nn::LayerNormCache norm2;
    };

    std::vector<std::size_t> active;
    Matrix geo_input;
    Matrix geo_out;
    RleCache rle;
    nn::DropoutResult embed_drop;
    std::vector<Layer> layers;
    Matrix final_embedding;
};

void ForwardTraceDeleter::operator()(ForwardTrace* t) const { delete t; }

namespace {

Matrix embed_active(const Matrix& geo_input, std::span<const Vec2> rel, const ModelParams& params,
                    const ModelConfig& config, ForwardTrace& t) {
    t.geo_input = geo_input;
    t.geo_out = encode_geo(geo_input, params.geo);
    Matrix e = Matrix::Zero(geo_input.rows(), config.d_model());
    e.leftCols(config.d_geo) = t.geo_out;
    if (config.rle_variant != RleVariant::none) {
        if (!params.rle) throw ShapeError("model config requires relative location encoder parameters");
        e.rightCols(config.encoder.d_loc) = rle_encode(rel, config.encoder, *params.rle, &t.rle);
    }
    return e;
}

}  // namespace

Matrix embed_flows(const OriginBatch& batch, const ModelParams& params, const ModelConfig& config) {
    ForwardTrace t;
    std::vector<Eigen::Index> rows;
    std::vector<Vec2> rel;
    for (std::size_t s = 0; s < batch.slots(); ++s)
        if (batch.mask[s]) {
            rows.push_back(static_cast<Eigen::Index>(s));
            rel.push_back(batch.rel[s]);
        }
    Matrix input = batch.geo_input(rows, Eigen::all);
    return embed_active(input, rel, params, config, t);
}

std::vector<double> embed_flow(const Features& origin, const Features& dest, double distance, Vec2 rel,
                               const ModelParams& params, const ModelConfig& config) {
    Matrix row(1, static_cast<Eigen::Index>(kGeoInputWidth));
    for (std::size_t k = 0; k < kFeatureCount; ++k) {
        row(0, static_cast<Eigen::Index>(k)) = origin[k];
        row(0, static_cast<Eigen::Index>(kFeatureCount + k)) = dest[k];
    }
    row(0, static_cast<Eigen::Index>(2 * kFeatureCount)) = distance;
    ForwardTrace t;
    const Vec2 rels[1] = {rel};
    Matrix e = embed_active(row, rels, params, config, t);
    return std::vector<double>(e.data(), e.data() + e.size());
}

PredictionResult forward_origin(const OriginBatch& batch, const ModelParams& params, const ModelConfig& config,
                                const ForwardOptions& options) {
    const std::size_t slots = batch.slots();
    if (batch.target.size() != slots || batch.rel.size() != slots ||
        batch.geo_input.rows() != static_cast<Eigen::Index>(slots))
        throw ShapeError("forward_origin: batch fields disagree on slot count");
    const bool training = options.mode == Mode::train;
    if (training && config.dropout > 0 && options.rng == nullptr)
        throw ValidationError("forward_origin: train mode with dropout needs an rng");

    auto trace = std::make_unique<ForwardTrace>();
    ForwardTrace& t = *trace;
    std::vector<Eigen::Index> rows;
    std::vector<Vec2> rel;
    for (std::size_t s = 0; s < slots; ++s) {
        if (!batch.mask[s]) continue;
        t.active.push_back(s);
        rows.push_back(static_cast<Eigen::Index>(s));
        rel.push_back(batch.rel[s]);
    }
    if (t.active.empty()) throw ValidationError("forward_origin: batch for '" + batch.origin_id + "' is fully masked");
    const auto m = static_cast<Eigen::Index>(t.active.size());

    CounterRng no_rng(0, 0);
    CounterRng& rng = options.rng ? *options.rng : no_rng;

    Matrix e = embed_active(batch.geo_input(rows, Eigen::all), rel, params, config, t);
    t.embed_drop = nn::dropout(e, config.dropout, training, rng);
    e = t.embed_drop.output;

    const nn::Mask all(static_cast<std::size_t>(m), true);
    for (const auto& lp : params.layers) {
        ForwardTrace::Layer layer;
        layer.attention = nn::attention_layer(e, lp.attention, all);
        layer.n1 = nn::layer_norm(layer.attention.output, lp.norm1, &layer.norm1);
        layer.hidden = nn::relu(nn::linear(layer.n1, lp.ffn_in));
        layer.hidden_drop = nn::dropout(layer.hidden, config.dropout, training, rng);
        Matrix sum = layer.n1 + nn::linear(layer.hidden_drop.output, lp.ffn_out);
        e = nn::layer_norm(sum, lp.norm2, &layer.norm2);
        t.layers.push_back(std::move(layer));
    }
    t.final_embedding = e;
    const Matrix scores = nn::linear(e, params.head);
    nn::check_finite(scores, "prediction scores for origin '" + batch.origin_id + "'");

    PredictionResult r;
    r.mask = batch.mask;
    r.scores.assign(slots, 0.0);
    for (Eigen::Index i = 0; i < m; ++i) r.scores[t.active[static_cast<std::size_t>(i)]] = scores(i, 0);
    r.probs = nn::softmax(r.scores, batch.mask);
    r.volumes.resize(slots);
    for (std::size_t s = 0; s < slots; ++s) r.volumes[s] = r.probs[s] * batch.outflow;

    if (options.capture_attention) {
        for (const auto& layer : t.layers) {
            std::vector<Matrix> heads;
            for (const Matrix& w : layer.attention.weights) {
                Matrix full = Matrix::Zero(static_cast<Eigen::Index>(slots), static_cast<Eigen::Index>(slots));
                for (Eigen::Index i = 0; i < m; ++i)
                    for (Eigen::Index j = 0; j < m; ++j)
                        full(static_cast<Eigen::Index>(t.active[static_cast<std::size_t>(i)]),
                             static_cast<Eigen::Index>(t.active[static_cast<std::size_t>(j)])) = w(i, j);
                heads.push_back(std::move(full));
            }
            r.attentions.push_back(std::move(heads));
        }
    }
    if (options.trace) *options.trace = ForwardTracePtr(trace.release());
    return r;
}

void backward_origin(const ForwardTrace& t, const ModelParams& params, const ModelConfig& config,
                     std::span<const double> grad_scores, ModelParams& grad) {
    const auto m = static_cast<Eigen::Index>(t.active.size());
    Matrix gs(m, 1);
    for (Eigen::Index i = 0; i < m; ++i) gs(i, 0) = grad_scores[t.active[static_cast<std::size_t>(i)]];

    Matrix ge;
    nn::linear_backward(t.final_embedding, params.head, gs, grad.head, &ge);
    for (std::size_t l = t.layers.size(); l-- > 0;) {
        const auto& layer = t.layers[l];
        const auto& lp = params.layers[l];
        auto& lg = grad.layers[l];
        Matrix g_sum;
        nn::layer_norm_backward(layer.norm2, lp.norm2, ge, lg.norm2, g_sum);
        Matrix g_hidden;
        nn::linear_backward(layer.hidden_drop.output, lp.ffn_out, g_sum, lg.ffn_out, &g_hidden);
        g_hidden = nn::relu_backward(layer.hidden, nn::dropout_backward(layer.hidden_drop, g_hidden));
        Matrix g_n1;
        nn::linear_backward(layer.n1, lp.ffn_in, g_hidden, lg.ffn_in, &g_n1);
        g_n1 += g_sum;
        Matrix g_attn;
        nn::layer_norm_backward(layer.norm1, lp.norm1, g_n1, lg.norm1, g_attn);
        nn::attention_backward(layer.attention.cache, layer.attention.weights, lp.attention, g_attn, lg.attention, ge);
    }
    ge = nn::dropout_backward(t.embed_drop, ge);

    const Matrix g_geo = nn::relu_backward(t.geo_out, ge.leftCols(config.d_geo));
    nn::linear_backward(t.geo_input, params.geo, g_geo, grad.geo, nullptr);
    if (config.rle_variant != RleVariant::none)
        rle_backward(t.rle, *params.rle, ge.rightCols(config.encoder.d_loc), *grad.rle);
}

}  // namespace transflower
