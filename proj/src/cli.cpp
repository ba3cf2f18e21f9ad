#include "transflower/cli.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "transflower/analysis.hpp"
#include "transflower/baselines.hpp"
#include "transflower/csv.hpp"
#include "transflower/errors.hpp"
#include "transflower/metrics.hpp"
#include "transflower/pipeline.hpp"

namespace fs = std::filesystem;

namespace transflower::cli {

KeyValues default_run_config() {
    const SynthConfig s;
    const ModelConfig m;
    const TrainConfig t;
    const SplitRatios r;
    auto num = [](double v) { return csv::format_double(v); };
    KeyValues kv = {
        {"seed", std::to_string(kDefaultSeed)},
        {"out", "."},
        {"crs", "planar"},
        {"threads", "0"},
        {"data.dir", ""},
        {"data.split", ""},
        {"data.name", ""},
        {"split.train", num(r.train)},
        {"split.val", num(r.val)},
        {"split.test", num(r.test)},
        {"synth.n_regions", std::to_string(s.n_regions)},
        {"synth.extent_m", num(s.extent_m)},
        {"synth.jitter", num(s.jitter)},
        {"synth.pop_log_mean", num(s.pop_log_mean)},
        {"synth.pop_log_sigma", num(s.pop_log_sigma)},
        {"synth.poi_per_thousand", num(s.poi_per_thousand)},
        {"synth.beta0", num(s.beta0)},
        {"synth.gamma0", num(s.gamma0)},
        {"synth.epsilon", num(s.epsilon)},
        {"synth.theta0", num(s.theta0)},
        {"synth.mean_outflow", num(s.mean_outflow)},
        {"variant", "full"},
        {"model.d_geo", std::to_string(m.d_geo)},
        {"model.d_loc", std::to_string(m.encoder.d_loc)},
        {"model.rle_hidden", std::to_string(m.encoder.hidden)},
        {"model.n_scales", std::to_string(m.encoder.n_scales)},
        {"model.lambda_min", num(m.encoder.lambda_min)},
        {"model.lambda_max", "auto"},
        {"model.n_layers", std::to_string(m.n_layers)},
        {"model.n_heads", std::to_string(m.n_heads)},
        {"model.ffn_hidden", std::to_string(m.ffn_hidden)},
        {"model.dropout", num(m.dropout)},
        {"model.max_destinations", std::to_string(m.max_destinations)},
        {"model.scaled_attention", m.scaled_attention ? "true" : "false"},
        {"train.lr", num(t.learning_rate)},
        {"train.momentum", num(t.momentum)},
        {"train.alpha", num(t.rmsprop_alpha)},
        {"train.eps", num(t.rmsprop_eps)},
        {"train.batch_origins", std::to_string(t.batch_origins)},
        {"train.patience", std::to_string(t.patience)},
        {"train.max_epochs", std::to_string(t.max_epochs)},
        {"eval.checkpoint", ""},
        {"eval.split", "test"},
        {"eval.model", ""},
        {"baseline.kind", "gravity"},
        {"explain.kind", ""},
        {"explain.origin", ""},
        {"explain.compare_a", ""},
        {"explain.compare_b", ""},
        {"explain.cell_size", "20"},
        {"explain.grid_n", "100"},
        {"explain.k", "10"},
        {"explain.top_k", "10"},
        {"explain.per_head", "false"},
    };
    return kv;
}

KeyValues resolve_run_config(const KeyValues& file, const KeyValues& flags) {
    KeyValues kv = default_run_config();
    auto merge = [&](const KeyValues& from, const char* source, bool lenient) {
        for (const auto& [k, v] : from) {
            if (lenient && (k == "command" || k.starts_with("result."))) continue;
            if (!kv.contains(k)) throw ValidationError(std::string(source) + ": unknown key '" + k + "'");
            kv[k] = v;
        }
    };
    merge(file, "config file", true);
    merge(flags, "command line", false);
    return kv;
}

SynthConfig synth_config_from(const KeyValues& kv) {
    SynthConfig s;
    s.n_regions = static_cast<int>(kv_int(kv, "synth.n_regions"));
    s.extent_m = kv_double(kv, "synth.extent_m");
    s.jitter = kv_double(kv, "synth.jitter");
    s.pop_log_mean = kv_double(kv, "synth.pop_log_mean");
    s.pop_log_sigma = kv_double(kv, "synth.pop_log_sigma");
    s.poi_per_thousand = kv_double(kv, "synth.poi_per_thousand");
    s.beta0 = kv_double(kv, "synth.beta0");
    s.gamma0 = kv_double(kv, "synth.gamma0");
    s.epsilon = kv_double(kv, "synth.epsilon");
    s.theta0 = kv_double(kv, "synth.theta0");
    s.mean_outflow = kv_double(kv, "synth.mean_outflow");
    s.validate();
    return s;
}

ModelConfig model_config_from(const KeyValues& kv, double dataset_lambda_max) {
    KeyValues m = ModelConfig{}.to_kv();
    for (const auto& [k, v] : kv)
        if (k.starts_with("model.")) m[k] = v;
    if (m["model.lambda_max"] == "auto") m["model.lambda_max"] = csv::format_double(dataset_lambda_max);
    ModelConfig c = ModelConfig::from_kv(m);
    apply_variant(c, kv_require(kv, "variant"));
    c.validate();
    return c;
}

TrainConfig train_config_from(const KeyValues& kv) {
    TrainConfig t;
    t.learning_rate = kv_double(kv, "train.lr");
    t.momentum = kv_double(kv, "train.momentum");
    t.rmsprop_alpha = kv_double(kv, "train.alpha");
    t.rmsprop_eps = kv_double(kv, "train.eps");
    t.batch_origins = static_cast<int>(kv_int(kv, "train.batch_origins"));
    t.patience = static_cast<int>(kv_int(kv, "train.patience"));
    t.max_epochs = static_cast<int>(kv_int(kv, "train.max_epochs"));
    const long long seed = kv_int(kv, "seed");
    if (seed < 0) throw ValidationError("seed must be non-negative");
    t.seed = static_cast<std::uint64_t>(seed);
    const long long threads = kv_int(kv, "threads");
    if (threads < 0) throw ValidationError("threads must be non-negative");
    t.threads = static_cast<std::size_t>(threads);
    t.validate();
    return t;
}

SplitRatios split_ratios_from(const KeyValues& kv) {
    SplitRatios r;
    r.train = kv_double(kv, "split.train");
    r.val = kv_double(kv, "split.val");
    r.test = kv_double(kv, "split.test");
    return r;
}

namespace {

struct OptionSpec {
    const char* flag;
    const char* key;
    const char* help;
    bool is_flag = false;
};

const std::vector<OptionSpec> kGlobalOptions = {
    {"--seed", "seed", "Seed for every random stream"},
    {"--out", "out", "Output directory"},
    {"--crs", "crs", "Coordinate mode of region centroids: planar or geodesic"},
    {"--threads", "threads", "Worker threads (0 = all cores)"},
};

const std::vector<OptionSpec> kDataOptions = {
    {"--data", "data.dir", "Directory holding regions.csv and flows.csv"},
    {"--split-file", "data.split", "Split manifest (region_id,split); computed from --seed when absent"},
    {"--dataset-name", "data.name", "Dataset label in reports (default: data directory name)"},
    {"--train-ratio", "split.train", "Share of origins used for training"},
    {"--val-ratio", "split.val", "Share of origins used for validation"},
    {"--test-ratio", "split.test", "Share of origins used for testing"},
};

const std::vector<OptionSpec> kSynthOptions = {
    {"--n-regions", "synth.n_regions", "Number of regions (>= 4)"},
    {"--extent", "synth.extent_m", "Side of the square study area in meters"},
    {"--jitter", "synth.jitter", "Centroid jitter as a fraction of the grid cell"},
    {"--pop-log-mean", "synth.pop_log_mean", "Mean of log population"},
    {"--pop-log-sigma", "synth.pop_log_sigma", "Standard deviation of log population"},
    {"--poi-per-thousand", "synth.poi_per_thousand", "Mean place count per 1000 residents"},
    {"--beta0", "synth.beta0", "Planted destination-mass exponent"},
    {"--gamma0", "synth.gamma0", "Planted distance-decay rate"},
    {"--epsilon", "synth.epsilon", "Planted anisotropy strength in [0, 1)"},
    {"--theta0", "synth.theta0", "Planted anisotropy axis in radians"},
    {"--mean-outflow", "synth.mean_outflow", "Mean total outflow per origin"},
};

const std::vector<OptionSpec> kModelOptions = {
    {"--variant", "variant", "full, no-rle, rle-prime, deepgravity or deepgravity-rle"},
    {"--d-geo", "model.d_geo", "Width of the geographic feature embedding"},
    {"--d-loc", "model.d_loc", "Width of the location embedding"},
    {"--rle-hidden", "model.rle_hidden", "Hidden width of the location encoder"},
    {"--n-scales", "model.n_scales", "Number of sinusoidal scales"},
    {"--lambda-min", "model.lambda_min", "Smallest wavelength in meters"},
    {"--lambda-max", "model.lambda_max", "Largest wavelength in meters, or auto"},
    {"--n-layers", "model.n_layers", "Transformer layers"},
    {"--n-heads", "model.n_heads", "Attention heads"},
    {"--ffn-hidden", "model.ffn_hidden", "Feed-forward hidden width"},
    {"--dropout", "model.dropout", "Dropout rate"},
    {"--max-destinations", "model.max_destinations", "Destination slots per origin during training"},
    {"--scaled-attention", "model.scaled_attention", "Divide attention scores by sqrt(d_head)", true},
};

const std::vector<OptionSpec> kTrainOptions = {
    {"--lr", "train.lr", "RMSprop learning rate"},
    {"--momentum", "train.momentum", "RMSprop momentum"},
    {"--alpha", "train.alpha", "RMSprop smoothing constant"},
    {"--eps", "train.eps", "RMSprop epsilon"},
    {"--batch-origins", "train.batch_origins", "Origins per optimizer step"},
    {"--patience", "train.patience", "Early-stopping patience in epochs"},
    {"--max-epochs", "train.max_epochs", "Epoch limit"},
};

const std::vector<OptionSpec> kEvalOptions = {
    {"--checkpoint", "eval.checkpoint", "Model checkpoint"},
    {"--split", "eval.split", "Origins to score: train, val or test"},
    {"--name", "eval.model", "Model label in reports"},
};

const std::vector<OptionSpec> kExplainOptions = {
    {"--origin", "explain.origin", "Origin region id for attention maps"},
    {"--cell-size", "explain.cell_size", "Residual grid cell size in meters"},
    {"--grid-n", "explain.grid_n", "Cluster grid cells per axis"},
    {"--clusters", "explain.k", "Number of clusters"},
    {"--top-k", "explain.top_k", "Number of influencers to rank"},
    {"--per-head", "explain.per_head", "Also export per-layer, per-head attention", true},
};

class Bindings {
public:
    void add(CLI::App& app, const std::vector<OptionSpec>& specs) {
        for (const auto& s : specs) {
            auto& slot = values_.emplace_back(std::make_unique<std::string>());
            CLI::Option* opt = s.is_flag ? app.add_flag(s.flag, s.help) : app.add_option(s.flag, *slot, s.help);
            bound_.push_back({opt, s.key, slot.get(), s.is_flag});
        }
    }
    void add_positional(CLI::App& app, const char* name, const char* key, const char* help,
                        std::vector<std::string> choices) {
        auto& slot = values_.emplace_back(std::make_unique<std::string>());
        CLI::Option* opt = app.add_option(name, *slot, help)->required()->check(CLI::IsMember(std::move(choices)));
        bound_.push_back({opt, key, slot.get(), false});
    }

    KeyValues given() const {
        KeyValues kv;
        for (const auto& b : bound_)
            if (b.option->count() > 0) kv[b.key] = b.is_flag ? "true" : *b.value;
        return kv;
    }

private:
    struct Bound {
        CLI::Option* option;
        std::string key;
        std::string* value;
        bool is_flag;
    };
    std::vector<std::unique_ptr<std::string>> values_;
    std::vector<Bound> bound_;
};

// ---------------------------------------------------------------- helpers

fs::path out_dir(const KeyValues& kv) { return fs::path(kv_require(kv, "out")); }

void echo_config(const KeyValues& kv, const std::string& command, const KeyValues& results = {}) {
    KeyValues echo = kv;
    echo["command"] = command;
    for (const auto& [k, v] : results) echo["result." + k] = v;
    auto out = csv::open_output(out_dir(kv) / "run_config.txt");
    out << format_kv(echo);
}

Dataset load_dataset(const KeyValues& kv) {
    const std::string& dir = kv_require(kv, "data.dir");
    if (dir.empty()) throw ValidationError("--data is required");
    const fs::path regions_path = fs::path(dir) / "regions.csv";
    const fs::path flows_path = fs::path(dir) / "flows.csv";
    for (const auto& p : {regions_path, flows_path})
        if (!fs::exists(p)) throw ValidationError("missing input file " + p.string());
    RegionTable regions = load_regions(regions_path);
    std::vector<Flow> flows = load_flows(flows_path, regions);
    return Dataset(std::move(regions), std::move(flows), parse_crs(kv_require(kv, "crs")));
}

std::uint64_t seed_of(const KeyValues& kv) {
    const long long seed = kv_int(kv, "seed");
    if (seed < 0) throw ValidationError("seed must be non-negative");
    return static_cast<std::uint64_t>(seed);
}

std::size_t threads_of(const KeyValues& kv) {
    const long long t = kv_int(kv, "threads");
    if (t < 0) throw ValidationError("threads must be non-negative");
    return static_cast<std::size_t>(t);
}

/// Manifest from data.split, else one next to the checkpoint, else a fresh
/// split from the seed.
SplitAssignment resolve_split(const KeyValues& kv, const Dataset& dataset, const fs::path& checkpoint = {}) {
    const std::string& given = kv_require(kv, "data.split");
    if (!given.empty()) return load_split(given);
    if (!checkpoint.empty()) {
        const fs::path beside = checkpoint.parent_path() / "split.csv";
        if (fs::exists(beside)) return load_split(beside);
    }
    return split_by_origin(dataset, split_ratios_from(kv), seed_of(kv));
}

SplitPart parse_part(const std::string& text) {
    if (text == "train") return SplitPart::train;
    if (text == "val") return SplitPart::val;
    if (text == "test") return SplitPart::test;
    throw ValidationError("--split must be train, val or test, got '" + text + "'");
}

std::string dataset_name(const KeyValues& kv) {
    const std::string& name = kv_require(kv, "data.name");
    if (!name.empty()) return name;
    fs::path dir(kv_require(kv, "data.dir"));
    if (!dir.has_filename()) dir = dir.parent_path();
    return dir.filename().string();
}

fs::path require_checkpoint(const KeyValues& kv) {
    const std::string& ck = kv_require(kv, "eval.checkpoint");
    if (ck.empty()) throw ValidationError("--checkpoint is required");
    return ck;
}

NormalizedRegions normalized_for(const Dataset& dataset, const LoadedModel& model) {
    return normalize_features(dataset.regions(), model.stats, {}, model.stats.lambda_max);
}

void report(std::ostream& out, const EvalReport& r) {
    out << r.model << " on " << r.dataset << "/" << r.split << ": cpc "
        << (r.cpc ? csv::format_double(*r.cpc) : std::string("undefined")) << ", mae " << csv::format_double(r.mae)
        << ", rmse " << csv::format_double(r.rmse) << ", " << r.n_pairs << " pairs\n";
}

void finish_eval(const KeyValues& kv, const Dataset& dataset, std::span<const PredictionRow> rows,
                 const std::string& model, std::ostream& out) {
    const fs::path dir = out_dir(kv);
    write_predictions(dir / "predictions.csv", dataset, rows);
    const EvalReport r =
        evaluate(predicted_map(dataset, rows), real_map(dataset, rows), model, dataset_name(kv), kv_require(kv, "eval.split"));
    append_report(dir / "reports.csv", r);
    report(out, r);
}

// ---------------------------------------------------------------- commands

int cmd_synth(const KeyValues& kv, std::ostream& out) {
    const SynthConfig config = synth_config_from(kv);
    const std::uint64_t seed = seed_of(kv);
    const fs::path dir = out_dir(kv);
    echo_config(kv, "synth");
    const Dataset city = synth_city(config, seed);
    write_regions(dir / "regions.csv", city.regions());
    write_flows(dir / "flows.csv", city.flows());
    KeyValues truth;
    for (const auto& [k, v] : kv)
        if (k.starts_with("synth.")) truth[k] = v;
    truth["seed"] = std::to_string(seed);
    truth["mean_pairwise_distance_m"] = csv::format_double(mean_pairwise_distance(city.regions()));
    auto f = csv::open_output(dir / "ground_truth.txt");
    f << "# P(j|i) ~ pop_j^beta0 * exp(-gamma0 * (1 + epsilon*cos(2*(theta_ij - theta0))) * r_ij / mean_pairwise_distance_m)\n"
      << format_kv(truth);
    out << "wrote " << city.regions().size() << " regions and " << city.flows().size() << " flows to " << dir.string()
        << '\n';
    return kExitOk;
}

int cmd_split(const KeyValues& kv, std::ostream& out) {
    const Dataset dataset = load_dataset(kv);
    echo_config(kv, "split");
    const SplitAssignment split = split_by_origin(dataset, split_ratios_from(kv), seed_of(kv));
    write_split(out_dir(kv) / "split.csv", split);
    out << "split " << split.train_origins.size() << " train, " << split.val_origins.size() << " val, "
        << split.test_origins.size() << " test origins\n";
    return kExitOk;
}

int cmd_train(const KeyValues& kv, std::ostream& out) {
    const Dataset dataset = load_dataset(kv);
    const ModelConfig model_config = model_config_from(kv, dataset.lambda_max());
    const TrainConfig train_config = train_config_from(kv);
    const SplitAssignment split = resolve_split(kv, dataset);
    const fs::path dir = out_dir(kv);
    echo_config(kv, "train");
    write_split(dir / "split.csv", split);

    const TrainResult result = train(dataset, split, model_config, train_config, [&](const EpochRecord& r) {
        out << "epoch " << r.epoch << " train " << csv::format_double(r.train_loss) << " val "
            << csv::format_double(r.val_loss) << (r.improved ? " *" : "") << '\n';
    });
    save_model(dir / "checkpoint.tfw", result.best, model_config, result.stats);
    write_training_log(dir / "train_log.csv", result.log);
    out << "best epoch " << result.best_epoch << " (val " << csv::format_double(result.best_val_loss) << "), variant "
        << variant_name(model_config) << ", checkpoint " << (dir / "checkpoint.tfw").string() << '\n';
    return kExitOk;
}

int cmd_eval(const KeyValues& kv, const KeyValues& flags, std::ostream& out) {
    const fs::path ck = require_checkpoint(kv);
    const Dataset dataset = load_dataset(kv);
    const LoadedModel model = load_model(ck);
    if (flags.contains("variant")) {
        ModelConfig asked = model.config;
        apply_variant(asked, flags.at("variant"));
        if (variant_name(asked) != variant_name(model.config))
            throw ValidationError("checkpoint holds variant " + std::string(variant_name(model.config)) +
                                  ", not " + flags.at("variant"));
    }
    const SplitAssignment split = resolve_split(kv, dataset, ck);
    echo_config(kv, "eval");
    const auto origins = split_indices(dataset, split, parse_part(kv_require(kv, "eval.split")));
    const auto rows =
        predict_model(dataset, origins, normalized_for(dataset, model), model.params, model.config, threads_of(kv));
    const std::string& name = kv_require(kv, "eval.model");
    finish_eval(kv, dataset, rows, name.empty() ? std::string(variant_name(model.config)) : name, out);
    return kExitOk;
}

int cmd_baseline(const KeyValues& kv, std::ostream& out, std::ostream& err) {
    const Dataset dataset = load_dataset(kv);
    const SplitAssignment split = resolve_split(kv, dataset);
    const std::string kind = kv_require(kv, "baseline.kind");
    const auto origins = split_indices(dataset, split, parse_part(kv_require(kv, "eval.split")));
    echo_config(kv, "baseline");
    std::vector<PredictionRow> rows;
    KeyValues results;
    if (kind == "gravity") {
        const auto train_origins = split_indices(dataset, split, SplitPart::train);
        const GravityFit fit = fit_gravity(dataset, train_origins);
        if (fit.warning) err << "warning: gravity fit is degenerate or on the search boundary\n";
        results["gravity_beta"] = csv::format_double(fit.params.beta);
        results["gravity_gamma"] = csv::format_double(fit.params.gamma);
        results["gravity_warning"] = fit.warning ? "true" : "false";
        out << "gravity fit beta " << results["gravity_beta"] << " gamma " << results["gravity_gamma"] << '\n';
        rows = predict_gravity(dataset, origins, fit.params);
    } else if (kind == "radiation") {
        RadiationPredictions pred = predict_radiation(dataset, origins);
        if (pred.warnings > 0) err << "warning: " << pred.warnings << " origins used the uniform fallback\n";
        results["radiation_fallbacks"] = std::to_string(pred.warnings);
        rows = std::move(pred.rows);
    } else {
        throw ValidationError("baseline must be gravity or radiation");
    }
    echo_config(kv, "baseline", results);
    const std::string& name = kv_require(kv, "eval.model");
    finish_eval(kv, dataset, rows, name.empty() ? kind : name, out);
    return kExitOk;
}

/// Predictions of a checkpoint on the eval split, or rows read from a
/// predictions CSV.
std::vector<PredictionRow> residual_source(const KeyValues& kv, const Dataset& dataset, const fs::path& source) {
    if (!fs::exists(source)) throw ValidationError("missing input file " + source.string());
    if (source.extension() == ".csv") return load_predictions(source, dataset);
    const LoadedModel model = load_model(source);
    const SplitAssignment split = resolve_split(kv, dataset, source);
    const auto origins = split_indices(dataset, split, parse_part(kv_require(kv, "eval.split")));
    return predict_model(dataset, origins, normalized_for(dataset, model), model.params, model.config, threads_of(kv));
}

int cmd_explain(const KeyValues& kv, std::ostream& out, std::ostream& err) {
    const std::string kind = kv_require(kv, "explain.kind");
    const fs::path dir = out_dir(kv);
    if (kind == "attention") {
        const fs::path ck = require_checkpoint(kv);
        const std::string& origin_id = kv_require(kv, "explain.origin");
        if (origin_id.empty()) throw ValidationError("--origin is required for attention maps");
        const Dataset dataset = load_dataset(kv);
        const std::size_t origin = dataset.regions().index_of(origin_id);
        const LoadedModel model = load_model(ck);
        echo_config(kv, "explain");
        OriginBatch batch = build_full_batch(dataset, origin, 1);
        attach_inputs(batch, dataset, normalized_for(dataset, model));
        const auto top_k = kv_int(kv, "explain.top_k");
        if (top_k < 1) throw ValidationError("--top-k must be positive");
        const AttentionMap map =
            attention_map(batch, dataset.regions(), model.params, model.config, static_cast<std::size_t>(top_k));
        write_attention_csv(dir / ("attention_" + origin_id + ".csv"), map);
        write_influencers_csv(dir / ("influencers_" + origin_id + ".csv"), map);
        if (kv_bool(kv, "explain.per_head")) write_attention_heads_csv(dir / ("attention_heads_" + origin_id + ".csv"), map);
        out << "attention map for " << origin_id << ": " << batch.active() << " destinations, top influencer "
            << (map.influencers.empty() ? std::string("none") : map.influencers.front().region_id) << '\n';
        return kExitOk;
    }
    if (kind == "clusters") {
        const LoadedModel model = load_model(require_checkpoint(kv));
        if (!model.params.rle) throw ValidationError("the checkpoint has no relative-location encoder to cluster");
        echo_config(kv, "explain");
        const ClusterGrid grid =
            cluster_embeddings(*model.params.rle, model.config.encoder, model.stats.lambda_max,
                               static_cast<int>(kv_int(kv, "explain.grid_n")), static_cast<int>(kv_int(kv, "explain.k")),
                               threads_of(kv));
        if (grid.degenerate) err << "warning: all location embeddings are identical; one cluster\n";
        write_cluster_csv(dir / "clusters.csv", grid);
        write_cluster_svg(dir / "clusters.svg", grid, "location embedding clusters");
        out << "clustered " << grid.labels.size() << " cells; " << quarter_turn_disagreements(grid)
            << " cells differ from their quarter-turn image\n";
        return kExitOk;
    }
    if (kind == "residuals") {
        const Dataset dataset = load_dataset(kv);
        const double cell = kv_double(kv, "explain.cell_size");
        const std::string& a = kv_require(kv, "explain.compare_a");
        const std::string& b = kv_require(kv, "explain.compare_b");
        auto grid_of = [&](const fs::path& source) {
            const auto rows = residual_source(kv, dataset, source);
            const auto pts = residual_points(dataset, rows);
            ResidualGrid g = residual_grid(pts, dataset.lambda_max(), cell);
            if (g.clamped > 0) err << "warning: " << g.clamped << " flows fell outside the grid extent\n";
            return g;
        };
        if (a.empty() && b.empty()) {
            const fs::path ck = require_checkpoint(kv);
            echo_config(kv, "explain");
            const ResidualGrid g = grid_of(ck);
            write_residual_csv(dir / "residuals.csv", g);
            write_residual_svg(dir / "residuals.svg", g, "residual (real - predicted)");
            out << "residual grid with " << g.cells.size() << " occupied cells\n";
            return kExitOk;
        }
        if (a.empty() || b.empty()) throw ValidationError("--compare needs two sources");
        echo_config(kv, "explain");
        const ResidualGrid ga = grid_of(a), gb = grid_of(b);
        const ResidualGrid diff = residual_diff_grid(ga, gb);
        write_residual_csv(dir / "residuals_a.csv", ga);
        write_residual_csv(dir / "residuals_b.csv", gb);
        write_residual_csv(dir / "residual_diff.csv", diff, true);
        write_residual_svg(dir / "residuals_a.svg", ga, "residual A (real - predicted)");
        write_residual_svg(dir / "residuals_b.svg", gb, "residual B (real - predicted)");
        write_residual_svg(dir / "residual_diff.svg", diff, "residual A - residual B");
        out << "residual difference grid with " << diff.cells.size() << " cells\n";
        return kExitOk;
    }
    throw ValidationError("explain needs attention, clusters or residuals");
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Commuting-flow prediction with relative-location encoding and flow-to-flow attention", "transflower"};
    app.require_subcommand(1);
    std::string config_path;
    app.add_option("--config", config_path, "key = value file; command-line flags override it");
    Bindings bind;
    bind.add(app, kGlobalOptions);

    auto* synth = app.add_subcommand("synth", "Generate a synthetic city")->fallthrough();
    bind.add(*synth, kSynthOptions);

    auto* split = app.add_subcommand("split", "Write an origin split manifest")->fallthrough();
    bind.add(*split, kDataOptions);

    auto* train_cmd = app.add_subcommand("train", "Train a model")->fallthrough();
    bind.add(*train_cmd, kDataOptions);
    bind.add(*train_cmd, kModelOptions);
    bind.add(*train_cmd, kTrainOptions);

    auto* eval = app.add_subcommand("eval", "Score a checkpoint")->fallthrough();
    bind.add(*eval, kDataOptions);
    bind.add(*eval, kEvalOptions);
    bind.add(*eval, {{"--variant", "variant", "Expected variant of the checkpoint"}});

    auto* baseline = app.add_subcommand("baseline", "Fit and score a classical baseline")->fallthrough();
    bind.add_positional(*baseline, "kind", "baseline.kind", "gravity or radiation", {"gravity", "radiation"});
    bind.add(*baseline, kDataOptions);
    bind.add(*baseline, {{"--split", "eval.split", "Origins to score: train, val or test"},
                         {"--name", "eval.model", "Model label in reports"}});

    auto* explain = app.add_subcommand("explain", "Export attention maps, embedding clusters or residual grids")
                        ->fallthrough();
    bind.add_positional(*explain, "kind", "explain.kind", "attention, clusters or residuals",
                        {"attention", "clusters", "residuals"});
    bind.add(*explain, kDataOptions);
    bind.add(*explain, kEvalOptions);
    bind.add(*explain, kExplainOptions);
    std::vector<std::string> compare;
    explain->add_option("--compare", compare, "Two checkpoints or prediction CSVs to difference")->expected(2);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        KeyValues flags = bind.given();
        if (compare.size() == 2) {
            flags["explain.compare_a"] = compare[0];
            flags["explain.compare_b"] = compare[1];
        }
        const KeyValues file = config_path.empty() ? KeyValues{} : load_kv(config_path);
        const KeyValues kv = resolve_run_config(file, flags);
        parse_crs(kv_require(kv, "crs"));
        threads_of(kv);
        seed_of(kv);

        if (synth->parsed()) return cmd_synth(kv, out);
        if (split->parsed()) return cmd_split(kv, out);
        if (train_cmd->parsed()) return cmd_train(kv, out);
        if (eval->parsed()) return cmd_eval(kv, flags, out);
        if (baseline->parsed()) return cmd_baseline(kv, out, err);
        if (explain->parsed()) return cmd_explain(kv, out, err);
        err << app.help();
        return kExitUsage;
    } catch (const NumericError& e) {
        err << "numeric failure: " << e.what() << '\n';
        return kExitNumeric;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        if (dynamic_cast<const ValidationError*>(&e) && std::string_view(e.what()).find("required") != std::string_view::npos)
            err << "run with --help for usage\n";
        return kExitUsage;
    }
}

}  // namespace transflower::cli
