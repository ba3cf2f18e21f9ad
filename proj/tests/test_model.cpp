#include <doctest.h>

#include <cmath>
#include <fstream>
#include <numeric>

#include "test_util.hpp"
#include "transflower/errors.hpp"
#include "transflower/model.hpp"

using namespace transflower;
using nn::Matrix;

namespace {

ModelConfig tiny_config(RleVariant variant = RleVariant::rle) {
    ModelConfig c;
    c.d_geo = 8;
    c.encoder.d_loc = 4;
    c.encoder.hidden = 6;
    c.encoder.n_scales = 4;
    c.encoder.lambda_min = 10;
    c.encoder.lambda_max = 4000;
    c.n_layers = 2;
    c.n_heads = 2;
    c.ffn_hidden = 8;
    c.dropout = 0.0;
    apply_rle_variant(c, variant);
    return c;
}

// Random inputs in the first `active` slots, padding afterwards.
OriginBatch random_batch(std::size_t slots, std::size_t active, std::uint64_t seed) {
    CounterRng rng(seed, 0);
    OriginBatch b;
    b.origin_id = "O";
    b.outflow = 250.0;
    b.geo_input = Matrix::Zero(static_cast<Eigen::Index>(slots), kGeoInputWidth);
    b.rel.assign(slots, Vec2{});
    b.mask.assign(slots, false);
    b.dests.assign(slots, kPaddingSlot);
    b.target.assign(slots, 0.0);
    for (std::size_t s = 0; s < active; ++s) {
        b.mask[s] = true;
        b.dests[s] = s;
        b.target[s] = 1.0 / static_cast<double>(active);
        for (std::size_t k = 0; k < kGeoInputWidth; ++k)
            b.geo_input(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(k)) = rng.normal();
        b.rel[s] = {(rng.uniform() - 0.5) * 6000, (rng.uniform() - 0.5) * 6000};
    }
    return b;
}

void copy_slot(const OriginBatch& from, std::size_t i, OriginBatch& to, std::size_t j) {
    to.mask[j] = from.mask[i];
    to.dests[j] = from.dests[i];
    to.target[j] = from.target[i];
    to.rel[j] = from.rel[i];
    to.geo_input.row(static_cast<Eigen::Index>(j)) = from.geo_input.row(static_cast<Eigen::Index>(i));
}

}  // namespace

TEST_CASE("geographic encoder") {
    const nn::LinearParams zero = nn::LinearParams::zeros(kGeoInputWidth, 16);
    Features f{};
    f.fill(3.0);
    const auto x = encode_geo(f, f, 0.7, zero);
    CHECK(x.size() == 16);
    for (double v : x) CHECK(v == 0.0);

    CounterRng rng(1, 1);
    const nn::LinearParams p = nn::LinearParams::init(kGeoInputWidth, 16, rng);
    for (double v : encode_geo(f, f, 0.7, p)) CHECK(v >= 0.0);
    CHECK(kGeoInputWidth == 41);
}

TEST_CASE("flow embedding layout") {
    const ModelConfig config = tiny_config();
    ModelParams params = init_model_params(config, 5);
    Features f{};
    const auto e = embed_flow(f, f, 0.3, {100, 200}, params, config);
    CHECK(e.size() == static_cast<std::size_t>(config.d_model()));

    ModelConfig no_rle = tiny_config(RleVariant::none);
    ModelParams p2 = init_model_params(no_rle, 5);
    const auto e2 = embed_flow(f, f, 0.3, {100, 200}, p2, no_rle);
    for (int k = no_rle.d_geo; k < no_rle.d_model(); ++k) CHECK(e2[static_cast<std::size_t>(k)] == 0.0);
}

TEST_CASE("forward over 256 slots with 60 masked") {
    const ModelConfig config = tiny_config();
    const ModelParams params = init_model_params(config, 7);
    const OriginBatch b = random_batch(256, 196, 3);
    const PredictionResult r = forward_origin(b, params, config);
    double sum = 0.0;
    for (std::size_t s = 0; s < 256; ++s) {
        if (!b.mask[s]) {
            CHECK(r.probs[s] == 0.0);
            CHECK(r.volumes[s] == 0.0);
        }
        sum += r.probs[s];
    }
    CHECK(std::abs(sum - 1.0) <= 1e-6);
    CHECK(std::abs(std::accumulate(r.volumes.begin(), r.volumes.end(), 0.0) - b.outflow) <= 1e-4 * b.outflow);
    REQUIRE(r.attentions.size() == 2);
    for (const auto& layer : r.attentions)
        for (const Matrix& w : layer)
            for (std::size_t s = 0; s < 256; ++s) {
                const double row = w.row(static_cast<Eigen::Index>(s)).sum();
                if (b.mask[s]) CHECK(std::abs(row - 1.0) <= 1e-6);
                else CHECK(row == 0.0);
            }
}

TEST_CASE("single destination gets everything") {
    const ModelConfig config = tiny_config();
    const ModelParams params = init_model_params(config, 7);
    const OriginBatch b = random_batch(8, 1, 4);
    const PredictionResult r = forward_origin(b, params, config);
    CHECK(r.probs[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(r.volumes[0] == doctest::Approx(b.outflow));
}

TEST_CASE("zero head gives a uniform allocation") {
    const ModelConfig config = tiny_config();
    ModelParams params = init_model_params(config, 7);
    params.head.weight.setZero();
    params.head.bias.setZero();
    const OriginBatch b = random_batch(16, 10, 5);
    const PredictionResult r = forward_origin(b, params, config);
    for (std::size_t s = 0; s < 10; ++s) CHECK(r.probs[s] == doctest::Approx(0.1).epsilon(1e-12));
}

TEST_CASE("padded slot contents never reach active outputs") {
    for (RleVariant v : {RleVariant::rle, RleVariant::rle_prime, RleVariant::none}) {
        const ModelConfig config = tiny_config(v);
        const ModelParams params = init_model_params(config, 8);
        OriginBatch a = random_batch(32, 20, 6);
        OriginBatch b = a;
        CounterRng rng(99, 0);
        for (std::size_t s = 20; s < 32; ++s) {
            for (std::size_t k = 0; k < kGeoInputWidth; ++k)
                b.geo_input(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(k)) = 1e3 * rng.normal();
            b.rel[s] = {1e5 * rng.normal(), 1e5 * rng.normal()};
        }
        const auto ra = forward_origin(a, params, config);
        const auto rb = forward_origin(b, params, config);
        CHECK(ra.probs == rb.probs);
        CHECK(ra.scores == rb.scores);
    }
}

TEST_CASE("interleaved padding matches the compact batch exactly") {
    const ModelConfig config = tiny_config();
    const ModelParams params = init_model_params(config, 9);
    const OriginBatch compact = random_batch(12, 12, 7);
    OriginBatch spread = random_batch(24, 0, 8);
    for (std::size_t s = 0; s < 12; ++s) copy_slot(compact, s, spread, 2 * s + 1);
    const auto rc = forward_origin(compact, params, config);
    const auto rs = forward_origin(spread, params, config);
    for (std::size_t s = 0; s < 12; ++s) {
        CHECK(rs.probs[2 * s + 1] == rc.probs[s]);
        CHECK(rs.probs[2 * s] == 0.0);
    }
}

TEST_CASE("permuting destinations permutes the prediction") {
    const ModelConfig config = tiny_config();
    const ModelParams params = init_model_params(config, 10);
    const OriginBatch a = random_batch(20, 20, 9);
    std::vector<std::size_t> perm(20);
    std::iota(perm.begin(), perm.end(), 0);
    CounterRng rng(3, 3);
    rng.shuffle(perm);
    OriginBatch b = a;
    for (std::size_t s = 0; s < 20; ++s) copy_slot(a, perm[s], b, s);
    const auto ra = forward_origin(a, params, config);
    const auto rb = forward_origin(b, params, config);
    for (std::size_t s = 0; s < 20; ++s) CHECK(std::abs(rb.probs[s] - ra.probs[perm[s]]) <= 1e-12);
}

TEST_CASE("eval mode is deterministic even with dropout configured") {
    ModelConfig config = tiny_config();
    config.dropout = 0.3;
    const ModelParams params = init_model_params(config, 11);
    const OriginBatch b = random_batch(16, 12, 10);
    CHECK(forward_origin(b, params, config).probs == forward_origin(b, params, config).probs);
    CHECK(init_model_params(config, 11).tensors().size() == params.tensors().size());
    CHECK(flatten(init_model_params(config, 11)) == flatten(params));
    CHECK(flatten(init_model_params(config, 12)) != flatten(params));
}

TEST_CASE("full model gradient matches central differences") {
    for (RleVariant v : {RleVariant::rle, RleVariant::rle_prime, RleVariant::none}) {
        CAPTURE(to_string(v));
        const ModelConfig config = tiny_config(v);
        ModelParams params = init_model_params(config, 12);
        const OriginBatch b = random_batch(7, 5, 11);
        std::vector<double> c(7);
        CounterRng rng(4, 4);
        for (double& x : c) x = 2 * rng.uniform() - 1;
        auto fn = [&](std::span<const double> flat, std::span<double> g) {
            unflatten(flat, params);
            ForwardTracePtr trace;
            ForwardOptions opt;
            opt.trace = &trace;
            const auto r = forward_origin(b, params, config, opt);
            double loss = 0.0;
            for (std::size_t s = 0; s < 7; ++s)
                if (b.mask[s]) loss += c[s] * r.scores[s];
            if (g.empty()) return loss;
            ModelParams grad = zeros_like(params);
            backward_origin(*trace, params, config, c, grad);
            const auto gf = flatten(grad);
            std::copy(gf.begin(), gf.end(), g.begin());
            return loss;
        };
        // A step of 1e-4 can straddle a ReLU kink of the geographic encoder.
        CHECK(nn::grad_check(fn, flatten(params), 1e-6).max_rel_error <= 1e-4);
    }
}

TEST_CASE("feed-forward predictor variant") {
    ModelConfig config = tiny_config();
    config.predictor_variant = PredictorVariant::feedforward_only;
    const ModelParams params = init_model_params(config, 13);
    CHECK(params.layers.empty());
    const auto r = forward_origin(random_batch(10, 6, 12), params, config);
    CHECK(std::accumulate(r.probs.begin(), r.probs.end(), 0.0) == doctest::Approx(1.0));
}

TEST_CASE("config validation and kv round trip") {
    ModelConfig config = tiny_config();
    CHECK_NOTHROW(config.validate());
    CHECK(ModelConfig::from_kv(config.to_kv()).to_kv() == config.to_kv());
    ModelConfig bad = config;
    bad.n_heads = 5;
    CHECK_THROWS(bad.validate());
    bad = config;
    bad.encoder.basis_b.reset();
    CHECK_THROWS(bad.validate());
    CHECK(parse_rle_variant(to_string(RleVariant::rle_prime)) == RleVariant::rle_prime);
    CHECK_THROWS(parse_rle_variant("bogus"));
}

TEST_CASE("checkpoint round trip and failure modes") {
    testutil::TempDir dir("model_checkpoint");
    const ModelConfig config = tiny_config();
    const ModelParams params = init_model_params(config, 14);
    const auto path = dir / "m.tfw";
    save_checkpoint(path, params, config, {{"norm.lambda_max", "123"}});
    const Checkpoint ck = load_checkpoint(path);
    CHECK(flatten(ck.params) == flatten(params));
    CHECK(ck.config.to_kv() == config.to_kv());
    CHECK(ck.extra.at("norm.lambda_max") == "123");
    const OriginBatch b = random_batch(9, 9, 13);
    CHECK(forward_origin(b, ck.params, ck.config).probs == forward_origin(b, params, config).probs);

    const std::string bytes = testutil::read_file(path);
    auto expect_kind = [&](std::string mutated, CheckpointError::Kind kind) {
        const auto p = dir / "bad.tfw";
        testutil::write_file(p, mutated);
        try {
            load_checkpoint(p);
            FAIL("expected a checkpoint error");
        } catch (const CheckpointError& e) {
            CHECK(static_cast<int>(e.kind()) == static_cast<int>(kind));
        }
    };
    std::string corrupt = bytes;
    corrupt[corrupt.size() - 10] ^= 0x01;
    expect_kind(corrupt, CheckpointError::Kind::checksum);
    std::string version = bytes;
    version[4] = 2;
    expect_kind(version, CheckpointError::Kind::version);
    expect_kind(bytes.substr(0, bytes.size() / 2), CheckpointError::Kind::truncated);
    std::string magic = bytes;
    magic[0] = 'X';
    expect_kind(magic, CheckpointError::Kind::format);
}
