#include <doctest.h>

#include <cmath>

#include "transflower/errors.hpp"
#include "transflower/nn.hpp"

using namespace transflower;
using nn::Matrix;

namespace {

Matrix random_matrix(Eigen::Index r, Eigen::Index c, CounterRng& rng, double scale = 1.0) {
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * (2 * rng.uniform() - 1);
    return m;
}

/// Flat views over a list of matrices, for grad_check.
struct Pack {
    std::vector<Matrix*> parts;

    std::vector<double> flat() const {
        std::vector<double> v;
        for (auto* m : parts) v.insert(v.end(), m->data(), m->data() + m->size());
        return v;
    }
    void load(std::span<const double> v) {
        std::size_t k = 0;
        for (auto* m : parts)
            for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] = v[k++];
    }
    static void store(const std::vector<const Matrix*>& grads, std::span<double> out) {
        if (out.empty()) return;
        std::size_t k = 0;
        for (auto* g : grads)
            for (Eigen::Index i = 0; i < g->size(); ++i) out[k++] = g->data()[i];
    }
};

}  // namespace

TEST_CASE("linear layer") {
    nn::LinearParams id = nn::LinearParams::zeros(2, 2);
    id.weight = Matrix::Identity(2, 2);
    Matrix x(1, 2);
    x << 1, 2;
    CHECK(nn::linear(x, id) == x);
    id.bias << 3, 3;
    const Matrix y = nn::linear(x, id);
    CHECK(y(0, 0) == 4.0);
    CHECK(y(0, 1) == 5.0);
    CHECK_THROWS_AS(nn::linear(Matrix::Zero(1, 3), id), ShapeError);
}

TEST_CASE("linear gradient matches central differences") {
    CounterRng rng(1, 0);
    nn::LinearParams p = nn::LinearParams::init(5, 3, rng);
    Matrix x = random_matrix(4, 5, rng);
    const Matrix c = random_matrix(4, 3, rng);
    Pack pack{{&p.weight, &p.bias, &x}};
    auto fn = [&](std::span<const double> v, std::span<double> g) {
        pack.load(v);
        const double loss = (nn::linear(x, p).array() * c.array()).sum();
        nn::LinearParams grad = nn::LinearParams::zeros(5, 3);
        Matrix gx;
        nn::linear_backward(x, p, c, grad, &gx);
        Pack::store({&grad.weight, &grad.bias, &gx}, g);
        return loss;
    };
    CHECK(nn::grad_check(fn, pack.flat()).max_rel_error <= 1e-4);
}

TEST_CASE("masked softmax") {
    const nn::Mask all4(4, true);
    for (double p : nn::softmax(std::vector<double>{2, 2, 2, 2}, all4)) CHECK(p == doctest::Approx(0.25));

    const auto p = nn::softmax(std::vector<double>{0.0, std::log(3.0)}, nn::Mask{true, true});
    CHECK(std::abs(p[0] - 0.25) <= 1e-6);
    CHECK(std::abs(p[1] - 0.75) <= 1e-6);

    const std::vector<double> s = {0.3, -1.2, 2.5};
    const std::vector<double> shifted = {1000.3, 998.8, 1002.5};
    const auto a = nn::softmax(s, nn::Mask(3, true));
    const auto b = nn::softmax(shifted, nn::Mask(3, true));
    for (int i = 0; i < 3; ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));

    const auto extreme = nn::softmax(std::vector<double>{1e4, -1e4, 0.0, 1e4}, nn::Mask{true, true, false, true});
    CHECK(extreme[0] == doctest::Approx(0.5));
    CHECK(extreme[1] == 0.0);
    CHECK(extreme[2] == 0.0);
    CHECK(extreme[3] == doctest::Approx(0.5));

    const auto masked = nn::softmax(std::vector<double>{5, 1, 9}, nn::Mask{true, true, false});
    CHECK(masked[2] == 0.0);
    CHECK(masked[0] + masked[1] == doctest::Approx(1.0));
    CHECK_THROWS_AS(nn::softmax(std::vector<double>{1, 2}, nn::Mask{false, false}), ValidationError);
}

TEST_CASE("layer norm") {
    const auto id = nn::LayerNormParams::identity(4);
    const Matrix flat = Matrix::Constant(1, 4, 3.0);
    CHECK(nn::layer_norm(flat, id).cwiseAbs().maxCoeff() == 0.0);

    Matrix pair(1, 2);
    pair << -1, 1;
    const Matrix y = nn::layer_norm(pair, nn::LayerNormParams::identity(2));
    CHECK(y(0, 0) == doctest::Approx(-1.0 / std::sqrt(1.0 + 1e-5)).epsilon(1e-12));
    CHECK(y(0, 1) == doctest::Approx(0.999995).epsilon(1e-6));

    CounterRng rng(2, 0);
    const Matrix x = random_matrix(20, 16, rng, 5.0);
    const Matrix z = nn::layer_norm(x, nn::LayerNormParams::identity(16));
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
        const double mean = z.row(r).mean();
        const double var = (z.row(r).array() - mean).square().mean();
        CHECK(std::abs(mean) <= 1e-6);
        CHECK(std::abs(var - 1.0) <= 1e-4);
    }
}

TEST_CASE("layer norm gradient matches central differences") {
    CounterRng rng(3, 0);
    nn::LayerNormParams p{random_matrix(1, 6, rng), random_matrix(1, 6, rng)};
    Matrix x = random_matrix(3, 6, rng, 2.0);
    const Matrix c = random_matrix(3, 6, rng);
    Pack pack{{&p.gain, &p.bias, &x}};
    auto fn = [&](std::span<const double> v, std::span<double> g) {
        pack.load(v);
        nn::LayerNormCache cache;
        const double loss = (nn::layer_norm(x, p, &cache).array() * c.array()).sum();
        nn::LayerNormParams grad{Matrix::Zero(1, 6), Matrix::Zero(1, 6)};
        Matrix gx;
        nn::layer_norm_backward(cache, p, c, grad, gx);
        Pack::store({&grad.gain, &grad.bias, &gx}, g);
        return loss;
    };
    CHECK(nn::grad_check(fn, pack.flat()).max_rel_error <= 1e-4);
}

TEST_CASE("dropout") {
    CounterRng rng(4, 0);
    const Matrix x = random_matrix(10, 10, rng);
    CHECK(nn::dropout(x, 0.1, false, rng).output == x);
    CHECK(nn::dropout(x, 0.0, true, rng).output == x);

    const Matrix ones = Matrix::Ones(1000, 100);
    const auto d = nn::dropout(ones, 0.1, true, rng);
    const double zeros = static_cast<double>((d.output.array() == 0.0).count()) / 1e5;
    CHECK(std::abs(d.output.mean() - 1.0) <= 0.01);
    CHECK(std::abs(zeros - 0.1) <= 0.01);

    const Matrix g = nn::dropout_backward(d, ones);
    CHECK(g == d.scale);
}

TEST_CASE("attention with one unmasked slot is a single residual term") {
    CounterRng rng(5, 0);
    const auto p = nn::AttentionParams::init(6, 2, rng);
    const Matrix e = random_matrix(1, 6, rng);
    const auto out = nn::attention_layer(e, p, nn::Mask{true});
    // e' = e + concat_h(e W_v^h) W_z
    Matrix v(1, 6);
    v << e * p.w_v[0], e * p.w_v[1];
    const Matrix expected = e + v * p.w_z;
    CHECK((out.output - expected).cwiseAbs().maxCoeff() <= 1e-12);
    for (const auto& w : out.weights) CHECK(w(0, 0) == 1.0);
}

TEST_CASE("attention properties") {
    CounterRng rng(6, 0);
    auto p = nn::AttentionParams::init(8, 2, rng);
    const Matrix e = random_matrix(5, 8, rng);
    const nn::Mask mask{true, true, false, true, true};

    SUBCASE("zero queries give uniform weights over unmasked keys") {
        for (auto& w : p.w_q) w.setZero();
        const auto out = nn::attention_layer(e, p, mask);
        for (const auto& w : out.weights)
            for (Eigen::Index i : {0, 1, 3, 4})
                for (Eigen::Index j = 0; j < 5; ++j) CHECK(w(i, j) == doctest::Approx(j == 2 ? 0.0 : 0.25));
    }
    SUBCASE("zero output projection leaves the input unchanged") {
        p.w_z.setZero();
        CHECK(nn::attention_layer(e, p, mask).output == e);
    }
    SUBCASE("masked query rows pass through and rows are stochastic") {
        const auto out = nn::attention_layer(e, p, mask);
        CHECK(out.output.row(2) == e.row(2));
        for (const auto& w : out.weights) {
            CHECK(w.row(2).cwiseAbs().sum() == 0.0);
            CHECK(w.col(2).cwiseAbs().sum() == 0.0);
            for (Eigen::Index i : {0, 1, 3, 4}) CHECK(std::abs(w.row(i).sum() - 1.0) <= 1e-12);
        }
    }
    SUBCASE("all-masked input is rejected") {
        CHECK_THROWS_AS(nn::attention_layer(e, p, nn::Mask(5, false)), ValidationError);
    }
}

TEST_CASE("attention gradient matches central differences") {
    for (bool scaled : {false, true}) {
        CounterRng rng(7, scaled);
        auto p = nn::AttentionParams::init(6, 3, rng);
        p.scaled = scaled;
        Matrix e = random_matrix(4, 6, rng);
        const Matrix c = random_matrix(4, 6, rng);
        const nn::Mask mask{true, false, true, true};
        Pack pack;
        for (std::size_t h = 0; h < 3; ++h) pack.parts.insert(pack.parts.end(), {&p.w_q[h], &p.w_k[h], &p.w_v[h]});
        pack.parts.push_back(&p.w_z);
        pack.parts.push_back(&e);
        auto fn = [&](std::span<const double> v, std::span<double> g) {
            pack.load(v);
            const auto out = nn::attention_layer(e, p, mask);
            const double loss = (out.output.array() * c.array()).sum();
            auto grad = nn::AttentionParams::zeros(6, 3);
            Matrix ge;
            nn::attention_backward(out.cache, out.weights, p, c, grad, ge);
            std::vector<const Matrix*> gs;
            for (std::size_t h = 0; h < 3; ++h) gs.insert(gs.end(), {&grad.w_q[h], &grad.w_k[h], &grad.w_v[h]});
            gs.push_back(&grad.w_z);
            gs.push_back(&ge);
            Pack::store(gs, g);
            return loss;
        };
        CHECK(nn::grad_check(fn, pack.flat()).max_rel_error <= 1e-4);
    }
}

TEST_CASE("grad_check on a quadratic and on a corrupted gradient") {
    const std::vector<double> p = {0.5, -1.5, 2.0, 3.25};
    auto exact = [](std::span<const double> v, std::span<double> g) {
        double s = 0;
        for (std::size_t i = 0; i < v.size(); ++i) {
            s += v[i] * v[i];
            if (!g.empty()) g[i] = 2 * v[i];
        }
        return s;
    };
    CHECK(nn::grad_check(exact, p).max_rel_error <= 1e-6);
    auto corrupted = [&](std::span<const double> v, std::span<double> g) {
        const double s = exact(v, g);
        if (!g.empty()) g[3] *= 1.01;
        return s;
    };
    const auto r = nn::grad_check(corrupted, p);
    CHECK(r.max_rel_error >= 5e-3);
    CHECK(r.worst_index == 3);
}

TEST_CASE("tensor exchange and float rounding") {
    CounterRng rng(8, 0);
    Matrix m = random_matrix(3, 4, rng);
    nn::round_to_float(m);
    const auto t = nn::Tensor::from_matrix(m);
    CHECK(t.shape == std::vector<std::size_t>{3, 4});
    CHECK(t.numel() == 12);
    CHECK(t.to_matrix() == m);
    Matrix bad = m;
    bad(1, 1) = NAN;
    CHECK_THROWS_AS(nn::check_finite(bad, "test"), NumericError);
    const Matrix w = nn::init_uniform(50, 10, 25, rng);
    CHECK(w.cwiseAbs().maxCoeff() <= 1.0 / 5.0);
}
