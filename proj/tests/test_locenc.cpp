#include <doctest.h>

#include <cmath>
#include <numbers>

#include "transflower/errors.hpp"
#include "transflower/locenc.hpp"

using namespace transflower;
using nn::Matrix;

namespace {

EncoderConfig small_config(bool two_branch) {
    EncoderConfig c;
    c.n_scales = 4;
    c.lambda_min = 10;
    c.lambda_max = 5000;
    c.d_loc = 5;
    c.hidden = 7;
    if (two_branch) c.basis_b = rotate_basis(c.basis_a, std::numbers::pi / 3);
    return c;
}

std::vector<Matrix*> branch_tensors(RleBranch& b) {
    return {&b.first.weight, &b.first.bias, &b.second.weight, &b.second.bias};
}

std::vector<Matrix*> rle_tensors(RleParams& p) {
    auto v = branch_tensors(p.branch_a);
    if (p.branch_b) {
        auto b = branch_tensors(*p.branch_b);
        v.insert(v.end(), b.begin(), b.end());
        v.push_back(&p.fusion->weight);
        v.push_back(&p.fusion->bias);
    }
    return v;
}

double rle_grad_error(bool two_branch) {
    const EncoderConfig config = small_config(two_branch);
    CounterRng rng(11, two_branch);
    RleParams params = init_rle_params(config, two_branch, rng);
    const std::vector<Vec2> rl = {{120.0, -40.0}, {-900.0, 310.0}, {15.0, 2200.0}};
    Matrix c(3, config.d_loc);
    for (Eigen::Index i = 0; i < c.size(); ++i) c.data()[i] = 2 * rng.uniform() - 1;

    auto tensors = rle_tensors(params);
    std::vector<double> flat;
    for (auto* m : tensors) flat.insert(flat.end(), m->data(), m->data() + m->size());
    auto fn = [&](std::span<const double> v, std::span<double> g) {
        std::size_t k = 0;
        for (auto* m : tensors)
            for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] = v[k++];
        RleCache cache;
        const double loss = (rle_encode(rl, config, params, &cache).array() * c.array()).sum();
        if (g.empty()) return loss;
        RleParams grad = zero_rle_params(config, two_branch);
        rle_backward(cache, params, c, grad);
        k = 0;
        for (auto* m : rle_tensors(grad))
            for (Eigen::Index i = 0; i < m->size(); ++i) g[k++] = m->data()[i];
        return loss;
    };
    return nn::grad_check(fn, flat).max_rel_error;
}

}  // namespace

TEST_CASE("pe_scale hand-evaluated values") {
    const Basis basis = default_basis();
    const auto zero = pe_scale({0, 0}, 3, basis, 1.0, 1000.0, 16);
    const std::array<double, 6> ones = {1, 0, 1, 0, 1, 0};
    for (int k = 0; k < 6; ++k) CHECK(zero[k] == ones[k]);

    // <rl, a1> = π/2, <rl, a2> = <rl, a3> = -π/4.
    const auto v = pe_scale({std::numbers::pi / 2, 0}, 0, basis, 1.0, 1000.0, 16);
    const std::array<double, 6> expected = {0, 1, 0.70711, -0.70711, 0.70711, -0.70711};
    for (int k = 0; k < 6; ++k) CHECK(std::abs(v[k] - expected[k]) <= 1e-5);

    CHECK_THROWS_AS(pe_scale({0, 0}, 16, basis, 1.0, 10.0, 16), ValidationError);
    CHECK_THROWS_AS(pe_scale({NAN, 0}, 0, basis, 1.0, 10.0, 16), ValidationError);
}

TEST_CASE("pe_scale at scale s equals scale 0 of the rescaled location") {
    const Basis basis = default_basis();
    const double g = 20000.0;
    CounterRng rng(12, 0);
    for (int t = 0; t < 50; ++t) {
        const Vec2 rl{(rng.uniform() - 0.5) * 4e4, (rng.uniform() - 0.5) * 4e4};
        const int s = static_cast<int>(rng.below(16));
        const double lambda = std::pow(g, s / 15.0);
        const auto a = pe_scale(rl, s, basis, 1.0, g, 16);
        const auto b = pe_scale((1.0 / lambda) * rl, 0, basis, 1.0, g, 16);
        for (int k = 0; k < 6; ++k) CHECK(a[k] == doctest::Approx(b[k]).epsilon(1e-9).scale(1));
    }
}

TEST_CASE("multiscale encoding layout and bounds") {
    const EncoderConfig config;
    const auto zero = multiscale_encode({0, 0}, config, config.basis_a);
    REQUIRE(zero.size() == 96);
    for (std::size_t i = 0; i < zero.size(); ++i) CHECK(zero[i] == (i % 2 == 0 ? 1.0 : 0.0));

    const Vec2 rl{1234.5, -678.9};
    CHECK(multiscale_encode(rl, config, config.basis_a) == multiscale_encode(rl, config, config.basis_a));
    for (double v : multiscale_encode(rl, config, config.basis_a)) {
        CHECK(v >= -1.0);
        CHECK(v <= 1.0);
    }
    const std::vector<Vec2> rows = {rl, {0, 0}};
    const Matrix m = multiscale_encode_rows(rows, config, config.basis_a);
    const auto first = multiscale_encode(rl, config, config.basis_a);
    for (std::size_t k = 0; k < first.size(); ++k) CHECK(m(0, static_cast<Eigen::Index>(k)) == first[k]);
    CHECK(config.wavelength(0) == 1.0);
    CHECK(config.wavelength(15) == doctest::Approx(20000.0));
}

TEST_CASE("two basis sets cover six directions spaced by pi/3") {
    const Basis a = default_basis();
    const Basis b = rotate_basis(a, std::numbers::pi / 3);
    std::vector<double> angles;
    for (const Basis* basis : {&a, &b})
        for (const Vec2& v : *basis) {
            CHECK(v.norm() == doctest::Approx(1.0));
            double t = std::atan2(v.y, v.x);
            if (t < 0) t += 2 * std::numbers::pi;
            angles.push_back(t);
        }
    std::sort(angles.begin(), angles.end());
    for (std::size_t i = 0; i < 6; ++i) CHECK(angles[i] == doctest::Approx(i * std::numbers::pi / 3).scale(1));
}

TEST_CASE("encoding is direction and distance aware") {
    const EncoderConfig config;
    const double d = config.lambda_min;
    CHECK(multiscale_encode({d, 0}, config, config.basis_a) != multiscale_encode({0, d}, config, config.basis_a));
    const double period = 2 * std::numbers::pi * config.lambda_min;
    const auto p0 = pe_scale({0, 0}, 0, config.basis_a, config.lambda_min, config.growth(), config.n_scales);
    const auto p1 = pe_scale({period, 0}, 0, config.basis_a, config.lambda_min, config.growth(), config.n_scales);
    // Only the a1 pair is periodic in <rl, a1>.
    CHECK(std::abs(p0[0] - p1[0]) <= 1e-9);
    CHECK(std::abs(p0[1] - p1[1]) <= 1e-9);
}

TEST_CASE("single-branch encoder") {
    EncoderConfig config = small_config(false);
    const RleParams zero = zero_rle_params(config, false);
    for (double v : rle_prime_forward({300, 40}, config, zero)) CHECK(v == 0.0);
    CHECK(rle_prime_forward({300, 40}, config, zero).size() == 5);

    // Identity layers pass ReLU(PE) through.
    config.hidden = config.pe_width();
    config.d_loc = config.pe_width();
    RleParams id = zero_rle_params(config, false);
    id.branch_a.first.weight = Matrix::Identity(config.pe_width(), config.pe_width());
    id.branch_a.second.weight = Matrix::Identity(config.pe_width(), config.pe_width());
    const auto out = rle_prime_forward({0, 0}, config, id);
    const auto pe = multiscale_encode({0, 0}, config, config.basis_a);
    for (std::size_t k = 0; k < pe.size(); ++k) CHECK(out[k] == std::max(0.0, pe[k]));

    CHECK_THROWS_AS(rle_forward({0, 0}, config, id), ValidationError);
}

TEST_CASE("two-branch encoder") {
    EncoderConfig config = small_config(true);
    CounterRng rng(13, 0);
    RleParams p = init_rle_params(config, true, rng);
    p.fusion->weight.setZero();
    p.fusion->bias.setZero();
    for (Vec2 rl : {Vec2{0, 0}, Vec2{500, -20}, Vec2{-3000, 4000}})
        for (double v : rle_forward(rl, config, p)) CHECK(v == 0.0);

    config.basis_b = config.basis_a;
    RleParams twin = init_rle_params(config, true, rng);
    twin.branch_b = twin.branch_a;
    RleCache cache;
    const std::vector<Vec2> rl = {{250, 75}, {-10, 900}};
    rle_encode(rl, config, twin, &cache);
    CHECK(cache.out_a == cache.out_b);
}

TEST_CASE("encoder gradients match central differences") {
    CHECK(rle_grad_error(false) <= 1e-4);
    CHECK(rle_grad_error(true) <= 1e-4);
}
