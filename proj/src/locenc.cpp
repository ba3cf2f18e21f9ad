#include "transflower/locenc.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "transflower/errors.hpp"

namespace transflower {

using nn::Matrix;

Basis default_basis() {
    const double h = std::sqrt(3.0) / 2.0;
    return {Vec2{1.0, 0.0}, Vec2{-0.5, h}, Vec2{-0.5, -h}};
}

Basis rotate_basis(const Basis& basis, double angle) {
    const double c = std::cos(angle), s = std::sin(angle);
    Basis out;
    for (std::size_t i = 0; i < 3; ++i) out[i] = {c * basis[i].x - s * basis[i].y, s * basis[i].x + c * basis[i].y};
    return out;
}

double EncoderConfig::wavelength(int s) const {
    return lambda_min * std::pow(growth(), static_cast<double>(s) / (n_scales - 1));
}

namespace {

void validate_basis(const Basis& basis, const char* name) {
    for (const Vec2& a : basis)
        if (std::abs(a.norm() - 1.0) > 1e-9) throw ValidationError(std::string(name) + ": basis vectors must be unit length");
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = i + 1; j < 3; ++j) {
            const double angle = std::acos(std::clamp(dot(basis[i], basis[j]), -1.0, 1.0));
            if (std::abs(angle - 2.0 * M_PI / 3.0) > 1e-9)
                throw ValidationError(std::string(name) + ": basis vectors must be 2π/3 apart");
        }
}

void validate_branch(const RleBranch& b, const EncoderConfig& config, const char* name) {
    if (b.first.in() != static_cast<std::size_t>(config.pe_width()) ||
        b.first.out() != static_cast<std::size_t>(config.hidden) ||
        b.second.in() != static_cast<std::size_t>(config.hidden) ||
        b.second.out() != static_cast<std::size_t>(config.d_loc))
        throw ShapeError(std::string("relative location encoder: ") + name + " shape does not match config");
}

}  // namespace

void EncoderConfig::validate() const {
    if (!(lambda_min > 0) || !(lambda_max > lambda_min) || !std::isfinite(lambda_max))
        throw ValidationError("encoder config: need 0 < lambda_min < lambda_max");
    if (n_scales < 2) throw ValidationError("encoder config: n_scales must be >= 2");
    if (d_loc < 1 || hidden < 1) throw ValidationError("encoder config: d_loc and hidden must be positive");
    validate_basis(basis_a, "basis_a");
    if (basis_b) validate_basis(*basis_b, "basis_b");
}

std::array<double, 6> pe_scale(Vec2 rl, int s, const Basis& basis, double lambda_min, double g, int n_scales) {
    if (!std::isfinite(rl.x) || !std::isfinite(rl.y)) throw ValidationError("pe_scale: non-finite relative location");
    if (n_scales < 2 || s < 0 || s >= n_scales) throw ValidationError("pe_scale: scale index out of range");
    const double lambda = lambda_min * std::pow(g, static_cast<double>(s) / (n_scales - 1));
    std::array<double, 6> out{};
    for (std::size_t j = 0; j < 3; ++j) {
        const double phase = dot(rl, basis[j]) / lambda;
        out[2 * j] = std::cos(phase);
        out[2 * j + 1] = std::sin(phase);
    }
    return out;
}

std::vector<double> multiscale_encode(Vec2 rl, const EncoderConfig& config, const Basis& basis) {
    config.validate();
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(config.pe_width()));
    for (int s = 0; s < config.n_scales; ++s) {
        auto part = pe_scale(rl, s, basis, config.lambda_min, config.growth(), config.n_scales);
        out.insert(out.end(), part.begin(), part.end());
    }
    return out;
}

Matrix multiscale_encode_rows(std::span<const Vec2> rl, const EncoderConfig& config, const Basis& basis) {
    config.validate();
    Matrix out(static_cast<Eigen::Index>(rl.size()), config.pe_width());
    for (std::size_t i = 0; i < rl.size(); ++i) {
        for (int s = 0; s < config.n_scales; ++s) {
            auto part = pe_scale(rl[i], s, basis, config.lambda_min, config.growth(), config.n_scales);
            for (int k = 0; k < 6; ++k) out(static_cast<Eigen::Index>(i), 6 * s + k) = part[static_cast<std::size_t>(k)];
        }
    }
    return out;
}

RleParams init_rle_params(const EncoderConfig& config, bool two_branch, CounterRng& rng) {
    config.validate();
    const auto pe = static_cast<std::size_t>(config.pe_width());
    const auto hid = static_cast<std::size_t>(config.hidden);
    const auto d = static_cast<std::size_t>(config.d_loc);
    auto branch = [&] { return RleBranch{nn::LinearParams::init(pe, hid, rng), nn::LinearParams::init(hid, d, rng)}; };
    RleParams p;
    p.branch_a = branch();
    if (two_branch) {
        p.branch_b = branch();
        p.fusion = nn::LinearParams::init(2 * d, d, rng);
    }
    return p;
}

RleParams zero_rle_params(const EncoderConfig& config, bool two_branch) {
    const auto pe = static_cast<std::size_t>(config.pe_width());
    const auto hid = static_cast<std::size_t>(config.hidden);
    const auto d = static_cast<std::size_t>(config.d_loc);
    auto branch = [&] { return RleBranch{nn::LinearParams::zeros(pe, hid), nn::LinearParams::zeros(hid, d)}; };
    RleParams p;
    p.branch_a = branch();
    if (two_branch) {
        p.branch_b = branch();
        p.fusion = nn::LinearParams::zeros(2 * d, d);
    }
    return p;
}

Matrix rle_encode(std::span<const Vec2> rl, const EncoderConfig& config, const RleParams& params, RleCache* cache) {
    config.validate();
    validate_branch(params.branch_a, config, "branch a");
    RleCache local;
    RleCache& c = cache ? *cache : local;

    c.pe_a = multiscale_encode_rows(rl, config, config.basis_a);
    c.hidden_a = nn::relu(nn::linear(c.pe_a, params.branch_a.first));
    c.out_a = nn::linear(c.hidden_a, params.branch_a.second);
    if (!params.two_branch()) {
        c.output = c.out_a;
        return c.output;
    }

    if (!config.basis_b) throw ValidationError("two-branch relative location encoder requires basis_b");
    if (!params.fusion) throw ShapeError("two-branch relative location encoder requires fusion weights");
    validate_branch(*params.branch_b, config, "branch b");
    c.pe_b = multiscale_encode_rows(rl, config, *config.basis_b);
    c.hidden_b = nn::relu(nn::linear(c.pe_b, params.branch_b->first));
    c.out_b = nn::linear(c.hidden_b, params.branch_b->second);
    c.fused_input.resize(c.out_a.rows(), c.out_a.cols() + c.out_b.cols());
    c.fused_input << c.out_a, c.out_b;
    c.output = nn::relu(nn::linear(c.fused_input, *params.fusion));
    return c.output;
}

void rle_backward(const RleCache& c, const RleParams& params, const Matrix& grad_out, RleParams& grad) {
    auto branch_backward = [](const Matrix& pe, const Matrix& hidden, const RleBranch& p, const Matrix& g,
                              RleBranch& gp) {
        Matrix g_hidden;
        nn::linear_backward(hidden, p.second, g, gp.second, &g_hidden);
        g_hidden = nn::relu_backward(hidden, g_hidden);
        nn::linear_backward(pe, p.first, g_hidden, gp.first, nullptr);
    };
    if (!params.two_branch()) {
        branch_backward(c.pe_a, c.hidden_a, params.branch_a, grad_out, grad.branch_a);
        return;
    }
    Matrix g_fused;
    const Matrix g_pre = nn::relu_backward(c.output, grad_out);
    nn::linear_backward(c.fused_input, *params.fusion, g_pre, *grad.fusion, &g_fused);
    const auto d = c.out_a.cols();
    branch_backward(c.pe_a, c.hidden_a, params.branch_a, g_fused.leftCols(d), grad.branch_a);
    branch_backward(c.pe_b, c.hidden_b, *params.branch_b, g_fused.rightCols(d), *grad.branch_b);
}

namespace {
std::vector<double> single_row(Vec2 rl, const EncoderConfig& config, const RleParams& params) {
    const Vec2 input[1] = {rl};
    Matrix out = rle_encode(input, config, params);
    return std::vector<double>(out.data(), out.data() + out.size());
}
}  // namespace

std::vector<double> rle_prime_forward(Vec2 rl, const EncoderConfig& config, const RleParams& params) {
    if (params.two_branch()) throw ShapeError("rle_prime_forward: parameters have two branches");
    return single_row(rl, config, params);
}

std::vector<double> rle_forward(Vec2 rl, const EncoderConfig& config, const RleParams& params) {
    if (!config.basis_b) throw ValidationError("rle_forward: missing basis_b");
    if (!params.two_branch()) throw ShapeError("rle_forward: parameters have a single branch");
    return single_row(rl, config, params);
}

}  // namespace transflower
