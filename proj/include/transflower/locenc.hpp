#ifndef TRANSFLOWER_LOCENC_HPP
#define TRANSFLOWER_LOCENC_HPP

// Multi-scale sinusoidal encoding of relative locations and the learned
// relative-location encoders built on it: a single-branch variant (RLE') and
// a two-branch variant with a second, rotated basis (RLE).

#include <array>
#include <optional>
#include <span>
#include <vector>

#include "transflower/geodata.hpp"
#include "transflower/nn.hpp"

namespace transflower {

/// Three unit vectors at mutual angles of 2π/3.
using Basis = std::array<Vec2, 3>;

/// a1 = [1, 0], a2 = [-1/2, √3/2], a3 = [-1/2, -√3/2].
Basis default_basis();
Basis rotate_basis(const Basis& basis, double angle);

struct EncoderConfig {
    double lambda_min = 1.0;
    double lambda_max = 20000.0;
    int n_scales = 16;
    Basis basis_a = default_basis();
    /// Present only for the two-branch encoder.
    std::optional<Basis> basis_b;
    int d_loc = 64;
    int hidden = 64;

    double growth() const { return lambda_max / lambda_min; }
    /// λ_s = λ_min · g^{s/(S-1)}.
    double wavelength(int s) const;
    int pe_width() const { return 6 * n_scales; }
    void validate() const;
};

/// [cos(<rl,a_j>/λ_s), sin(<rl,a_j>/λ_s)] for j = 1..3, in that order.
std::array<double, 6> pe_scale(Vec2 rl, int s, const Basis& basis, double lambda_min, double g, int n_scales);

/// Concatenation of pe_scale over all scales (length 6 · n_scales).
std::vector<double> multiscale_encode(Vec2 rl, const EncoderConfig& config, const Basis& basis);

/// Row-per-input version of multiscale_encode.
nn::Matrix multiscale_encode_rows(std::span<const Vec2> rl, const EncoderConfig& config, const Basis& basis);

/// linear -> ReLU -> linear.
struct RleBranch {
    nn::LinearParams first;
    nn::LinearParams second;
};

struct RleParams {
    RleBranch branch_a;
    std::optional<RleBranch> branch_b;
    /// (2 · d_loc) -> d_loc, followed by ReLU. Two-branch only.
    std::optional<nn::LinearParams> fusion;

    bool two_branch() const { return branch_b.has_value(); }
};

RleParams init_rle_params(const EncoderConfig& config, bool two_branch, CounterRng& rng);
RleParams zero_rle_params(const EncoderConfig& config, bool two_branch);

struct RleCache {
    nn::Matrix pe_a, hidden_a, out_a;
    nn::Matrix pe_b, hidden_b, out_b;
    nn::Matrix fused_input, output;
};

/// Encodes each relative location into a d_loc row. Dispatches on the
/// parameter layout: single branch (RLE') or two branches plus fusion (RLE).
nn::Matrix rle_encode(std::span<const Vec2> rl, const EncoderConfig& config, const RleParams& params,
                      RleCache* cache = nullptr);
void rle_backward(const RleCache& cache, const RleParams& params, const nn::Matrix& grad_out, RleParams& grad);

/// Single-branch encoder output for one relative location.
std::vector<double> rle_prime_forward(Vec2 rl, const EncoderConfig& config, const RleParams& params);
/// Two-branch encoder output for one relative location.
std::vector<double> rle_forward(Vec2 rl, const EncoderConfig& config, const RleParams& params);

}  // namespace transflower

#endif  // TRANSFLOWER_LOCENC_HPP
