#ifndef TRANSFLOWER_NN_HPP
#define TRANSFLOWER_NN_HPP

// Dense numerics with hand-written reverse-mode gradients for the handful of
// primitives the flow model needs. Activations and reductions run in double;
// learnable tensors are kept float32-representable (see round_to_float) and
// serialized as float32.

#include <Eigen/Dense>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "transflower/rng.hpp"

namespace transflower::nn {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

/// Per-slot validity; true = real entry.
using Mask = std::vector<bool>;

/// Exchange form of a learnable tensor: shape plus row-major float32 data.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<float> data;

    std::size_t numel() const;
    static Tensor from_matrix(const Matrix& m);
    Matrix to_matrix() const;
};

/// Throws NumericError naming `where` if any entry is NaN or infinite.
void check_finite(const Matrix& m, const std::string& where);

/// Rounds every entry to the nearest float32 value.
void round_to_float(Matrix& m);

/// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)], float32-representable.
Matrix init_uniform(std::size_t rows, std::size_t cols, std::size_t fan_in, CounterRng& rng);

// ---------------------------------------------------------------- linear

/// y = x W + b with W (in x out) and b (1 x out).
struct LinearParams {
    Matrix weight;
    Matrix bias;

    std::size_t in() const { return static_cast<std::size_t>(weight.rows()); }
    std::size_t out() const { return static_cast<std::size_t>(weight.cols()); }
    static LinearParams zeros(std::size_t in, std::size_t out);
    static LinearParams init(std::size_t in, std::size_t out, CounterRng& rng);
};

Matrix linear(const Matrix& x, const LinearParams& p);

/// Accumulates dW, db into `grad`; writes dx when `grad_x` is non-null.
void linear_backward(const Matrix& x, const LinearParams& p, const Matrix& grad_out, LinearParams& grad,
                     Matrix* grad_x);

// ---------------------------------------------------------------- activations

Matrix relu(const Matrix& x);
/// Gradient through ReLU given its forward output.
Matrix relu_backward(const Matrix& y, const Matrix& grad_out);

struct DropoutResult {
    Matrix output;
    /// Per-entry multiplier (0 or 1/(1-rate)); empty in eval mode.
    Matrix scale;
};

/// Training: zero each entry with probability `rate`, scale survivors by
/// 1/(1-rate). Eval: identity.
DropoutResult dropout(const Matrix& x, double rate, bool training, CounterRng& rng);
Matrix dropout_backward(const DropoutResult& forward, const Matrix& grad_out);

// ---------------------------------------------------------------- layer norm

inline constexpr double kLayerNormEps = 1e-5;

struct LayerNormParams {
    Matrix gain;  // 1 x d
    Matrix bias;  // 1 x d

    static LayerNormParams identity(std::size_t d);
};

struct LayerNormCache {
    Matrix normalized;          // x_hat, before affine
    std::vector<double> inv_std;
};

/// Row-wise (x - mean)/sqrt(var + eps) * gain + bias. Rows need >= 2 columns.
Matrix layer_norm(const Matrix& x, const LayerNormParams& p, LayerNormCache* cache = nullptr);
void layer_norm_backward(const LayerNormCache& cache, const LayerNormParams& p, const Matrix& grad_out,
                         LayerNormParams& grad, Matrix& grad_x);

// ---------------------------------------------------------------- softmax

/// Masked, max-subtracted softmax. Masked entries are exactly 0. Throws
/// ValidationError when every entry is masked.
std::vector<double> softmax(std::span<const double> scores, const Mask& mask);

// ---------------------------------------------------------------- attention

/// Multi-head self-attention in the residual form
///   e_i' = e_i + concat_h(sum_j a^h_ij v^h_j) W_z,
///   a^h_ij = softmax_j(q^h_i . k^h_j) over unmasked keys.
/// Scores are not divided by sqrt(d_head) unless `scaled` is set.
struct AttentionParams {
    std::size_t n_heads = 1;
    std::vector<Matrix> w_q;  // per head: d_model x d_head
    std::vector<Matrix> w_k;
    std::vector<Matrix> w_v;
    Matrix w_z;               // d_model x d_model
    bool scaled = false;

    std::size_t d_model() const { return static_cast<std::size_t>(w_z.rows()); }
    std::size_t d_head() const { return d_model() / n_heads; }
    static AttentionParams zeros(std::size_t d_model, std::size_t n_heads);
    static AttentionParams init(std::size_t d_model, std::size_t n_heads, CounterRng& rng);
    void validate() const;
};

struct AttentionCache {
    Matrix input;
    Mask mask;
    std::vector<Matrix> q, k, v;
    Matrix context;  // n x d_model, concatenated head outputs
};

struct AttentionOutput {
    Matrix output;                // n x d_model
    std::vector<Matrix> weights;  // per head, n x n; masked rows and columns are 0
    AttentionCache cache;
};

/// Rows for masked queries pass through unchanged.
AttentionOutput attention_layer(const Matrix& e, const AttentionParams& p, const Mask& mask);
void attention_backward(const AttentionCache& cache, const std::vector<Matrix>& weights,
                        const AttentionParams& p, const Matrix& grad_out, AttentionParams& grad,
                        Matrix& grad_e);

// ---------------------------------------------------------------- gradient check

/// Scalar function of a flat parameter vector that also writes its analytic
/// gradient into the second argument. An empty gradient span asks for the
/// value only.
using GradFunction = std::function<double(std::span<const double>, std::span<double>)>;

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t worst_index = 0;
};

/// Central differences with step h * max(1, |p_i|); error per parameter is
/// |analytic - numeric| / max(1, |numeric|). Only the indices in `subset`
/// are probed when it is non-empty.
GradCheckResult grad_check(const GradFunction& fn, std::vector<double> params, double h = 1e-4,
                           std::span<const std::size_t> subset = {});

}  // namespace transflower::nn

#endif  // TRANSFLOWER_NN_HPP
