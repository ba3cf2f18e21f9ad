#include "transflower/nn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "transflower/errors.hpp"

namespace transflower::nn {

std::size_t Tensor::numel() const {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

Tensor Tensor::from_matrix(const Matrix& m) {
    Tensor t;
    t.shape = {static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())};
    t.data.resize(static_cast<std::size_t>(m.size()));
    for (Eigen::Index i = 0; i < m.size(); ++i) t.data[static_cast<std::size_t>(i)] = static_cast<float>(m.data()[i]);
    return t;
}

Matrix Tensor::to_matrix() const {
    if (shape.size() != 2) throw ShapeError("Tensor::to_matrix: expected rank 2, got rank " + std::to_string(shape.size()));
    if (data.size() != numel()) throw ShapeError("Tensor::to_matrix: data length does not match shape");
    Matrix m(static_cast<Eigen::Index>(shape[0]), static_cast<Eigen::Index>(shape[1]));
    for (std::size_t i = 0; i < data.size(); ++i) m.data()[i] = static_cast<double>(data[i]);
    return m;
}

void check_finite(const Matrix& m, const std::string& where) {
    if (!m.allFinite()) throw NumericError("non-finite value in " + where);
}

void round_to_float(Matrix& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<double>(static_cast<float>(m.data()[i]));
}

Matrix init_uniform(std::size_t rows, std::size_t cols, std::size_t fan_in, CounterRng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(fan_in, 1)));
    Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = (2.0 * rng.uniform() - 1.0) * bound;
    round_to_float(m);
    return m;
}

// ---------------------------------------------------------------- linear

LinearParams LinearParams::zeros(std::size_t in, std::size_t out) {
    return {Matrix::Zero(static_cast<Eigen::Index>(in), static_cast<Eigen::Index>(out)),
            Matrix::Zero(1, static_cast<Eigen::Index>(out))};
}

LinearParams LinearParams::init(std::size_t in, std::size_t out, CounterRng& rng) {
    LinearParams p;
    p.weight = init_uniform(in, out, in, rng);
    p.bias = init_uniform(1, out, in, rng);
    return p;
}

Matrix linear(const Matrix& x, const LinearParams& p) {
    if (x.cols() != p.weight.rows() || p.bias.cols() != p.weight.cols() || p.bias.rows() != 1)
        throw ShapeError("linear: input width " + std::to_string(x.cols()) + " vs weight " +
                         std::to_string(p.weight.rows()) + "x" + std::to_string(p.weight.cols()));
    Matrix y(x.rows(), p.weight.cols());
    y.noalias() = x * p.weight;
    y.rowwise() += p.bias.row(0);
    return y;
}

void linear_backward(const Matrix& x, const LinearParams& p, const Matrix& grad_out, LinearParams& grad,
                     Matrix* grad_x) {
    grad.weight.noalias() += x.transpose() * grad_out;
    grad.bias += grad_out.colwise().sum();
    if (grad_x) *grad_x = grad_out * p.weight.transpose();
}

// ---------------------------------------------------------------- activations

Matrix relu(const Matrix& x) { return x.cwiseMax(0.0); }

Matrix relu_backward(const Matrix& y, const Matrix& grad_out) {
    return (y.array() > 0.0).select(grad_out, 0.0);
}

DropoutResult dropout(const Matrix& x, double rate, bool training, CounterRng& rng) {
    if (!(rate >= 0.0 && rate < 1.0)) throw ValidationError("dropout rate must be in [0, 1)");
    if (!training || rate == 0.0) return {x, Matrix()};
    DropoutResult r;
    r.scale.resize(x.rows(), x.cols());
    const double keep = 1.0 / (1.0 - rate);
    for (Eigen::Index i = 0; i < x.size(); ++i) r.scale.data()[i] = rng.uniform() < rate ? 0.0 : keep;
    r.output = x.cwiseProduct(r.scale);
    return r;
}

Matrix dropout_backward(const DropoutResult& forward, const Matrix& grad_out) {
    if (forward.scale.size() == 0) return grad_out;
    return grad_out.cwiseProduct(forward.scale);
}

// ---------------------------------------------------------------- layer norm

LayerNormParams LayerNormParams::identity(std::size_t d) {
    return {Matrix::Ones(1, static_cast<Eigen::Index>(d)), Matrix::Zero(1, static_cast<Eigen::Index>(d))};
}

Matrix layer_norm(const Matrix& x, const LayerNormParams& p, LayerNormCache* cache) {
    const Eigen::Index d = x.cols();
    if (d < 2) throw ShapeError("layer_norm: width must be >= 2");
    if (p.gain.cols() != d || p.bias.cols() != d) throw ShapeError("layer_norm: parameter width mismatch");
    Matrix xhat(x.rows(), d);
    std::vector<double> inv_std(static_cast<std::size_t>(x.rows()));
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const double mean = x.row(r).mean();
        const double var = (x.row(r).array() - mean).square().mean();
        const double is = 1.0 / std::sqrt(var + kLayerNormEps);
        xhat.row(r) = (x.row(r).array() - mean) * is;
        inv_std[static_cast<std::size_t>(r)] = is;
    }
    Matrix y = xhat.array().rowwise() * p.gain.row(0).array();
    y.rowwise() += p.bias.row(0);
    if (cache) {
        cache->normalized = std::move(xhat);
        cache->inv_std = std::move(inv_std);
    }
    return y;
}

void layer_norm_backward(const LayerNormCache& cache, const LayerNormParams& p, const Matrix& grad_out,
                         LayerNormParams& grad, Matrix& grad_x) {
    const Matrix& xhat = cache.normalized;
    const double d = static_cast<double>(xhat.cols());
    grad.gain += grad_out.cwiseProduct(xhat).colwise().sum();
    grad.bias += grad_out.colwise().sum();
    Matrix gxhat = grad_out.array().rowwise() * p.gain.row(0).array();
    grad_x.resize(xhat.rows(), xhat.cols());
    for (Eigen::Index r = 0; r < xhat.rows(); ++r) {
        const double mean_g = gxhat.row(r).sum() / d;
        const double mean_gx = gxhat.row(r).dot(xhat.row(r)) / d;
        grad_x.row(r) = (gxhat.row(r).array() - mean_g - xhat.row(r).array() * mean_gx) *
                        cache.inv_std[static_cast<std::size_t>(r)];
    }
}

// ---------------------------------------------------------------- softmax

std::vector<double> softmax(std::span<const double> scores, const Mask& mask) {
    if (mask.size() != scores.size()) throw ShapeError("softmax: mask length differs from scores");
    double top = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (!mask[i]) continue;
        any = true;
        top = std::max(top, scores[i]);
    }
    if (!any) throw ValidationError("softmax: every entry is masked");
    std::vector<double> out(scores.size(), 0.0);
    double z = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (!mask[i]) continue;
        out[i] = std::exp(scores[i] - top);
        z += out[i];
    }
    for (double& v : out) v /= z;
    return out;
}

// ---------------------------------------------------------------- attention

AttentionParams AttentionParams::zeros(std::size_t d_model, std::size_t n_heads) {
    if (n_heads == 0 || d_model % n_heads != 0) throw ShapeError("attention: d_model must be divisible by n_heads");
    AttentionParams p;
    p.n_heads = n_heads;
    const auto d = static_cast<Eigen::Index>(d_model);
    const auto dh = static_cast<Eigen::Index>(d_model / n_heads);
    for (std::size_t h = 0; h < n_heads; ++h) {
        p.w_q.push_back(Matrix::Zero(d, dh));
        p.w_k.push_back(Matrix::Zero(d, dh));
        p.w_v.push_back(Matrix::Zero(d, dh));
    }
    p.w_z = Matrix::Zero(d, d);
    return p;
}

AttentionParams AttentionParams::init(std::size_t d_model, std::size_t n_heads, CounterRng& rng) {
    AttentionParams p = zeros(d_model, n_heads);
    for (std::size_t h = 0; h < n_heads; ++h) {
        p.w_q[h] = init_uniform(d_model, d_model / n_heads, d_model, rng);
        p.w_k[h] = init_uniform(d_model, d_model / n_heads, d_model, rng);
        p.w_v[h] = init_uniform(d_model, d_model / n_heads, d_model, rng);
    }
    p.w_z = init_uniform(d_model, d_model, d_model, rng);
    return p;
}

void AttentionParams::validate() const {
    const auto d = w_z.rows();
    if (n_heads == 0 || w_z.cols() != d || d % static_cast<Eigen::Index>(n_heads) != 0)
        throw ShapeError("attention: w_z must be square with width divisible by n_heads");
    const auto dh = d / static_cast<Eigen::Index>(n_heads);
    if (w_q.size() != n_heads || w_k.size() != n_heads || w_v.size() != n_heads)
        throw ShapeError("attention: one projection per head required");
    for (std::size_t h = 0; h < n_heads; ++h)
        for (const Matrix* w : {&w_q[h], &w_k[h], &w_v[h]})
            if (w->rows() != d || w->cols() != dh) throw ShapeError("attention: projection shape mismatch");
}

AttentionOutput attention_layer(const Matrix& e, const AttentionParams& p, const Mask& mask) {
    p.validate();
    const Eigen::Index n = e.rows();
    if (e.cols() != p.w_z.rows()) throw ShapeError("attention: input width differs from d_model");
    if (static_cast<Eigen::Index>(mask.size()) != n) throw ShapeError("attention: mask length differs from n");
    if (std::none_of(mask.begin(), mask.end(), [](bool b) { return b; }))
        throw ValidationError("attention: every slot is masked");

    const double scale = p.scaled ? 1.0 / std::sqrt(static_cast<double>(p.d_head())) : 1.0;
    const auto dh = static_cast<Eigen::Index>(p.d_head());

    AttentionOutput out;
    AttentionCache& c = out.cache;
    c.input = e;
    c.mask = mask;
    c.context = Matrix::Zero(n, e.cols());
    for (std::size_t h = 0; h < p.n_heads; ++h) {
        c.q.push_back(e * p.w_q[h]);
        c.k.push_back(e * p.w_k[h]);
        c.v.push_back(e * p.w_v[h]);
        Matrix scores = (c.q[h] * c.k[h].transpose()) * scale;
        Matrix a = Matrix::Zero(n, n);
        for (Eigen::Index i = 0; i < n; ++i) {
            if (!mask[static_cast<std::size_t>(i)]) continue;
            auto row = softmax(std::span<const double>(scores.row(i).data(), static_cast<std::size_t>(n)), mask);
            for (Eigen::Index j = 0; j < n; ++j) a(i, j) = row[static_cast<std::size_t>(j)];
        }
        c.context.middleCols(static_cast<Eigen::Index>(h) * dh, dh) = a * c.v[h];
        out.weights.push_back(std::move(a));
    }
    out.output = e + c.context * p.w_z;
    for (Eigen::Index i = 0; i < n; ++i)
        if (!mask[static_cast<std::size_t>(i)]) out.output.row(i) = e.row(i);
    return out;
}

void attention_backward(const AttentionCache& c, const std::vector<Matrix>& weights, const AttentionParams& p,
                        const Matrix& grad_out, AttentionParams& grad, Matrix& grad_e) {
    const Eigen::Index n = c.input.rows();
    const double scale = p.scaled ? 1.0 / std::sqrt(static_cast<double>(p.d_head())) : 1.0;
    const auto dh = static_cast<Eigen::Index>(p.d_head());

    // Masked query rows are an identity map; their context rows are zero.
    Matrix g = grad_out;
    grad_e = grad_out;
    for (Eigen::Index i = 0; i < n; ++i)
        if (!c.mask[static_cast<std::size_t>(i)]) g.row(i).setZero();

    grad.w_z.noalias() += c.context.transpose() * g;
    const Matrix grad_context = g * p.w_z.transpose();
    for (std::size_t h = 0; h < p.n_heads; ++h) {
        const Matrix& a = weights[h];
        const Matrix gc = grad_context.middleCols(static_cast<Eigen::Index>(h) * dh, dh);
        const Matrix ga = gc * c.v[h].transpose();
        const Matrix gv = a.transpose() * gc;
        Matrix gs(n, n);
        for (Eigen::Index i = 0; i < n; ++i) {
            const double inner = a.row(i).dot(ga.row(i));
            gs.row(i) = a.row(i).array() * (ga.row(i).array() - inner) * scale;
        }
        const Matrix gq = gs * c.k[h];
        const Matrix gk = gs.transpose() * c.q[h];
        grad.w_q[h].noalias() += c.input.transpose() * gq;
        grad.w_k[h].noalias() += c.input.transpose() * gk;
        grad.w_v[h].noalias() += c.input.transpose() * gv;
        grad_e.noalias() += gq * p.w_q[h].transpose();
        grad_e.noalias() += gk * p.w_k[h].transpose();
        grad_e.noalias() += gv * p.w_v[h].transpose();
    }
}

// ---------------------------------------------------------------- gradient check

GradCheckResult grad_check(const GradFunction& fn, std::vector<double> params, double h,
                           std::span<const std::size_t> subset) {
    std::vector<double> analytic(params.size(), 0.0);
    const double base = fn(params, analytic);
    if (!std::isfinite(base)) throw NumericError("grad_check: non-finite function value");

    std::vector<std::size_t> indices(subset.begin(), subset.end());
    if (indices.empty()) {
        indices.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) indices[i] = i;
    }

    GradCheckResult result;
    for (std::size_t i : indices) {
        const double p0 = params[i];
        const double step = h * std::max(1.0, std::abs(p0));
        params[i] = p0 + step;
        const double up = fn(params, {});
        params[i] = p0 - step;
        const double down = fn(params, {});
        params[i] = p0;
        if (!std::isfinite(up) || !std::isfinite(down) || !std::isfinite(analytic[i]))
            throw NumericError("grad_check: non-finite value at parameter " + std::to_string(i));
        const double numeric = (up - down) / (2.0 * step);
        const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric));
        if (err > result.max_rel_error) {
            result.max_rel_error = err;
            result.worst_index = i;
        }
    }
    return result;
}

}  // namespace transflower::nn
