#include "ibca/gm_vib.hpp"

#include "ibca/errors.hpp"

#include <cmath>

namespace ibca {

namespace {

constexpr double kHeadInitStd = 0.02;

/// batch x (batch * n) matrix averaging each image's n consecutive rows.
Matrix pooling_matrix(Eigen::Index batch, Eigen::Index n) {
    Matrix pool = Matrix::Zero(batch, batch * n);
    for (Eigen::Index b = 0; b < batch; ++b) pool.block(b, b * n, 1, n).setConstant(1.0 / static_cast<double>(n));
    return pool;
}

Var linear(Var x, Var weight, Var bias) { return add_row(matmul(x, weight), bias); }

}  // namespace

void init_token_grouping(const ModelConfig& cfg, ParameterMap& params, Rng& rng, bool mixture) {
    const Eigen::Index d = cfg.embed_dim;
    const Eigen::Index nc = cfg.n_classes;
    params["grouping.mu.weight"] = rng.normal_matrix(d, nc * d, kHeadInitStd);
    params["grouping.mu.bias"] = Matrix::Zero(1, nc * d);
    params["grouping.log_sigma.weight"] = Matrix::Zero(d, nc * d);
    params["grouping.log_sigma.bias"] = Matrix::Zero(1, nc * d);
    if (mixture) {
        params["grouping.pi.weight"] = rng.normal_matrix(d, nc, kHeadInitStd);
        params["grouping.pi.bias"] = Matrix::Zero(1, nc);
    }
}

void init_linear_spatial(const ModelConfig& cfg, ParameterMap& params, Rng& rng) {
    params["spatial.weight"] = rng.normal_matrix(cfg.embed_dim, cfg.n_classes, kHeadInitStd);
}

GaussianMixtureParams token_grouping(const BoundParameters& params, const TokenState& tokens) {
    Tape& tape = *tokens.patch_tokens.tape();
    const Eigen::Index batch = tokens.batch;
    const Eigen::Index nc = tokens.n_classes;
    const Eigen::Index d = tokens.patch_tokens.cols();

    Var pooled = matmul(tape.constant(pooling_matrix(batch, tokens.n_patches)), tokens.patch_tokens);

    GaussianMixtureParams out;
    out.batch = batch;
    out.n_classes = nc;
    out.mu = reshape(linear(pooled, params["grouping.mu.weight"], params["grouping.mu.bias"]), batch * nc, d);
    Var log_sigma =
        reshape(linear(pooled, params["grouping.log_sigma.weight"], params["grouping.log_sigma.bias"]), batch * nc, d);
    out.sigma = exp(clamp(log_sigma, kLogSigmaMin, kLogSigmaMax));
    if (params.contains("grouping.pi.weight")) {
        out.pi = softmax_rows(linear(pooled, params["grouping.pi.weight"], params["grouping.pi.bias"]));
    } else {
        out.pi = tape.constant(Matrix::Ones(batch, nc));
    }
    return out;
}

Var mixture_from_draws(Var draws) { return normalize_rows(draws); }

Var sample_mixture_weights(Var pi, double alpha0, Rng& rng) {
    if (!(alpha0 > 0.0)) throw ConfigError("alpha0 must be positive, got " + std::to_string(alpha0));
    Matrix u = rng.uniform_matrix(pi.rows(), pi.cols());
    Var shape = add_scalar(scale(pi, alpha0), kGammaShapeFloor);
    return mixture_from_draws(gamma_icdf(shape, u));
}

SpatialAttention sample_attention(const GaussianMixtureParams& params, Var patch_tokens, Var pi_hat, Rng& rng,
                                  AttentionKind kind) {
    Tape& tape = *patch_tokens.tape();
    const Eigen::Index batch = params.batch;
    const Eigen::Index nc = params.n_classes;
    const Eigen::Index d = patch_tokens.cols();
    if (params.mu.rows() != batch * nc || params.mu.cols() != d || patch_tokens.rows() % batch != 0) {
        throw ShapeError("sample_attention: mixture parameters do not match patch tokens");
    }

    Var z = params.mu;
    Var weights = params.pi;
    if (kind == AttentionKind::sampled) {
        Var eps = tape.constant(rng.normal_matrix(batch * nc, d));
        z = add(params.mu, mul(params.sigma, eps));
        weights = pi_hat;
    }
    if (weights.rows() != batch || weights.cols() != nc) throw ShapeError("sample_attention: pi_hat must be batch x N_c");

    Var normed = layer_norm(patch_tokens);
    Var scores = scale(batched_matmul(z, normed, batch, true), 1.0 / std::sqrt(static_cast<double>(d)));
    Var attn = scale_rows(softmax_rows(scores), reshape(weights, batch * nc, 1));
    return SpatialAttention{attn, kind, batch, nc, patch_tokens.rows() / batch};
}

void init_patch_norm(const ModelConfig& cfg, ParameterMap& params) {
    params["patch_norm.gamma"] = Matrix::Ones(1, cfg.embed_dim);
    params["patch_norm.beta"] = Matrix::Zero(1, cfg.embed_dim);
}

Var normalize_patches(const BoundParameters& params, Var patch_tokens) {
    return add_row(mul_row(layer_norm(patch_tokens), params["patch_norm.gamma"]), params["patch_norm.beta"]);
}

SpatialAttention linear_spatial_attention(const BoundParameters& params, const TokenState& tokens) {
    const Eigen::Index batch = tokens.batch;
    Var normed = layer_norm(tokens.patch_tokens);
    Var per_class = tile_rows(transpose(params["spatial.weight"]), batch);
    Var attn = softmax_rows(batched_matmul(per_class, normed, batch, true));
    return SpatialAttention{attn, AttentionKind::deterministic, batch, tokens.n_classes, tokens.n_patches};
}

PatchClassFeatures class_features(Var patch_features, const SpatialAttention& attention) {
    if (patch_features.rows() != attention.batch * attention.n_patches) {
        throw ShapeError("class_features: patch features do not match attention layout");
    }
    Var z = batched_matmul(attention.weights, patch_features, attention.batch);
    return PatchClassFeatures{z, attention.batch, attention.n_classes};
}

Var patch_logits(const PatchClassFeatures& features) {
    return reshape(row_mean(features.z), features.batch, features.n_classes);
}

Var mlsm_loss(Var logits, const Matrix& targets) { return bce_with_logits(logits, targets); }

Var kl_divergence(const GaussianMixtureParams& params, KlForm form) {
    if (!((params.sigma.value().array() > 0.0).all())) {
        throw DomainError("kl_divergence: sigma must be strictly positive");
    }
    const double log_coeff = form == KlForm::unit_log ? 1.0 : 2.0;
    Var terms = sub(add(mul(params.mu, params.mu), mul(params.sigma, params.sigma)),
                    scale(log(params.sigma), log_coeff));
    Var total = sum(add_scalar(terms, -1.0));
    return scale(total, 0.5 / static_cast<double>(params.batch));
}

VibLoss vib_loss(Var logits, const Matrix& targets, const GaussianMixtureParams& params, double beta, KlForm form) {
    if (!(beta >= 0.0)) throw ConfigError("beta must be non-negative");
    Var mlsm = mlsm_loss(logits, targets);
    Var kl = kl_divergence(params, form);
    return VibLoss{add(mlsm, scale(kl, beta)), mlsm, kl};
}

}  // namespace ibca
