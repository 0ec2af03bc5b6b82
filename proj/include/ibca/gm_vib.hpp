#pragma once

// Gaussian-mixture variational information bottleneck over patch tokens.
//
// Adaptive token grouping maps pooled patch tokens to one Gaussian component
// per class (mean, diagonal scale, mixture weight). Sampling a query vector
// from each component and attending over layer-normalized patch tokens gives
// the class-specific spatial attention used by the patch-token classifier.

#include "ibca/autograd.hpp"
#include "ibca/backbone.hpp"
#include "ibca/config.hpp"
#include "ibca/parameters.hpp"
#include "ibca/random.hpp"

namespace ibca {

inline constexpr double kLogSigmaMin = -5.0;
inline constexpr double kLogSigmaMax = 2.0;
inline constexpr double kGammaShapeFloor = 1e-4;

struct GaussianMixtureParams {
    Var mu;     ///< (batch * N_c) x D
    Var sigma;  ///< (batch * N_c) x D, strictly positive
    Var pi;     ///< batch x N_c, rows on the simplex
    Eigen::Index batch = 0;
    Eigen::Index n_classes = 0;
};

enum class AttentionKind { deterministic, sampled };

struct SpatialAttention {
    Var weights;  ///< (batch * N_c) x N_p^2; class row k sums to its mixture weight
    AttentionKind kind = AttentionKind::deterministic;
    Eigen::Index batch = 0;
    Eigen::Index n_classes = 0;
    Eigen::Index n_patches = 0;
};

struct PatchClassFeatures {
    Var z;  ///< (batch * N_c) x D
    Eigen::Index batch = 0;
    Eigen::Index n_classes = 0;
};

struct VibLoss {
    Var total;
    Var mlsm;
    Var kl;
};

/// Adds the three grouping heads. With `mixture == false` the weight head is
/// omitted and every class keeps weight 1 (single-Gaussian ablation).
void init_token_grouping(const ModelConfig& cfg, ParameterMap& params, Rng& rng, bool mixture = true);

/// Adds the plain linear spatial mapping used by the ablation without VIB.
void init_linear_spatial(const ModelConfig& cfg, ParameterMap& params, Rng& rng);
/// Adds the affine of the patch feature normalization (gamma 1, beta 0).
void init_patch_norm(const ModelConfig& cfg, ParameterMap& params);

/// Pools patch tokens per image and projects to (μ, σ, π). σ = exp(clamp(log σ, -5, 2)),
/// π = softmax over classes, or all ones when the weight head is absent.
GaussianMixtureParams token_grouping(const BoundParameters& params, const TokenState& tokens);

/// π̂_k = g_k / Σ_j g_j with g_k ~ Gamma(alpha0 π_k + 1e-4, 1), drawn by
/// inverse CDF so that π̂ stays differentiable in π.
Var sample_mixture_weights(Var pi, double alpha0, Rng& rng);

/// Normalizes raw positive draws (batch x K) onto the simplex.
Var mixture_from_draws(Var draws);

/// Row weights π̂_k * softmax_i(<z_k, Norm(f_p)_i> / sqrt(D)) with z_k = μ_k + σ_k ε
/// when sampled, z_k = μ_k and π̂ = π when deterministic.
SpatialAttention sample_attention(const GaussianMixtureParams& params, Var patch_tokens, Var pi_hat,
                                  Rng& rng, AttentionKind kind);

/// Ablation spatial map: softmax over patches of a learned linear score per class.
SpatialAttention linear_spatial_attention(const BoundParameters& params, const TokenState& tokens);

/// Layer normalization of patch tokens with the learned patch_norm affine.
/// Without the affine every row has zero mean and the embedding-axis average
/// of Z_p would vanish identically.
Var normalize_patches(const BoundParameters& params, Var patch_tokens);
/// Z_p = Â · features per image, features being normalize_patches output.
PatchClassFeatures class_features(Var patch_features, const SpatialAttention& attention);

/// Global average over the embedding axis: batch x N_c logits.
Var patch_logits(const PatchClassFeatures& features);

/// Multi-label soft-margin loss, mean over batch and classes.
Var mlsm_loss(Var logits, const Matrix& targets);

/// ½ Σ_{k,d} (μ² + σ² − c·log σ − 1) averaged over the batch, c = 1 for
/// KlForm::unit_log and c = 2 for KlForm::textbook. Throws DomainError for σ <= 0.
Var kl_divergence(const GaussianMixtureParams& params, KlForm form = KlForm::unit_log);

VibLoss vib_loss(Var logits, const Matrix& targets, const GaussianMixtureParams& params, double beta,
                 KlForm form = KlForm::unit_log);

}  // namespace ibca
