#pragma once

// Contrastive-enhancement causal intervention: per-head class attention from
// the last transformer block, the class-token classifier, the attention
// alignment loss, and the head-averaged intervention score.

#include "ibca/autograd.hpp"
#include "ibca/backbone.hpp"
#include "ibca/gm_vib.hpp"

namespace ibca {

/// Class-to-patch attention propagated through patch-to-patch affinity,
/// one N_c x N_p^2 map per (image, head) at rows (b * heads + h) * N_c.
struct HeadClassAttention {
    Var a;
    Eigen::Index batch = 0;
    Eigen::Index heads = 0;
    Eigen::Index n_classes = 0;
    Eigen::Index n_patches = 0;
};

/// Linear readout per class, D -> 1.
struct ClassifierParams {
    Matrix weight;  ///< N_c x D
    Vector bias;    ///< N_c

    /// Readout equal to global average pooling: weight 1/D, bias 0.
    static ClassifierParams average_pooling(Eigen::Index n_classes, Eigen::Index dim);
};

/// A^l = A[0:N_c, N_c:T] * A[N_c:T, N_c:T] for every image and head.
/// Throws ShapeError when T <= N_c.
HeadClassAttention extract_class_attention(const AttentionStack& attn, Eigen::Index n_classes);

/// batch x N_c: mean of each class token over the embedding axis.
Var class_token_logits(const TokenState& tokens);

/// 1 - mean row cosine between matching rows of a and b. No activation.
Var alignment_loss(Var a, Var b);

/// Sigmoid-activates both maps and aligns every head's class rows with the
/// matching rows of the spatial attention; averaged over heads, classes, batch.
Var cae_loss(const HeadClassAttention& head_attn, const SpatialAttention& spatial);

/// batch x N_c: (1/H) Σ_h sigmoid(Clf_k(A^h_k · F)), F the normalized patch
/// features ((batch * N_p^2) x D). Value only.
Matrix intervention_scores(const HeadClassAttention& head_attn, const Matrix& patch_features,
                           const ClassifierParams& classifier);

}  // namespace ibca
