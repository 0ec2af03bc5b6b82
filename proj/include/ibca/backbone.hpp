#pragma once

// Compact multi-class-token vision transformer.
//
// Token layout per image: the N_c learned class tokens first, then the N_p^2
// patch tokens in raster order. Downstream slicing of the attention maps
// (ceci::extract_class_attention) depends on this order.

#include "ibca/autograd.hpp"
#include "ibca/config.hpp"
#include "ibca/parameters.hpp"
#include "ibca/random.hpp"

#include <span>

namespace ibca {

/// One preprocessed image: channels x (image_size * image_size), row-major pixels.
using ImageTensor = Matrix;

struct TokenState {
    Var class_tokens;  ///< (batch * N_c) x D
    Var patch_tokens;  ///< (batch * N_p^2) x D
    Eigen::Index batch = 0;
    Eigen::Index n_classes = 0;
    Eigen::Index n_patches = 0;
};

/// Last-block post-softmax attention, one T x T map per (image, head).
/// Block (b, h) occupies rows (b * heads + h) * T.
struct AttentionStack {
    Var attn;  ///< (batch * heads * T) x T
    Eigen::Index batch = 0;
    Eigen::Index heads = 0;
    Eigen::Index tokens = 0;

    /// Copy of the T x T map for one image and head.
    Matrix map(Eigen::Index b, Eigen::Index h) const {
        return attn.value().middleRows((b * heads + h) * tokens, tokens);
    }
};

struct BackboneOutput {
    TokenState tokens;
    AttentionStack attention;
};

/// Adds every backbone tensor to `params`, drawn from `rng`.
void init_backbone(const ModelConfig& cfg, ParameterMap& params, Rng& rng);

/// Patchify: (batch * N_p^2) x (channels * P * P); patch p = row * N_p + col,
/// features ordered (channel, dy, dx).
Matrix patchify(std::span<const ImageTensor> images, const ModelConfig& cfg);

/// Linear patch projection plus learned positional encodings.
Var embed_patches(Tape& tape, const BoundParameters& params, std::span<const ImageTensor> images,
                  const ModelConfig& cfg);

/// Full encoder pass. Throws NumericalError naming the block when an
/// activation becomes non-finite.
BackboneOutput forward(Tape& tape, const BoundParameters& params, std::span<const ImageTensor> images,
                       const ModelConfig& cfg);

}  // namespace ibca
