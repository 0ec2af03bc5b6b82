#pragma once

// Reverse-mode automatic differentiation over dense row-major matrices.
//
// A Tape records every operation applied to its variables together with a
// closure that propagates the adjoint back to the operands. All model code
// (backbone, heads, losses) is written against Var so that the same code
// path serves inference, training, and finite-difference verification.

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace ibca {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

class Tape;

/// Handle to a node on a Tape. Cheap to copy; only valid while its tape lives.
class Var {
public:
    Var() = default;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    const Matrix& value() const;
    const Matrix& grad() const;
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
    bool requires_grad() const;
    double scalar() const;

    Tape* tape() const { return tape_; }
    std::size_t id() const { return id_; }
    bool valid() const { return tape_ != nullptr; }

private:
    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

class Tape {
public:
    using Backward = std::function<void(Tape&, std::size_t self)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Values that never receive gradients (inputs, noise draws, targets).
    Var constant(Matrix value);
    /// Trainable leaf; its gradient is populated by backward().
    Var parameter(Matrix value);

    /// Records an op result. `backward` is dropped when no operand needs a
    /// gradient or when recording is disabled.
    Var record(Matrix value, bool requires_grad, Backward backward);

    /// Seeds d(root)/d(root) = 1 and sweeps the tape in reverse. Root must be 1x1.
    void backward(Var root);

    /// Disables closure capture; used for inference-only passes.
    void set_recording(bool on) { recording_ = on; }
    bool recording() const { return recording_; }

    const Matrix& value(std::size_t id) const { return nodes_[id].value; }
    const Matrix& grad(std::size_t id) const;
    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
    /// Adjoint accumulator of a node, zero-allocated on first use.
    Matrix& grad_mut(std::size_t id);
    bool has_grad(std::size_t id) const { return nodes_[id].grad.size() != 0; }

    std::size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

private:
    struct Node {
        Matrix value;
        Matrix grad;
        bool requires_grad = false;
        Backward backward;
    };

    std::vector<Node> nodes_;
    bool recording_ = true;
    Matrix empty_;
};

// ---------------------------------------------------------------------------
// Elementwise and broadcasting ops.

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
/// a (n x m) + row (1 x m) broadcast over rows.
Var add_row(Var a, Var row);
/// a (n x m) * row (1 x m) broadcast over rows.
Var mul_row(Var a, Var row);
/// Row i of a scaled by s(i, 0); s is (n x 1).
Var scale_rows(Var a, Var s);

Var exp(Var a);
Var log(Var a);
Var clamp(Var a, double lo, double hi);
Var sigmoid(Var a);
Var gelu(Var a);

// ---------------------------------------------------------------------------
// Linear algebra and layout.

Var matmul(Var a, Var b, bool transpose_a = false, bool transpose_b = false);
/// Block-diagonal product: a is (batch*m x k), b is (batch*k x n) or, with
/// transpose_b, (batch*n x k). Returns (batch*m x n).
Var batched_matmul(Var a, Var b, Eigen::Index batch, bool transpose_b = false);
Var transpose(Var a);
/// Row-major reinterpretation with the same element count.
Var reshape(Var a, Eigen::Index rows, Eigen::Index cols);
Var tile_rows(Var a, Eigen::Index reps);
Var gather_rows(Var a, std::span<const Eigen::Index> index);
Var vcat(std::span<const Var> parts);
Var slice_cols(Var a, Eigen::Index first, Eigen::Index count);

// ---------------------------------------------------------------------------
// Row-wise normalizations and reductions.

/// Zero-mean unit-variance per row, no affine.
Var layer_norm(Var a, double eps = 1e-5);
Var softmax_rows(Var a);
/// Divides each row by its sum.
Var normalize_rows(Var a);
/// (n x m) -> (n x 1) mean over columns.
Var row_mean(Var a);
Var sum(Var a);
Var mean(Var a);
/// (n x m), (n x m) -> (n x 1) cosine similarity of matching rows.
Var row_cosine(Var a, Var b);
/// (n x m), (n x m) -> (n x 1) 1 - cosine, evaluated as half the squared
/// distance of the unit rows so that nearly parallel rows keep precision.
Var cosine_distance_rows(Var a, Var b);

// ---------------------------------------------------------------------------
// Fused ops.

/// Scaled dot-product attention probabilities. qkv is (batch*tokens x 3*dim)
/// laid out [Q | K | V]; returns (batch*heads*tokens x tokens), block
/// (b, h) at rows (b*heads + h)*tokens.
Var attention_probs(Var qkv, Eigen::Index batch, Eigen::Index tokens, Eigen::Index heads);
/// Applies attention probabilities to the V slice of qkv; (batch*tokens x dim).
Var attention_apply(Var probs, Var qkv, Eigen::Index batch, Eigen::Index tokens,
                    Eigen::Index heads);

/// Mean binary cross-entropy with logits, log-sum-exp stable.
Var bce_with_logits(Var logits, const Matrix& targets);

/// Inverse-CDF Gamma(shape, 1) draws at fixed uniforms u. The derivative with
/// respect to shape uses the implicit-function rule dG/da = -dF/da / f.
Var gamma_icdf(Var shape, const Matrix& uniforms);

}  // namespace ibca
