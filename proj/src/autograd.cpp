#include "ibca/autograd.hpp"

#include "ibca/errors.hpp"

#include <boost/math/special_functions/gamma.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <utility>

namespace ibca {

namespace {
constexpr double kInvSqrt2 = 0.70710678118654752440;
}  // namespace

const Matrix& Var::value() const { return tape_->value(id_); }
const Matrix& Var::grad() const { return tape_->grad(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

double Var::scalar() const {
    const Matrix& v = value();
    if (v.rows() != 1 || v.cols() != 1) {
        throw ShapeError("scalar() on a " + std::to_string(v.rows()) + "x" +
                         std::to_string(v.cols()) + " value");
    }
    return v(0, 0);
}

Var Tape::constant(Matrix value) {
    nodes_.push_back(Node{std::move(value), Matrix(), false, nullptr});
    return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(Matrix value) {
    nodes_.push_back(Node{std::move(value), Matrix(), recording_, nullptr});
    return Var(this, nodes_.size() - 1);
}

Var Tape::record(Matrix value, bool requires_grad, Backward backward) {
    const bool keep = requires_grad && recording_;
    nodes_.push_back(Node{std::move(value), Matrix(), keep, keep ? std::move(backward) : nullptr});
    return Var(this, nodes_.size() - 1);
}

const Matrix& Tape::grad(std::size_t id) const {
    return nodes_[id].grad.size() != 0 ? nodes_[id].grad : empty_;
}

Matrix& Tape::grad_mut(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
    return n.grad;
}

void Tape::backward(Var root) {
    if (root.tape() != this) throw ShapeError("backward(): variable belongs to another tape");
    if (root.rows() != 1 || root.cols() != 1) throw ShapeError("backward(): root must be scalar");
    if (!nodes_[root.id()].requires_grad) return;
    grad_mut(root.id())(0, 0) += 1.0;
    for (std::size_t i = root.id() + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (n.backward && n.grad.size() != 0) n.backward(*this, i);
    }
}

namespace {

Tape& same_tape(Var a, Var b) {
    if (a.tape() != b.tape()) throw ShapeError("operands live on different tapes");
    return *a.tape();
}

void check_same_shape(const char* op, Var a, Var b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                         std::to_string(b.cols()));
    }
}

template <typename Expr>
void accumulate(Tape& t, Var v, const Expr& expr) {
    if (v.requires_grad()) t.grad_mut(v.id()) += expr;
}

}  // namespace

Var add(Var a, Var b) {
    check_same_shape("add", a, b);
    Tape& t = same_tape(a, b);
    return t.record(a.value() + b.value(), a.requires_grad() || b.requires_grad(),
                    [a, b](Tape& t, std::size_t self) {
                        const Matrix& g = t.grad(self);
                        accumulate(t, a, g);
                        accumulate(t, b, g);
                    });
}

Var sub(Var a, Var b) {
    check_same_shape("sub", a, b);
    Tape& t = same_tape(a, b);
    return t.record(a.value() - b.value(), a.requires_grad() || b.requires_grad(),
                    [a, b](Tape& t, std::size_t self) {
                        const Matrix& g = t.grad(self);
                        accumulate(t, a, g);
                        accumulate(t, b, -g);
                    });
}

Var mul(Var a, Var b) {
    check_same_shape("mul", a, b);
    Tape& t = same_tape(a, b);
    return t.record(a.value().cwiseProduct(b.value()), a.requires_grad() || b.requires_grad(),
                    [a, b](Tape& t, std::size_t self) {
                        const Matrix& g = t.grad(self);
                        accumulate(t, a, g.cwiseProduct(b.value()));
                        accumulate(t, b, g.cwiseProduct(a.value()));
                    });
}

Var scale(Var a, double s) {
    Tape& t = *a.tape();
    return t.record(a.value() * s, a.requires_grad(), [a, s](Tape& t, std::size_t self) {
        accumulate(t, a, t.grad(self) * s);
    });
}

Var add_scalar(Var a, double s) {
    Tape& t = *a.tape();
    return t.record((a.value().array() + s).matrix(), a.requires_grad(),
                    [a](Tape& t, std::size_t self) { accumulate(t, a, t.grad(self)); });
}

Var add_row(Var a, Var row) {
    if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeError("add_row: row must be 1 x cols");
    Tape& t = same_tape(a, row);
    Matrix out = a.value().rowwise() + row.value().row(0);
    return t.record(std::move(out), a.requires_grad() || row.requires_grad(),
                    [a, row](Tape& t, std::size_t self) {
                        const Matrix& g = t.grad(self);
                        accumulate(t, a, g);
                        accumulate(t, row, g.colwise().sum());
                    });
}

Var mul_row(Var a, Var row) {
    if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeError("mul_row: row must be 1 x cols");
    Tape& t = same_tape(a, row);
    Matrix out = a.value().array().rowwise() * row.value().row(0).array();
    return t.record(std::move(out), a.requires_grad() || row.requires_grad(),
                    [a, row](Tape& t, std::size_t self) {
                        const Matrix& g = t.grad(self);
                        if (a.requires_grad()) {
                            t.grad_mut(a.id()).array() += g.array().rowwise() * row.value().row(0).array();
                        }
                        accumulate(t, row, g.cwiseProduct(a.value()).colwise().sum());
                    });
}

Var scale_rows(Var a, Var s) {
    if (s.cols() != 1 || s.rows() != a.rows()) throw ShapeError("scale_rows: scale must be rows x 1");
    Tape& t = same_tape(a, s);
    Matrix out = a.value().array().colwise() * s.value().col(0).array();
    return t.record(std::move(out), a.requires_grad() || s.requires_grad(),
                    [a, s](Tape& t, std::size_t self) {
                        const Matrix& g = t.grad(self);
                        if (a.requires_grad()) {
                            t.grad_mut(a.id()).array() += g.array().colwise() * s.value().col(0).array();
                        }
                        accumulate(t, s, g.cwiseProduct(a.value()).rowwise().sum());
                    });
}

Var exp(Var a) {
    Tape& t = *a.tape();
    Matrix out = a.value().array().exp().matrix();
    return t.record(std::move(out), a.requires_grad(), [a](Tape& t, std::size_t self) {
        accumulate(t, a, t.grad(self).cwiseProduct(t.value(self)));
    });
}

Var log(Var a) {
    Tape& t = *a.tape();
    Matrix out = a.value().array().log().matrix();
    return t.record(std::move(out), a.requires_grad(), [a](Tape& t, std::size_t self) {
        accumulate(t, a, t.grad(self).cwiseQuotient(a.value()));
    });
}

Var clamp(Var a, double lo, double hi) {
    Tape& t = *a.tape();
    Matrix out = a.value().cwiseMax(lo).cwiseMin(hi);
    return t.record(std::move(out), a.requires_grad(), [a, lo, hi](Tape& t, std::size_t self) {
        const Matrix& x = a.value();
        Matrix pass = ((x.array() >= lo) && (x.array() <= hi)).cast<double>().matrix();
        accumulate(t, a, t.grad(self).cwiseProduct(pass));
    });
}

Var sigmoid(Var a) {
    Tape& t = *a.tape();
    Matrix out = a.value().unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
    return t.record(std::move(out), a.requires_grad(), [a](Tape& t, std::size_t self) {
        const Matrix& y = t.value(self);
        accumulate(t, a, t.grad(self).cwiseProduct(y.cwiseProduct((1.0 - y.array()).matrix())));
    });
}

Var gelu(Var a) {
    Tape& t = *a.tape();
    Matrix out = a.value().unaryExpr(
        [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); });
    return t.record(std::move(out), a.requires_grad(), [a](Tape& t, std::size_t self) {
        Matrix d = a.value().unaryExpr([](double x) {
            const double pdf = std::exp(-0.5 * x * x) * std::numbers::inv_sqrtpi * kInvSqrt2;
            return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * pdf;
        });
        accumulate(t, a, t.grad(self).cwiseProduct(d));
    });
}

Var matmul(Var a, Var b, bool transpose_a, bool transpose_b) {
    Tape& t = same_tape(a, b);
    const Eigen::Index inner_a = transpose_a ? a.rows() : a.cols();
    const Eigen::Index inner_b = transpose_b ? b.cols() : b.rows();
    if (inner_a != inner_b) {
        throw ShapeError("matmul: inner dimensions " + std::to_string(inner_a) + " and " +
                         std::to_string(inner_b) + " differ");
    }
    Matrix out;
    if (!transpose_a && !transpose_b) out.noalias() = a.value() * b.value();
    else if (transpose_a && !transpose_b) out.noalias() = a.value().transpose() * b.value();
    else if (!transpose_a && transpose_b) out.noalias() = a.value() * b.value().transpose();
    else out.noalias() = a.value().transpose() * b.value().transpose();

    return t.record(std::move(out), a.requires_grad() || b.requires_grad(),
                    [a, b, transpose_a, transpose_b](Tape& t, std::size_t self) {
                        const Matrix& g = t.grad(self);
                        const Matrix& av = a.value();
                        const Matrix& bv = b.value();
                        if (a.requires_grad()) {
                            Matrix& ga = t.grad_mut(a.id());
                            if (!transpose_a) {
                                if (!transpose_b) ga.noalias() += g * bv.transpose();
                                else ga.noalias() += g * bv;
                            } else {
                                if (!transpose_b) ga.noalias() += bv * g.transpose();
                                else ga.noalias() += bv.transpose() * g.transpose();
                            }
                        }
                        if (b.requires_grad()) {
                            Matrix& gb = t.grad_mut(b.id());
                            if (!transpose_b) {
                                if (!transpose_a) gb.noalias() += av.transpose() * g;
                                else gb.noalias() += av * g;
                            } else {
                                if (!transpose_a) gb.noalias() += g.transpose() * av;
                                else gb.noalias() += g.transpose() * av.transpose();
                            }
                        }
                    });
}

Var batched_matmul(Var a, Var b, Eigen::Index batch, bool transpose_b) {
    Tape& t = same_tape(a, b);
    if (batch <= 0 || a.rows() % batch != 0 || b.rows() % batch != 0) {
        throw ShapeError("batched_matmul: row counts not divisible by batch");
    }
    const Eigen::Index m = a.rows() / batch;
    const Eigen::Index k = a.cols();
    const Eigen::Index brows = b.rows() / batch;
    const Eigen::Index n = transpose_b ? brows : b.cols();
    if ((transpose_b ? b.cols() : brows) != k) throw ShapeError("batched_matmul: inner dimension mismatch");

    Matrix out(batch * m, n);
    for (Eigen::Index i = 0; i < batch; ++i) {
        auto ab = a.value().middleRows(i * m, m);
        auto bb = b.value().middleRows(i * brows, brows);
        if (transpose_b) out.middleRows(i * m, m).noalias() = ab * bb.transpose();
        else out.middleRows(i * m, m).noalias() = ab * bb;
    }
    return t.record(std::move(out), a.requires_grad() || b.requires_grad(),
                    [a, b, batch, m, brows, transpose_b](Tape& t, std::size_t self) {
                        const Matrix& g = t.grad(self);
                        for (Eigen::Index i = 0; i < batch; ++i) {
                            auto gb = g.middleRows(i * m, m);
                            auto ab = a.value().middleRows(i * m, m);
                            auto bb = b.value().middleRows(i * brows, brows);
                            if (a.requires_grad()) {
                                auto ga = t.grad_mut(a.id()).middleRows(i * m, m);
                                if (transpose_b) ga.noalias() += gb * bb;
                                else ga.noalias() += gb * bb.transpose();
                            }
                            if (b.requires_grad()) {
                                auto gbm = t.grad_mut(b.id()).middleRows(i * brows, brows);
                                if (transpose_b) gbm.noalias() += gb.transpose() * ab;
                                else gbm.noalias() += ab.transpose() * gb;
                            }
                        }
                    });
}

Var transpose(Var a) {
    Tape& t = *a.tape();
    Matrix out = a.value().transpose();
    return t.record(std::move(out), a.requires_grad(), [a](Tape& t, std::size_t self) {
        accumulate(t, a, t.grad(self).transpose());
    });
}

Var reshape(Var a, Eigen::Index rows, Eigen::Index cols) {
    if (rows * cols != a.value().size()) throw ShapeError("reshape: element count changes");
    Tape& t = *a.tape();
    Matrix out = Eigen::Map<const Matrix>(a.value().data(), rows, cols);
    return t.record(std::move(out), a.requires_grad(), [a](Tape& t, std::size_t self) {
        const Matrix& g = t.grad(self);
        accumulate(t, a, Eigen::Map<const Matrix>(g.data(), a.rows(), a.cols()));
    });
}

Var tile_rows(Var a, Eigen::Index reps) {
    Tape& t = *a.tape();
    const Eigen::Index n = a.rows();
    Matrix out(n * reps, a.cols());
    for (Eigen::Index r = 0; r < reps; ++r) out.middleRows(r * n, n) = a.value();
    return t.record(std::move(out), a.requires_grad(), [a, n, reps](Tape& t, std::size_t self) {
        const Matrix& g = t.grad(self);
        Matrix& ga = t.grad_mut(a.id());
        for (Eigen::Index r = 0; r < reps; ++r) ga += g.middleRows(r * n, n);
    });
}

Var gather_rows(Var a, std::span<const Eigen::Index> index) {
    Tape& t = *a.tape();
    std::vector<Eigen::Index> idx(index.begin(), index.end());
    Matrix out(static_cast<Eigen::Index>(idx.size()), a.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= a.rows()) throw ShapeError("gather_rows: index out of range");
        out.row(static_cast<Eigen::Index>(i)) = a.value().row(idx[i]);
    }
    return t.record(std::move(out), a.requires_grad(),
                    [a, idx = std::move(idx)](Tape& t, std::size_t self) {
                        const Matrix& g = t.grad(self);
                        Matrix& ga = t.grad_mut(a.id());
                        for (std::size_t i = 0; i < idx.size(); ++i) {
                            ga.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
                        }
                    });
}

Var vcat(std::span<const Var> parts) {
    if (parts.empty()) throw ShapeError("vcat: no operands");
    Tape& t = *parts.front().tape();
    const Eigen::Index cols = parts.front().cols();
    Eigen::Index rows = 0;
    bool needs = false;
    for (const Var& p : parts) {
        if (p.tape() != &t) throw ShapeError("vcat: operands live on different tapes");
        if (p.cols() != cols) throw ShapeError("vcat: column count mismatch");
        rows += p.rows();
        needs = needs || p.requires_grad();
    }
    Matrix out(rows, cols);
    Eigen::Index r = 0;
    for (const Var& p : parts) {
        out.middleRows(r, p.rows()) = p.value();
        r += p.rows();
    }
    std::vector<Var> ops(parts.begin(), parts.end());
    return t.record(std::move(out), needs, [ops = std::move(ops)](Tape& t, std::size_t self) {
        const Matrix& g = t.grad(self);
        Eigen::Index r = 0;
        for (const Var& p : ops) {
            accumulate(t, p, g.middleRows(r, p.rows()));
            r += p.rows();
        }
    });
}

Var slice_cols(Var a, Eigen::Index first, Eigen::Index count) {
    if (first < 0 || count < 0 || first + count > a.cols()) throw ShapeError("slice_cols: out of range");
    Tape& t = *a.tape();
    Matrix out = a.value().middleCols(first, count);
    return t.record(std::move(out), a.requires_grad(), [a, first, count](Tape& t, std::size_t self) {
        t.grad_mut(a.id()).middleCols(first, count) += t.grad(self);
    });
}

Var layer_norm(Var a, double eps) {
    Tape& t = *a.tape();
    const Matrix& x = a.value();
    const Eigen::Index n = x.rows();
    const double m = static_cast<double>(x.cols());
    Matrix out(n, x.cols());
    Vector inv_std(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double mu = x.row(i).mean();
        const double var = (x.row(i).array() - mu).square().sum() / m;
        inv_std(i) = 1.0 / std::sqrt(var + eps);
        out.row(i) = (x.row(i).array() - mu) * inv_std(i);
    }
    return t.record(std::move(out), a.requires_grad(),
                    [a, inv_std = std::move(inv_std), m](Tape& t, std::size_t self) {
                        const Matrix& g = t.grad(self);
                        const Matrix& y = t.value(self);
                        Matrix& ga = t.grad_mut(a.id());
                        for (Eigen::Index i = 0; i < g.rows(); ++i) {
                            const double gm = g.row(i).mean();
                            const double gy = g.row(i).dot(y.row(i)) / m;
                            ga.row(i).array() += inv_std(i) * (g.row(i).array() - gm - y.row(i).array() * gy);
                        }
                    });
}

Var softmax_rows(Var a) {
    Tape& t = *a.tape();
    Matrix out = a.value();
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
        out.row(i).array() = (out.row(i).array() - out.row(i).maxCoeff()).exp();
        out.row(i) /= out.row(i).sum();
    }
    return t.record(std::move(out), a.requires_grad(), [a](Tape& t, std::size_t self) {
        const Matrix& g = t.grad(self);
        const Matrix& y = t.value(self);
        Matrix& ga = t.grad_mut(a.id());
        for (Eigen::Index i = 0; i < g.rows(); ++i) {
            const double d = g.row(i).dot(y.row(i));
            ga.row(i).array() += y.row(i).array() * (g.row(i).array() - d);
        }
    });
}

Var normalize_rows(Var a) {
    Tape& t = *a.tape();
    Vector sums = a.value().rowwise().sum();
    Matrix out = a.value().array().colwise() / sums.array();
    return t.record(std::move(out), a.requires_grad(),
                    [a, sums = std::move(sums)](Tape& t, std::size_t self) {
                        const Matrix& g = t.grad(self);
                        const Matrix& y = t.value(self);
                        Matrix& ga = t.grad_mut(a.id());
                        for (Eigen::Index i = 0; i < g.rows(); ++i) {
                            const double d = g.row(i).dot(y.row(i));
                            ga.row(i).array() += (g.row(i).array() - d) / sums(i);
                        }
                    });
}

Var row_mean(Var a) {
    Tape& t = *a.tape();
    Matrix out = a.value().rowwise().mean();
    return t.record(std::move(out), a.requires_grad(), [a](Tape& t, std::size_t self) {
        const Matrix& g = t.grad(self);
        const double inv = 1.0 / static_cast<double>(a.cols());
        t.grad_mut(a.id()).colwise() += g.col(0) * inv;
    });
}

Var sum(Var a) {
    Tape& t = *a.tape();
    Matrix out(1, 1);
    out(0, 0) = a.value().sum();
    return t.record(std::move(out), a.requires_grad(), [a](Tape& t, std::size_t self) {
        t.grad_mut(a.id()).array() += t.grad(self)(0, 0);
    });
}

Var mean(Var a) {
    return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var row_cosine(Var a, Var b) {
    check_same_shape("row_cosine", a, b);
    Tape& t = same_tape(a, b);
    const Eigen::Index n = a.rows();
    Vector na = a.value().rowwise().norm();
    Vector nb = b.value().rowwise().norm();
    Matrix out(n, 1);
    for (Eigen::Index i = 0; i < n; ++i) {
        out(i, 0) = a.value().row(i).dot(b.value().row(i)) / (na(i) * nb(i));
    }
    return t.record(std::move(out), a.requires_grad() || b.requires_grad(),
                    [a, b, na = std::move(na), nb = std::move(nb)](Tape& t, std::size_t self) {
                        const Matrix& g = t.grad(self);
                        const Matrix& c = t.value(self);
                        for (Eigen::Index i = 0; i < g.rows(); ++i) {
                            const double gi = g(i, 0);
                            if (gi == 0.0) continue;
                            const auto ar = a.value().row(i);
                            const auto br = b.value().row(i);
                            if (a.requires_grad()) {
                                t.grad_mut(a.id()).row(i) +=
                                    gi * (br / (na(i) * nb(i)) - c(i, 0) * ar / (na(i) * na(i)));
                            }
                            if (b.requires_grad()) {
                                t.grad_mut(b.id()).row(i) +=
                                    gi * (ar / (na(i) * nb(i)) - c(i, 0) * br / (nb(i) * nb(i)));
                            }
                        }
                    });
}

Var cosine_distance_rows(Var a, Var b) {
    check_same_shape("cosine_distance_rows", a, b);
    Tape& t = same_tape(a, b);
    Vector na = a.value().rowwise().norm();
    Vector nb = b.value().rowwise().norm();
    Matrix ua = na.cwiseInverse().asDiagonal() * a.value();
    Matrix ub = nb.cwiseInverse().asDiagonal() * b.value();
    Matrix out = 0.5 * (ua - ub).rowwise().squaredNorm();
    return t.record(std::move(out), a.requires_grad() || b.requires_grad(),
                    [a, b, na = std::move(na), nb = std::move(nb), ua = std::move(ua),
                     ub = std::move(ub)](Tape& t, std::size_t self) {
                        const Matrix& g = t.grad(self);
                        const Matrix& d = t.value(self);
                        for (Eigen::Index i = 0; i < g.rows(); ++i) {
                            const double gi = g(i, 0);
                            if (gi == 0.0) continue;
                            // d/da (1 - cos) = -(ub - ua + d ua) / |a|, written without 1 - d.
                            if (a.requires_grad()) {
                                t.grad_mut(a.id()).row(i) -=
                                    gi * (ub.row(i) - ua.row(i) + d(i, 0) * ua.row(i)) / na(i);
                            }
                            if (b.requires_grad()) {
                                t.grad_mut(b.id()).row(i) -=
                                    gi * (ua.row(i) - ub.row(i) + d(i, 0) * ub.row(i)) / nb(i);
                            }
                        }
                    });
}

Var attention_probs(Var qkv, Eigen::Index batch, Eigen::Index tokens, Eigen::Index heads) {
    Tape& t = *qkv.tape();
    const Eigen::Index dim = qkv.cols() / 3;
    if (qkv.cols() != 3 * dim || qkv.rows() != batch * tokens || dim % heads != 0) {
        throw ShapeError("attention_probs: qkv layout does not match batch/tokens/heads");
    }
    const Eigen::Index dh = dim / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    const Matrix& x = qkv.value();

    Matrix out(batch * heads * tokens, tokens);
    for (Eigen::Index b = 0; b < batch; ++b) {
        for (Eigen::Index h = 0; h < heads; ++h) {
            auto q = x.block(b * tokens, h * dh, tokens, dh);
            auto k = x.block(b * tokens, dim + h * dh, tokens, dh);
            auto p = out.middleRows((b * heads + h) * tokens, tokens);
            p.noalias() = (q * k.transpose()) * inv_sqrt;
            for (Eigen::Index i = 0; i < tokens; ++i) {
                p.row(i).array() = (p.row(i).array() - p.row(i).maxCoeff()).exp();
                p.row(i) /= p.row(i).sum();
            }
        }
    }
    return t.record(std::move(out), qkv.requires_grad(),
                    [qkv, batch, tokens, heads, dim, dh, inv_sqrt](Tape& t, std::size_t self) {
                        const Matrix& g = t.grad(self);
                        const Matrix& p_all = t.value(self);
                        const Matrix& x = qkv.value();
                        Matrix& gx = t.grad_mut(qkv.id());
                        Matrix ds(tokens, tokens);
                        for (Eigen::Index b = 0; b < batch; ++b) {
                            for (Eigen::Index h = 0; h < heads; ++h) {
                                const Eigen::Index r0 = (b * heads + h) * tokens;
                                auto p = p_all.middleRows(r0, tokens);
                                auto gp = g.middleRows(r0, tokens);
                                for (Eigen::Index i = 0; i < tokens; ++i) {
                                    const double d = gp.row(i).dot(p.row(i));
                                    ds.row(i).array() = p.row(i).array() * (gp.row(i).array() - d);
                                }
                                ds *= inv_sqrt;
                                auto q = x.block(b * tokens, h * dh, tokens, dh);
                                auto k = x.block(b * tokens, dim + h * dh, tokens, dh);
                                gx.block(b * tokens, h * dh, tokens, dh).noalias() += ds * k;
                                gx.block(b * tokens, dim + h * dh, tokens, dh).noalias() += ds.transpose() * q;
                            }
                        }
                    });
}

Var attention_apply(Var probs, Var qkv, Eigen::Index batch, Eigen::Index tokens, Eigen::Index heads) {
    Tape& t = same_tape(probs, qkv);
    const Eigen::Index dim = qkv.cols() / 3;
    if (probs.rows() != batch * heads * tokens || probs.cols() != tokens ||
        qkv.rows() != batch * tokens || dim % heads != 0) {
        throw ShapeError("attention_apply: operand shapes do not match batch/tokens/heads");
    }
    const Eigen::Index dh = dim / heads;
    Matrix out(batch * tokens, dim);
    for (Eigen::Index b = 0; b < batch; ++b) {
        for (Eigen::Index h = 0; h < heads; ++h) {
            auto p = probs.value().middleRows((b * heads + h) * tokens, tokens);
            auto v = qkv.value().block(b * tokens, 2 * dim + h * dh, tokens, dh);
            out.block(b * tokens, h * dh, tokens, dh).noalias() = p * v;
        }
    }
    return t.record(std::move(out), probs.requires_grad() || qkv.requires_grad(),
                    [probs, qkv, batch, tokens, heads, dim, dh](Tape& t, std::size_t self) {
                        const Matrix& g = t.grad(self);
                        for (Eigen::Index b = 0; b < batch; ++b) {
                            for (Eigen::Index h = 0; h < heads; ++h) {
                                const Eigen::Index r0 = (b * heads + h) * tokens;
                                auto go = g.block(b * tokens, h * dh, tokens, dh);
                                auto v = qkv.value().block(b * tokens, 2 * dim + h * dh, tokens, dh);
                                if (probs.requires_grad()) {
                                    t.grad_mut(probs.id()).middleRows(r0, tokens).noalias() += go * v.transpose();
                                }
                                if (qkv.requires_grad()) {
                                    auto p = probs.value().middleRows(r0, tokens);
                                    t.grad_mut(qkv.id()).block(b * tokens, 2 * dim + h * dh, tokens, dh).noalias() +=
                                        p.transpose() * go;
                                }
                            }
                        }
                    });
}

Var bce_with_logits(Var logits, const Matrix& targets) {
    if (targets.rows() != logits.rows() || targets.cols() != logits.cols()) {
        throw ShapeError("bce_with_logits: targets shape differs from logits");
    }
    Tape& t = *logits.tape();
    const Matrix& x = logits.value();
    double total = 0.0;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double xi = x.data()[i];
        const double yi = targets.data()[i];
        total += std::max(xi, 0.0) - xi * yi + std::log1p(std::exp(-std::abs(xi)));
    }
    const double n = static_cast<double>(x.size());
    Matrix out(1, 1);
    out(0, 0) = total / n;
    return t.record(std::move(out), logits.requires_grad(),
                    [logits, targets, n](Tape& t, std::size_t self) {
                        const double g = t.grad(self)(0, 0);
                        Matrix s = logits.value().unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
                        t.grad_mut(logits.id()) += (s - targets) * (g / n);
                    });
}

Var gamma_icdf(Var shape, const Matrix& uniforms) {
    if (uniforms.rows() != shape.rows() || uniforms.cols() != shape.cols()) {
        throw ShapeError("gamma_icdf: uniforms shape differs from shape parameters");
    }
    Tape& t = *shape.tape();
    const Matrix& a = shape.value();
    Matrix out(a.rows(), a.cols());
    for (Eigen::Index i = 0; i < a.size(); ++i) {
        if (!(a.data()[i] > 0.0)) throw DomainError("gamma_icdf: shape must be positive");
        const double u = std::clamp(uniforms.data()[i], 1e-12, 1.0 - 1e-12);
        out.data()[i] = boost::math::gamma_p_inv(a.data()[i], u);
    }
    return t.record(std::move(out), shape.requires_grad(), [shape](Tape& t, std::size_t self) {
        const Matrix& g = t.grad(self);
        const Matrix& x = t.value(self);
        const Matrix& a = shape.value();
        Matrix& ga = t.grad_mut(shape.id());
        for (Eigen::Index i = 0; i < a.size(); ++i) {
            const double xi = x.data()[i];
            const double ai = a.data()[i];
            const double pdf = xi > 0.0 ? boost::math::gamma_p_derivative(ai, xi) : 0.0;
            if (!(pdf > 0.0) || !std::isfinite(pdf)) continue;
            const double h = 1e-5 * std::max(ai, 1e-3);
            const double dcdf = (boost::math::gamma_p(ai + h, xi) - boost::math::gamma_p(ai - h, xi)) / (2.0 * h);
            ga.data()[i] += g.data()[i] * (-dcdf / pdf);
        }
    });
}

}  // namespace ibca
