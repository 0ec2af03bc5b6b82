#include "ibca/ceci.hpp"

#include "ibca/errors.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace ibca {

ClassifierParams ClassifierParams::average_pooling(Eigen::Index n_classes, Eigen::Index dim) {
    return ClassifierParams{Matrix::Constant(n_classes, dim, 1.0 / static_cast<double>(dim)),
                            Vector::Zero(n_classes)};
}

HeadClassAttention extract_class_attention(const AttentionStack& attn, Eigen::Index n_classes) {
    const Eigen::Index t = attn.tokens;
    if (t <= n_classes) {
        throw ShapeError("extract_class_attention: token count " + std::to_string(t) +
                         " must exceed class count " + std::to_string(n_classes));
    }
    const Eigen::Index np = t - n_classes;
    const Eigen::Index maps = attn.batch * attn.heads;
    std::vector<Eigen::Index> cls_rows;
    std::vector<Eigen::Index> patch_rows;
    cls_rows.reserve(static_cast<std::size_t>(maps * n_classes));
    patch_rows.reserve(static_cast<std::size_t>(maps * np));
    for (Eigen::Index m = 0; m < maps; ++m) {
        for (Eigen::Index k = 0; k < n_classes; ++k) cls_rows.push_back(m * t + k);
        for (Eigen::Index j = 0; j < np; ++j) patch_rows.push_back(m * t + n_classes + j);
    }
    Var c2p = slice_cols(gather_rows(attn.attn, cls_rows), n_classes, np);
    Var p2p = slice_cols(gather_rows(attn.attn, patch_rows), n_classes, np);
    return HeadClassAttention{batched_matmul(c2p, p2p, maps), attn.batch, attn.heads, n_classes, np};
}

Var class_token_logits(const TokenState& tokens) {
    return reshape(row_mean(tokens.class_tokens), tokens.batch, tokens.n_classes);
}

Var alignment_loss(Var a, Var b) { return mean(cosine_distance_rows(a, b)); }

Var cae_loss(const HeadClassAttention& head_attn, const SpatialAttention& spatial) {
    if (spatial.batch != head_attn.batch || spatial.n_classes != head_attn.n_classes ||
        spatial.n_patches != head_attn.n_patches) {
        throw ShapeError("cae_loss: head attention and spatial attention shapes differ");
    }
    std::vector<Eigen::Index> match;
    match.reserve(static_cast<std::size_t>(head_attn.batch * head_attn.heads * head_attn.n_classes));
    for (Eigen::Index b = 0; b < head_attn.batch; ++b) {
        for (Eigen::Index h = 0; h < head_attn.heads; ++h) {
            for (Eigen::Index k = 0; k < head_attn.n_classes; ++k) match.push_back(b * head_attn.n_classes + k);
        }
    }
    Var target = gather_rows(sigmoid(spatial.weights), match);
    return alignment_loss(sigmoid(head_attn.a), target);
}

Matrix intervention_scores(const HeadClassAttention& head_attn, const Matrix& patch_features,
                           const ClassifierParams& classifier) {
    const Eigen::Index batch = head_attn.batch;
    const Eigen::Index heads = head_attn.heads;
    const Eigen::Index nc = head_attn.n_classes;
    const Eigen::Index np = head_attn.n_patches;
    if (patch_features.rows() != batch * np) throw ShapeError("intervention_scores: patch feature rows mismatch");
    if (classifier.weight.rows() != nc || classifier.weight.cols() != patch_features.cols() ||
        classifier.bias.size() != nc) {
        throw ShapeError("intervention_scores: classifier must be N_c x D with N_c biases");
    }
    const Matrix& a = head_attn.a.value();
    Matrix out = Matrix::Zero(batch, nc);
    std::vector<double> per_head(static_cast<std::size_t>(heads));
    for (Eigen::Index b = 0; b < batch; ++b) {
        auto nf = patch_features.middleRows(b * np, np);
        Matrix scores(heads, nc);
        for (Eigen::Index h = 0; h < heads; ++h) {
            Matrix features = a.middleRows((b * heads + h) * nc, nc) * nf;
            for (Eigen::Index k = 0; k < nc; ++k) {
                const double logit = features.row(k).dot(classifier.weight.row(k)) + classifier.bias(k);
                scores(h, k) = 1.0 / (1.0 + std::exp(-logit));
            }
        }
        // Summing in sorted order makes the average independent of head order.
        for (Eigen::Index k = 0; k < nc; ++k) {
            for (Eigen::Index h = 0; h < heads; ++h) per_head[static_cast<std::size_t>(h)] = scores(h, k);
            std::sort(per_head.begin(), per_head.end());
            double acc = 0.0;
            for (double s : per_head) acc += s;
            out(b, k) = acc / static_cast<double>(heads);
        }
    }
    return out;
}

}  // namespace ibca
