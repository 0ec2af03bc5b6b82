#include "ibca/backbone.hpp"

#include "ibca/errors.hpp"

#include <string>
#include <vector>

namespace ibca {

namespace {

constexpr double kInitStd = 0.02;

std::string block_key(int i, const char* leaf) { return "blocks." + std::to_string(i) + "." + leaf; }

Var linear(Var x, Var weight, Var bias) { return add_row(matmul(x, weight), bias); }

Var affine_norm(Var x, Var gamma, Var beta) { return add_row(mul_row(layer_norm(x), gamma), beta); }

void check_finite(Var v, const std::string& where) {
    if (!v.value().allFinite()) throw NumericalError("non-finite activation in " + where);
}

}  // namespace

void init_backbone(const ModelConfig& cfg, ParameterMap& params, Rng& rng) {
    cfg.validate();
    const Eigen::Index d = cfg.embed_dim;
    const Eigen::Index hidden = static_cast<Eigen::Index>(cfg.mlp_ratio) * d;

    params["patch_embed.weight"] = rng.normal_matrix(cfg.patch_dim(), d, kInitStd);
    params["patch_embed.bias"] = Matrix::Zero(1, d);
    params["pos_embed"] = rng.normal_matrix(cfg.n_patches(), d, kInitStd);
    params["class_tokens"] = rng.normal_matrix(cfg.n_classes, d, kInitStd);
    for (int i = 0; i < cfg.n_blocks; ++i) {
        params[block_key(i, "ln1.gamma")] = Matrix::Ones(1, d);
        params[block_key(i, "ln1.beta")] = Matrix::Zero(1, d);
        params[block_key(i, "attn.qkv.weight")] = rng.normal_matrix(d, 3 * d, kInitStd);
        params[block_key(i, "attn.qkv.bias")] = Matrix::Zero(1, 3 * d);
        params[block_key(i, "attn.proj.weight")] = rng.normal_matrix(d, d, kInitStd);
        params[block_key(i, "attn.proj.bias")] = Matrix::Zero(1, d);
        params[block_key(i, "ln2.gamma")] = Matrix::Ones(1, d);
        params[block_key(i, "ln2.beta")] = Matrix::Zero(1, d);
        params[block_key(i, "mlp.fc1.weight")] = rng.normal_matrix(d, hidden, kInitStd);
        params[block_key(i, "mlp.fc1.bias")] = Matrix::Zero(1, hidden);
        params[block_key(i, "mlp.fc2.weight")] = rng.normal_matrix(hidden, d, kInitStd);
        params[block_key(i, "mlp.fc2.bias")] = Matrix::Zero(1, d);
    }
    params["final_norm.gamma"] = Matrix::Ones(1, d);
    params["final_norm.beta"] = Matrix::Zero(1, d);
}

Matrix patchify(std::span<const ImageTensor> images, const ModelConfig& cfg) {
    const int s = cfg.image_size;
    const int p = cfg.patch_size;
    const int grid = cfg.grid();
    const Eigen::Index np = cfg.n_patches();
    Matrix out(static_cast<Eigen::Index>(images.size()) * np, cfg.patch_dim());
    for (std::size_t b = 0; b < images.size(); ++b) {
        const ImageTensor& img = images[b];
        if (img.rows() != cfg.channels || img.cols() != static_cast<Eigen::Index>(s) * s) {
            throw ConfigError("image " + std::to_string(b) + " is " + std::to_string(img.rows()) + "x" +
                              std::to_string(img.cols()) + ", expected " + std::to_string(cfg.channels) +
                              "x" + std::to_string(s * s) + " for image_size " + std::to_string(s));
        }
        for (int gy = 0; gy < grid; ++gy) {
            for (int gx = 0; gx < grid; ++gx) {
                const Eigen::Index row = static_cast<Eigen::Index>(b) * np + gy * grid + gx;
                Eigen::Index col = 0;
                for (int c = 0; c < cfg.channels; ++c) {
                    for (int dy = 0; dy < p; ++dy) {
                        for (int dx = 0; dx < p; ++dx) {
                            out(row, col++) = img(c, (gy * p + dy) * s + gx * p + dx);
                        }
                    }
                }
            }
        }
    }
    return out;
}

Var embed_patches(Tape& tape, const BoundParameters& params, std::span<const ImageTensor> images,
                  const ModelConfig& cfg) {
    Var patches = tape.constant(patchify(images, cfg));
    Var proj = linear(patches, params["patch_embed.weight"], params["patch_embed.bias"]);
    return add(proj, tile_rows(params["pos_embed"], static_cast<Eigen::Index>(images.size())));
}

BackboneOutput forward(Tape& tape, const BoundParameters& params, std::span<const ImageTensor> images,
                       const ModelConfig& cfg) {
    cfg.validate();
    const Eigen::Index batch = static_cast<Eigen::Index>(images.size());
    if (batch == 0) throw ConfigError("forward: empty image batch");
    const Eigen::Index nc = cfg.n_classes;
    const Eigen::Index np = cfg.n_patches();
    const Eigen::Index t = cfg.n_tokens();
    const Eigen::Index heads = cfg.n_heads;

    Var patches = embed_patches(tape, params, images, cfg);

    // Rows [0, nc) of `stacked` hold the shared class tokens, followed by all
    // patch rows; the gather interleaves them per image.
    std::vector<Eigen::Index> order;
    order.reserve(static_cast<std::size_t>(batch * t));
    for (Eigen::Index b = 0; b < batch; ++b) {
        for (Eigen::Index k = 0; k < nc; ++k) order.push_back(k);
        for (Eigen::Index i = 0; i < np; ++i) order.push_back(nc + b * np + i);
    }
    const Var parts[] = {params["class_tokens"], patches};
    Var x = gather_rows(vcat(parts), order);

    Var last_attn;
    for (int i = 0; i < cfg.n_blocks; ++i) {
        Var h = affine_norm(x, params[block_key(i, "ln1.gamma")], params[block_key(i, "ln1.beta")]);
        Var qkv = linear(h, params[block_key(i, "attn.qkv.weight")], params[block_key(i, "attn.qkv.bias")]);
        Var probs = attention_probs(qkv, batch, t, heads);
        Var ctx = attention_apply(probs, qkv, batch, t, heads);
        x = add(x, linear(ctx, params[block_key(i, "attn.proj.weight")], params[block_key(i, "attn.proj.bias")]));

        h = affine_norm(x, params[block_key(i, "ln2.gamma")], params[block_key(i, "ln2.beta")]);
        h = gelu(linear(h, params[block_key(i, "mlp.fc1.weight")], params[block_key(i, "mlp.fc1.bias")]));
        x = add(x, linear(h, params[block_key(i, "mlp.fc2.weight")], params[block_key(i, "mlp.fc2.bias")]));
        check_finite(x, "block " + std::to_string(i));
        last_attn = probs;
    }
    x = affine_norm(x, params["final_norm.gamma"], params["final_norm.beta"]);
    check_finite(x, "final norm");

    std::vector<Eigen::Index> cls_rows;
    std::vector<Eigen::Index> patch_rows;
    cls_rows.reserve(static_cast<std::size_t>(batch * nc));
    patch_rows.reserve(static_cast<std::size_t>(batch * np));
    for (Eigen::Index b = 0; b < batch; ++b) {
        for (Eigen::Index k = 0; k < nc; ++k) cls_rows.push_back(b * t + k);
        for (Eigen::Index j = 0; j < np; ++j) patch_rows.push_back(b * t + nc + j);
    }

    BackboneOutput out;
    out.tokens = TokenState{gather_rows(x, cls_rows), gather_rows(x, patch_rows), batch, nc, np};
    out.attention = AttentionStack{last_attn, batch, heads, t};
    return out;
}

}  // namespace ibca
