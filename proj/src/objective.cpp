#include "ibca/objective.hpp"

#include "ibca/errors.hpp"

#include <chrono>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

namespace ibca {

Model init_model(const ModelConfig& cfg, Variant variant, std::uint64_t seed) {
    cfg.validate();
    Model model{cfg, variant, {}};
    Rng root(seed);
    Rng backbone_rng = root.split(0);
    Rng head_rng = root.split(1);
    init_backbone(cfg, model.params, backbone_rng);
    init_patch_norm(cfg, model.params);
    switch (variant) {
        case Variant::basic: init_linear_spatial(cfg, model.params, head_rng); break;
        case Variant::single_vib: init_token_grouping(cfg, model.params, head_rng, false); break;
        case Variant::gmm_vib:
        case Variant::full: init_token_grouping(cfg, model.params, head_rng, true); break;
    }
    return model;
}

Dataset Dataset::subset(std::span<const std::size_t> rows) const {
    Dataset out;
    out.images.reserve(rows.size());
    out.labels.resize(static_cast<Eigen::Index>(rows.size()), labels.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        out.images.push_back(images[rows[i]]);
        out.labels.row(static_cast<Eigen::Index>(i)) = labels.row(static_cast<Eigen::Index>(rows[i]));
    }
    return out;
}

ForwardPass run_model(Tape& tape, const BoundParameters& params, const Model& model,
                      std::span<const ImageTensor> images, AttentionKind kind, double alpha0, Rng& rng,
                      bool with_head_attention) {
    ForwardPass pass;
    pass.backbone = forward(tape, params, images, model.config);
    const TokenState& tokens = pass.backbone.tokens;

    if (model.variant == Variant::basic) {
        pass.spatial = linear_spatial_attention(params, tokens);
    } else {
        pass.mixture = token_grouping(params, tokens);
        Var pi_hat = pass.mixture->pi;
        if (kind == AttentionKind::sampled && model.variant != Variant::single_vib) {
            pi_hat = sample_mixture_weights(pass.mixture->pi, alpha0, rng);
        }
        pass.spatial = sample_attention(*pass.mixture, tokens.patch_tokens, pi_hat, rng, kind);
    }
    pass.patch_features = normalize_patches(params, tokens.patch_tokens);
    pass.features = class_features(pass.patch_features, pass.spatial);
    pass.patch_logits = patch_logits(pass.features);
    pass.token_logits = class_token_logits(tokens);
    if (with_head_attention || model.variant == Variant::full) {
        pass.head_attention = extract_class_attention(pass.backbone.attention, tokens.n_classes);
    }
    return pass;
}

LossComponents compute_losses(const ForwardPass& pass, const Matrix& targets, const TrainConfig& cfg,
                              Variant variant) {
    LossComponents c;
    if (variant == Variant::basic) {
        c.vib_mlsm = mlsm_loss(pass.patch_logits, targets);
        c.vib = c.vib_mlsm;
    } else {
        if (!pass.mixture) throw ConfigError("compute_losses: variant requires mixture parameters");
        VibLoss v = vib_loss(pass.patch_logits, targets, *pass.mixture, cfg.beta, cfg.kl_form);
        c.vib = v.total;
        c.vib_mlsm = v.mlsm;
        c.kl = v.kl;
    }
    c.l_t = mlsm_loss(pass.token_logits, targets);
    if (variant == Variant::full) {
        if (!pass.head_attention) throw ConfigError("compute_losses: full variant requires head attention");
        c.l_s = cae_loss(*pass.head_attention, pass.spatial);
    }
    return c;
}

Var total_loss(const LossComponents& components, const TrainConfig& cfg) {
    auto need = [&](const std::optional<Var>& term, const char* name) -> Var {
        if (!term) {
            throw ConfigError(std::string("total_loss: variant ") + std::string(to_string(cfg.variant)) +
                              " requires component " + name);
        }
        return *term;
    };
    Var total = add(need(components.vib, "L_VIB"), need(components.l_t, "L_t"));
    if (cfg.variant == Variant::full) total = add(total, scale(need(components.l_s, "L_s"), cfg.lambda_s));
    return total;
}

BatchObjective batch_objective(const Model& model, std::span<const ImageTensor> images, const Matrix& targets,
                               const TrainConfig& cfg, Rng rng, bool with_gradients) {
    if (cfg.variant != model.variant) {
        throw ConfigError("batch_objective: train variant " + std::string(to_string(cfg.variant)) +
                          " does not match model variant " + std::string(to_string(model.variant)));
    }
    Tape tape;
    tape.set_recording(with_gradients);
    BoundParameters bound(tape, model.params, with_gradients);
    ForwardPass pass = run_model(tape, bound, model, images, AttentionKind::sampled, cfg.alpha0, rng);
    LossComponents comp = compute_losses(pass, targets, cfg, model.variant);
    Var total = total_loss(comp, cfg);

    BatchObjective out;
    out.report.total_loss = total.scalar();
    out.report.vib_mlsm = comp.vib_mlsm ? comp.vib_mlsm->scalar() : 0.0;
    out.report.kl = comp.kl ? comp.kl->scalar() : 0.0;
    out.report.l_t = comp.l_t ? comp.l_t->scalar() : 0.0;
    out.report.l_s = comp.l_s ? comp.l_s->scalar() : 0.0;
    if (!std::isfinite(out.report.total_loss)) {
        std::ostringstream os;
        os << "non-finite loss: total=" << out.report.total_loss << " vib_mlsm=" << out.report.vib_mlsm
           << " kl=" << out.report.kl << " l_t=" << out.report.l_t << " l_s=" << out.report.l_s;
        throw NumericalError(os.str());
    }
    if (with_gradients) {
        tape.backward(total);
        out.gradients = bound.gradients();
    }
    return out;
}

void AdamOptimizer::step(ParameterMap& params, const ParameterMap& grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (auto& [name, value] : params) {
        auto g = grads.find(name);
        if (g == grads.end()) continue;
        auto [mit, m_new] = m_.try_emplace(name, Matrix::Zero(value.rows(), value.cols()));
        auto [vit, v_new] = v_.try_emplace(name, Matrix::Zero(value.rows(), value.cols()));
        Matrix& m = mit->second;
        Matrix& v = vit->second;
        m = beta1_ * m + (1.0 - beta1_) * g->second;
        v = beta2_ * v + (1.0 - beta2_) * g->second.cwiseProduct(g->second);
        value.array() -= lr_ * (m.array() / c1) / ((v.array() / c2).sqrt() + eps_);
    }
}

TrainResult train(Model& model, const Dataset& train_set, const Dataset* val_set, const TrainConfig& cfg,
                  const EpochCallback& on_epoch) {
    cfg.validate();
    if (cfg.variant != model.variant) {
        throw ConfigError("train: config variant " + std::string(to_string(cfg.variant)) +
                          " does not match model variant " + std::string(to_string(model.variant)));
    }
    if (train_set.labels.cols() != model.config.n_classes) {
        throw ConfigError("train: dataset has " + std::to_string(train_set.labels.cols()) +
                          " classes, model expects " + std::to_string(model.config.n_classes));
    }
    TrainResult result;
    result.best = model.params;
    result.last = model.params;
    if (cfg.epochs == 0 || train_set.size() == 0) return result;

    const std::size_t n = train_set.size();
    const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
    const std::size_t steps_per_epoch = (n + bs - 1) / bs;
    const std::size_t total_steps = steps_per_epoch * static_cast<std::size_t>(cfg.epochs);

    Rng root(cfg.seed);
    AdamOptimizer adam(cfg.learning_rate);
    double best_map = -1.0;
    std::size_t step = 0;
    std::vector<std::size_t> order(n);
    std::vector<ImageTensor> batch_images;
    Matrix batch_labels;

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto started = std::chrono::steady_clock::now();
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng shuffle_rng = root.split(0x5348554646ULL + static_cast<std::uint64_t>(epoch));
        std::shuffle(order.begin(), order.end(), shuffle_rng.engine());

        EpochReport report;
        report.epoch = epoch;
        for (std::size_t start = 0; start < n; start += bs) {
            const std::size_t end = std::min(n, start + bs);
            batch_images.clear();
            batch_labels.resize(static_cast<Eigen::Index>(end - start), train_set.labels.cols());
            for (std::size_t i = start; i < end; ++i) {
                batch_images.push_back(train_set.images[order[i]]);
                batch_labels.row(static_cast<Eigen::Index>(i - start)) =
                    train_set.labels.row(static_cast<Eigen::Index>(order[i]));
            }
            if (cfg.cosine_decay) {
                const double progress = static_cast<double>(step) / static_cast<double>(total_steps);
                adam.set_learning_rate(cfg.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
            }
            BatchObjective obj = batch_objective(model, batch_images, batch_labels, cfg, root.split(step));
            adam.step(model.params, obj.gradients);
            ++step;

            const double w = static_cast<double>(end - start) / static_cast<double>(n);
            report.total_loss += w * obj.report.total_loss;
            report.vib_mlsm += w * obj.report.vib_mlsm;
            report.kl += w * obj.report.kl;
            report.l_t += w * obj.report.l_t;
            report.l_s += w * obj.report.l_s;
        }

        if (val_set != nullptr && val_set->size() > 0) {
            Matrix probs = predict(model, val_set->images);
            report.val = evaluate(probs, val_set->labels, cfg.threshold);
            if (report.val->map > best_map) {
                best_map = report.val->map;
                result.best = model.params;
                result.best_epoch = epoch;
            }
        } else {
            result.best = model.params;
            result.best_epoch = epoch;
        }
        report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
        result.log.push_back(report);
        if (on_epoch) on_epoch(report);
    }
    result.last = model.params;
    return result;
}

double fuse_predictions(double patch_probability, double token_probability) {
    return 0.5 * (patch_probability + token_probability);
}

namespace {

Matrix sigmoid_values(const Matrix& x) {
    return x.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
}

void append_rows(Matrix& dst, const Matrix& src) {
    if (dst.size() == 0) {
        dst = src;
        return;
    }
    Matrix grown(dst.rows() + src.rows(), src.cols());
    grown << dst, src;
    dst.swap(grown);
}

}  // namespace

Inference infer(const Model& model, std::span<const ImageTensor> images, bool with_head_attention, int batch_size) {
    if (batch_size <= 0) throw ConfigError("infer: batch_size must be positive");
    Inference out;
    Rng unused(0);
    const std::size_t bs = static_cast<std::size_t>(batch_size);
    for (std::size_t start = 0; start < images.size(); start += bs) {
        const std::size_t count = std::min(bs, images.size() - start);
        Tape tape;
        tape.set_recording(false);
        BoundParameters bound(tape, model.params, false);
        ForwardPass pass = run_model(tape, bound, model, images.subspan(start, count), AttentionKind::deterministic,
                                     1.0, unused, with_head_attention);
        Matrix pp = sigmoid_values(pass.patch_logits.value());
        Matrix tp = sigmoid_values(pass.token_logits.value());
        append_rows(out.patch_probabilities, pp);
        append_rows(out.token_probabilities, tp);
        append_rows(out.probabilities, ((pp + tp) * 0.5).eval());
        append_rows(out.spatial, pass.spatial.weights.value());
        append_rows(out.features, pass.features.z.value());
        if (with_head_attention) {
            append_rows(out.head_attention, pass.head_attention->a.value());
            append_rows(out.intervention,
                        intervention_scores(*pass.head_attention, pass.patch_features.value(),
                                            ClassifierParams::average_pooling(model.config.n_classes,
                                                                              model.config.embed_dim)));
        }
    }
    return out;
}

Matrix predict(const Model& model, std::span<const ImageTensor> images, int batch_size) {
    return infer(model, images, false, batch_size).probabilities;
}

}  // namespace ibca
