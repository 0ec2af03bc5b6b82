#pragma once

// Model assembly, loss composition, Adam training loop and two-path inference.

#include "ibca/backbone.hpp"
#include "ibca/ceci.hpp"
#include "ibca/config.hpp"
#include "ibca/gm_vib.hpp"
#include "ibca/metrics.hpp"
#include "ibca/parameters.hpp"

#include <functional>
#include <optional>
#include <span>
#include <vector>

namespace ibca {

struct Model {
    ModelConfig config;
    Variant variant = Variant::full;
    ParameterMap params;
};

/// Backbone plus the patch-path head the variant needs. Initialization
/// depends only on (config, variant, seed).
Model init_model(const ModelConfig& cfg, Variant variant, std::uint64_t seed);

struct Dataset {
    std::vector<ImageTensor> images;
    Matrix labels;  ///< n x N_c, entries 0/1

    std::size_t size() const { return images.size(); }
    Dataset subset(std::span<const std::size_t> rows) const;
};

struct ForwardPass {
    BackboneOutput backbone;
    std::optional<GaussianMixtureParams> mixture;
    SpatialAttention spatial;
    Var patch_features;  ///< normalized patch tokens, (batch * N_p^2) x D
    PatchClassFeatures features;
    Var patch_logits;
    Var token_logits;
    std::optional<HeadClassAttention> head_attention;
};

/// One forward pass. `kind` picks sampled (training) or deterministic
/// (inference) spatial attention; head attention is extracted when requested
/// or when the variant trains with the alignment loss.
ForwardPass run_model(Tape& tape, const BoundParameters& params, const Model& model,
                      std::span<const ImageTensor> images, AttentionKind kind, double alpha0, Rng& rng,
                      bool with_head_attention = false);

/// Loss terms; absent terms are not part of the variant.
struct LossComponents {
    std::optional<Var> vib;       ///< patch path: mlsm + beta * kl (mlsm alone for basic)
    std::optional<Var> vib_mlsm;
    std::optional<Var> kl;
    std::optional<Var> l_t;       ///< class-token path
    std::optional<Var> l_s;       ///< attention alignment
};

LossComponents compute_losses(const ForwardPass& pass, const Matrix& targets, const TrainConfig& cfg,
                              Variant variant);

/// full: vib + l_t + lambda_s * l_s; every other variant: vib + l_t.
/// Throws ConfigError when a required term is missing.
Var total_loss(const LossComponents& components, const TrainConfig& cfg);

struct StepReport {
    std::size_t step = 0;
    double total_loss = 0.0;
    double vib_mlsm = 0.0;
    double kl = 0.0;
    double l_t = 0.0;
    double l_s = 0.0;
};

struct EpochReport {
    int epoch = 0;  ///< 1-based
    double total_loss = 0.0;
    double vib_mlsm = 0.0;
    double kl = 0.0;
    double l_t = 0.0;
    double l_s = 0.0;
    std::optional<MetricsReport> val;
    double seconds = 0.0;
};

struct TrainResult {
    ParameterMap best;
    ParameterMap last;
    int best_epoch = 0;
    std::vector<EpochReport> log;
};

/// Scalar loss and parameter gradients for one batch; the noise stream is
/// fully determined by `rng`. Used by the training loop and gradient checks.
struct BatchObjective {
    StepReport report;
    ParameterMap gradients;
};
BatchObjective batch_objective(const Model& model, std::span<const ImageTensor> images, const Matrix& targets,
                               const TrainConfig& cfg, Rng rng, bool with_gradients = true);

class AdamOptimizer {
public:
    explicit AdamOptimizer(double learning_rate, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(ParameterMap& params, const ParameterMap& grads);
    void set_learning_rate(double lr) { lr_ = lr; }
    long steps() const { return t_; }

private:
    double lr_, beta1_, beta2_, eps_;
    long t_ = 0;
    ParameterMap m_, v_;
};

using EpochCallback = std::function<void(const EpochReport&)>;

/// Adam on total_loss with seeded shuffling; keeps the parameters with the
/// best validation mAP. Throws NumericalError on a non-finite loss.
TrainResult train(Model& model, const Dataset& train_set, const Dataset* val_set, const TrainConfig& cfg,
                  const EpochCallback& on_epoch = {});

/// ½ (patch probability + class-token probability).
double fuse_predictions(double patch_probability, double token_probability);

struct Inference {
    Matrix probabilities;        ///< n x N_c fused
    Matrix patch_probabilities;  ///< n x N_c
    Matrix token_probabilities;  ///< n x N_c
    Matrix spatial;              ///< (n * N_c) x N_p^2, deterministic attention
    Matrix features;             ///< (n * N_c) x D, Z_p
    Matrix head_attention;       ///< (n * H * N_c) x N_p^2, when requested
    Matrix intervention;         ///< n x N_c, when requested
};

/// Deterministic inference in chunks of `batch_size`.
Inference infer(const Model& model, std::span<const ImageTensor> images, bool with_head_attention = false,
                int batch_size = 64);

/// Fused probabilities only.
Matrix predict(const Model& model, std::span<const ImageTensor> images, int batch_size = 64);

}  // namespace ibca
