#pragma once

#include "ibca/autograd.hpp"
#include "ibca/config.hpp"
#include "ibca/parameters.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace ibca::testing {

inline double relative_error(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-12});
}

/// Batch 2-compatible model with N_c=3, N_p^2=4, D=8, H=2.
inline ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.image_size = 4;
    cfg.patch_size = 2;
    cfg.channels = 3;
    cfg.n_classes = 3;
    cfg.embed_dim = 8;
    cfg.n_heads = 2;
    cfg.n_blocks = 2;
    cfg.mlp_ratio = 2;
    return cfg;
}

/// Adds N(0, scale^2) noise to every entry so gradient checks see
/// activations away from the initialization's near-zero regime.
inline void perturb(ParameterMap& params, std::uint64_t seed, double scale = 0.3) {
    std::mt19937_64 engine(seed);
    std::normal_distribution<double> normal(0.0, scale);
    for (auto& [name, value] : params) {
        for (Eigen::Index i = 0; i < value.size(); ++i) value.data()[i] += normal(engine);
    }
}

struct GradientMismatch {
    std::string name;
    Eigen::Index index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
};

struct GradientCheck {
    std::size_t checked = 0;
    std::size_t skipped = 0;
    std::vector<GradientMismatch> failures;
    double worst = 0.0;
};

/// Central differences of `loss` against `analytic` for every parameter entry
/// whose analytic or numeric gradient exceeds `floor` in magnitude.
inline GradientCheck check_gradients(ParameterMap params, const ParameterMap& analytic,
                                     const std::function<double(const ParameterMap&)>& loss,
                                     double step = 1e-5, double tolerance = 1e-4, double floor = 1e-8) {
    GradientCheck result;
    for (auto& [name, value] : params) {
        const Matrix& g = analytic.at(name);
        for (Eigen::Index i = 0; i < value.size(); ++i) {
            const double saved = value.data()[i];
            value.data()[i] = saved + step;
            const double up = loss(params);
            value.data()[i] = saved - step;
            const double down = loss(params);
            value.data()[i] = saved;
            const double numeric = (up - down) / (2.0 * step);
            const double a = g.data()[i];
            if (std::abs(a) <= floor && std::abs(numeric) <= floor) {
                ++result.skipped;
                continue;
            }
            ++result.checked;
            const double err = relative_error(a, numeric);
            result.worst = std::max(result.worst, err);
            if (err > tolerance) result.failures.push_back({name, i, a, numeric});
        }
    }
    return result;
}

}  // namespace ibca::testing
