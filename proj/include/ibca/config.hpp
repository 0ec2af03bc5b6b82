#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>

namespace ibca {

struct ModelConfig {
    int image_size = 32;
    int patch_size = 8;
    int channels = 3;
    int n_classes = 4;
    int embed_dim = 64;
    int n_heads = 4;
    int n_blocks = 4;
    int mlp_ratio = 2;
    std::uint64_t seed = 0;

    int grid() const { return image_size / patch_size; }
    int n_patches() const { return grid() * grid(); }
    int n_tokens() const { return n_classes + n_patches(); }
    int patch_dim() const { return channels * patch_size * patch_size; }

    /// Throws ConfigError naming the offending field.
    void validate() const;
};

enum class Variant { basic, single_vib, gmm_vib, full };

std::string_view to_string(Variant v);
/// Accepts the snake_case names; throws ConfigError listing the valid set.
Variant parse_variant(std::string_view name);
/// Row label used in ablation tables.
std::string_view display_name(Variant v);

/// Which closed form the KL term uses. `unit_log` keeps coefficient 1 on log σ;
/// `textbook` is the exact Gaussian KL with coefficient 2.
enum class KlForm { unit_log, textbook };

struct TrainConfig {
    Variant variant = Variant::full;
    double beta = 0.001;
    double lambda_s = 0.01;
    double learning_rate = 1e-4;
    int batch_size = 64;
    int epochs = 200;
    double alpha0 = 10.0;
    std::uint64_t seed = 0;
    double threshold = 0.5;
    KlForm kl_form = KlForm::unit_log;
    bool cosine_decay = false;

    void validate() const;
};

/// Per-channel standardization applied after scaling pixels to [0, 1].
struct NormalizationConfig {
    double mean[3] = {0.5, 0.5, 0.5};
    double stddev[3] = {0.25, 0.25, 0.25};
};

struct DataConfig {
    std::string train_manifest;
    std::string val_manifest;
    std::string test_manifest;
    std::string image_root;
};

struct RunConfig {
    std::string preset = "desk";
    ModelConfig model;
    TrainConfig train;
    NormalizationConfig norm;
    DataConfig data;
    std::string output_dir = "runs";

    void validate() const;
};

/// Hyperparameters matching the published full-scale setup.
RunConfig paper_preset();
/// CPU-sized defaults: 32x32 inputs, 4 blocks of width 64, 30 epochs.
RunConfig desk_preset();
RunConfig preset(std::string_view name);

/// Applies one `key=value` setting. Keys may be qualified (`train.variant`)
/// or bare when unambiguous (`variant`).
void apply_setting(RunConfig& cfg, std::string_view key, std::string_view value);

/// INI-style file: [run], [model], [train], [norm], [data] sections. A
/// `preset` key in [run] selects the base before other keys apply.
RunConfig load_run_config(const std::string& path);
RunConfig parse_run_config(const std::string& text);
/// Canonical INI text; parse_run_config(to_ini(c)) reproduces c.
std::string to_ini(const RunConfig& cfg);

/// Flattened key -> value view, used for checkpoints and snapshots.
std::map<std::string, std::string> to_key_values(const RunConfig& cfg);

}  // namespace ibca
