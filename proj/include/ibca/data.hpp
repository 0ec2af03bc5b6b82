#pragma once

// Manifests, seeded splits, image decoding/preprocessing and the synthetic
// confounded dataset.

#include "ibca/backbone.hpp"
#include "ibca/config.hpp"
#include "ibca/objective.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace ibca {

/// 8-bit interleaved pixels, row-major, 1, 3 or 4 channels.
struct Image {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<std::uint8_t> pixels;

    std::uint8_t at(int x, int y, int c) const {
        return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
};

/// Decodes binary PGM/PPM (P5/P6) or PNG, chosen by file signature.
Image read_image(const std::filesystem::path& path);
/// Writes P5 for one channel, P6 for three.
void write_pnm(const std::filesystem::path& path, const Image& image);

/// Bilinear resize to size x size, scale to [0, 1], per-channel
/// standardization. Grayscale input is replicated to three channels.
ImageTensor preprocess(const Image& image, int image_size, const NormalizationConfig& norm = {});
ImageTensor preprocess_file(const std::filesystem::path& path, int image_size,
                            const NormalizationConfig& norm = {});

struct ManifestRow {
    std::string path;
    std::vector<int> labels;
};

struct Manifest {
    std::vector<std::string> class_names;
    std::vector<ManifestRow> rows;
    /// Directory that relative image paths resolve against.
    std::filesystem::path base_dir;

    std::size_t n_classes() const { return class_names.size(); }
    Manifest subset(const std::vector<std::size_t>& index) const;
};

/// Header `path,<class_0>,...,<class_{C-1}>`; cells 0/1. Errors name the line
/// (1-based) and column.
Manifest parse_manifest(const std::string& text, const std::filesystem::path& base_dir = {});
Manifest load_manifest(const std::filesystem::path& path);
std::string format_manifest(const Manifest& manifest);
void save_manifest(const std::filesystem::path& path, const Manifest& manifest);

struct SplitIndices {
    std::vector<std::size_t> train;
    std::vector<std::size_t> val;
    std::vector<std::size_t> test;
};

/// Seeded shuffle, then sizes floor(r0 n), floor(r1 n) and the remainder.
SplitIndices split_indices(std::size_t n, std::array<double, 3> ratios, std::uint64_t seed);

struct ManifestSplit {
    Manifest train;
    Manifest val;
    Manifest test;
};
ManifestSplit split(const Manifest& manifest, std::array<double, 3> ratios = {0.8, 0.1, 0.1},
                    std::uint64_t seed = 0);

/// Decodes and preprocesses every row.
Dataset load_dataset(const Manifest& manifest, int image_size, const NormalizationConfig& norm = {},
                     const std::string& image_root = {});

// ---------------------------------------------------------------------------
// Synthetic confounded data.

enum class PatternShape { disk, bar, ring, cross };

struct SyntheticSpec {
    int n_classes = 4;
    int image_size = 32;
    int n_samples = 2000;
    double rho_train = 0.9;  ///< P(background copies label 0) in train/val
    double rho_test = 0.0;   ///< same, test split
    double label_rate = 0.4;   ///< marginal P(label = 1) per class
    double cooccurrence = 0.2; ///< P(a label copies the per-image shared draw)
    double noise = 0.1;        ///< per-pixel Gaussian noise stddev, pixel scale [0, 1]
    std::uint64_t seed = 0;
    std::array<double, 3> ratios{0.8, 0.1, 0.1};

    void validate() const;
};

enum class SplitName { train, val, test };
std::string_view to_string(SplitName s);

struct StampLocation {
    int x = 0;
    int y = 0;
};

struct SampleMetadata {
    SplitName split = SplitName::train;
    int background = 0;  ///< 0: horizontal stripes, 1: vertical stripes
    std::vector<std::optional<StampLocation>> stamps;  ///< per class, center when present
};

struct SyntheticDataset {
    SyntheticSpec spec;
    std::vector<std::string> class_names;
    std::vector<Image> images;
    Matrix labels;  ///< n x N_c
    std::vector<SampleMetadata> metadata;
    SplitIndices splits;
};

PatternShape pattern_shape(int class_index);
/// Radius in pixels of a class's pattern.
int pattern_radius(int class_index);
/// Pixel offsets (dx, dy) covered by a class's pattern around its center.
std::vector<std::array<int, 2>> pattern_offsets(int class_index);

/// Throws ConfigError when the image cannot hold the largest pattern.
SyntheticDataset generate_synthetic(const SyntheticSpec& spec);

/// Preprocessed tensors for one split.
Dataset synthetic_split(const SyntheticDataset& data, SplitName which, int image_size,
                        const NormalizationConfig& norm = {});

/// images/NNNNNN.ppm, manifest.csv, train.csv, val.csv, test.csv,
/// metadata.csv and spec.txt under `dir`.
void write_synthetic(const SyntheticDataset& data, const std::filesystem::path& dir);

}  // namespace ibca
