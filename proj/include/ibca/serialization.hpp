#pragma once

// On-disk formats.
//
// Checkpoint: a text header followed by a binary payload.
//
//     IBCA-CHECKPOINT 1
//     config <key> <value>          (one line per RunConfig field)
//     tensor <name> <rows> <cols>   (one line per parameter, sorted by name)
//     end
//     <payload>
//
// The payload is every tensor in header order, row-major, IEEE-754 float64
// little-endian.
//
// Raw tensor: one header line then the row-major float64 little-endian payload.
//
//     IBCA-TENSOR dtype=float64 shape=<d0>x<d1>x...\n

#include "ibca/config.hpp"
#include "ibca/objective.hpp"

#include <filesystem>
#include <vector>

namespace ibca {

struct Checkpoint {
    RunConfig config;
    Model model;
};

void save_checkpoint(const std::filesystem::path& path, const RunConfig& config, const Model& model);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Name -> shape lines of a checkpoint, for documentation and alternates.
std::string checkpoint_manifest(const Model& model);

struct RawTensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;
};

void write_raw_tensor(const std::filesystem::path& path, const RawTensor& tensor);
RawTensor read_raw_tensor(const std::filesystem::path& path);

}  // namespace ibca
