// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint directory layout:
//
//   <dir>/manifest.json  {"format": "cpolab-checkpoint", "version": 1,
//                         "dtype": "float32-le", "data_file": "tensors.bin",
//                         "tensors": [{"name", "shape", "offset", "count"}, ...],
//                         "metadata": {...}}
//   <dir>/tensors.bin    every tensor's values back to back as little-endian
//                        IEEE-754 binary32; "offset" and "count" are in elements.
//
// Tensors appear in the manifest in the order they were written.
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "cpolab/model.hpp"
#include "cpolab/tensor.hpp"
#include "json.hpp"

namespace cpolab {

struct CheckpointEntry {
    std::string name;
    Shape shape;
    std::vector<float> values;
};

struct Checkpoint {
    nlohmann::ordered_json metadata = nlohmann::ordered_json::object();
    std::vector<CheckpointEntry> entries;

    const CheckpointEntry* find(const std::string& name) const;
};

void write_checkpoint(const std::filesystem::path& dir, const Checkpoint& checkpoint);
Checkpoint read_checkpoint(const std::filesystem::path& dir);

// Parameter entries are named after the tensors; the model config is stored
// under metadata["model"].
template <typename T>
void append_params(Checkpoint& checkpoint, const ModelParams<T>& params);
ModelParams<float> params_from_checkpoint(const Checkpoint& checkpoint);

} // namespace cpolab
