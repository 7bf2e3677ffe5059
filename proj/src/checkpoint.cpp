// SPDX-License-Identifier: Apache-2.0
#include "cpolab/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <fstream>

namespace cpolab {

namespace fs = std::filesystem;

const CheckpointEntry* Checkpoint::find(const std::string& name) const {
    for (const auto& e : entries) {
        if (e.name == name) {
            return &e;
        }
    }
    return nullptr;
}

void write_checkpoint(const fs::path& dir, const Checkpoint& checkpoint) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) {
        throw IoError("cannot create checkpoint directory " + dir.string() + ": " + ec.message());
    }
    nlohmann::ordered_json manifest;
    manifest["format"] = "cpolab-checkpoint";
    manifest["version"] = 1;
    manifest["dtype"] = "float32-le";
    manifest["data_file"] = "tensors.bin";
    manifest["tensors"] = nlohmann::ordered_json::array();

    std::ofstream bin(dir / "tensors.bin", std::ios::binary | std::ios::trunc);
    if (!bin) {
        throw IoError("cannot write " + (dir / "tensors.bin").string());
    }
    std::size_t offset = 0;
    for (const auto& e : checkpoint.entries) {
        if (shape_numel(e.shape) != e.values.size()) {
            throw DimensionError("checkpoint entry '" + e.name + "' shape does not match its values");
        }
        for (float v : e.values) {
            const auto bits = std::bit_cast<std::uint32_t>(v);
            const std::array<char, 4> bytes{static_cast<char>(bits & 0xFF), static_cast<char>((bits >> 8) & 0xFF),
                                            static_cast<char>((bits >> 16) & 0xFF),
                                            static_cast<char>((bits >> 24) & 0xFF)};
            bin.write(bytes.data(), 4);
        }
        manifest["tensors"].push_back({{"name", e.name}, {"shape", e.shape}, {"offset", offset},
                                       {"count", e.values.size()}});
        offset += e.values.size();
    }
    bin.close();
    if (!bin) {
        throw IoError("failed writing " + (dir / "tensors.bin").string());
    }
    manifest["metadata"] = checkpoint.metadata;
    std::ofstream out(dir / "manifest.json", std::ios::trunc);
    out << manifest.dump(2) << "\n";
    if (!out) {
        throw IoError("failed writing " + (dir / "manifest.json").string());
    }
}

Checkpoint read_checkpoint(const fs::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in) {
        throw IoError("cannot read " + (dir / "manifest.json").string());
    }
    nlohmann::ordered_json manifest;
    try {
        manifest = nlohmann::ordered_json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("checkpoint manifest: " + std::string(e.what()));
    }
    if (manifest.value("format", "") != "cpolab-checkpoint" || manifest.value("dtype", "") != "float32-le") {
        throw ParseError("checkpoint manifest: unsupported format");
    }
    std::ifstream bin(dir / manifest.value("data_file", "tensors.bin"), std::ios::binary);
    if (!bin) {
        throw IoError("cannot read checkpoint data in " + dir.string());
    }
    std::vector<char> raw((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());

    Checkpoint checkpoint;
    checkpoint.metadata = manifest.value("metadata", nlohmann::ordered_json::object());
    for (const auto& t : manifest.at("tensors")) {
        CheckpointEntry e;
        e.name = t.at("name").get<std::string>();
        e.shape = t.at("shape").get<Shape>();
        const auto offset = t.at("offset").get<std::size_t>();
        const auto count = t.at("count").get<std::size_t>();
        if (count != shape_numel(e.shape) || (offset + count) * 4 > raw.size()) {
            throw ParseError("checkpoint tensor '" + e.name + "' lies outside the data file");
        }
        e.values.resize(count);
        for (std::size_t i = 0; i < count; ++i) {
            const auto* p = reinterpret_cast<const unsigned char*>(raw.data() + (offset + i) * 4);
            const std::uint32_t bits = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                                       (static_cast<std::uint32_t>(p[2]) << 16) |
                                       (static_cast<std::uint32_t>(p[3]) << 24);
            e.values[i] = std::bit_cast<float>(bits);
        }
        checkpoint.entries.push_back(std::move(e));
    }
    return checkpoint;
}

template <typename T>
void append_params(Checkpoint& checkpoint, const ModelParams<T>& params) {
    checkpoint.metadata["model"] = to_json(params.config());
    for (const auto& g : params.groups()) {
        for (const auto& nt : g.tensors) {
            checkpoint.entries.push_back(
                {nt.name, nt.tensor.shape(), std::vector<float>(nt.tensor.data().begin(), nt.tensor.data().end())});
        }
    }
}

ModelParams<float> params_from_checkpoint(const Checkpoint& checkpoint) {
    if (!checkpoint.metadata.contains("model")) {
        throw ParseError("checkpoint has no model config in its metadata");
    }
    const ModelConfig config = model_config_from_json(checkpoint.metadata.at("model"));
    auto reference = ModelParams<float>::init(config, 0);
    std::vector<NamedTensor<float>> tensors;
    for (const auto& g : reference.groups()) {
        for (const auto& nt : g.tensors) {
            const CheckpointEntry* e = checkpoint.find(nt.name);
            if (e == nullptr) {
                throw ParseError("checkpoint is missing parameter '" + nt.name + "'");
            }
            tensors.push_back({e->name, Tensor<float>(e->shape, e->values, true)});
        }
    }
    return ModelParams<float>::from_tensors(config, std::move(tensors));
}

template void append_params(Checkpoint&, const ModelParams<float>&);
template void append_params(Checkpoint&, const ModelParams<double>&);

} // namespace cpolab
