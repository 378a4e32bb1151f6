// SPDX-License-Identifier: Apache-2.0

#include "gistlm/checkpoint.hpp"

#include <cstdint>
#include <fstream>
#include <vector>

#include <json.hpp>

#include "gistlm/errors.hpp"

namespace gistlm {

namespace {

nlohmann::json model_to_json(const ModelConfig& cfg) {
    return nlohmann::json{{"layers", cfg.layers},      {"heads", cfg.heads},
                          {"head_dim", cfg.head_dim},  {"hidden_mult", cfg.hidden_mult},
                          {"vocab", cfg.vocab},        {"rope_theta", cfg.rope_theta},
                          {"seed", cfg.seed}};
}

ModelConfig model_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    cfg.layers = j.at("layers").get<int64_t>();
    cfg.heads = j.at("heads").get<int64_t>();
    cfg.head_dim = j.at("head_dim").get<int64_t>();
    cfg.hidden_mult = j.at("hidden_mult").get<int64_t>();
    cfg.vocab = j.at("vocab").get<int64_t>();
    cfg.rope_theta = j.at("rope_theta").get<double>();
    cfg.seed = j.at("seed").get<uint64_t>();
    return cfg;
}

}  // namespace

template <typename Real>
void save_checkpoint(const std::string& prefix, const Model<Real>& model, TrainPattern pattern,
                     int64_t chunk_len) {
    auto& params = const_cast<Parameters<Real>&>(model.params());
    const std::vector<NamedTensorRef<Real>> refs = named_tensors(params);

    nlohmann::json manifest;
    manifest["format"] = "gistlm-checkpoint-v1";
    manifest["model"] = model_to_json(model.model_config());
    manifest["compression"] = nlohmann::json::parse(model.compression_config().to_json());
    manifest["pattern"] = pattern == TrainPattern::ChunkBaseline ? "chunk" : "unified";
    manifest["chunk_len"] = chunk_len;

    std::ofstream bin(prefix + ".bin", std::ios::binary);
    if (!bin) {
        throw Error("cannot write checkpoint buffer: " + prefix + ".bin");
    }
    nlohmann::json tensors = nlohmann::json::array();
    uint64_t offset = 0;
    std::vector<float> row;
    for (const NamedTensorRef<Real>& ref : refs) {
        tensors.push_back(nlohmann::json{{"name", ref.name},
                                         {"shape", ref.shape},
                                         {"dtype", "f32"},
                                         {"byte_offset", offset}});
        row.resize(ref.data->size());
        for (size_t i = 0; i < row.size(); ++i) {
            row[i] = static_cast<float>((*ref.data)[i]);
        }
        bin.write(reinterpret_cast<const char*>(row.data()),
                  static_cast<std::streamsize>(row.size() * sizeof(float)));
        offset += row.size() * sizeof(float);
    }
    manifest["tensors"] = tensors;

    std::ofstream meta(prefix + ".json");
    if (!meta) {
        throw Error("cannot write checkpoint manifest: " + prefix + ".json");
    }
    meta << manifest.dump(2) << '\n';
}

template <typename Real>
LoadedCheckpoint<Real> load_checkpoint(const std::string& prefix) {
    std::ifstream meta(prefix + ".json");
    if (!meta) {
        throw Error("cannot open checkpoint manifest: " + prefix + ".json");
    }
    nlohmann::json manifest;
    try {
        meta >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed checkpoint manifest: ") + e.what());
    }
    if (manifest.value("format", "") != "gistlm-checkpoint-v1") {
        throw ConfigError("unsupported checkpoint format");
    }

    const ModelConfig model_cfg = model_from_json(manifest.at("model"));
    const CompressionConfig comp_cfg =
        CompressionConfig::from_json(manifest.at("compression").dump());
    const TrainPattern pattern = manifest.value("pattern", "unified") == std::string("chunk")
                                     ? TrainPattern::ChunkBaseline
                                     : TrainPattern::Unified;
    const int64_t chunk_len = manifest.value("chunk_len", int64_t{0});

    LoadedCheckpoint<Real> loaded{Model<Real>(model_cfg, comp_cfg), pattern, chunk_len};
    std::vector<NamedTensorRef<Real>> refs = named_tensors(loaded.model.params());

    std::ifstream bin(prefix + ".bin", std::ios::binary);
    if (!bin) {
        throw Error("cannot open checkpoint buffer: " + prefix + ".bin");
    }

    for (const auto& entry : manifest.at("tensors")) {
        const std::string name = entry.at("name").get<std::string>();
        const std::vector<int64_t> shape = entry.at("shape").get<std::vector<int64_t>>();
        if (entry.at("dtype").get<std::string>() != "f32") {
            throw ConfigError("unsupported tensor dtype in checkpoint: " + name);
        }
        const uint64_t offset = entry.at("byte_offset").get<uint64_t>();

        NamedTensorRef<Real>* ref = nullptr;
        for (NamedTensorRef<Real>& r : refs) {
            if (r.name == name) {
                ref = &r;
                break;
            }
        }
        if (ref == nullptr) {
            throw ShapeMismatch("checkpoint tensor '" + name + "' has no parameter counterpart");
        }
        if (ref->shape != shape) {
            throw ShapeMismatch("checkpoint tensor '" + name +
                                "' shape disagrees with the model config");
        }
        int64_t elems = 1;
        for (const int64_t s : shape) {
            elems *= s;
        }
        if (elems != static_cast<int64_t>(ref->data->size())) {
            throw ShapeMismatch("checkpoint tensor '" + name + "' element count mismatch");
        }
        std::vector<float> buf(elems);
        bin.seekg(static_cast<std::streamoff>(offset));
        bin.read(reinterpret_cast<char*>(buf.data()),
                 static_cast<std::streamsize>(buf.size() * sizeof(float)));
        if (!bin) {
            throw Error("checkpoint buffer truncated while reading '" + name + "'");
        }
        for (int64_t i = 0; i < elems; ++i) {
            (*ref->data)[i] = static_cast<Real>(buf[i]);
        }
    }
    return loaded;
}

template void save_checkpoint(const std::string&, const Model<float>&, TrainPattern, int64_t);
template void save_checkpoint(const std::string&, const Model<double>&, TrainPattern, int64_t);
template LoadedCheckpoint<float> load_checkpoint(const std::string&);
template LoadedCheckpoint<double> load_checkpoint(const std::string&);

}  // namespace gistlm
