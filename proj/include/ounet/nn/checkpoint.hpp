#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "ounet/core/hash.hpp"
#include "ounet/nn/unet.hpp"

namespace ounet::nn {

inline constexpr char kCheckpointMagic[] = "OUNETCKPT1\n";
inline constexpr int kCheckpointVersion = 1;

struct CheckpointMeta {
    int epoch = 0;
    std::int64_t step = 0;
    double val_dice = 0.0;
    std::string config_hash;
};

inline std::string model_config_hash(const ModelConfig& cfg) {
    nlohmann::json j = cfg;
    return fingerprint(j.dump());
}

/// Checkpoint = magic, little-endian u64 JSON header length, JSON header
/// (format version, model config, training meta, parameter manifest),
/// then the raw float32 weight blob in registry order. Writes go through
/// a temp file and an atomic rename.
template <typename T>
void save_checkpoint(const UNet<T>& model, const CheckpointMeta& meta,
                     const std::filesystem::path& path) {
    nlohmann::json header;
    header["format_version"] = kCheckpointVersion;
    header["model"] = model.config();
    header["epoch"] = meta.epoch;
    header["step"] = meta.step;
    header["val_dice"] = meta.val_dice;
    header["config_hash"] = meta.config_hash.empty() ? model_config_hash(model.config())
                                                     : meta.config_hash;
    nlohmann::json manifest = nlohmann::json::array();
    for (const auto& p : model.parameters())
        manifest.push_back({{"name", p.name}, {"numel", p.var->value.numel()}});
    header["params"] = manifest;
    const std::string head = header.dump();

    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        require(f.good(), ErrorKind::io, "cannot write checkpoint ", tmp.string());
        f.write(kCheckpointMagic, sizeof(kCheckpointMagic) - 1);
        std::uint64_t len = head.size();
        unsigned char lenb[8];
        for (int i = 0; i < 8; ++i) lenb[i] = static_cast<unsigned char>((len >> (8 * i)) & 0xff);
        f.write(reinterpret_cast<const char*>(lenb), 8);
        f.write(head.data(), static_cast<std::streamsize>(head.size()));
        for (const auto& p : model.parameters()) {
            const auto& v = p.var->value;
            for (std::int64_t i = 0; i < v.numel(); ++i) {
                const float x = static_cast<float>(v[i]);
                f.write(reinterpret_cast<const char*>(&x), sizeof(float));
            }
        }
        require(f.good(), ErrorKind::io, "short write for checkpoint ", tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

template <typename T>
UNet<T> load_checkpoint(const std::filesystem::path& path, CheckpointMeta* meta = nullptr) {
    std::ifstream f(path, std::ios::binary);
    require(f.good(), ErrorKind::io, "cannot open checkpoint ", path.string());
    char magic[sizeof(kCheckpointMagic) - 1];
    f.read(magic, sizeof(magic));
    require(f.good() && std::string(magic, sizeof(magic)) == kCheckpointMagic, ErrorKind::io,
            "not a checkpoint file: ", path.string());
    unsigned char lenb[8];
    f.read(reinterpret_cast<char*>(lenb), 8);
    std::uint64_t len = 0;
    for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(lenb[i]) << (8 * i);
    std::string head(len, '\0');
    f.read(head.data(), static_cast<std::streamsize>(len));
    require(f.good(), ErrorKind::io, "truncated checkpoint header: ", path.string());

    nlohmann::json header = nlohmann::json::parse(head);
    require(header.value("format_version", 0) == kCheckpointVersion, ErrorKind::io,
            "unsupported checkpoint version in ", path.string());
    ModelConfig cfg = header.at("model").get<ModelConfig>();
    UNet<T> model(cfg);
    if (meta) {
        meta->epoch = header.value("epoch", 0);
        meta->step = header.value("step", std::int64_t{0});
        meta->val_dice = header.value("val_dice", 0.0);
        meta->config_hash = header.value("config_hash", "");
    }
    const auto& manifest = header.at("params");
    require(manifest.size() == model.parameters().size(), ErrorKind::io,
            "checkpoint parameter count mismatch in ", path.string());
    std::size_t idx = 0;
    for (auto& p : model.parameters()) {
        const auto& entry = manifest[idx++];
        require(entry.at("name").template get<std::string>() == p.name &&
                    entry.at("numel").template get<std::int64_t>() == p.var->value.numel(),
                ErrorKind::io, "checkpoint layout mismatch at '", p.name, "' in ", path.string());
        auto& v = p.var->value;
        for (std::int64_t i = 0; i < v.numel(); ++i) {
            float x;
            f.read(reinterpret_cast<char*>(&x), sizeof(float));
            v[i] = static_cast<T>(x);
        }
    }
    require(f.good(), ErrorKind::io, "truncated checkpoint blob: ", path.string());
    return model;
}

}  // namespace ounet::nn
