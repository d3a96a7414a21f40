#pragma once

#include <fstream>
#include <optional>

#include <nlohmann/json.hpp>

#include "ounet/io/dataset.hpp"

namespace ounet::pipeline {

struct CropBounds {
    std::array<std::int64_t, 3> lo{0, 0, 0};
    std::array<std::int64_t, 3> hi{0, 0, 0};  // exclusive

    std::int64_t extent(int axis) const {
        return hi[static_cast<std::size_t>(axis)] - lo[static_cast<std::size_t>(axis)];
    }
};

inline void to_json(nlohmann::json& j, const CropBounds& b) { j = {{"lo", b.lo}, {"hi", b.hi}}; }
inline void from_json(const nlohmann::json& j, CropBounds& b) {
    j.at("lo").get_to(b.lo);
    j.at("hi").get_to(b.hi);
}

struct NormalizationStats {
    std::array<double, 4> mean{};
    std::array<double, 4> stddev{};  // population std over the foreground mask
};

inline void to_json(nlohmann::json& j, const NormalizationStats& s) {
    j = {{"mean", s.mean}, {"std", s.stddev}};
}
inline void from_json(const nlohmann::json& j, NormalizationStats& s) {
    j.at("mean").get_to(s.mean);
    j.at("std").get_to(s.stddev);
}

struct PreprocessedExample {
    std::string id;
    Tensor<float> image;  // [5,H',W',D']: 4 normalized modalities + foreground one-hot
    std::optional<Tensor<std::uint8_t>> label;  // [H',W',D']
    CropBounds bounds;
    NormalizationStats stats;
    Shape original_shape;  // pre-crop {H,W,D}
    io::Spacing spacing{1.0, 1.0, 1.0};
    io::Affine affine = io::identity_affine();
};

namespace predetail {

/// Foreground = voxels where any modality is nonzero (one shared mask).
inline Tensor<std::uint8_t> foreground_mask(const Tensor<float>& image4) {
    const std::int64_t C = image4.dim(0);
    const std::int64_t S = image4.numel() / C;
    Tensor<std::uint8_t> mask({image4.dim(1), image4.dim(2), image4.dim(3)});
    const float* d = image4.data();
    for (std::int64_t i = 0; i < S; ++i) {
        std::uint8_t fg = 0;
        for (std::int64_t c = 0; c < C && !fg; ++c) fg = d[c * S + i] != 0.0f;
        mask[i] = fg;
    }
    return mask;
}

}  // namespace predetail

struct CropResult {
    Tensor<float> image;
    std::optional<Tensor<std::uint8_t>> label;
    CropBounds bounds;
};

/// Tightest axis-aligned box containing every voxel that is nonzero in any
/// channel; image and label are cropped with the same bounds.
inline CropResult crop_foreground(const Tensor<float>& image4,
                                  const std::optional<Tensor<std::uint8_t>>& label) {
    require(image4.rank() == 4, ErrorKind::shape, "crop_foreground: expected [C,H,W,D]");
    const std::int64_t H = image4.dim(1), W = image4.dim(2), D = image4.dim(3);
    auto mask = predetail::foreground_mask(image4);

    CropBounds b;
    b.lo = {H, W, D};
    b.hi = {0, 0, 0};
    for (std::int64_t h = 0; h < H; ++h)
        for (std::int64_t w = 0; w < W; ++w)
            for (std::int64_t d = 0; d < D; ++d)
                if (mask.at(h, w, d)) {
                    b.lo[0] = std::min(b.lo[0], h);
                    b.lo[1] = std::min(b.lo[1], w);
                    b.lo[2] = std::min(b.lo[2], d);
                    b.hi[0] = std::max(b.hi[0], h + 1);
                    b.hi[1] = std::max(b.hi[1], w + 1);
                    b.hi[2] = std::max(b.hi[2], d + 1);
                }
    require(b.hi[0] > b.lo[0], ErrorKind::validation,
            "crop_foreground: volume is entirely zero, nothing to segment");

    CropResult out;
    out.bounds = b;
    out.image = Tensor<float>({image4.dim(0), b.extent(0), b.extent(1), b.extent(2)});
    for (std::int64_t c = 0; c < image4.dim(0); ++c)
        for (std::int64_t h = 0; h < b.extent(0); ++h)
            for (std::int64_t w = 0; w < b.extent(1); ++w)
                for (std::int64_t d = 0; d < b.extent(2); ++d)
                    out.image.at(c, h, w, d) =
                        image4.at(c, h + b.lo[0], w + b.lo[1], d + b.lo[2]);
    if (label) {
        require(label->dim(0) == H && label->dim(1) == W && label->dim(2) == D, ErrorKind::shape,
                "crop_foreground: label shape mismatch");
        Tensor<std::uint8_t> lab({b.extent(0), b.extent(1), b.extent(2)});
        for (std::int64_t h = 0; h < b.extent(0); ++h)
            for (std::int64_t w = 0; w < b.extent(1); ++w)
                for (std::int64_t d = 0; d < b.extent(2); ++d)
                    lab.at(h, w, d) = label->at(h + b.lo[0], w + b.lo[1], d + b.lo[2]);
        out.label = std::move(lab);
    }
    return out;
}

/// Per-channel z-score over the shared foreground mask (population std,
/// epsilon-guarded); background voxels stay exactly zero.
inline std::pair<Tensor<float>, NormalizationStats> normalize_channels(const Tensor<float>& image4) {
    require(image4.rank() == 4 && image4.dim(0) == 4, ErrorKind::shape,
            "normalize_channels: expected [4,H,W,D]");
    const std::int64_t S = image4.numel() / 4;
    auto mask = predetail::foreground_mask(image4);
    std::int64_t fg = 0;
    for (std::int64_t i = 0; i < S; ++i) fg += mask[i];
    require(fg > 0, ErrorKind::validation, "normalize_channels: empty foreground");

    NormalizationStats stats;
    Tensor<float> out(image4.shape());
    for (int c = 0; c < 4; ++c) {
        const float* src = image4.data() + c * S;
        double sum = 0.0;
        for (std::int64_t i = 0; i < S; ++i)
            if (mask[i]) sum += src[i];
        const double mean = sum / static_cast<double>(fg);
        double sq = 0.0;
        for (std::int64_t i = 0; i < S; ++i)
            if (mask[i]) sq += (src[i] - mean) * (src[i] - mean);
        const double stddev = std::sqrt(sq / static_cast<double>(fg));
        stats.mean[static_cast<std::size_t>(c)] = mean;
        stats.stddev[static_cast<std::size_t>(c)] = stddev;
        const double denom = std::max(stddev, 1e-8);
        float* dst = out.data() + c * S;
        for (std::int64_t i = 0; i < S; ++i)
            dst[i] = mask[i] ? static_cast<float>((src[i] - mean) / denom) : 0.0f;
    }
    return {std::move(out), stats};
}

/// Appends the binary foreground channel (1 where any modality of the mask
/// source is nonzero) as channel 4.
inline Tensor<float> append_foreground_channel(const Tensor<float>& image4,
                                               const Tensor<float>& mask_source) {
    require(image4.rank() == 4 && mask_source.rank() == 4, ErrorKind::shape,
            "append_foreground_channel: expected [C,H,W,D]");
    require(image4.dim(1) == mask_source.dim(1) && image4.dim(2) == mask_source.dim(2) &&
                image4.dim(3) == mask_source.dim(3),
            ErrorKind::shape, "append_foreground_channel: spatial shapes differ");
    const std::int64_t C = image4.dim(0);
    const std::int64_t S = image4.numel() / C;
    Tensor<float> out({C + 1, image4.dim(1), image4.dim(2), image4.dim(3)});
    std::memcpy(out.data(), image4.data(), sizeof(float) * static_cast<std::size_t>(image4.numel()));
    auto mask = predetail::foreground_mask(mask_source);
    float* fg = out.data() + C * S;
    for (std::int64_t i = 0; i < S; ++i) fg[i] = mask[i] ? 1.0f : 0.0f;
    return out;
}

/// Full preprocessing: crop zero borders, z-score the foreground, append
/// the one-hot foreground channel. Deterministic.
inline PreprocessedExample preprocess_example(const io::MriExample& ex) {
    require(ex.image.rank() == 4 && ex.image.dim(0) == 4, ErrorKind::shape,
            "preprocess_example: expected [4,H,W,D] image");
    PreprocessedExample out;
    out.id = ex.id;
    out.original_shape = {ex.image.dim(1), ex.image.dim(2), ex.image.dim(3)};
    out.spacing = ex.spacing;
    out.affine = ex.affine;

    auto cropped = crop_foreground(ex.image, ex.label);
    out.bounds = cropped.bounds;
    out.label = std::move(cropped.label);

    auto [normalized, stats] = normalize_channels(cropped.image);
    out.stats = stats;
    out.image = append_foreground_channel(normalized, cropped.image);
    return out;
}

/// Places a cropped-frame prediction back into the original frame
/// (background class outside the crop box).
inline Tensor<std::uint8_t> embed_cropped_prediction(const Tensor<std::uint8_t>& pred,
                                                     const CropBounds& bounds,
                                                     const Shape& original_shape) {
    require(pred.rank() == 3, ErrorKind::shape, "embed_cropped_prediction: label rank");
    require(pred.dim(0) == bounds.extent(0) && pred.dim(1) == bounds.extent(1) &&
                pred.dim(2) == bounds.extent(2),
            ErrorKind::shape, "embed_cropped_prediction: prediction does not match crop bounds");
    Tensor<std::uint8_t> out(original_shape, 0);
    for (std::int64_t h = 0; h < pred.dim(0); ++h)
        for (std::int64_t w = 0; w < pred.dim(1); ++w)
            for (std::int64_t d = 0; d < pred.dim(2); ++d)
                out.at(h + bounds.lo[0], w + bounds.lo[1], d + bounds.lo[2]) = pred.at(h, w, d);
    return out;
}

// ------------------------------------------------------------ disk cache

inline constexpr char kCacheMagic[] = "OUNETPRE1\n";

inline std::filesystem::path cache_blob_path(const std::filesystem::path& dir,
                                             const std::string& id) {
    return dir / (id + ".pre");
}
inline std::filesystem::path cache_sidecar_path(const std::filesystem::path& dir,
                                                const std::string& id) {
    return dir / (id + ".pre.json");
}

inline void save_cache(const PreprocessedExample& ex, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json side;
    side["format"] = "ounet-preprocessed-cache";
    side["version"] = 1;
    side["id"] = ex.id;
    side["image_shape"] = ex.image.shape();
    side["has_label"] = ex.label.has_value();
    side["bounds"] = ex.bounds;
    side["stats"] = ex.stats;
    side["original_shape"] = ex.original_shape;
    side["spacing"] = ex.spacing;
    side["affine"] = ex.affine;
    {
        std::ofstream f(cache_sidecar_path(dir, ex.id), std::ios::trunc);
        require(f.good(), ErrorKind::io, "cannot write cache sidecar for ", ex.id);
        f << side.dump(2) << "\n";
    }
    std::ofstream f(cache_blob_path(dir, ex.id), std::ios::binary | std::ios::trunc);
    require(f.good(), ErrorKind::io, "cannot write cache blob for ", ex.id);
    f.write(kCacheMagic, sizeof(kCacheMagic) - 1);
    f.write(reinterpret_cast<const char*>(ex.image.data()),
            static_cast<std::streamsize>(sizeof(float) * ex.image.numel()));
    if (ex.label)
        f.write(reinterpret_cast<const char*>(ex.label->data()),
                static_cast<std::streamsize>(ex.label->numel()));
    require(f.good(), ErrorKind::io, "short cache write for ", ex.id);
}

inline PreprocessedExample load_cache(const std::filesystem::path& dir, const std::string& id) {
    const auto spath = cache_sidecar_path(dir, id);
    std::ifstream sf(spath);
    require(sf.good(), ErrorKind::io, "no cache sidecar: ", spath.string());
    nlohmann::json side = nlohmann::json::parse(sf);
    require(side.value("format", "") == "ounet-preprocessed-cache" && side.value("version", 0) == 1,
            ErrorKind::io, "unrecognized cache format in ", spath.string());

    PreprocessedExample ex;
    ex.id = side.at("id").get<std::string>();
    ex.bounds = side.at("bounds").get<CropBounds>();
    ex.stats = side.at("stats").get<NormalizationStats>();
    ex.original_shape = side.at("original_shape").get<Shape>();
    side.at("spacing").get_to(ex.spacing);
    side.at("affine").get_to(ex.affine);
    const Shape ishape = side.at("image_shape").get<Shape>();

    const auto bpath = cache_blob_path(dir, id);
    std::ifstream f(bpath, std::ios::binary);
    require(f.good(), ErrorKind::io, "no cache blob: ", bpath.string());
    char magic[sizeof(kCacheMagic) - 1];
    f.read(magic, sizeof(magic));
    require(f.good() && std::string(magic, sizeof(magic)) == kCacheMagic, ErrorKind::io,
            "bad cache magic in ", bpath.string());
    ex.image = Tensor<float>(ishape);
    f.read(reinterpret_cast<char*>(ex.image.data()),
           static_cast<std::streamsize>(sizeof(float) * ex.image.numel()));
    if (side.value("has_label", false)) {
        Tensor<std::uint8_t> label({ishape[1], ishape[2], ishape[3]});
        f.read(reinterpret_cast<char*>(label.data()), static_cast<std::streamsize>(label.numel()));
        ex.label = std::move(label);
    }
    require(f.good(), ErrorKind::io, "truncated cache blob: ", bpath.string());
    return ex;
}

}  // namespace ounet::pipeline
