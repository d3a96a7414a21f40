#pragma once

#include <array>
#include <cmath>
#include <cstring>
#include <functional>
#include <vector>

#include <nlohmann/json.hpp>

#include "ounet/core/error.hpp"
#include "ounet/core/tensor.hpp"

namespace ounet::infer {

struct SlidingWindowConfig {
    std::array<std::int64_t, 3> window{128, 128, 128};
    double overlap = 0.5;
    double gaussian_sigma_scale = 0.125;  // sigma = scale * window side, per axis

    void validate() const {
        require(overlap >= 0.0 && overlap < 1.0, ErrorKind::config,
                "sliding window: overlap must be in [0,1)");
        for (auto w : window) require(w >= 1, ErrorKind::config, "sliding window: window dims >= 1");
        require(gaussian_sigma_scale > 0.0, ErrorKind::config, "sliding window: sigma scale > 0");
    }

    std::int64_t stride(int axis) const {
        return std::max<std::int64_t>(
            1, static_cast<std::int64_t>(std::llround(
                   static_cast<double>(window[static_cast<std::size_t>(axis)]) * (1.0 - overlap))));
    }
};

inline void to_json(nlohmann::json& j, const SlidingWindowConfig& c) {
    j = {{"window", c.window}, {"overlap", c.overlap},
         {"gaussian_sigma_scale", c.gaussian_sigma_scale}, {"blend", "gaussian"}};
}
inline void from_json(const nlohmann::json& j, SlidingWindowConfig& c) {
    c = SlidingWindowConfig{};
    if (j.contains("window")) j.at("window").get_to(c.window);
    c.overlap = j.value("overlap", 0.5);
    c.gaussian_sigma_scale = j.value("gaussian_sigma_scale", 0.125);
    c.validate();
}

enum class Frame { original, cropped };

/// Per-voxel sigmoid probabilities for (ET, TC, WT), plus which spatial
/// frame the tensor lives in.
struct RegionProbabilities {
    Tensor<float> probs;  // [3,H,W,D]
    Frame frame = Frame::cropped;
};

/// Window origins along one axis: stride-spaced, with a final origin
/// clamped to dim-window so the last window abuts the edge.
inline std::vector<std::int64_t> axis_origins(std::int64_t dim, std::int64_t window,
                                              std::int64_t stride) {
    require(dim >= window, ErrorKind::shape, "axis_origins: dim ", dim, " < window ", window);
    std::vector<std::int64_t> origins;
    for (std::int64_t o = 0; o + window <= dim; o += stride) origins.push_back(o);
    if (origins.back() + window < dim) origins.push_back(dim - window);
    return origins;
}

inline std::vector<std::array<std::int64_t, 3>> window_grid(const Shape& dims,
                                                            const SlidingWindowConfig& cfg) {
    cfg.validate();
    require(dims.size() == 3, ErrorKind::shape, "window_grid: expected 3 spatial dims");
    std::array<std::vector<std::int64_t>, 3> per_axis;
    for (int a = 0; a < 3; ++a)
        per_axis[static_cast<std::size_t>(a)] = axis_origins(
            dims[static_cast<std::size_t>(a)], cfg.window[static_cast<std::size_t>(a)], cfg.stride(a));
    std::vector<std::array<std::int64_t, 3>> grid;
    for (auto h : per_axis[0])
        for (auto w : per_axis[1])
            for (auto d : per_axis[2]) grid.push_back({h, w, d});
    return grid;
}

/// Separable Gaussian bump centred on the window, sigma = scale * side per
/// axis, normalized so the maximum weight is exactly 1, clipped below at
/// 1e-8 so edge weights never vanish.
inline Tensor<float> gaussian_importance_map(const std::array<std::int64_t, 3>& window,
                                             double sigma_scale) {
    std::array<std::vector<double>, 3> axis;
    for (int a = 0; a < 3; ++a) {
        const std::int64_t n = window[static_cast<std::size_t>(a)];
        const double c = static_cast<double>(n - 1) / 2.0;
        const double sigma = sigma_scale * static_cast<double>(n);
        std::vector<double> v(static_cast<std::size_t>(n));
        double vmax = 0.0;
        for (std::int64_t i = 0; i < n; ++i) {
            const double d = (static_cast<double>(i) - c) / sigma;
            v[static_cast<std::size_t>(i)] = std::exp(-0.5 * d * d);
            vmax = std::max(vmax, v[static_cast<std::size_t>(i)]);
        }
        for (auto& x : v) x /= vmax;
        axis[static_cast<std::size_t>(a)] = std::move(v);
    }
    Tensor<float> map({window[0], window[1], window[2]});
    for (std::int64_t h = 0; h < window[0]; ++h)
        for (std::int64_t w = 0; w < window[1]; ++w)
            for (std::int64_t d = 0; d < window[2]; ++d)
                map.at(h, w, d) = static_cast<float>(std::max(
                    1e-8, axis[0][static_cast<std::size_t>(h)] * axis[1][static_cast<std::size_t>(w)] *
                              axis[2][static_cast<std::size_t>(d)]));
    return map;
}

/// A patch predictor: [C,w0,w1,w2] input -> [3,w0,w1,w2] logits.
using PredictFn = std::function<Tensor<float>(const Tensor<float>&)>;

namespace swdetail {

inline Tensor<float> pad_to_window(const Tensor<float>& x, const std::array<std::int64_t, 3>& window,
                                   std::array<std::int64_t, 3>& pad_lo) {
    const Shape in{x.dim(1), x.dim(2), x.dim(3)};
    Shape padded{std::max(in[0], window[0]), std::max(in[1], window[1]), std::max(in[2], window[2])};
    pad_lo = {(padded[0] - in[0]) / 2, (padded[1] - in[1]) / 2, (padded[2] - in[2]) / 2};
    if (padded == in) return x;
    Tensor<float> out({x.dim(0), padded[0], padded[1], padded[2]}, 0.0f);
    for (std::int64_t c = 0; c < x.dim(0); ++c)
        for (std::int64_t h = 0; h < in[0]; ++h)
            for (std::int64_t w = 0; w < in[1]; ++w)
                for (std::int64_t d = 0; d < in[2]; ++d)
                    out.at(c, h + pad_lo[0], w + pad_lo[1], d + pad_lo[2]) = x.at(c, h, w, d);
    return out;
}

}  // namespace swdetail

/// Tiles the volume with stride-overlapping windows, blends the sigmoid
/// probabilities with the Gaussian importance map, and normalizes by the
/// accumulated weights. Windows are visited in a fixed order and the
/// accumulators are float32 with a separate weight channel, so the result
/// is deterministic.
inline RegionProbabilities sliding_window_predict(const PredictFn& predict, const Tensor<float>& x,
                                                  const SlidingWindowConfig& cfg) {
    cfg.validate();
    require(x.rank() == 4, ErrorKind::shape, "sliding_window_predict: expected [C,H,W,D]");
    std::array<std::int64_t, 3> pad_lo{};
    Tensor<float> xp = swdetail::pad_to_window(x, cfg.window, pad_lo);
    const Shape dims{xp.dim(1), xp.dim(2), xp.dim(3)};
    const auto grid = window_grid(dims, cfg);
    const auto weight = gaussian_importance_map(cfg.window, cfg.gaussian_sigma_scale);

    Tensor<float> acc({3, dims[0], dims[1], dims[2]}, 0.0f);
    Tensor<float> wacc({dims[0], dims[1], dims[2]}, 0.0f);
    const std::int64_t C = xp.dim(0);
    const std::int64_t WS = weight.numel();
    Tensor<float> patch({C, cfg.window[0], cfg.window[1], cfg.window[2]});

    for (const auto& origin : grid) {
        for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t h = 0; h < cfg.window[0]; ++h)
                for (std::int64_t w = 0; w < cfg.window[1]; ++w)
                    std::memcpy(&patch.at(c, h, w, 0),
                                &xp.at(c, h + origin[0], w + origin[1], origin[2]),
                                sizeof(float) * static_cast<std::size_t>(cfg.window[2]));
        Tensor<float> logits = predict(patch);
        require(logits.rank() == 4 && logits.dim(0) == 3 && logits.dim(1) == cfg.window[0] &&
                    logits.dim(2) == cfg.window[1] && logits.dim(3) == cfg.window[2],
                ErrorKind::shape, "sliding_window_predict: predictor returned ",
                shape_str(logits.shape()));
        for (int c = 0; c < 3; ++c)
            for (std::int64_t h = 0; h < cfg.window[0]; ++h)
                for (std::int64_t w = 0; w < cfg.window[1]; ++w)
                    for (std::int64_t d = 0; d < cfg.window[2]; ++d) {
                        const float z = logits.at(c, h, w, d);
                        const float p = 1.0f / (1.0f + std::exp(-z));
                        const float wv = weight.at(h, w, d);
                        acc.at(c, h + origin[0], w + origin[1], d + origin[2]) += wv * p;
                        if (c == 0) wacc.at(h + origin[0], w + origin[1], d + origin[2]) += wv;
                    }
        (void)WS;
    }

    RegionProbabilities out;
    out.probs = Tensor<float>({3, x.dim(1), x.dim(2), x.dim(3)});
    for (int c = 0; c < 3; ++c)
        for (std::int64_t h = 0; h < x.dim(1); ++h)
            for (std::int64_t w = 0; w < x.dim(2); ++w)
                for (std::int64_t d = 0; d < x.dim(3); ++d) {
                    const float wv = wacc.at(h + pad_lo[0], w + pad_lo[1], d + pad_lo[2]);
                    out.probs.at(c, h, w, d) =
                        acc.at(c, h + pad_lo[0], w + pad_lo[1], d + pad_lo[2]) / wv;
                }
    return out;
}

/// Flip a [C,H,W,D] tensor along the spatial axes selected by `axes`.
inline Tensor<float> flip_volume(const Tensor<float>& x, const std::array<bool, 3>& axes) {
    Tensor<float> out(x.shape());
    const std::int64_t C = x.dim(0), H = x.dim(1), W = x.dim(2), D = x.dim(3);
    for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t h = 0; h < H; ++h)
            for (std::int64_t w = 0; w < W; ++w)
                for (std::int64_t d = 0; d < D; ++d)
                    out.at(c, axes[0] ? H - 1 - h : h, axes[1] ? W - 1 - w : w,
                           axes[2] ? D - 1 - d : d) = x.at(c, h, w, d);
    return out;
}

/// The 8 axis-flip subsets of {H,W,D}, identity first.
inline std::vector<std::array<bool, 3>> flip_set() {
    std::vector<std::array<bool, 3>> flips;
    for (int m = 0; m < 8; ++m)
        flips.push_back({(m & 1) != 0, (m & 2) != 0, (m & 4) != 0});
    return flips;
}

/// Test-time augmentation: predict every flipped version of the volume,
/// flip each probability map back, and average the eight maps.
inline RegionProbabilities tta_predict(const PredictFn& predict, const Tensor<float>& x,
                                       const SlidingWindowConfig& cfg) {
    Tensor<float> mean;
    const auto flips = flip_set();
    for (const auto& axes : flips) {
        Tensor<float> xf = flip_volume(x, axes);
        RegionProbabilities part = sliding_window_predict(predict, xf, cfg);
        Tensor<float> unflipped = flip_volume(part.probs, axes);
        if (mean.numel() == 0) {
            mean = std::move(unflipped);
        } else {
            for (std::int64_t i = 0; i < mean.numel(); ++i) mean[i] += unflipped[i];
        }
    }
    for (std::int64_t i = 0; i < mean.numel(); ++i) mean[i] /= static_cast<float>(flips.size());
    RegionProbabilities out;
    out.probs = std::move(mean);
    return out;
}

/// Pointwise arithmetic mean of probability maps (checkpoint ensembling).
inline Tensor<float> average_probability_maps(const std::vector<Tensor<float>>& maps) {
    require(!maps.empty(), ErrorKind::shape, "average_probability_maps: no maps");
    Tensor<float> mean = maps[0];
    for (std::size_t k = 1; k < maps.size(); ++k) {
        require(maps[k].same_shape(mean), ErrorKind::shape,
                "average_probability_maps: shape mismatch");
        for (std::int64_t i = 0; i < mean.numel(); ++i) mean[i] += maps[k][i];
    }
    for (std::int64_t i = 0; i < mean.numel(); ++i) mean[i] /= static_cast<float>(maps.size());
    return mean;
}

}  // namespace ounet::infer
