#pragma once

#include <array>
#include <cmath>
#include <cstring>
#include <optional>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ounet/core/error.hpp"
#include "ounet/core/rng.hpp"
#include "ounet/core/tensor.hpp"

namespace ounet::pipeline {

struct AugmentConfig {
    std::array<std::int64_t, 3> patch_size{128, 128, 128};
    double foreground_bias_prob = 0.4;
    double zoom_prob = 0.15;
    std::array<double, 2> zoom_range{1.0, 1.4};
    double flip_prob = 0.5;
    double noise_prob = 0.15;
    std::array<double, 2> noise_std_range{0.0, 0.33};
    double blur_prob = 0.15;
    std::array<double, 2> blur_sigma_range{0.5, 1.5};
    double brightness_prob = 0.15;
    std::array<double, 2> brightness_range{0.7, 1.3};
    double contrast_prob = 0.15;
    std::array<double, 2> contrast_range{0.65, 1.5};

    void validate() const {
        auto prob_ok = [](double p) { return p >= 0.0 && p <= 1.0; };
        require(prob_ok(foreground_bias_prob) && prob_ok(zoom_prob) && prob_ok(flip_prob) &&
                    prob_ok(noise_prob) && prob_ok(blur_prob) && prob_ok(brightness_prob) &&
                    prob_ok(contrast_prob),
                ErrorKind::config, "augment: probabilities must be in [0,1]");
        for (auto r : {zoom_range, noise_std_range, blur_sigma_range, brightness_range,
                       contrast_range})
            require(r[0] <= r[1], ErrorKind::config, "augment: range lo must be <= hi");
        for (auto d : patch_size) require(d >= 1, ErrorKind::config, "augment: patch dims >= 1");
    }
};

inline void to_json(nlohmann::json& j, const AugmentConfig& c) {
    j = {{"patch_size", c.patch_size},
         {"foreground_bias_prob", c.foreground_bias_prob},
         {"zoom_prob", c.zoom_prob},
         {"zoom_range", c.zoom_range},
         {"flip_prob", c.flip_prob},
         {"noise_prob", c.noise_prob},
         {"noise_std_range", c.noise_std_range},
         {"blur_prob", c.blur_prob},
         {"blur_sigma_range", c.blur_sigma_range},
         {"brightness_prob", c.brightness_prob},
         {"brightness_range", c.brightness_range},
         {"contrast_prob", c.contrast_prob},
         {"contrast_range", c.contrast_range}};
}

inline void from_json(const nlohmann::json& j, AugmentConfig& c) {
    c = AugmentConfig{};
    if (j.contains("patch_size")) j.at("patch_size").get_to(c.patch_size);
    c.foreground_bias_prob = j.value("foreground_bias_prob", c.foreground_bias_prob);
    c.zoom_prob = j.value("zoom_prob", c.zoom_prob);
    if (j.contains("zoom_range")) j.at("zoom_range").get_to(c.zoom_range);
    c.flip_prob = j.value("flip_prob", c.flip_prob);
    c.noise_prob = j.value("noise_prob", c.noise_prob);
    if (j.contains("noise_std_range")) j.at("noise_std_range").get_to(c.noise_std_range);
    c.blur_prob = j.value("blur_prob", c.blur_prob);
    if (j.contains("blur_sigma_range")) j.at("blur_sigma_range").get_to(c.blur_sigma_range);
    c.brightness_prob = j.value("brightness_prob", c.brightness_prob);
    if (j.contains("brightness_range")) j.at("brightness_range").get_to(c.brightness_range);
    c.contrast_prob = j.value("contrast_prob", c.contrast_prob);
    if (j.contains("contrast_range")) j.at("contrast_range").get_to(c.contrast_range);
    c.validate();
}

/// What a pipeline invocation actually did; used for statistics tests and
/// reproducibility diagnostics.
struct AugmentTrace {
    bool bias_draw = false;
    bool bias_fallback_uniform = false;
    bool zoom = false, noise = false, blur = false, brightness = false, contrast = false;
    std::array<bool, 3> flips{false, false, false};
    double zoom_scale = 1.0, noise_std = 0.0, blur_sigma = 0.0;
    double brightness_factor = 1.0, contrast_factor = 1.0;
};

namespace augdetail {

inline std::int64_t reflect_index(std::int64_t i, std::int64_t n) {
    // symmetric reflection, edge duplicated: -1 -> 0, -2 -> 1, n -> n-1
    while (i < 0 || i >= n) {
        if (i < 0) i = -i - 1;
        if (i >= n) i = 2 * n - 1 - i;
    }
    return i;
}

inline double cubic_weight(double t) {  // Keys kernel, a = -0.5
    t = std::abs(t);
    if (t <= 1.0) return 1.5 * t * t * t - 2.5 * t * t + 1.0;
    if (t < 2.0) return -0.5 * t * t * t + 2.5 * t * t - 4.0 * t + 2.0;
    return 0.0;
}

struct ResizeTaps {
    std::array<std::int64_t, 4> idx{};
    std::array<double, 4> w{};
};

inline std::vector<ResizeTaps> cubic_taps(std::int64_t in, std::int64_t out) {
    std::vector<ResizeTaps> taps(static_cast<std::size_t>(out));
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::int64_t o = 0; o < out; ++o) {
        const double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
        const std::int64_t base = static_cast<std::int64_t>(std::floor(src));
        const double f = src - static_cast<double>(base);
        ResizeTaps& t = taps[static_cast<std::size_t>(o)];
        for (int k = 0; k < 4; ++k) {
            const std::int64_t i = base - 1 + k;
            t.idx[static_cast<std::size_t>(k)] = std::clamp<std::int64_t>(i, 0, in - 1);
            t.w[static_cast<std::size_t>(k)] = cubic_weight(static_cast<double>(k - 1) - f);
        }
    }
    return taps;
}

inline std::vector<std::int64_t> nearest_taps(std::int64_t in, std::int64_t out) {
    std::vector<std::int64_t> taps(static_cast<std::size_t>(out));
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::int64_t o = 0; o < out; ++o) {
        const double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
        taps[static_cast<std::size_t>(o)] =
            std::clamp<std::int64_t>(static_cast<std::int64_t>(std::floor(src + 0.5)), 0, in - 1);
    }
    return taps;
}

}  // namespace augdetail

/// Nearest-neighbour 3-D resize (used for labels and the one-hot channel).
template <typename T>
Tensor<T> resize_nearest(const Tensor<T>& vol, const Shape& target) {
    require(vol.rank() == 3 && target.size() == 3, ErrorKind::shape, "resize_nearest: rank");
    Tensor<T> cur = vol;
    for (int axis = 0; axis < 3; ++axis) {
        const std::int64_t out_dim = target[static_cast<std::size_t>(axis)];
        const auto taps = augdetail::nearest_taps(cur.dim(axis), out_dim);
        Shape os = cur.shape();
        os[static_cast<std::size_t>(axis)] = out_dim;
        Tensor<T> next(os);
        for (std::int64_t h = 0; h < os[0]; ++h)
            for (std::int64_t w = 0; w < os[1]; ++w)
                for (std::int64_t d = 0; d < os[2]; ++d) {
                    const std::int64_t o = axis == 0 ? h : axis == 1 ? w : d;
                    const std::int64_t i = taps[static_cast<std::size_t>(o)];
                    next.at(h, w, d) = axis == 0   ? cur.at(i, w, d)
                                       : axis == 1 ? cur.at(h, i, d)
                                                   : cur.at(h, w, i);
                }
        cur = std::move(next);
    }
    return cur;
}

/// Separable Keys-cubic 3-D resize with clamped borders.
inline Tensor<float> resize_cubic(const Tensor<float>& vol, const Shape& target) {
    require(vol.rank() == 3 && target.size() == 3, ErrorKind::shape, "resize_cubic: rank");
    Tensor<float> cur = vol;
    for (int axis = 0; axis < 3; ++axis) {
        const std::int64_t out_dim = target[static_cast<std::size_t>(axis)];
        const auto taps = augdetail::cubic_taps(cur.dim(axis), out_dim);
        Shape os = cur.shape();
        os[static_cast<std::size_t>(axis)] = out_dim;
        Tensor<float> next(os);
        for (std::int64_t h = 0; h < os[0]; ++h)
            for (std::int64_t w = 0; w < os[1]; ++w)
                for (std::int64_t d = 0; d < os[2]; ++d) {
                    const std::int64_t o = axis == 0 ? h : axis == 1 ? w : d;
                    const auto& t = taps[static_cast<std::size_t>(o)];
                    double acc = 0.0;
                    for (int k = 0; k < 4; ++k) {
                        const std::int64_t i = t.idx[static_cast<std::size_t>(k)];
                        const float v = axis == 0   ? cur.at(i, w, d)
                                        : axis == 1 ? cur.at(h, i, d)
                                                    : cur.at(h, w, i);
                        acc += t.w[static_cast<std::size_t>(k)] * v;
                    }
                    next.at(h, w, d) = static_cast<float>(acc);
                }
        cur = std::move(next);
    }
    return cur;
}

namespace augdetail {

inline Tensor<float> channel_view_copy(const Tensor<float>& x, std::int64_t c) {
    Tensor<float> out({x.dim(1), x.dim(2), x.dim(3)});
    std::memcpy(out.data(), x.data() + c * out.numel(),
                sizeof(float) * static_cast<std::size_t>(out.numel()));
    return out;
}

inline void set_channel(Tensor<float>& x, std::int64_t c, const Tensor<float>& v) {
    std::memcpy(x.data() + c * v.numel(), v.data(),
                sizeof(float) * static_cast<std::size_t>(v.numel()));
}

}  // namespace augdetail

/// Random patch crop. With probability `foreground_bias_prob` the window is
/// placed so it contains at least one positively labelled voxel (uniform
/// crop when the label is empty). Inputs smaller than the patch are first
/// zero-padded symmetrically.
inline std::pair<Tensor<float>, Tensor<std::uint8_t>> biased_crop(const Tensor<float>& x,
                                                                  const Tensor<std::uint8_t>& y,
                                                                  const AugmentConfig& cfg,
                                                                  RngStream& rng,
                                                                  AugmentTrace* trace = nullptr) {
    require(x.rank() == 4 && y.rank() == 3, ErrorKind::shape, "biased_crop: ranks");
    require(x.dim(1) == y.dim(0) && x.dim(2) == y.dim(1) && x.dim(3) == y.dim(2), ErrorKind::shape,
            "biased_crop: image/label misaligned");
    const std::int64_t C = x.dim(0);
    const auto& p = cfg.patch_size;

    // Pad up to the patch size when needed (zeros in every channel; the
    // one-hot channel is zero on padding by definition).
    Tensor<float> xp = x;
    Tensor<std::uint8_t> yp = y;
    if (x.dim(1) < p[0] || x.dim(2) < p[1] || x.dim(3) < p[2]) {
        Shape padded = {C, std::max(x.dim(1), p[0]), std::max(x.dim(2), p[1]),
                        std::max(x.dim(3), p[2])};
        std::array<std::int64_t, 3> off{(padded[1] - x.dim(1)) / 2, (padded[2] - x.dim(2)) / 2,
                                        (padded[3] - x.dim(3)) / 2};
        Tensor<float> nx(padded, 0.0f);
        Tensor<std::uint8_t> ny({padded[1], padded[2], padded[3]}, 0);
        for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t h = 0; h < x.dim(1); ++h)
                for (std::int64_t w = 0; w < x.dim(2); ++w)
                    for (std::int64_t d = 0; d < x.dim(3); ++d)
                        nx.at(c, h + off[0], w + off[1], d + off[2]) = x.at(c, h, w, d);
        for (std::int64_t h = 0; h < y.dim(0); ++h)
            for (std::int64_t w = 0; w < y.dim(1); ++w)
                for (std::int64_t d = 0; d < y.dim(2); ++d)
                    ny.at(h + off[0], w + off[1], d + off[2]) = y.at(h, w, d);
        xp = std::move(nx);
        yp = std::move(ny);
    }

    const std::array<std::int64_t, 3> dims{xp.dim(1), xp.dim(2), xp.dim(3)};
    std::array<std::int64_t, 3> offset{};
    const bool want_bias = rng.bernoulli(cfg.foreground_bias_prob);
    bool placed = false;
    if (trace) trace->bias_draw = want_bias;
    if (want_bias) {
        std::int64_t positives = 0;
        for (std::int64_t i = 0; i < yp.numel(); ++i) positives += yp[i] > 0;
        if (positives > 0) {
            std::int64_t pick = rng.uniform_int(positives);
            std::int64_t vh = 0, vw = 0, vd = 0;
            for (std::int64_t i = 0; i < yp.numel(); ++i) {
                if (yp[i] > 0 && pick-- == 0) {
                    vd = i % dims[2];
                    vw = (i / dims[2]) % dims[1];
                    vh = i / (dims[2] * dims[1]);
                    break;
                }
            }
            const std::array<std::int64_t, 3> v{vh, vw, vd};
            for (int a = 0; a < 3; ++a) {
                const std::int64_t lo = std::max<std::int64_t>(0, v[static_cast<std::size_t>(a)] -
                                                                      p[static_cast<std::size_t>(a)] + 1);
                const std::int64_t hi = std::min(dims[static_cast<std::size_t>(a)] -
                                                     p[static_cast<std::size_t>(a)],
                                                 v[static_cast<std::size_t>(a)]);
                offset[static_cast<std::size_t>(a)] = rng.uniform_int(lo, hi);
            }
            placed = true;
        } else if (trace) {
            trace->bias_fallback_uniform = true;
        }
    }
    if (!placed)
        for (int a = 0; a < 3; ++a)
            offset[static_cast<std::size_t>(a)] =
                rng.uniform_int(dims[static_cast<std::size_t>(a)] - p[static_cast<std::size_t>(a)] + 1);

    Tensor<float> px({C, p[0], p[1], p[2]});
    Tensor<std::uint8_t> py({p[0], p[1], p[2]});
    for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t h = 0; h < p[0]; ++h)
            for (std::int64_t w = 0; w < p[1]; ++w)
                for (std::int64_t d = 0; d < p[2]; ++d)
                    px.at(c, h, w, d) = xp.at(c, h + offset[0], w + offset[1], d + offset[2]);
    for (std::int64_t h = 0; h < p[0]; ++h)
        for (std::int64_t w = 0; w < p[1]; ++w)
            for (std::int64_t d = 0; d < p[2]; ++d)
                py.at(h, w, d) = yp.at(h + offset[0], w + offset[1], d + offset[2]);
    return {std::move(px), std::move(py)};
}

/// Upscale by a factor drawn from zoom_range (cubic for intensity channels,
/// nearest for label and one-hot), then centre-crop back to the input
/// shape so downstream patching is unaffected.
inline void zoom(Tensor<float>& x, Tensor<std::uint8_t>& y, const AugmentConfig& cfg,
                 RngStream& rng, AugmentTrace* trace = nullptr) {
    if (!rng.bernoulli(cfg.zoom_prob)) return;
    const double s = rng.uniform(cfg.zoom_range[0], cfg.zoom_range[1]);
    if (trace) {
        trace->zoom = true;
        trace->zoom_scale = s;
    }
    if (s == 1.0) return;
    const Shape in{x.dim(1), x.dim(2), x.dim(3)};
    Shape big{static_cast<std::int64_t>(std::llround(static_cast<double>(in[0]) * s)),
              static_cast<std::int64_t>(std::llround(static_cast<double>(in[1]) * s)),
              static_cast<std::int64_t>(std::llround(static_cast<double>(in[2]) * s))};
    const std::array<std::int64_t, 3> off{(big[0] - in[0]) / 2, (big[1] - in[1]) / 2,
                                          (big[2] - in[2]) / 2};

    const std::int64_t C = x.dim(0);
    Tensor<float> out(x.shape());
    for (std::int64_t c = 0; c < C; ++c) {
        auto chan = augdetail::channel_view_copy(x, c);
        Tensor<float> resized = c == 4 ? resize_nearest(chan, big) : resize_cubic(chan, big);
        Tensor<float> cropped({in[0], in[1], in[2]});
        for (std::int64_t h = 0; h < in[0]; ++h)
            for (std::int64_t w = 0; w < in[1]; ++w)
                for (std::int64_t d = 0; d < in[2]; ++d)
                    cropped.at(h, w, d) = resized.at(h + off[0], w + off[1], d + off[2]);
        augdetail::set_channel(out, c, cropped);
    }
    x = std::move(out);

    auto ybig = resize_nearest(y, big);
    Tensor<std::uint8_t> ycrop(y.shape());
    for (std::int64_t h = 0; h < in[0]; ++h)
        for (std::int64_t w = 0; w < in[1]; ++w)
            for (std::int64_t d = 0; d < in[2]; ++d)
                ycrop.at(h, w, d) = ybig.at(h + off[0], w + off[1], d + off[2]);
    y = std::move(ycrop);
}

/// Each spatial axis flips independently with probability flip_prob,
/// identically for image and label.
inline void random_flips(Tensor<float>& x, Tensor<std::uint8_t>& y, const AugmentConfig& cfg,
                         RngStream& rng, AugmentTrace* trace = nullptr) {
    std::array<bool, 3> f{};
    for (int a = 0; a < 3; ++a) f[static_cast<std::size_t>(a)] = rng.bernoulli(cfg.flip_prob);
    if (trace) trace->flips = f;
    if (!f[0] && !f[1] && !f[2]) return;
    const std::int64_t C = x.dim(0), H = x.dim(1), W = x.dim(2), D = x.dim(3);
    Tensor<float> nx(x.shape());
    Tensor<std::uint8_t> ny(y.shape());
    for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t h = 0; h < H; ++h)
            for (std::int64_t w = 0; w < W; ++w)
                for (std::int64_t d = 0; d < D; ++d)
                    nx.at(c, f[0] ? H - 1 - h : h, f[1] ? W - 1 - w : w, f[2] ? D - 1 - d : d) =
                        x.at(c, h, w, d);
    for (std::int64_t h = 0; h < H; ++h)
        for (std::int64_t w = 0; w < W; ++w)
            for (std::int64_t d = 0; d < D; ++d)
                ny.at(f[0] ? H - 1 - h : h, f[1] ? W - 1 - w : w, f[2] ? D - 1 - d : d) =
                    y.at(h, w, d);
    x = std::move(nx);
    y = std::move(ny);
}

/// Adds zero-mean Gaussian noise (one std drawn per volume) to the
/// intensity channels; the one-hot channel is untouched.
inline void gaussian_noise(Tensor<float>& x, const AugmentConfig& cfg, RngStream& rng,
                           AugmentTrace* trace = nullptr) {
    if (!rng.bernoulli(cfg.noise_prob)) return;
    const double std_dev = rng.uniform(cfg.noise_std_range[0], cfg.noise_std_range[1]);
    if (trace) {
        trace->noise = true;
        trace->noise_std = std_dev;
    }
    const std::int64_t C = std::min<std::int64_t>(4, x.dim(0));
    const std::int64_t S = x.dim(1) * x.dim(2) * x.dim(3);
    for (std::int64_t c = 0; c < C; ++c) {
        float* d = x.data() + c * S;
        for (std::int64_t i = 0; i < S; ++i) d[i] += static_cast<float>(rng.normal(0.0, std_dev));
    }
}

/// Separable Gaussian blur on the intensity channels. Kernel truncated at
/// 4 sigma (odd size), reflection padding at the borders.
inline void gaussian_blur(Tensor<float>& x, const AugmentConfig& cfg, RngStream& rng,
                          AugmentTrace* trace = nullptr) {
    if (!rng.bernoulli(cfg.blur_prob)) return;
    const double sigma = rng.uniform(cfg.blur_sigma_range[0], cfg.blur_sigma_range[1]);
    if (trace) {
        trace->blur = true;
        trace->blur_sigma = sigma;
    }
    const std::int64_t r = std::max<std::int64_t>(1, static_cast<std::int64_t>(std::ceil(4.0 * sigma)));
    std::vector<double> kernel(static_cast<std::size_t>(2 * r + 1));
    double sum = 0.0;
    for (std::int64_t i = -r; i <= r; ++i) {
        const double v = std::exp(-0.5 * (static_cast<double>(i) / sigma) * (static_cast<double>(i) / sigma));
        kernel[static_cast<std::size_t>(i + r)] = v;
        sum += v;
    }
    for (auto& v : kernel) v /= sum;

    const std::int64_t C = std::min<std::int64_t>(4, x.dim(0));
    const Shape sp{x.dim(1), x.dim(2), x.dim(3)};
    for (std::int64_t c = 0; c < C; ++c) {
        Tensor<float> cur = augdetail::channel_view_copy(x, c);
        for (int axis = 0; axis < 3; ++axis) {
            Tensor<float> next(cur.shape());
            const std::int64_t n = sp[static_cast<std::size_t>(axis)];
            for (std::int64_t h = 0; h < sp[0]; ++h)
                for (std::int64_t w = 0; w < sp[1]; ++w)
                    for (std::int64_t d = 0; d < sp[2]; ++d) {
                        const std::int64_t center = axis == 0 ? h : axis == 1 ? w : d;
                        double acc = 0.0;
                        for (std::int64_t k = -r; k <= r; ++k) {
                            const std::int64_t i = augdetail::reflect_index(center + k, n);
                            const float v = axis == 0   ? cur.at(i, w, d)
                                            : axis == 1 ? cur.at(h, i, d)
                                                        : cur.at(h, w, i);
                            acc += kernel[static_cast<std::size_t>(k + r)] * v;
                        }
                        next.at(h, w, d) = static_cast<float>(acc);
                    }
            cur = std::move(next);
        }
        augdetail::set_channel(x, c, cur);
    }
}

/// Scales the intensity channels by a factor drawn from brightness_range.
inline void brightness(Tensor<float>& x, const AugmentConfig& cfg, RngStream& rng,
                       AugmentTrace* trace = nullptr) {
    if (!rng.bernoulli(cfg.brightness_prob)) return;
    const double f = rng.uniform(cfg.brightness_range[0], cfg.brightness_range[1]);
    if (trace) {
        trace->brightness = true;
        trace->brightness_factor = f;
    }
    const std::int64_t C = std::min<std::int64_t>(4, x.dim(0));
    const std::int64_t S = x.dim(1) * x.dim(2) * x.dim(3);
    for (std::int64_t c = 0; c < C; ++c) {
        float* d = x.data() + c * S;
        for (std::int64_t i = 0; i < S; ++i) d[i] = static_cast<float>(d[i] * f);
    }
}

/// Scales the intensity channels then clips each back to its own original
/// [min, max] range.
inline void contrast(Tensor<float>& x, const AugmentConfig& cfg, RngStream& rng,
                     AugmentTrace* trace = nullptr) {
    if (!rng.bernoulli(cfg.contrast_prob)) return;
    const double f = rng.uniform(cfg.contrast_range[0], cfg.contrast_range[1]);
    if (trace) {
        trace->contrast = true;
        trace->contrast_factor = f;
    }
    const std::int64_t C = std::min<std::int64_t>(4, x.dim(0));
    const std::int64_t S = x.dim(1) * x.dim(2) * x.dim(3);
    for (std::int64_t c = 0; c < C; ++c) {
        float* d = x.data() + c * S;
        float lo = d[0], hi = d[0];
        for (std::int64_t i = 0; i < S; ++i) {
            lo = std::min(lo, d[i]);
            hi = std::max(hi, d[i]);
        }
        for (std::int64_t i = 0; i < S; ++i)
            d[i] = std::clamp(static_cast<float>(d[i] * f), lo, hi);
    }
}

/// All seven training augmentations in their listed order: biased crop,
/// zoom, flips, noise, blur, brightness, contrast. Deterministic for a
/// fixed stream.
inline std::pair<Tensor<float>, Tensor<std::uint8_t>> augment_pipeline(
    const Tensor<float>& x, const Tensor<std::uint8_t>& y, const AugmentConfig& cfg,
    RngStream& rng, AugmentTrace* trace = nullptr) {
    cfg.validate();
    auto [px, py] = biased_crop(x, y, cfg, rng, trace);
    zoom(px, py, cfg, rng, trace);
    random_flips(px, py, cfg, rng, trace);
    gaussian_noise(px, cfg, rng, trace);
    gaussian_blur(px, cfg, rng, trace);
    brightness(px, cfg, rng, trace);
    contrast(px, cfg, rng, trace);
    return {std::move(px), std::move(py)};
}

}  // namespace ounet::pipeline
