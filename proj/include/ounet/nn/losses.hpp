#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include <nlohmann/json.hpp>

#include "ounet/core/error.hpp"
#include "ounet/core/tensor.hpp"

namespace ounet::nn {

enum class BaseLoss { bce, focal };

struct LossConfig {
    BaseLoss base = BaseLoss::bce;
    double focal_gamma = 2.0;
    double dice_smooth = 1e-5;
    std::array<double, 3> deep_supervision_weights = {1.0, 0.5, 0.25};

    void validate() const {
        require(focal_gamma >= 0.0, ErrorKind::config, "loss: focal_gamma must be >= 0");
        require(dice_smooth > 0.0, ErrorKind::config, "loss: dice_smooth must be > 0");
    }
};

inline void to_json(nlohmann::json& j, const LossConfig& c) {
    j = {{"base", c.base == BaseLoss::focal ? "focal" : "bce"},
         {"focal_gamma", c.focal_gamma},
         {"dice_smooth", c.dice_smooth},
         {"deep_supervision_weights", c.deep_supervision_weights}};
}

inline void from_json(const nlohmann::json& j, LossConfig& c) {
    c = LossConfig{};
    const std::string base = j.value("base", "bce");
    if (base == "bce")
        c.base = BaseLoss::bce;
    else if (base == "focal")
        c.base = BaseLoss::focal;
    else
        raise(ErrorKind::config, "loss: unknown base '", base, "' (expected bce|focal)");
    c.focal_gamma = j.value("focal_gamma", 2.0);
    c.dice_smooth = j.value("dice_smooth", 1e-5);
    if (j.contains("deep_supervision_weights"))
        j.at("deep_supervision_weights").get_to(c.deep_supervision_weights);
}

/// Region channels, in fixed order.
enum RegionChannel : int { kET = 0, kTC = 1, kWT = 2 };

/// Class labels {0,1,2,4} -> nested binary regions:
/// ET = class 4, TC = classes {1,4}, WT = classes {1,2,4}.
/// Input [B,Z,Y,X] (or [Z,Y,X]), output [B,3,Z,Y,X].
template <typename T>
Tensor<T> labels_to_regions(const Tensor<std::uint8_t>& y) {
    Shape ys = y.shape();
    if (ys.size() == 3) ys.insert(ys.begin(), 1);
    require(ys.size() == 4, ErrorKind::shape, "labels_to_regions: expected [B,Z,Y,X]");
    const std::int64_t B = ys[0], S = ys[1] * ys[2] * ys[3];
    Tensor<T> out({B, 3, ys[1], ys[2], ys[3]});
    const std::uint8_t* yd = y.data();
    T* od = out.data();
    for (std::int64_t b = 0; b < B; ++b) {
        T* et = od + (b * 3 + kET) * S;
        T* tc = od + (b * 3 + kTC) * S;
        T* wt = od + (b * 3 + kWT) * S;
        const std::uint8_t* row = yd + b * S;
        for (std::int64_t i = 0; i < S; ++i) {
            const std::uint8_t v = row[i];
            require(v == 0 || v == 1 || v == 2 || v == 4, ErrorKind::validation,
                    "labels_to_regions: class value ", int(v), " not in {0,1,2,4}");
            et[i] = v == 4 ? T(1) : T(0);
            tc[i] = (v == 1 || v == 4) ? T(1) : T(0);
            wt[i] = (v == 1 || v == 2 || v == 4) ? T(1) : T(0);
        }
    }
    return out;
}

/// Nearest-neighbour label downsampling by an integer factor (stride pick);
/// introduces no new class values by construction.
inline Tensor<std::uint8_t> downsample_labels_nn(const Tensor<std::uint8_t>& y, int factor) {
    require(y.rank() == 4, ErrorKind::shape, "downsample_labels_nn: expected [B,Z,Y,X]");
    const std::int64_t B = y.dim(0), Z = y.dim(1), Y = y.dim(2), X = y.dim(3);
    require(Z % factor == 0 && Y % factor == 0 && X % factor == 0, ErrorKind::shape,
            "downsample_labels_nn: dims not divisible by ", factor);
    Tensor<std::uint8_t> out({B, Z / factor, Y / factor, X / factor});
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t z = 0; z < Z / factor; ++z)
            for (std::int64_t yy = 0; yy < Y / factor; ++yy)
                for (std::int64_t x = 0; x < X / factor; ++x)
                    out.at(b, z, yy, x) = y.at(b, z * factor, yy * factor, x * factor);
    return out;
}

template <typename T>
Tensor<T> sigmoid_tensor(const Tensor<T>& logits) {
    Tensor<T> p(logits.shape());
    for (std::int64_t i = 0; i < logits.numel(); ++i)
        p[i] = T(1) / (T(1) + std::exp(-logits[i]));
    return p;
}

namespace lossdetail {

inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

template <typename T>
void check_pair(const Tensor<T>& a, const Tensor<T>& b) {
    require(a.same_shape(b), ErrorKind::shape, "loss: shape mismatch ", shape_str(a.shape()),
            " vs ", shape_str(b.shape()));
    require(a.rank() == 5 && a.dim(1) == 3, ErrorKind::shape,
            "loss: expected [B,3,Z,Y,X], got ", shape_str(a.shape()));
}

}  // namespace lossdetail

/// Batched Dice over sigmoid probabilities: per channel the intersection
/// and union sums pool all batch samples and voxels before the ratio, and
/// the three channel losses are averaged.
template <typename T>
double dice_loss_batched(const Tensor<T>& p, const Tensor<T>& t, double smooth = 1e-5) {
    lossdetail::check_pair(p, t);
    const std::int64_t B = p.dim(0), S = p.dim(2) * p.dim(3) * p.dim(4);
    double total = 0.0;
    for (int c = 0; c < 3; ++c) {
        double inter = 0.0, psum = 0.0, tsum = 0.0;
        for (std::int64_t b = 0; b < B; ++b) {
            const T* pr = p.data() + (b * 3 + c) * S;
            const T* tr = t.data() + (b * 3 + c) * S;
            for (std::int64_t i = 0; i < S; ++i) {
                inter += double(pr[i]) * double(tr[i]);
                psum += double(pr[i]);
                tsum += double(tr[i]);
            }
        }
        total += 1.0 - (2.0 * inter + smooth) / (psum + tsum + smooth);
    }
    return total / 3.0;
}

/// Accumulates scale * d(dice_loss_batched)/dp into dp.
template <typename T>
void dice_loss_batched_grad(const Tensor<T>& p, const Tensor<T>& t, double smooth, double scale,
                            Tensor<T>& dp) {
    lossdetail::check_pair(p, t);
    const std::int64_t B = p.dim(0), S = p.dim(2) * p.dim(3) * p.dim(4);
    for (int c = 0; c < 3; ++c) {
        double inter = 0.0, psum = 0.0, tsum = 0.0;
        for (std::int64_t b = 0; b < B; ++b) {
            const T* pr = p.data() + (b * 3 + c) * S;
            const T* tr = t.data() + (b * 3 + c) * S;
            for (std::int64_t i = 0; i < S; ++i) {
                inter += double(pr[i]) * double(tr[i]);
                psum += double(pr[i]);
                tsum += double(tr[i]);
            }
        }
        const double denom = psum + tsum + smooth;
        const double num = 2.0 * inter + smooth;
        const double k = scale / 3.0;
        for (std::int64_t b = 0; b < B; ++b) {
            const T* tr = t.data() + (b * 3 + c) * S;
            T* dr = dp.data() + (b * 3 + c) * S;
            for (std::int64_t i = 0; i < S; ++i) {
                const double dldp = -(2.0 * double(tr[i]) * denom - num) / (denom * denom);
                dr[i] += static_cast<T>(k * dldp);
            }
        }
    }
}

/// Binary cross-entropy from logits, mean over batch, channels and voxels.
template <typename T>
double bce_loss(const Tensor<T>& logits, const Tensor<T>& t) {
    lossdetail::check_pair(logits, t);
    double sum = 0.0;
    for (std::int64_t i = 0; i < logits.numel(); ++i) {
        const double z = double(logits[i]), y = double(t[i]);
        sum += lossdetail::softplus(z) - z * y;
    }
    return sum / double(logits.numel());
}

/// Focal loss from logits (no class weighting), mean over batch, channels
/// and voxels; gamma = 0 reduces to bce_loss.
template <typename T>
double focal_loss(const Tensor<T>& logits, const Tensor<T>& t, double gamma) {
    lossdetail::check_pair(logits, t);
    double sum = 0.0;
    for (std::int64_t i = 0; i < logits.numel(); ++i) {
        const double z = double(logits[i]), y = double(t[i]);
        const double log_s = -lossdetail::softplus(-z);   // log sigmoid(z)
        const double log_1ms = -lossdetail::softplus(z);  // log sigmoid(-z)
        if (y > 0.5)
            sum += std::pow(1.0 - std::exp(log_s), gamma) * (-log_s);
        else
            sum += std::pow(std::exp(log_s), gamma) * (-log_1ms);
    }
    return sum / double(logits.numel());
}

namespace lossdetail {

/// Per-voxel d(base)/d(logit) for bce (gamma<0 sentinel) or focal.
inline double base_grad(double z, double y, double gamma) {
    const double s = 1.0 / (1.0 + std::exp(-z));
    if (gamma < 0.0) return s - y;  // bce
    const double log_s = -softplus(-z);
    const double log_1ms = -softplus(z);
    if (y > 0.5) {
        const double u = 1.0 - s;
        return gamma * std::pow(u, gamma) * s * log_s - std::pow(u, gamma + 1.0);
    }
    return -gamma * std::pow(s, gamma) * (1.0 - s) * log_1ms + std::pow(s, gamma + 1.0);
}

}  // namespace lossdetail

template <typename T>
struct LossValueGrad {
    double value = 0.0;
    Tensor<T> grad;  // d(value)/d(logits)
};

/// Training objective for one output head: averaged batched Dice plus the
/// per-region base loss summed over the three regions,
///   L = dice_loss_batched(sigmoid(z), t) + sum_c mean_{B,V} base(z_c, t_c).
template <typename T>
LossValueGrad<T> region_loss(const Tensor<T>& logits, const Tensor<T>& targets,
                             const LossConfig& cfg) {
    lossdetail::check_pair(logits, targets);
    const std::int64_t B = logits.dim(0), S = logits.dim(2) * logits.dim(3) * logits.dim(4);
    LossValueGrad<T> out;
    out.grad = Tensor<T>::zeros(logits.shape());

    Tensor<T> p = sigmoid_tensor(logits);
    out.value = dice_loss_batched(p, targets, cfg.dice_smooth);
    dice_loss_batched_grad(p, targets, cfg.dice_smooth, 1.0, out.grad);
    // Chain through the sigmoid for the dice part.
    for (std::int64_t i = 0; i < out.grad.numel(); ++i) {
        const double s = double(p[i]);
        out.grad[i] = static_cast<T>(double(out.grad[i]) * s * (1.0 - s));
    }

    const double gamma = cfg.base == BaseLoss::focal ? cfg.focal_gamma : -1.0;
    for (int c = 0; c < 3; ++c) {
        double sum = 0.0;
        const double inv = 1.0 / double(B * S);
        for (std::int64_t b = 0; b < B; ++b) {
            const T* zr = logits.data() + (b * 3 + c) * S;
            const T* tr = targets.data() + (b * 3 + c) * S;
            T* gr = out.grad.data() + (b * 3 + c) * S;
            for (std::int64_t i = 0; i < S; ++i) {
                const double z = double(zr[i]), y = double(tr[i]);
                if (gamma < 0.0) {
                    sum += lossdetail::softplus(z) - z * y;
                } else {
                    const double log_s = -lossdetail::softplus(-z);
                    const double log_1ms = -lossdetail::softplus(z);
                    sum += y > 0.5 ? std::pow(1.0 - std::exp(log_s), gamma) * (-log_s)
                                   : std::pow(std::exp(log_s), gamma) * (-log_1ms);
                }
                gr[i] += static_cast<T>(inv * lossdetail::base_grad(z, y, gamma));
            }
        }
        out.value += sum * inv;
    }
    return out;
}

template <typename T>
struct DeepSupervisionLossResult {
    double value = 0.0;
    std::vector<Tensor<T>> grads;  // aligned with heads: [main, ds0, ds1, ...]
};

/// Weighted multi-head objective: head 0 is full resolution, head i
/// compares against labels downsampled 2^i-fold by nearest neighbour, and
/// the head losses combine as L1 + L2/2 + L3/4.
template <typename T>
DeepSupervisionLossResult<T> deep_supervision_loss(const std::vector<Tensor<T>>& head_logits,
                                                   const Tensor<std::uint8_t>& labels,
                                                   const LossConfig& cfg) {
    require(!head_logits.empty(), ErrorKind::shape, "deep_supervision_loss: no heads");
    require(head_logits.size() <= cfg.deep_supervision_weights.size(), ErrorKind::config,
            "deep_supervision_loss: more heads than weights");
    DeepSupervisionLossResult<T> out;
    for (std::size_t i = 0; i < head_logits.size(); ++i) {
        Tensor<std::uint8_t> y = i == 0 ? labels : downsample_labels_nn(labels, 1 << i);
        Tensor<T> t = labels_to_regions<T>(y);
        require(t.same_shape(head_logits[i]), ErrorKind::shape,
                "deep_supervision_loss: head ", i, " shape ", shape_str(head_logits[i].shape()),
                " vs target ", shape_str(t.shape()));
        auto part = region_loss(head_logits[i], t, cfg);
        const double w = cfg.deep_supervision_weights[i];
        out.value += w * part.value;
        for (std::int64_t k = 0; k < part.grad.numel(); ++k)
            part.grad[k] = static_cast<T>(double(part.grad[k]) * w);
        out.grads.push_back(std::move(part.grad));
    }
    return out;
}

}  // namespace ounet::nn
