#pragma once

#include <string_view>

#include "ounet/core/rng.hpp"
#include "ounet/nn/unet.hpp"

namespace ounet::nn {

/// Fan-in-scaled normal init matched to the leaky-ReLU slope:
/// std = sqrt(2 / ((1 + slope^2) * fan_in)), fan_in = in_channels * k^3.
/// Biases and norm shifts are zeroed, norm scales set to one.
/// Deterministic: one counted stream drawn in registry order.
template <typename T>
void kaiming_init(UNet<T>& model, std::uint64_t seed) {
    RngStream rng(splitmix64(seed ^ 0x6b61696d696e67ULL));
    const double slope = model.config().negative_slope;
    for (auto& p : model.parameters()) {
        Tensor<T>& v = p.var->value;
        const std::string_view name = p.name;
        const bool is_weight = name.ends_with(".w");
        const bool is_gamma = name.ends_with(".gamma");
        if (is_weight && v.rank() == 5) {
            // conv: [OC,IC,k,k,k]; transposed conv: [IC,OC,2,2,2]. Both use
            // the leading dim's partner times k^3 as fan-in, i.e. dim(1)*k^3
            // for conv and dim(0)*k^3 for transposed conv; the transposed
            // layout puts in-channels first, so dim(0) is correct there.
            const bool transposed = name.find(".up.") != std::string_view::npos;
            const std::int64_t in_ch = transposed ? v.dim(0) : v.dim(1);
            const std::int64_t k3 = v.dim(2) * v.dim(3) * v.dim(4);
            const double fan_in = static_cast<double>(in_ch * k3);
            const double std_dev = std::sqrt(2.0 / ((1.0 + slope * slope) * fan_in));
            for (std::int64_t i = 0; i < v.numel(); ++i)
                v[i] = static_cast<T>(rng.normal(0.0, std_dev));
        } else if (is_gamma) {
            v.fill(T(1));
        } else {
            v.set_zero();  // biases and norm shifts
        }
    }
}

/// The raw Kaiming draw, exposed for statistical verification.
inline double kaiming_std(std::int64_t fan_in, double slope) {
    return std::sqrt(2.0 / ((1.0 + slope * slope) * static_cast<double>(fan_in)));
}

}  // namespace ounet::nn
