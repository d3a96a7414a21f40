#pragma once

#include <cmath>
#include <cstdint>

#include "ounet/core/error.hpp"

namespace ounet::train {

/// Linear warmup from 0 to the target over `warmup_steps`, then a single
/// cosine annealing cycle down to eta_min across the remaining steps.
/// Continuous at the junction: both sides evaluate to the target there.
inline double lr_at_step(std::int64_t step, std::int64_t total_steps, double target_lr,
                         std::int64_t warmup_steps, double eta_min = 0.0) {
    require(warmup_steps >= 1, ErrorKind::config, "schedule: warmup_steps must be >= 1");
    require(target_lr > 0.0, ErrorKind::config, "schedule: target_lr must be > 0");
    if (step <= warmup_steps)
        return target_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
    if (total_steps <= warmup_steps) return target_lr;
    double progress = static_cast<double>(step - warmup_steps) /
                      static_cast<double>(total_steps - warmup_steps);
    progress = std::min(1.0, std::max(0.0, progress));
    return eta_min + 0.5 * (target_lr - eta_min) *
                         (1.0 + std::cos(3.14159265358979323846 * progress));
}

}  // namespace ounet::train
