#pragma once

#include <array>
#include <vector>

#include <nlohmann/json.hpp>

#include "ounet/core/error.hpp"
#include "ounet/core/tensor.hpp"

namespace ounet::postprocess {

struct PostprocessConfig {
    double wt_threshold = 0.45;
    double tc_threshold = 0.40;
    double et_threshold = 0.45;
    std::int64_t component_min_size = 16;
    double component_prob_threshold = 0.9;
    std::int64_t total_et_min = 73;
    int connectivity = 26;  // 26 or 6 neighbourhood

    void validate() const {
        for (double t : {wt_threshold, tc_threshold, et_threshold})
            require(t > 0.0 && t < 1.0, ErrorKind::config, "postprocess: thresholds in (0,1)");
        require(component_min_size >= 0 && total_et_min >= 0, ErrorKind::config,
                "postprocess: sizes >= 0");
        require(connectivity == 26 || connectivity == 6, ErrorKind::config,
                "postprocess: connectivity must be 6 or 26");
    }
};

inline void to_json(nlohmann::json& j, const PostprocessConfig& c) {
    j = {{"wt_threshold", c.wt_threshold},
         {"tc_threshold", c.tc_threshold},
         {"et_threshold", c.et_threshold},
         {"component_min_size", c.component_min_size},
         {"component_prob_threshold", c.component_prob_threshold},
         {"total_et_min", c.total_et_min},
         {"connectivity", c.connectivity}};
}
inline void from_json(const nlohmann::json& j, PostprocessConfig& c) {
    c = PostprocessConfig{};
    c.wt_threshold = j.value("wt_threshold", 0.45);
    c.tc_threshold = j.value("tc_threshold", 0.40);
    c.et_threshold = j.value("et_threshold", 0.45);
    c.component_min_size = j.value("component_min_size", std::int64_t{16});
    c.component_prob_threshold = j.value("component_prob_threshold", 0.9);
    c.total_et_min = j.value("total_et_min", std::int64_t{73});
    c.connectivity = j.value("connectivity", 26);
    c.validate();
}

/// Dense component labelling of a binary mask. Ids are 1..n in scan order
/// of each component's first voxel; 0 marks background.
struct ComponentSet {
    Tensor<std::int32_t> labels;
    std::vector<std::int64_t> sizes;  // sizes[i] is component i+1

    std::int64_t count() const { return static_cast<std::int64_t>(sizes.size()); }
};

inline ComponentSet connected_components(const Tensor<std::uint8_t>& mask, int connectivity) {
    require(mask.rank() == 3, ErrorKind::shape, "connected_components: expected [H,W,D]");
    require(connectivity == 26 || connectivity == 6, ErrorKind::config,
            "connected_components: connectivity must be 6 or 26");
    const std::int64_t H = mask.dim(0), W = mask.dim(1), D = mask.dim(2);

    std::vector<std::array<std::int64_t, 3>> offsets;
    for (std::int64_t dh = -1; dh <= 1; ++dh)
        for (std::int64_t dw = -1; dw <= 1; ++dw)
            for (std::int64_t dd = -1; dd <= 1; ++dd) {
                if (dh == 0 && dw == 0 && dd == 0) continue;
                const int manhattan = static_cast<int>(std::abs(dh) + std::abs(dw) + std::abs(dd));
                if (connectivity == 6 && manhattan != 1) continue;
                offsets.push_back({dh, dw, dd});
            }

    ComponentSet cs;
    cs.labels = Tensor<std::int32_t>(mask.shape(), 0);
    std::vector<std::int64_t> stack;
    std::int32_t next_id = 0;
    for (std::int64_t i = 0; i < mask.numel(); ++i) {
        if (!mask[i] || cs.labels[i] != 0) continue;
        ++next_id;
        std::int64_t size = 0;
        stack.push_back(i);
        cs.labels[i] = next_id;
        while (!stack.empty()) {
            const std::int64_t v = stack.back();
            stack.pop_back();
            ++size;
            const std::int64_t d = v % D;
            const std::int64_t w = (v / D) % W;
            const std::int64_t h = v / (D * W);
            for (const auto& off : offsets) {
                const std::int64_t nh = h + off[0], nw = w + off[1], nd = d + off[2];
                if (nh < 0 || nh >= H || nw < 0 || nw >= W || nd < 0 || nd >= D) continue;
                const std::int64_t ni = (nh * W + nw) * D + nd;
                if (mask[ni] && cs.labels[ni] == 0) {
                    cs.labels[ni] = next_id;
                    stack.push_back(ni);
                }
            }
        }
        cs.sizes.push_back(size);
    }
    return cs;
}

/// Region probabilities -> BraTS classes, the decision cascade applied
/// voxelwise: WT below threshold -> background; else TC below threshold ->
/// ED (2); else ET below threshold -> NCR (1); otherwise ET (4).
inline Tensor<std::uint8_t> regions_to_classes(const Tensor<float>& probs,
                                               const PostprocessConfig& cfg) {
    cfg.validate();
    require(probs.rank() == 4 && probs.dim(0) == 3, ErrorKind::shape,
            "regions_to_classes: expected [3,H,W,D]");
    const std::int64_t S = probs.numel() / 3;
    Tensor<std::uint8_t> classes({probs.dim(1), probs.dim(2), probs.dim(3)});
    const float* et = probs.data();
    const float* tc = probs.data() + S;
    const float* wt = probs.data() + 2 * S;
    for (std::int64_t i = 0; i < S; ++i) {
        if (wt[i] < cfg.wt_threshold)
            classes[i] = 0;
        else if (tc[i] < cfg.tc_threshold)
            classes[i] = 2;
        else if (et[i] < cfg.et_threshold)
            classes[i] = 1;
        else
            classes[i] = 4;
    }
    return classes;
}

/// ET false-positive removal, two sequential stages: (1) ET components
/// smaller than component_min_size with mean ET probability below the
/// probability threshold become NCR; (2) if the surviving ET voxels total
/// fewer than total_et_min and their mean probability is below the same
/// threshold, all of them become NCR.
inline Tensor<std::uint8_t> filter_et(const Tensor<std::uint8_t>& classes,
                                      const Tensor<float>& probs, const PostprocessConfig& cfg) {
    cfg.validate();
    require(probs.rank() == 4 && probs.dim(0) == 3, ErrorKind::shape, "filter_et: probs shape");
    require(classes.rank() == 3 && classes.dim(0) == probs.dim(1) && classes.dim(1) == probs.dim(2) &&
                classes.dim(2) == probs.dim(3),
            ErrorKind::shape, "filter_et: classes/probs misaligned");
    const std::int64_t S = classes.numel();
    const float* et_prob = probs.data();  // channel 0 = ET

    Tensor<std::uint8_t> out = classes;
    Tensor<std::uint8_t> mask(classes.shape());
    for (std::int64_t i = 0; i < S; ++i) mask[i] = out[i] == 4;
    auto comps = connected_components(mask, cfg.connectivity);

    std::vector<double> mean_prob(static_cast<std::size_t>(comps.count()), 0.0);
    for (std::int64_t i = 0; i < S; ++i)
        if (comps.labels[i] > 0) mean_prob[static_cast<std::size_t>(comps.labels[i] - 1)] += et_prob[i];
    for (std::int64_t c = 0; c < comps.count(); ++c)
        mean_prob[static_cast<std::size_t>(c)] /= static_cast<double>(comps.sizes[static_cast<std::size_t>(c)]);

    for (std::int64_t i = 0; i < S; ++i) {
        const std::int32_t id = comps.labels[i];
        if (id > 0 && comps.sizes[static_cast<std::size_t>(id - 1)] < cfg.component_min_size &&
            mean_prob[static_cast<std::size_t>(id - 1)] < cfg.component_prob_threshold)
            out[i] = 1;
    }

    std::int64_t remaining = 0;
    double prob_sum = 0.0;
    for (std::int64_t i = 0; i < S; ++i)
        if (out[i] == 4) {
            ++remaining;
            prob_sum += et_prob[i];
        }
    if (remaining > 0 && remaining < cfg.total_et_min &&
        prob_sum / static_cast<double>(remaining) < cfg.component_prob_threshold) {
        for (std::int64_t i = 0; i < S; ++i)
            if (out[i] == 4) out[i] = 1;
    }
    return out;
}

inline Tensor<std::uint8_t> postprocess_volume(const Tensor<float>& probs,
                                               const PostprocessConfig& cfg) {
    return filter_et(regions_to_classes(probs, cfg), probs, cfg);
}

// ------------------------------------------------------------ grid search

struct ThresholdSearchSpec {
    std::vector<double> wt_values;
    std::vector<double> tc_values;
    std::vector<double> et_values;
    std::vector<std::int64_t> component_min_values;
    std::vector<std::int64_t> total_et_values;

    /// Paper defaults: thresholds 0.30..0.70 step 0.05 (inclusive bounds),
    /// voxel counts 0..100 step 1.
    static ThresholdSearchSpec paper_default() {
        ThresholdSearchSpec s;
        for (int i = 0; i <= 8; ++i) s.wt_values.push_back(0.30 + 0.05 * i);
        s.tc_values = s.wt_values;
        s.et_values = s.wt_values;
        s.component_min_values = {16};
        for (std::int64_t v = 0; v <= 100; ++v) s.total_et_values.push_back(v);
        return s;
    }
};

inline void to_json(nlohmann::json& j, const ThresholdSearchSpec& s) {
    j = {{"wt_values", s.wt_values},
         {"tc_values", s.tc_values},
         {"et_values", s.et_values},
         {"component_min_values", s.component_min_values},
         {"total_et_values", s.total_et_values}};
}
inline void from_json(const nlohmann::json& j, ThresholdSearchSpec& s) {
    s = ThresholdSearchSpec::paper_default();
    if (j.contains("wt_values")) j.at("wt_values").get_to(s.wt_values);
    if (j.contains("tc_values")) j.at("tc_values").get_to(s.tc_values);
    if (j.contains("et_values")) j.at("et_values").get_to(s.et_values);
    if (j.contains("component_min_values")) j.at("component_min_values").get_to(s.component_min_values);
    if (j.contains("total_et_values")) j.at("total_et_values").get_to(s.total_et_values);
}

/// One tuning example: a probability map with its ground truth and fold.
struct TuneExample {
    Tensor<float> probs;          // [3,H,W,D]
    Tensor<std::uint8_t> truth;   // [H,W,D], same frame as probs
    int fold = 0;
};

namespace ppdetail {

inline double mask_dice(std::int64_t pred, std::int64_t truth, std::int64_t inter) {
    if (truth == 0) return pred == 0 ? 1.0 : 0.0;
    if (pred == 0) return 0.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(pred + truth);
}

}  // namespace ppdetail

/// Exhaustive search over the spec's grid, maximizing the cross-fold mean
/// Dice (per-example mean over ET/TC/WT, averaged per fold, then over
/// folds). Ties break toward the lexicographically smallest
/// (wt, tc, et, component_min, total_et_min) tuple. The evaluation reuses
/// per-component statistics so the voxel-count axes are cheap.
inline PostprocessConfig grid_search_thresholds(const std::vector<TuneExample>& examples,
                                                const ThresholdSearchSpec& spec,
                                                const PostprocessConfig& base = {}) {
    require(!examples.empty(), ErrorKind::validation, "grid_search_thresholds: no predictions");
    require(!spec.wt_values.empty() && !spec.tc_values.empty() && !spec.et_values.empty() &&
                !spec.component_min_values.empty() && !spec.total_et_values.empty(),
            ErrorKind::config, "grid_search_thresholds: empty grid axis");

    // Per-example ground-truth region counts.
    struct TruthInfo {
        std::int64_t et = 0, tc = 0, wt = 0;
    };
    std::vector<TruthInfo> truth(examples.size());
    for (std::size_t e = 0; e < examples.size(); ++e) {
        const auto& y = examples[e].truth;
        for (std::int64_t i = 0; i < y.numel(); ++i) {
            const std::uint8_t v = y[i];
            truth[e].et += v == 4;
            truth[e].tc += v == 1 || v == 4;
            truth[e].wt += v == 1 || v == 2 || v == 4;
        }
    }
    std::vector<int> folds;
    for (const auto& ex : examples)
        if (std::find(folds.begin(), folds.end(), ex.fold) == folds.end())
            folds.push_back(ex.fold);
    std::sort(folds.begin(), folds.end());

    double best_score = -1.0;
    PostprocessConfig best = base;

    for (double wt : spec.wt_values) {
        for (double tc : spec.tc_values) {
            for (double et : spec.et_values) {
                PostprocessConfig cfg = base;
                cfg.wt_threshold = wt;
                cfg.tc_threshold = tc;
                cfg.et_threshold = et;

                // Stats independent of the voxel-count axes, per example.
                struct ExampleStats {
                    std::int64_t wt_pred = 0, wt_inter = 0;
                    std::int64_t tc_pred = 0, tc_inter = 0;
                    struct Comp {
                        std::int64_t size;
                        std::int64_t inter;   // overlap with truth ET
                        double prob_sum;      // summed ET probability
                    };
                    std::vector<Comp> comps;
                };
                std::vector<ExampleStats> stats(examples.size());

                for (std::size_t e = 0; e < examples.size(); ++e) {
                    const auto& ex = examples[e];
                    auto classes = regions_to_classes(ex.probs, cfg);
                    ExampleStats& st = stats[e];
                    const std::int64_t S = classes.numel();
                    Tensor<std::uint8_t> mask(classes.shape());
                    for (std::int64_t i = 0; i < S; ++i) {
                        const std::uint8_t p = classes[i];
                        const std::uint8_t y = ex.truth[i];
                        const bool p_tc = p == 1 || p == 4, y_tc = y == 1 || y == 4;
                        const bool p_wt = p != 0, y_wt = y != 0;
                        st.tc_pred += p_tc;
                        st.tc_inter += p_tc && y_tc;
                        st.wt_pred += p_wt;
                        st.wt_inter += p_wt && y_wt;
                        mask[i] = p == 4;
                    }
                    auto comps = connected_components(mask, cfg.connectivity);
                    st.comps.resize(static_cast<std::size_t>(comps.count()));
                    for (auto& c : st.comps) c = {0, 0, 0.0};
                    const float* et_prob = ex.probs.data();
                    for (std::int64_t i = 0; i < S; ++i) {
                        const std::int32_t id = comps.labels[i];
                        if (id > 0) {
                            auto& c = st.comps[static_cast<std::size_t>(id - 1)];
                            ++c.size;
                            c.inter += ex.truth[i] == 4;
                            c.prob_sum += et_prob[i];
                        }
                    }
                }

                for (std::int64_t cmin : spec.component_min_values) {
                    for (std::int64_t tmin : spec.total_et_values) {
                        // fold -> (sum of example means, count)
                        std::vector<double> fold_sum(folds.size(), 0.0);
                        std::vector<std::int64_t> fold_n(folds.size(), 0);
                        for (std::size_t e = 0; e < examples.size(); ++e) {
                            const ExampleStats& st = stats[e];
                            std::int64_t kept = 0, kept_inter = 0;
                            double kept_prob = 0.0;
                            for (const auto& c : st.comps) {
                                const double mean_p = c.prob_sum / static_cast<double>(c.size);
                                if (c.size < cmin && mean_p < base.component_prob_threshold)
                                    continue;  // stage 1 drop
                                kept += c.size;
                                kept_inter += c.inter;
                                kept_prob += c.prob_sum;
                            }
                            if (kept > 0 && kept < tmin &&
                                kept_prob / static_cast<double>(kept) <
                                    base.component_prob_threshold) {
                                kept = 0;  // stage 2 drop
                                kept_inter = 0;
                            }
                            const double d_et = ppdetail::mask_dice(kept, truth[e].et, kept_inter);
                            const double d_tc =
                                ppdetail::mask_dice(st.tc_pred, truth[e].tc, st.tc_inter);
                            const double d_wt =
                                ppdetail::mask_dice(st.wt_pred, truth[e].wt, st.wt_inter);
                            const double mean = (d_et + d_tc + d_wt) / 3.0;
                            const auto fidx = static_cast<std::size_t>(
                                std::find(folds.begin(), folds.end(), examples[e].fold) -
                                folds.begin());
                            fold_sum[fidx] += mean;
                            fold_n[fidx] += 1;
                        }
                        double score = 0.0;
                        for (std::size_t f = 0; f < folds.size(); ++f)
                            score += fold_sum[f] / static_cast<double>(fold_n[f]);
                        score /= static_cast<double>(folds.size());

                        if (score > best_score + 1e-12) {
                            best_score = score;
                            best = cfg;
                            best.component_min_size = cmin;
                            best.total_et_min = tmin;
                        }
                    }
                }
            }
        }
    }
    return best;
}

}  // namespace ounet::postprocess
