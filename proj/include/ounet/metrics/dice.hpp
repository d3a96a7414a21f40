#pragma once

#include <algorithm>
#include <array>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ounet/core/error.hpp"
#include "ounet/core/tensor.hpp"

namespace ounet::metrics {

/// Dice with the challenge's empty-ground-truth convention: both masks
/// empty scores 1, a false-positive prediction against an empty truth
/// scores 0.
inline double dice_score(const Tensor<std::uint8_t>& pred, const Tensor<std::uint8_t>& truth) {
    require(pred.same_shape(truth), ErrorKind::shape, "dice_score: shape mismatch ",
            shape_str(pred.shape()), " vs ", shape_str(truth.shape()));
    std::int64_t p = 0, t = 0, inter = 0;
    for (std::int64_t i = 0; i < pred.numel(); ++i) {
        const bool pv = pred[i] != 0, tv = truth[i] != 0;
        p += pv;
        t += tv;
        inter += pv && tv;
    }
    if (t == 0) return p == 0 ? 1.0 : 0.0;
    if (p == 0) return 0.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(p + t);
}

struct DiceReport {
    std::string id;
    int fold = 0;
    std::array<double, 3> region{};  // (ET, TC, WT)
    double mean = 0.0;
};

inline void to_json(nlohmann::json& j, const DiceReport& r) {
    j = {{"id", r.id},   {"fold", r.fold},     {"dice_et", r.region[0]},
         {"dice_tc", r.region[1]}, {"dice_wt", r.region[2]}, {"dice_mean", r.mean}};
}
inline void from_json(const nlohmann::json& j, DiceReport& r) {
    r.id = j.value("id", "");
    r.fold = j.value("fold", 0);
    r.region = {j.value("dice_et", 0.0), j.value("dice_tc", 0.0), j.value("dice_wt", 0.0)};
    r.mean = j.value("dice_mean", 0.0);
}

/// Scores prediction against truth on the three overlapping regions
/// (both converted from class labels), mean = average of the three.
inline DiceReport region_dice_report(const Tensor<std::uint8_t>& pred_classes,
                                     const Tensor<std::uint8_t>& truth_classes) {
    require(pred_classes.same_shape(truth_classes), ErrorKind::shape,
            "region_dice_report: shape mismatch");
    auto region_mask = [](const Tensor<std::uint8_t>& classes, int region) {
        Tensor<std::uint8_t> m(classes.shape());
        for (std::int64_t i = 0; i < classes.numel(); ++i) {
            const std::uint8_t v = classes[i];
            m[i] = region == 0 ? v == 4 : region == 1 ? (v == 1 || v == 4)
                                                      : (v == 1 || v == 2 || v == 4);
        }
        return m;
    };
    DiceReport r;
    for (int g = 0; g < 3; ++g)
        r.region[static_cast<std::size_t>(g)] =
            dice_score(region_mask(pred_classes, g), region_mask(truth_classes, g));
    r.mean = (r.region[0] + r.region[1] + r.region[2]) / 3.0;
    return r;
}

struct CrossValSummary {
    std::vector<int> folds;              // sorted fold ids
    std::vector<double> fold_means;      // per-fold mean of per-example means
    std::vector<std::size_t> fold_sizes;
    double overall = 0.0;                // unweighted mean over folds
};

/// Per-fold mean of per-example mean Dice; the overall row is the
/// unweighted mean over folds. Permutation-invariant over report order.
inline CrossValSummary cross_val_summary(const std::vector<DiceReport>& reports) {
    require(!reports.empty(), ErrorKind::validation, "cross_val_summary: no reports");
    std::map<int, std::pair<double, std::size_t>> acc;
    for (const auto& r : reports) {
        acc[r.fold].first += r.mean;
        acc[r.fold].second += 1;
    }
    CrossValSummary s;
    for (const auto& [fold, sum_n] : acc) {
        s.folds.push_back(fold);
        s.fold_means.push_back(sum_n.first / static_cast<double>(sum_n.second));
        s.fold_sizes.push_back(sum_n.second);
    }
    for (double m : s.fold_means) s.overall += m;
    s.overall /= static_cast<double>(s.fold_means.size());
    return s;
}

/// Plain-text table in the style of the cross-validation result tables:
/// one row per fold and a final mean row, one column per named variant.
inline std::string render_fold_table(const std::vector<std::string>& variant_names,
                                     const std::vector<CrossValSummary>& columns) {
    require(variant_names.size() == columns.size() && !columns.empty(), ErrorKind::validation,
            "render_fold_table: column mismatch");
    const auto& folds = columns[0].folds;
    for (const auto& c : columns)
        require(c.folds == folds, ErrorKind::validation, "render_fold_table: fold sets differ");

    std::ostringstream os;
    os << std::left << std::setw(12) << "Fold";
    for (const auto& name : variant_names) os << std::right << std::setw(12) << name;
    os << "\n";
    for (std::size_t f = 0; f < folds.size(); ++f) {
        os << std::left << std::setw(12) << ("fold " + std::to_string(folds[f]));
        for (const auto& c : columns)
            os << std::right << std::setw(12) << std::fixed << std::setprecision(4)
               << c.fold_means[f];
        os << "\n";
    }
    os << std::left << std::setw(12) << "Mean Dice";
    for (const auto& c : columns)
        os << std::right << std::setw(12) << std::fixed << std::setprecision(4) << c.overall;
    os << "\n";
    return os.str();
}

}  // namespace ounet::metrics
