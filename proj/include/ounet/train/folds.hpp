#pragma once

#include <string>
#include <vector>

#include "ounet/core/error.hpp"
#include "ounet/core/rng.hpp"

namespace ounet::train {

struct FoldSplit {
    int fold = 0;
    std::vector<std::string> train_ids;
    std::vector<std::string> val_ids;
};

/// Deterministic shuffled k-fold partition. The k validation sets are
/// disjoint, cover all ids, and differ in size by at most one (the first
/// n % k folds take the extra example).
inline std::vector<FoldSplit> make_folds(std::vector<std::string> ids, int k, std::uint64_t seed) {
    require(k >= 1, ErrorKind::config, "make_folds: k must be >= 1");
    require(static_cast<int>(ids.size()) >= k, ErrorKind::config, "make_folds: fewer ids (",
            ids.size(), ") than folds (", k, ")");
    RngStream rng(splitmix64(seed ^ 0x666f6c6473ULL));
    for (std::size_t i = ids.size(); i > 1; --i)
        std::swap(ids[i - 1], ids[static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(i)))]);

    const std::size_t n = ids.size();
    const std::size_t base = n / static_cast<std::size_t>(k);
    const std::size_t extra = n % static_cast<std::size_t>(k);
    std::vector<FoldSplit> folds;
    std::size_t start = 0;
    for (int f = 0; f < k; ++f) {
        const std::size_t size = base + (static_cast<std::size_t>(f) < extra ? 1 : 0);
        FoldSplit split;
        split.fold = f;
        for (std::size_t i = 0; i < n; ++i) {
            if (i >= start && i < start + size)
                split.val_ids.push_back(ids[i]);
            else
                split.train_ids.push_back(ids[i]);
        }
        start += size;
        folds.push_back(std::move(split));
    }
    return folds;
}

}  // namespace ounet::train
