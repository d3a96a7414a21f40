#pragma once

#include <cmath>
#include <filesystem>
#include <map>
#include <optional>

#include "ounet/infer/sliding_window.hpp"
#include "ounet/metrics/dice.hpp"
#include "ounet/nn/checkpoint.hpp"
#include "ounet/nn/init.hpp"
#include "ounet/nn/losses.hpp"
#include "ounet/pipeline/augment.hpp"
#include "ounet/pipeline/preprocess.hpp"
#include "ounet/train/adam.hpp"
#include "ounet/train/folds.hpp"
#include "ounet/train/schedule.hpp"

namespace ounet::train {

enum class ValidationMode { center_patch, sliding_window };

struct TrainConfig {
    int epochs = 1000;
    double learning_rate = 0.0005;
    std::vector<double> lr_sweep = {0.0005, 0.0007, 0.0009};
    double weight_decay = 0.0001;
    std::int64_t warmup_steps = 1000;
    int batch_size = 2;
    std::uint64_t seed = 0;
    int fold = 0;
    int checkpoint_top_k = 2;
    ValidationMode validation = ValidationMode::center_patch;

    void validate() const {
        require(epochs >= 1, ErrorKind::config, "train: epochs >= 1");
        require(learning_rate > 0.0, ErrorKind::config, "train: learning_rate > 0");
        require(warmup_steps >= 1, ErrorKind::config, "train: warmup_steps >= 1");
        require(batch_size >= 1, ErrorKind::config, "train: batch_size >= 1");
        require(checkpoint_top_k >= 1, ErrorKind::config, "train: checkpoint_top_k >= 1");
    }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"epochs", c.epochs},
         {"learning_rate", c.learning_rate},
         {"lr_sweep", c.lr_sweep},
         {"weight_decay", c.weight_decay},
         {"warmup_steps", c.warmup_steps},
         {"batch_size", c.batch_size},
         {"seed", c.seed},
         {"fold", c.fold},
         {"checkpoint_top_k", c.checkpoint_top_k},
         {"validation", c.validation == ValidationMode::sliding_window ? "sliding_window"
                                                                       : "center_patch"}};
}
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    c = TrainConfig{};
    c.epochs = j.value("epochs", 1000);
    c.learning_rate = j.value("learning_rate", 0.0005);
    if (j.contains("lr_sweep")) j.at("lr_sweep").get_to(c.lr_sweep);
    c.weight_decay = j.value("weight_decay", 0.0001);
    c.warmup_steps = j.value("warmup_steps", std::int64_t{1000});
    c.batch_size = j.value("batch_size", 2);
    c.seed = j.value("seed", std::uint64_t{0});
    c.fold = j.value("fold", 0);
    c.checkpoint_top_k = j.value("checkpoint_top_k", 2);
    const std::string v = j.value("validation", "center_patch");
    if (v == "center_patch")
        c.validation = ValidationMode::center_patch;
    else if (v == "sliding_window")
        c.validation = ValidationMode::sliding_window;
    else
        raise(ErrorKind::config, "train: unknown validation mode '", v, "'");
    c.validate();
}

struct CheckpointRecord {
    std::filesystem::path path;
    int epoch = 0;
    double mean_val_dice = 0.0;
    std::string config_hash;
};

inline void to_json(nlohmann::json& j, const CheckpointRecord& r) {
    j = {{"path", r.path.string()},
         {"epoch", r.epoch},
         {"mean_val_dice", r.mean_val_dice},
         {"config_hash", r.config_hash}};
}
inline void from_json(const nlohmann::json& j, CheckpointRecord& r) {
    r.path = j.at("path").get<std::string>();
    r.epoch = j.value("epoch", 0);
    r.mean_val_dice = j.value("mean_val_dice", 0.0);
    r.config_hash = j.value("config_hash", "");
}

struct EpochRecord {
    int epoch = 0;
    double loss = 0.0;
    std::array<double, 3> val_region_dice{};
    double val_mean_dice = 0.0;
    double lr = 0.0;
};

inline void to_json(nlohmann::json& j, const EpochRecord& r) {
    j = {{"epoch", r.epoch},         {"loss", r.loss},
         {"val_dice_et", r.val_region_dice[0]}, {"val_dice_tc", r.val_region_dice[1]},
         {"val_dice_wt", r.val_region_dice[2]}, {"val_dice_mean", r.val_mean_dice},
         {"lr", r.lr}};
}

struct TrainResult {
    std::vector<CheckpointRecord> checkpoints;  // sorted by dice desc, epoch asc
    std::vector<EpochRecord> history;
};

/// Top-k selection as a pure function of the per-epoch scores: highest
/// mean dice first, earlier epoch on ties.
inline std::vector<int> select_top_k(const std::vector<double>& epoch_scores, int k) {
    std::vector<int> order(epoch_scores.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        if (epoch_scores[static_cast<std::size_t>(a)] != epoch_scores[static_cast<std::size_t>(b)])
            return epoch_scores[static_cast<std::size_t>(a)] >
                   epoch_scores[static_cast<std::size_t>(b)];
        return a < b;
    });
    if (static_cast<int>(order.size()) > k) order.resize(static_cast<std::size_t>(k));
    return order;
}

using ExampleProvider =
    std::function<const pipeline::PreprocessedExample&(const std::string& id)>;

/// Adapts a model to the sliding-window PredictFn, dropping the one-hot
/// channel when the model was built for 4 input channels.
inline infer::PredictFn model_predictor(const nn::UNet<float>& model) {
    const int want = model.config().in_channels;
    return [&model, want](const Tensor<float>& patch) {
        require(patch.rank() == 4, ErrorKind::shape, "model_predictor: expected [C,...] patch");
        Tensor<float> in = patch;
        if (patch.dim(0) != want) {
            require(patch.dim(0) > want, ErrorKind::shape, "model_predictor: patch has ",
                    patch.dim(0), " channels, model wants ", want);
            in = Tensor<float>({want, patch.dim(1), patch.dim(2), patch.dim(3)});
            std::memcpy(in.data(), patch.data(), sizeof(float) * static_cast<std::size_t>(in.numel()));
        }
        Tensor<float> batched = in.reshaped({1, in.dim(0), in.dim(1), in.dim(2), in.dim(3)});
        Tensor<float> logits = model.predict_logits(batched);
        return logits.reshaped({logits.dim(1), logits.dim(2), logits.dim(3), logits.dim(4)});
    };
}

namespace traindetail {

/// Center crop (or zero-pad) to the given patch size.
inline std::pair<Tensor<float>, Tensor<std::uint8_t>> center_patch(
    const Tensor<float>& x, const Tensor<std::uint8_t>& y,
    const std::array<std::int64_t, 3>& patch) {
    Tensor<float> px({x.dim(0), patch[0], patch[1], patch[2]}, 0.0f);
    Tensor<std::uint8_t> py({patch[0], patch[1], patch[2]}, 0);
    const std::array<std::int64_t, 3> in{x.dim(1), x.dim(2), x.dim(3)};
    std::array<std::int64_t, 3> src_lo{}, dst_lo{}, span{};
    for (int a = 0; a < 3; ++a) {
        const auto ia = static_cast<std::size_t>(a);
        if (in[ia] >= patch[ia]) {
            src_lo[ia] = (in[ia] - patch[ia]) / 2;
            dst_lo[ia] = 0;
            span[ia] = patch[ia];
        } else {
            src_lo[ia] = 0;
            dst_lo[ia] = (patch[ia] - in[ia]) / 2;
            span[ia] = in[ia];
        }
    }
    for (std::int64_t c = 0; c < x.dim(0); ++c)
        for (std::int64_t h = 0; h < span[0]; ++h)
            for (std::int64_t w = 0; w < span[1]; ++w)
                for (std::int64_t d = 0; d < span[2]; ++d)
                    px.at(c, dst_lo[0] + h, dst_lo[1] + w, dst_lo[2] + d) =
                        x.at(c, src_lo[0] + h, src_lo[1] + w, src_lo[2] + d);
    for (std::int64_t h = 0; h < span[0]; ++h)
        for (std::int64_t w = 0; w < span[1]; ++w)
            for (std::int64_t d = 0; d < span[2]; ++d)
                py.at(dst_lo[0] + h, dst_lo[1] + w, dst_lo[2] + d) =
                    y.at(src_lo[0] + h, src_lo[1] + w, src_lo[2] + d);
    return {std::move(px), std::move(py)};
}

inline std::array<double, 3> region_dice_from_probs(const Tensor<float>& probs,
                                                    const Tensor<std::uint8_t>& truth) {
    std::array<double, 3> out{};
    const std::int64_t S = truth.numel();
    for (int g = 0; g < 3; ++g) {
        Tensor<std::uint8_t> pm({truth.dim(0), truth.dim(1), truth.dim(2)});
        Tensor<std::uint8_t> tm(pm.shape());
        for (std::int64_t i = 0; i < S; ++i) {
            pm[i] = probs.data()[g * S + i] > 0.5f;
            const std::uint8_t v = truth[i];
            tm[i] = g == 0 ? v == 4 : g == 1 ? (v == 1 || v == 4) : (v != 0);
        }
        out[static_cast<std::size_t>(g)] = metrics::dice_score(pm, tm);
    }
    return out;
}

}  // namespace traindetail

/// One cross-validation fold of the paper's schedule: Kaiming init, AdamW
/// with linear warmup into cosine annealing, augmented patch batches, a
/// validation pass after every epoch, and top-k checkpointing by mean
/// validation Dice.
inline TrainResult train_fold(const FoldSplit& fold, const nn::ModelConfig& model_cfg,
                              const TrainConfig& cfg, const pipeline::AugmentConfig& aug_cfg,
                              const nn::LossConfig& loss_cfg,
                              const infer::SlidingWindowConfig& sw_cfg,
                              const ExampleProvider& examples,
                              const std::filesystem::path& checkpoint_dir) {
    cfg.validate();
    model_cfg.validate();
    loss_cfg.validate();
    require(!fold.train_ids.empty(), ErrorKind::config, "train_fold: empty training set");
    std::filesystem::create_directories(checkpoint_dir);

    nn::UNet<float> model(model_cfg);
    nn::kaiming_init(model, cfg.seed);
    AdamW<float> opt(&model.parameters(), 0.9, 0.999, 1e-8, cfg.weight_decay);

    const std::int64_t steps_per_epoch =
        (static_cast<std::int64_t>(fold.train_ids.size()) + cfg.batch_size - 1) / cfg.batch_size;
    const std::int64_t total_steps = steps_per_epoch * cfg.epochs;
    const std::string config_hash = nn::model_config_hash(model_cfg);
    const RngStream base(splitmix64(cfg.seed ^ 0x747261696eULL) ^
                         static_cast<std::uint64_t>(cfg.fold));

    TrainResult result;
    std::vector<double> epoch_scores;
    std::map<int, std::filesystem::path> saved;  // epoch -> file
    std::int64_t global_step = 0;

    const int head_count = model_cfg.deep_supervision ? 1 + model_cfg.ds_heads : 1;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        // Deterministic epoch ordering and per-example augmentation streams.
        std::vector<std::string> order = fold.train_ids;
        RngStream order_rng = base.fork(0x1000 + static_cast<std::uint64_t>(epoch));
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1],
                      order[static_cast<std::size_t>(order_rng.uniform_int(static_cast<std::int64_t>(i)))]);

        double epoch_loss = 0.0;
        std::int64_t batches = 0;
        for (std::int64_t s = 0; s < steps_per_epoch; ++s) {
            const std::size_t begin = static_cast<std::size_t>(s) * static_cast<std::size_t>(cfg.batch_size);
            if (begin >= order.size()) break;
            const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(cfg.batch_size));
            const std::int64_t B = static_cast<std::int64_t>(end - begin);

            Tensor<float> bx({B, model_cfg.in_channels, aug_cfg.patch_size[0], aug_cfg.patch_size[1],
                              aug_cfg.patch_size[2]});
            Tensor<std::uint8_t> by(
                {B, aug_cfg.patch_size[0], aug_cfg.patch_size[1], aug_cfg.patch_size[2]});
            std::vector<std::string> batch_ids;
            for (std::int64_t b = 0; b < B; ++b) {
                const std::string& id = order[begin + static_cast<std::size_t>(b)];
                batch_ids.push_back(id);
                const auto& ex = examples(id);
                require(ex.label.has_value(), ErrorKind::dataset, "train_fold: example '", id,
                        "' has no label");
                RngStream aug_rng = base.fork(splitmix64(fnv1a64(id)) ^
                                              static_cast<std::uint64_t>(epoch) * 0x9e37ULL);
                auto [px, py] = pipeline::augment_pipeline(ex.image, *ex.label, aug_cfg, aug_rng);
                const std::int64_t S = px.numel() / px.dim(0);
                std::memcpy(bx.data() + b * model_cfg.in_channels * S, px.data(),
                            sizeof(float) * static_cast<std::size_t>(model_cfg.in_channels * S));
                std::memcpy(by.data() + b * S, py.data(), static_cast<std::size_t>(S));
            }

            ++global_step;
            const double lr =
                lr_at_step(global_step, total_steps, cfg.learning_rate, cfg.warmup_steps);

            auto input = nn::make_var(bx);
            RngStream db_rng = base.fork(0x2000 + static_cast<std::uint64_t>(global_step));
            auto out = model.forward(input, true, &db_rng);

            std::vector<Tensor<float>> head_logits;
            head_logits.push_back(out.main->value);
            for (int hidx = 0; hidx < head_count - 1; ++hidx)
                head_logits.push_back(out.ds[static_cast<std::size_t>(hidx)]->value);
            auto loss = nn::deep_supervision_loss(head_logits, by, loss_cfg);

            if (!std::isfinite(loss.value)) {
                std::string ids;
                for (const auto& id : batch_ids) ids += id + " ";
                raise(ErrorKind::numerics, "non-finite loss at step ", global_step, " (epoch ",
                      epoch, ", lr ", lr, ", batch: ", ids, ")");
            }

            std::vector<std::pair<nn::VarPtr<float>, Tensor<float>>> roots;
            roots.emplace_back(out.main, std::move(loss.grads[0]));
            for (int hidx = 0; hidx < head_count - 1; ++hidx)
                roots.emplace_back(out.ds[static_cast<std::size_t>(hidx)],
                                   std::move(loss.grads[static_cast<std::size_t>(hidx + 1)]));
            nn::backward(roots);
            opt.step(lr);
            opt.zero_grad();
            epoch_loss += loss.value;
            ++batches;
        }

        // Validation after every epoch: raw region dice, no post-processing.
        std::array<double, 3> val{};
        for (const auto& id : fold.val_ids) {
            const auto& ex = examples(id);
            require(ex.label.has_value(), ErrorKind::dataset, "train_fold: example '", id,
                    "' has no label");
            std::array<double, 3> dice{};
            if (cfg.validation == ValidationMode::sliding_window) {
                auto probs = infer::sliding_window_predict(model_predictor(model), ex.image, sw_cfg);
                dice = traindetail::region_dice_from_probs(probs.probs, *ex.label);
            } else {
                auto [px, py] = traindetail::center_patch(ex.image, *ex.label, aug_cfg.patch_size);
                auto logits = model_predictor(model)(px);
                Tensor<float> probs(logits.shape());
                for (std::int64_t i = 0; i < logits.numel(); ++i)
                    probs[i] = 1.0f / (1.0f + std::exp(-logits[i]));
                dice = traindetail::region_dice_from_probs(probs, py);
            }
            for (int g = 0; g < 3; ++g) val[static_cast<std::size_t>(g)] += dice[static_cast<std::size_t>(g)];
        }
        const double nval = std::max<std::size_t>(1, fold.val_ids.size());
        for (int g = 0; g < 3; ++g) val[static_cast<std::size_t>(g)] /= nval;
        const double val_mean = (val[0] + val[1] + val[2]) / 3.0;

        EpochRecord rec;
        rec.epoch = epoch;
        rec.loss = batches ? epoch_loss / static_cast<double>(batches) : 0.0;
        rec.val_region_dice = val;
        rec.val_mean_dice = val_mean;
        rec.lr = lr_at_step(global_step, total_steps, cfg.learning_rate, cfg.warmup_steps);
        result.history.push_back(rec);
        epoch_scores.push_back(val_mean);

        // Keep the k best checkpoints on disk as selection evolves.
        auto top = select_top_k(epoch_scores, cfg.checkpoint_top_k);
        if (std::find(top.begin(), top.end(), epoch) != top.end()) {
            nn::CheckpointMeta meta;
            meta.epoch = epoch;
            meta.step = global_step;
            meta.val_dice = val_mean;
            meta.config_hash = config_hash;
            const auto path = checkpoint_dir /
                              ("fold" + std::to_string(cfg.fold) + "_epoch" + std::to_string(epoch) +
                               ".ckpt");
            nn::save_checkpoint(model, meta, path);
            saved[epoch] = path;
        }
        for (auto it = saved.begin(); it != saved.end();) {
            if (std::find(top.begin(), top.end(), it->first) == top.end()) {
                std::filesystem::remove(it->second);
                it = saved.erase(it);
            } else {
                ++it;
            }
        }
    }

    for (int epoch : select_top_k(epoch_scores, cfg.checkpoint_top_k)) {
        CheckpointRecord rec;
        rec.path = saved.at(epoch);
        rec.epoch = epoch;
        rec.mean_val_dice = epoch_scores[static_cast<std::size_t>(epoch)];
        rec.config_hash = config_hash;
        result.checkpoints.push_back(rec);
    }
    return result;
}

/// Averages sigmoid probability maps across checkpoint models
/// (sliding-window inference per model, optional 8-flip TTA).
inline infer::RegionProbabilities ensemble_average(const std::vector<CheckpointRecord>& checkpoints,
                                                   const Tensor<float>& x,
                                                   const infer::SlidingWindowConfig& sw_cfg,
                                                   bool tta = false) {
    require(!checkpoints.empty(), ErrorKind::config, "ensemble_average: no checkpoints");
    std::vector<Tensor<float>> maps;
    for (const auto& rec : checkpoints) {
        auto model = nn::load_checkpoint<float>(rec.path);
        auto predict = model_predictor(model);
        auto part = tta ? infer::tta_predict(predict, x, sw_cfg)
                        : infer::sliding_window_predict(predict, x, sw_cfg);
        maps.push_back(std::move(part.probs));
    }
    infer::RegionProbabilities out;
    out.probs = infer::average_probability_maps(maps);
    return out;
}

}  // namespace ounet::train
