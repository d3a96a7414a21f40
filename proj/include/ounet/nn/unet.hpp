#pragma once

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ounet/core/rng.hpp"
#include "ounet/nn/ops.hpp"

namespace ounet::nn {

enum class Variant { base, residual, attention };

inline const char* variant_name(Variant v) {
    switch (v) {
        case Variant::base: return "base";
        case Variant::residual: return "residual";
        case Variant::attention: return "attention";
    }
    return "base";
}

inline Variant variant_from_name(const std::string& s) {
    if (s == "base") return Variant::base;
    if (s == "residual") return Variant::residual;
    if (s == "attention") return Variant::attention;
    raise(ErrorKind::config, "unknown model variant '", s, "' (expected base|residual|attention)");
}

struct DropBlockConfig {
    int block_size = 5;
    double drop_prob = 0.1;
};

struct ModelConfig {
    int in_channels = 5;
    int out_channels = 3;
    int depth = 6;
    std::vector<int> channels = {32, 64, 128, 256, 320, 320};
    Variant variant = Variant::base;
    bool deep_supervision = false;
    int ds_heads = 2;
    std::optional<DropBlockConfig> drop_block;
    double negative_slope = 0.01;
    // Escape hatch: keep full resolution at the first encoder level
    // instead of downsampling everywhere. Off by default.
    bool first_level_stride1 = false;

    void validate() const {
        require(static_cast<int>(channels.size()) == depth, ErrorKind::config,
                "model: channels list length ", channels.size(), " != depth ", depth);
        require(depth >= 2, ErrorKind::config, "model: depth must be >= 2");
        require(in_channels >= 1 && out_channels >= 1, ErrorKind::config, "model: channel counts");
        require(!deep_supervision || ds_heads + (first_level_stride1 ? 1 : 0) < depth,
                ErrorKind::config, "model: ds_heads must be < depth");
        for (int c : channels)
            require(c >= 1, ErrorKind::config, "model: channels must be positive");
    }

    /// Spatial dims must be divisible by this for a valid forward pass.
    std::int64_t spatial_divisor() const { return std::int64_t{1} << (first_level_stride1 ? depth - 1 : depth); }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"in_channels", c.in_channels},
                       {"out_channels", c.out_channels},
                       {"depth", c.depth},
                       {"channels", c.channels},
                       {"variant", variant_name(c.variant)},
                       {"deep_supervision", c.deep_supervision},
                       {"ds_heads", c.ds_heads},
                       {"negative_slope", c.negative_slope},
                       {"first_level_stride1", c.first_level_stride1},
                       {"norm", "instance"},
                       {"up_kernel", 2},
                       {"up_stride", 2}};
    if (c.drop_block)
        j["drop_block"] = {{"block_size", c.drop_block->block_size},
                           {"drop_prob", c.drop_block->drop_prob}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    c = ModelConfig{};
    j.at("in_channels").get_to(c.in_channels);
    j.at("out_channels").get_to(c.out_channels);
    j.at("depth").get_to(c.depth);
    j.at("channels").get_to(c.channels);
    c.variant = variant_from_name(j.value("variant", "base"));
    c.deep_supervision = j.value("deep_supervision", false);
    c.ds_heads = j.value("ds_heads", 2);
    c.negative_slope = j.value("negative_slope", 0.01);
    c.first_level_stride1 = j.value("first_level_stride1", false);
    if (j.contains("drop_block") && !j["drop_block"].is_null()) {
        DropBlockConfig db;
        j["drop_block"].at("block_size").get_to(db.block_size);
        j["drop_block"].at("drop_prob").get_to(db.drop_prob);
        c.drop_block = db;
    }
}

template <typename T>
struct NetworkOutput {
    VarPtr<T> main;
    std::vector<VarPtr<T>> ds;  // ds[0] at 1/2 scale, ds[1] at 1/4 scale
};

template <typename T>
struct NamedParam {
    std::string name;
    VarPtr<T> var;
};

namespace detail {

template <typename T>
struct ParamRegistry {
    std::vector<NamedParam<T>>* params = nullptr;
    std::string prefix;

    VarPtr<T> make(const std::string& name, Shape shape) {
        auto v = make_var(Tensor<T>::zeros(std::move(shape)), true);
        params->push_back({prefix + name, v});
        return v;
    }
    ParamRegistry scoped(const std::string& sub) const { return {params, prefix + sub + "."}; }
};

template <typename T>
struct Conv {
    VarPtr<T> w, b;
    int kernel = 3, stride = 1, padding = 1;

    static Conv create(ParamRegistry<T> reg, const std::string& name, int in, int out, int kernel,
                       int stride) {
        Conv c;
        c.kernel = kernel;
        c.stride = stride;
        c.padding = kernel / 2;
        c.w = reg.make(name + ".w", {out, in, kernel, kernel, kernel});
        c.b = reg.make(name + ".b", {out});
        return c;
    }
    VarPtr<T> operator()(const VarPtr<T>& x) const { return conv3d(x, w, b, stride, padding); }
};

template <typename T>
struct UpConv {
    VarPtr<T> w, b;

    static UpConv create(ParamRegistry<T> reg, const std::string& name, int in, int out) {
        UpConv c;
        c.w = reg.make(name + ".w", {in, out, 2, 2, 2});
        c.b = reg.make(name + ".b", {out});
        return c;
    }
    VarPtr<T> operator()(const VarPtr<T>& x) const { return conv_transpose3d_2x(x, w, b); }
};

template <typename T>
struct Norm {
    VarPtr<T> gamma, beta;

    static Norm create(ParamRegistry<T> reg, const std::string& name, int ch) {
        Norm n;
        n.gamma = reg.make(name + ".gamma", {ch});
        n.beta = reg.make(name + ".beta", {ch});
        return n;
    }
    VarPtr<T> operator()(const VarPtr<T>& x) const { return instance_norm(x, gamma, beta); }
};

/// conv -> IN -> LReLU -> conv -> IN -> LReLU, optionally wrapped with a
/// residual skip added after the second norm (activated afterwards).
template <typename T>
struct ConvBlock {
    Conv<T> conv1, conv2;
    Norm<T> norm1, norm2;
    std::optional<Conv<T>> proj;  // residual path; absent means identity
    bool residual = false;
    T slope{};

    static ConvBlock create(ParamRegistry<T> reg, int in, int out, int first_stride, bool residual,
                            T slope) {
        ConvBlock b;
        b.residual = residual;
        b.slope = slope;
        b.conv1 = Conv<T>::create(reg, "conv1", in, out, 3, first_stride);
        b.norm1 = Norm<T>::create(reg, "norm1", out);
        b.conv2 = Conv<T>::create(reg, "conv2", out, out, 3, 1);
        b.norm2 = Norm<T>::create(reg, "norm2", out);
        if (residual && (in != out || first_stride != 1))
            b.proj = Conv<T>::create(reg, "proj", in, out, 1, first_stride);
        return b;
    }

    VarPtr<T> operator()(const VarPtr<T>& x) const {
        auto h = leaky_relu(norm1(conv1(x)), slope);
        h = norm2(conv2(h));
        if (residual) h = add(h, proj ? (*proj)(x) : x);
        return leaky_relu(h, slope);
    }
};

}  // namespace detail

/// Skip-connection gate: learns a per-voxel weight in (0,1) from the skip
/// features and the one-level-coarser decoder features, then scales the
/// skip by it (weights upsampled trilinearly back to the skip's grid).
template <typename T>
struct AttentionGate {
    detail::Conv<T> theta_x;  // skip -> inter, 1x1x1 stride 2
    detail::Conv<T> phi_g;    // gating -> inter, 1x1x1
    detail::Conv<T> psi;      // inter -> 1, 1x1x1

    static AttentionGate create(detail::ParamRegistry<T> reg, int skip_ch, int gate_ch) {
        AttentionGate g;
        const int inter = std::max(1, std::min(skip_ch, gate_ch) / 2);
        g.theta_x = detail::Conv<T>::create(reg, "theta_x", skip_ch, inter, 1, 2);
        g.phi_g = detail::Conv<T>::create(reg, "phi_g", gate_ch, inter, 1, 1);
        g.psi = detail::Conv<T>::create(reg, "psi", inter, 1, 1, 1);
        return g;
    }

    VarPtr<T> operator()(const VarPtr<T>& x_skip, const VarPtr<T>& g) const {
        require(g->value.dim(2) * 2 == x_skip->value.dim(2) &&
                    g->value.dim(3) * 2 == x_skip->value.dim(3) &&
                    g->value.dim(4) * 2 == x_skip->value.dim(4),
                ErrorKind::shape, "attention_gate: gating signal must be one level coarser");
        auto f = relu(add(theta_x(x_skip), phi_g(g)));
        auto alpha = upsample_trilinear2x(sigmoid(psi(f)));
        return mul_gate(x_skip, alpha);
    }
};

/// Spatial drop-block mask: square blocks zeroed at random anchors, the
/// survivors rescaled so the expected activation is unchanged. One mask
/// per sample, shared across channels.
template <typename T>
Tensor<T> dropblock_mask(const Shape& spatial_nzyx, int block_size, double drop_prob,
                         RngStream& rng) {
    const std::int64_t N = spatial_nzyx[0], Z = spatial_nzyx[2], Y = spatial_nzyx[3],
                       X = spatial_nzyx[4];
    Tensor<T> mask({N, 1, Z, Y, X}, T(1));
    const double vol = static_cast<double>(block_size) * block_size * block_size;
    const double gamma = std::min(1.0, drop_prob / vol);
    const int r = block_size / 2;
    for (std::int64_t n = 0; n < N; ++n) {
        T* slab = mask.data() + n * Z * Y * X;
        for (std::int64_t z = 0; z < Z; ++z)
            for (std::int64_t y = 0; y < Y; ++y)
                for (std::int64_t x = 0; x < X; ++x)
                    if (rng.bernoulli(gamma)) {
                        for (std::int64_t bz = std::max<std::int64_t>(0, z - r);
                             bz <= std::min(Z - 1, z + r); ++bz)
                            for (std::int64_t by = std::max<std::int64_t>(0, y - r);
                                 by <= std::min(Y - 1, y + r); ++by)
                                for (std::int64_t bx = std::max<std::int64_t>(0, x - r);
                                     bx <= std::min(X - 1, x + r); ++bx)
                                    slab[(bz * Y + by) * X + bx] = T{};
                    }
        std::int64_t kept = 0;
        const std::int64_t total = Z * Y * X;
        for (std::int64_t i = 0; i < total; ++i) kept += slab[i] != T{} ? 1 : 0;
        if (kept == 0) {
            for (std::int64_t i = 0; i < total; ++i) slab[i] = T(1);
        } else {
            const T scale = static_cast<T>(static_cast<double>(total) / static_cast<double>(kept));
            for (std::int64_t i = 0; i < total; ++i) slab[i] *= scale;
        }
    }
    return mask;
}

/// The configurable U-Net family: every encoder block halves the spatial
/// dims (3x3x3 stride-2 conv then a stride-1 conv, instance norm and leaky
/// ReLU after each); the decoder mirrors it with 2x2x2 stride-2 transposed
/// convolutions and skip concatenation, plus a skip-less top stage back to
/// full resolution. Variants: residual conv blocks, attention-gated skips,
/// optional drop-block, and 1x1x1 deep-supervision heads on the coarser
/// decoder levels.
template <typename T>
class UNet {
public:
    explicit UNet(ModelConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.validate();
        detail::ParamRegistry<T> reg{&params_, ""};
        const int d = cfg_.depth;
        const auto& ch = cfg_.channels;
        const bool res = cfg_.variant == Variant::residual;
        const T slope = static_cast<T>(cfg_.negative_slope);

        int in = cfg_.in_channels;
        for (int i = 0; i < d; ++i) {
            const int stride = (i == 0 && cfg_.first_level_stride1) ? 1 : 2;
            encoders_.push_back(detail::ConvBlock<T>::create(
                reg.scoped("enc" + std::to_string(i)), in, ch[static_cast<std::size_t>(i)], stride,
                res, slope));
            in = ch[static_cast<std::size_t>(i)];
        }

        for (int i = d - 2; i >= 0; --i) {
            const int coarse = ch[static_cast<std::size_t>(i + 1)];
            const int fine = ch[static_cast<std::size_t>(i)];
            auto scope = reg.scoped("dec" + std::to_string(i));
            up_.push_back(detail::UpConv<T>::create(scope, "up", coarse, fine));
            dec_.push_back(
                detail::ConvBlock<T>::create(scope.scoped("block"), 2 * fine, fine, 1, res, slope));
            if (cfg_.variant == Variant::attention)
                gates_.push_back(AttentionGate<T>::create(scope.scoped("gate"), fine, coarse));
        }

        if (!cfg_.first_level_stride1) {
            // Skip-less refinement back to full resolution. Stays a plain
            // double conv in every variant: it has no encoder counterpart,
            // and an identity-residual here would break the zeroed-
            // projection equivalence between variants.
            auto scope = reg.scoped("top");
            top_up_ = detail::UpConv<T>::create(scope, "up", ch[0], ch[0]);
            top_block_ =
                detail::ConvBlock<T>::create(scope.scoped("block"), ch[0], ch[0], 1, false, slope);
        }

        head_ = detail::Conv<T>::create(reg.scoped("head"), "conv", ch[0], cfg_.out_channels, 1, 1);
        if (cfg_.deep_supervision) {
            for (int j = 0; j < cfg_.ds_heads; ++j) {
                // Head j sits at 1/2^(j+1) of the output resolution.
                const int level = cfg_.first_level_stride1 ? j + 1 : j;
                ds_heads_.push_back(detail::Conv<T>::create(
                    reg.scoped("ds" + std::to_string(j)), "conv",
                    ch[static_cast<std::size_t>(level)], cfg_.out_channels, 1, 1));
            }
        }
    }

    const ModelConfig& config() const { return cfg_; }
    std::vector<NamedParam<T>>& parameters() { return params_; }
    const std::vector<NamedParam<T>>& parameters() const { return params_; }

    std::int64_t count_parameters() const {
        std::int64_t n = 0;
        for (const auto& p : params_) n += p.var->value.numel();
        return n;
    }

    void zero_grad() {
        for (auto& p : params_) p.var->zero_grad();
    }

    NetworkOutput<T> forward(const VarPtr<T>& x, bool training = false,
                             RngStream* rng = nullptr) const {
        const auto& xs = x->value.shape();
        require(xs.size() == 5, ErrorKind::shape, "forward: expected [N,C,Z,Y,X], got ",
                shape_str(xs));
        require(xs[1] == cfg_.in_channels, ErrorKind::shape, "forward: expected ", cfg_.in_channels,
                " input channels, got ", xs[1]);
        const std::int64_t div = cfg_.spatial_divisor();
        for (int a = 2; a < 5; ++a)
            require(xs[static_cast<std::size_t>(a)] % div == 0, ErrorKind::shape,
                    "forward: spatial dim ", xs[static_cast<std::size_t>(a)],
                    " not divisible by 2^depth = ", div);
        const bool use_db = training && cfg_.drop_block.has_value();
        require(!use_db || rng != nullptr, ErrorKind::config,
                "forward: drop_block in training mode needs an RngStream");

        std::vector<VarPtr<T>> feats;  // encoder outputs per level
        VarPtr<T> h = x;
        for (std::size_t i = 0; i < encoders_.size(); ++i) {
            h = encoders_[i](h);
            if (use_db) {
                auto mask = dropblock_mask<T>(h->value.shape(), cfg_.drop_block->block_size,
                                              cfg_.drop_block->drop_prob, *rng);
                h = mul_mask(h, std::move(mask));
            }
            feats.push_back(h);
        }

        // Decoder: dec_[j] refines level i = depth-2-j.
        std::vector<VarPtr<T>> dec_feats(encoders_.size());
        for (std::size_t j = 0; j < dec_.size(); ++j) {
            const std::size_t level = encoders_.size() - 2 - j;
            VarPtr<T> skip = feats[level];
            if (cfg_.variant == Variant::attention) skip = gates_[j](skip, h);
            h = dec_[j](concat_channels(up_[j](h), skip));
            dec_feats[level] = h;
        }
        if (top_up_) h = (*top_block_)((*top_up_)(h));

        NetworkOutput<T> out;
        out.main = head_(h);
        for (std::size_t j = 0; j < ds_heads_.size(); ++j) {
            const std::size_t level = cfg_.first_level_stride1 ? j + 1 : j;
            out.ds.push_back(ds_heads_[j](dec_feats[level]));
        }
        return out;
    }

    /// Evaluation-mode logits with no graph retained.
    Tensor<T> predict_logits(const Tensor<T>& x) const {
        NoGradGuard ng;
        auto in = make_var(x);
        return forward(in, false, nullptr).main->value;
    }

private:
    ModelConfig cfg_;
    std::vector<NamedParam<T>> params_;
    std::vector<detail::ConvBlock<T>> encoders_;
    std::vector<detail::UpConv<T>> up_;
    std::vector<detail::ConvBlock<T>> dec_;
    std::vector<AttentionGate<T>> gates_;
    std::optional<detail::UpConv<T>> top_up_;
    std::optional<detail::ConvBlock<T>> top_block_;
    detail::Conv<T> head_;
    std::vector<detail::Conv<T>> ds_heads_;
};

}  // namespace ounet::nn
