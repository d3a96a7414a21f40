#pragma once

#include <cmath>
#include <vector>

#include "ounet/nn/unet.hpp"

namespace ounet::train {

/// Adam with decoupled weight decay. Moments are kept in double regardless
/// of the parameter scalar type.
template <typename T>
class AdamW {
public:
    explicit AdamW(std::vector<nn::NamedParam<T>>* params, double beta1 = 0.9, double beta2 = 0.999,
                   double eps = 1e-8, double weight_decay = 0.0)
        : params_(params), beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {
        for (auto& p : *params_) {
            m_.emplace_back(Tensor<double>::zeros(p.var->value.shape()));
            v_.emplace_back(Tensor<double>::zeros(p.var->value.shape()));
        }
    }

    std::int64_t steps() const { return t_; }

    void zero_grad() {
        for (auto& p : *params_) p.var->zero_grad();
    }

    void step(double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t k = 0; k < params_->size(); ++k) {
            auto& p = *(*params_)[k].var;
            if (p.grad.numel() != p.value.numel()) continue;  // never touched by backward
            Tensor<double>& m = m_[k];
            Tensor<double>& v = v_[k];
            for (std::int64_t i = 0; i < p.value.numel(); ++i) {
                const double g = static_cast<double>(p.grad[i]);
                m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
                v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
                const double mh = m[i] / bc1;
                const double vh = v[i] / bc2;
                double upd = mh / (std::sqrt(vh) + eps_);
                upd += weight_decay_ * static_cast<double>(p.value[i]);
                p.value[i] = static_cast<T>(static_cast<double>(p.value[i]) - lr * upd);
            }
        }
    }

private:
    std::vector<nn::NamedParam<T>>* params_;
    std::vector<Tensor<double>> m_, v_;
    double beta1_, beta2_, eps_, weight_decay_;
    std::int64_t t_ = 0;
};

}  // namespace ounet::train
