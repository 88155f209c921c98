#pragma once

#include <cmath>
#include <vector>

#include "msd/nn/tensor.hpp"

namespace msd::nn {

template <typename T>
void zero_grads(std::vector<Parameter<T>*>& params) {
    for (auto* p : params) p->zero_grad();
}

template <typename T>
void sgd_step(std::vector<Parameter<T>*>& params, T lr) {
    for (auto* p : params) {
        if (!p->trainable) continue;
        for (std::int64_t i = 0; i < p->value.size(); ++i) p->value[i] -= lr * p->grad[i];
    }
}

template <typename T>
struct AdamConfig {
    T lr = T(2e-4);
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);
};

template <typename T>
class Adam {
public:
    explicit Adam(AdamConfig<T> cfg = {}) : cfg_(cfg) {}

    const AdamConfig<T>& config() const { return cfg_; }
    long long steps() const { return t_; }

    void step(std::vector<Parameter<T>*>& params) {
        if (m_.empty()) {
            for (auto* p : params) {
                m_.push_back(Tensor<T>::zeros(p->value.shape));
                v_.push_back(Tensor<T>::zeros(p->value.shape));
            }
        }
        if (m_.size() != params.size()) throw NnError("adam: parameter list changed");
        ++t_;
        const T bc1 = T(1) - std::pow(cfg_.beta1, static_cast<T>(t_));
        const T bc2 = T(1) - std::pow(cfg_.beta2, static_cast<T>(t_));
        for (std::size_t j = 0; j < params.size(); ++j) {
            Parameter<T>& p = *params[j];
            if (!p.trainable) continue;
            for (std::int64_t i = 0; i < p.value.size(); ++i) {
                const T g = p.grad[i];
                m_[j][i] = cfg_.beta1 * m_[j][i] + (T(1) - cfg_.beta1) * g;
                v_[j][i] = cfg_.beta2 * v_[j][i] + (T(1) - cfg_.beta2) * g * g;
                const T mhat = m_[j][i] / bc1;
                const T vhat = v_[j][i] / bc2;
                p.value[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
        }
    }

    // Moment buffers, exposed for training-state checkpoints.
    std::vector<Tensor<T>>& moments1() { return m_; }
    std::vector<Tensor<T>>& moments2() { return v_; }
    void restore(long long t, std::vector<Tensor<T>> m, std::vector<Tensor<T>> v) {
        t_ = t;
        m_ = std::move(m);
        v_ = std::move(v);
    }

private:
    AdamConfig<T> cfg_;
    long long t_ = 0;
    std::vector<Tensor<T>> m_, v_;
};

}  // namespace msd::nn
