#pragma once

#include <vector>

#include "ccm/autodiff.hpp"

namespace ccm {

template <typename T>
struct AdamConfigT {
    T lr = T(1e-3);
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);
};

using AdamConfig = AdamConfigT<float>;

// Adam with bias correction. Moment buffers are held per parameter, aligned
// with the parameter list given at construction.
template <typename T>
class AdamT {
  public:
    AdamT(std::vector<VarT<T>> params, AdamConfigT<T> config = {}) : params_(std::move(params)), cfg_(config) {
        for (const auto& p : params_) {
            m_.emplace_back(p->value.shape());
            v_.emplace_back(p->value.shape());
        }
    }

    void zero_grad() {
        for (auto& p : params_) p->zero_grad();
    }

    void step() {
        ++t_;
        const T bc1 = T(1) - std::pow(cfg_.beta1, static_cast<T>(t_));
        const T bc2 = T(1) - std::pow(cfg_.beta2, static_cast<T>(t_));
        for (size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i];
            p->ensure_grad();
            const long n = p->value.numel();
            for (long j = 0; j < n; ++j) {
                const T g = p->grad[j];
                if (!std::isfinite(g)) throw NumericError("non-finite gradient in " + p->name);
                m_[i][j] = cfg_.beta1 * m_[i][j] + (T(1) - cfg_.beta1) * g;
                v_[i][j] = cfg_.beta2 * v_[i][j] + (T(1) - cfg_.beta2) * g * g;
                const T mhat = m_[i][j] / bc1;
                const T vhat = v_[i][j] / bc2;
                p->value[j] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
        }
    }

    long step_count() const { return t_; }
    const AdamConfigT<T>& config() const { return cfg_; }

  private:
    std::vector<VarT<T>> params_;
    AdamConfigT<T> cfg_;
    std::vector<TensorT<T>> m_, v_;
    long t_ = 0;
};

using Adam = AdamT<float>;

}  // namespace ccm
