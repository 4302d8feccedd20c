#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "templora/core/error.hpp"
#include "templora/core/tensor.hpp"

namespace templora {

struct AdamWOptions {
    double lr = 5e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

/// Adam with decoupled weight decay (Loshchilov & Hutter).
///
///   p <- p - lr * wd * p
///   m <- b1 m + (1 - b1) g,  v <- b2 v + (1 - b2) g^2
///   p <- p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
///
/// Moments are created lazily on the first step and keyed by position in the
/// parameter list, so the same list (same order) must be passed every step.
template <class T>
class AdamW {
public:
    explicit AdamW(AdamWOptions opts = {}) : opts_(opts) {}

    [[nodiscard]] const AdamWOptions& options() const { return opts_; }
    [[nodiscard]] std::int64_t steps() const { return step_; }
    [[nodiscard]] const std::vector<Tensor<T>>& first_moments() const { return m_; }
    [[nodiscard]] const std::vector<Tensor<T>>& second_moments() const { return v_; }

    /// One update of every parameter using its accumulated grad. `lr` overrides
    /// the configured rate (warmup schedules); pass a negative value to use it.
    void step(const std::vector<Parameter<T>*>& params, double lr = -1.0) {
        if (m_.empty()) {
            for (const Parameter<T>* p : params) {
                m_.emplace_back(p->value.shape());
                v_.emplace_back(p->value.shape());
            }
        }
        if (m_.size() != params.size()) throw ShapeError("AdamW: parameter list changed between steps");
        const double rate = lr < 0.0 ? opts_.lr : lr;
        ++step_;
        const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(step_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            Parameter<T>& p = *params[i];
            if (p.value.shape() != m_[i].shape()) throw ShapeError("AdamW: moment/parameter shape mismatch for " + p.name);
            if (p.grad.shape() != p.value.shape()) p.zero_grad();
            auto w = p.value.values();
            auto g = p.grad.values();
            auto m = m_[i].values();
            auto v = v_[i].values();
            for (std::size_t j = 0; j < w.size(); ++j) {
                double wj = static_cast<double>(w[j]);
                const double gj = static_cast<double>(g[j]);
                wj -= rate * opts_.weight_decay * wj;
                const double mj = opts_.beta1 * static_cast<double>(m[j]) + (1.0 - opts_.beta1) * gj;
                const double vj = opts_.beta2 * static_cast<double>(v[j]) + (1.0 - opts_.beta2) * gj * gj;
                m[j] = static_cast<T>(mj);
                v[j] = static_cast<T>(vj);
                wj -= rate * (mj / bc1) / (std::sqrt(vj / bc2) + opts_.eps);
                w[j] = static_cast<T>(wj);
            }
        }
    }

private:
    AdamWOptions opts_;
    std::int64_t step_ = 0;
    std::vector<Tensor<T>> m_;
    std::vector<Tensor<T>> v_;
};

}  // namespace templora
