#pragma once

#include <cmath>
#include <vector>

#include "sgvqa/gradcheck.hpp"
#include "sgvqa/tensor.hpp"

namespace sgvqa {

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

/// Adam with decoupled weight decay:
///   m <- b1 m + (1-b1) g,  v <- b2 v + (1-b2) g^2
///   p <- p - lr (m_hat / (sqrt(v_hat) + eps) + wd p)
/// Tensors that were not reached by the last backward pass are left alone,
/// including their moments and step counts.
class Adam {
   public:
    Adam(std::vector<NamedTensor> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
        for (const auto& p : params_) {
            m_.emplace_back(p.tensor.size(), 0.0);
            v_.emplace_back(p.tensor.size(), 0.0);
            steps_.push_back(0);
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.tensor.zero_grad();
    }

    /// Returns the number of tensors updated.
    std::size_t step(double lr) {
        std::size_t updated = 0;
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Tensor& t = params_[i].tensor;
            if (!t.in_graph()) continue;
            ++updated;
            const auto t_step = ++steps_[i];
            const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_step));
            const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_step));
            auto g = t.grad();
            auto d = t.data();
            auto& m = m_[i];
            auto& v = v_[i];
            for (std::size_t k = 0; k < d.size(); ++k) {
                m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * g[k];
                v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * g[k] * g[k];
                const double mh = m[k] / c1, vh = v[k] / c2;
                d[k] -= lr * (mh / (std::sqrt(vh) + cfg_.eps) + cfg_.weight_decay * d[k]);
            }
        }
        return updated;
    }

    const std::vector<NamedTensor>& params() const { return params_; }

   private:
    std::vector<NamedTensor> params_;
    AdamConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    std::vector<std::uint64_t> steps_;
};

/// Step decay: lr * factor^floor(epoch / period), epochs counted from 0.
inline double scheduled_lr(double lr, double factor, int period, int epoch) {
    if (period <= 0) return lr;
    return lr * std::pow(factor, epoch / period);
}

}  // namespace sgvqa
