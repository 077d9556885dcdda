#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace msdiff {

// AdamW over a fixed list of parameter arrays (decoupled weight decay).
class AdamW {
  public:
    AdamW(double lr, double weight_decay = 0.0, double beta1 = 0.9, double beta2 = 0.999,
          double eps = 1e-8)
        : lr_(lr), wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void set_lr(double lr) { lr_ = lr; }

    template <typename Views, typename GradViews>
    void step(Views& params, GradViews& grads) {
        if (m_.empty()) {
            for (auto& p : params) {
                m_.emplace_back(p.data->size(), 0.0);
                v_.emplace_back(p.data->size(), 0.0);
            }
        }
        if (params.size() != grads.size() || params.size() != m_.size())
            throw std::invalid_argument("AdamW: parameter/gradient layout changed");
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, (double)t_);
        const double bc2 = 1.0 - std::pow(beta2_, (double)t_);
        for (size_t a = 0; a < params.size(); ++a) {
            auto& p = *params[a].data;
            auto& g = *grads[a].data;
            auto& m = m_[a];
            auto& v = v_[a];
            for (size_t i = 0; i < p.size(); ++i) {
                m[i] = beta1_ * m[i] + (1 - beta1_) * g[i];
                v[i] = beta2_ * v[i] + (1 - beta2_) * g[i] * g[i];
                double mh = m[i] / bc1;
                double vh = v[i] / bc2;
                p[i] -= lr_ * (mh / (std::sqrt(vh) + eps_) + wd_ * p[i]);
            }
        }
    }

  private:
    double lr_, wd_, beta1_, beta2_, eps_;
    int64_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

}  // namespace msdiff
