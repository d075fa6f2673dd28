#include "unipool/optim.hpp"

#include <cmath>

namespace unipool {

double clip_global_norm(std::vector<NamedParam>& params, double max_norm) {
    if (max_norm <= 0.0) throw ConfigError("clip_global_norm: max_norm must be > 0");
    double total = 0.0;
    for (auto& p : params)
        for (double g : p.tensor.grad()) total += g * g;
    total = std::sqrt(total);
    if (!std::isfinite(total))
        throw NumericError("clip_global_norm: non-finite gradient norm");
    if (total > max_norm) {
        const double s = max_norm / total;
        for (auto& p : params) {
            // Leaf grads are owned by the tensor; scale in place.
            auto& g = const_cast<std::vector<double>&>(p.tensor.grad());
            for (double& v : g) v *= s;
        }
    }
    return total;
}

AdamW::AdamW(std::vector<NamedParam> params, AdamWConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (auto& p : params_) {
        if (!p.tensor.requires_grad())
            throw ConfigError("AdamW: parameter '" + p.name +
                              "' does not require grad");
        m_.emplace_back(p.tensor.numel(), 0.0);
        v_.emplace_back(p.tensor.numel(), 0.0);
    }
}

void AdamW::step(double lr) {
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (size_t i = 0; i < params_.size(); ++i) {
        auto& data = params_[i].tensor.mutable_data();
        const auto& grad = params_[i].tensor.grad();
        auto& m = m_[i];
        auto& v = v_[i];
        for (size_t j = 0; j < data.size(); ++j) {
            data[j] *= 1.0 - lr * cfg_.weight_decay;
            m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * grad[j];
            v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * grad[j] * grad[j];
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            data[j] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
    }
}

void AdamW::zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
}

double lr_at(int64_t step, const LrSchedule& s) {
    if (step < 0) throw ConfigError("lr_at: negative step");
    if (s.total_steps <= 0) throw ConfigError("lr_at: total_steps must be > 0");
    const int64_t warmup = std::llround(s.warmup_fraction * static_cast<double>(s.total_steps));
    if (step <= warmup && warmup > 0)
        return s.peak * static_cast<double>(step) / static_cast<double>(warmup);
    if (step >= s.total_steps) return s.min;
    const double progress = static_cast<double>(step - warmup) /
                            static_cast<double>(s.total_steps - warmup);
    constexpr double pi = 3.14159265358979323846;
    return s.min + 0.5 * (s.peak - s.min) * (1.0 + std::cos(pi * progress));
}

}  // namespace unipool
