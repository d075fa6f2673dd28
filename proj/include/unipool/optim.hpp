#pragma once

// AdamW with decoupled weight decay, global-norm gradient clipping, and the
// warmup+cosine learning-rate schedule.

#include <cstdint>
#include <string>
#include <vector>

#include "unipool/tensor.hpp"

namespace unipool {

struct NamedParam {
    std::string name;
    Tensor tensor;
};

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

// Scales every gradient in place so the global L2 norm does not exceed
// max_norm; returns the pre-clip norm.
double clip_global_norm(std::vector<NamedParam>& params, double max_norm);

class AdamW {
public:
    AdamW(std::vector<NamedParam> params, AdamWConfig cfg);

    // One update with the given learning rate. Expects clipping (if any) to
    // have been applied already. Decay is decoupled: p *= (1 - lr*wd) before
    // the moment-driven update; bias correction uses the step counter.
    void step(double lr);
    void zero_grad();

    int64_t step_count() const { return step_; }
    const std::vector<NamedParam>& params() const { return params_; }
    std::vector<NamedParam>& mutable_params() { return params_; }
    const AdamWConfig& config() const { return cfg_; }

    // Serialization access for checkpoints.
    std::vector<double>& moment1(size_t i) { return m_[i]; }
    std::vector<double>& moment2(size_t i) { return v_[i]; }
    void set_step_count(int64_t s) { step_ = s; }

private:
    std::vector<NamedParam> params_;
    std::vector<std::vector<double>> m_, v_;
    AdamWConfig cfg_;
    int64_t step_ = 0;
};

struct LrSchedule {
    double peak = 5e-4;
    double min = 5e-5;
    double warmup_fraction = 0.01;
    int64_t total_steps = 0;
};

// Linear 0 -> peak over round(warmup_fraction * total_steps) steps, cosine
// peak -> min over the remainder, clamped to min past total_steps.
double lr_at(int64_t step, const LrSchedule& s);

}  // namespace unipool
