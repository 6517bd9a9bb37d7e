#pragma once

#include "dayolo/autograd.hpp"

namespace dayolo {

// Gradient reversal layer config. Forward is always identity; the backward
// pass multiplies upstream gradients by -lambda. The ramp schedule is the
// DANN-style warmup 2/(1+exp(-gamma*p)) - 1 with p = step/total_steps;
// default is a constant lambda with the loss-level weight doing the
// balancing.
struct GrlConfig {
    float lambda_grl = 1.0f;
    enum class Schedule { kConstant, kRamp } schedule = Schedule::kConstant;
    float ramp_gamma = 10.0f;
    int ramp_total_steps = 1;

    void validate() const {
        if (lambda_grl < 0.0f) throw ValidationError("grl: lambda_grl must be >= 0");
        if (schedule == Schedule::kRamp && ramp_total_steps <= 0)
            throw ValidationError("grl: ramp total_steps must be positive");
    }

    // effective lambda at a training step; in [0, lambda_grl], nondecreasing
    float lambda_at(int step) const {
        if (schedule == Schedule::kConstant) return lambda_grl;
        float p = std::min(1.0f, std::max(0.0f, float(step) / float(ramp_total_steps)));
        float r = 2.0f / (1.0f + std::exp(-ramp_gamma * p)) - 1.0f;
        return lambda_grl * r;
    }
};

// Identity forward, -lambda-scaled backward. Same tensor shape out as in.
inline Var grl_apply(const Var& x, float lambda_grl) { return grl(x, lambda_grl); }

}  // namespace dayolo
