#pragma once

#include <cstdint>
#include <vector>

#include "bifrec/tensor.hpp"

namespace bifrec {

// Per-parameter Adam moments. Buffers stay shape-congruent with their
// parameter; step_count advances by exactly one per adam_step call.
struct AdamState {
    std::vector<std::vector<double>> first_moment;
    std::vector<std::vector<double>> second_moment;
    long step_count = 0;
};

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-6;
};

// Classic Adam with the L2 term folded into the gradient:
// g <- g + weight_decay * param, then standard bias-corrected moments.
// grads run parallel to params; missing state buffers are zero-initialized
// on first use.
void adam_step(std::vector<Tensor>& params, const std::vector<std::vector<double>>& grads,
               AdamState& state, double lr, const AdamConfig& cfg = {});

// Convenience overload that harvests grads from the params themselves.
// Parameters without a grad (e.g. disconnected this step) see zero gradient.
void adam_step(std::vector<Tensor>& params, AdamState& state, double lr,
               const AdamConfig& cfg = {});

// Linear warmup 0 -> peak over [0, warmup_steps], then linear decay
// peak -> final over [warmup_steps, total_steps].
struct LrSchedule {
    double peak_lr = 1e-4;
    long warmup_steps = 5000;
    double final_lr = 1e-8;
    long total_steps = 100000;
};

// Steps outside [0, total_steps] clamp to the endpoint values.
double lr_at(long step, const LrSchedule& schedule);

}  // namespace bifrec
