#include "bifrec/optim.hpp"

#include <cmath>

#include "bifrec/errors.hpp"
#include "bifrec/ops.hpp"

namespace bifrec {

void adam_step(std::vector<Tensor>& params, const std::vector<std::vector<double>>& grads,
               AdamState& state, double lr, const AdamConfig& cfg) {
    if (params.size() != grads.size())
        throw ShapeError("adam_step: params and grads differ in count");
    if (lr < 0.0) throw NumericError("adam_step: lr must be non-negative");
    state.first_moment.resize(params.size());
    state.second_moment.resize(params.size());

    state.step_count += 1;
    double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step_count));
    double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step_count));

    for (std::size_t p = 0; p < params.size(); ++p) {
        auto& param = params[p].mutable_data();
        const auto& grad = grads[p];
        if (grad.size() != param.size())
            throw ShapeError("adam_step: grad shape mismatch for parameter " + std::to_string(p) +
                             " (" + std::to_string(grad.size()) + " vs " +
                             std::to_string(param.size()) + " elements)");
        auto& m = state.first_moment[p];
        auto& v = state.second_moment[p];
        if (m.empty()) m.assign(param.size(), 0.0);
        if (v.empty()) v.assign(param.size(), 0.0);
        if (m.size() != param.size() || v.size() != param.size())
            throw ShapeError("adam_step: moment buffers not congruent with parameter " +
                             std::to_string(p));
        for (std::size_t i = 0; i < param.size(); ++i) {
            double g = grad[i] + cfg.weight_decay * param[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            double m_hat = m[i] / bc1;
            double v_hat = v[i] / bc2;
            param[i] -= lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
        }
    }
}

void adam_step(std::vector<Tensor>& params, AdamState& state, double lr,
               const AdamConfig& cfg) {
    std::vector<std::vector<double>> grads;
    grads.reserve(params.size());
    for (const auto& p : params)
        grads.push_back(p.has_grad() ? p.grad() : std::vector<double>(p.numel(), 0.0));
    adam_step(params, grads, state, lr, cfg);
}

double lr_at(long step, const LrSchedule& schedule) {
    if (schedule.warmup_steps >= schedule.total_steps)
        throw NumericError("lr schedule: warmup_steps must be below total_steps");
    if (schedule.final_lr > schedule.peak_lr)
        throw NumericError("lr schedule: final_lr must not exceed peak_lr");
    if (step <= 0) return 0.0;
    if (step >= schedule.total_steps) return schedule.final_lr;
    if (step <= schedule.warmup_steps) {
        return schedule.peak_lr * static_cast<double>(step) /
               static_cast<double>(schedule.warmup_steps);
    }
    double frac = static_cast<double>(step - schedule.warmup_steps) /
                  static_cast<double>(schedule.total_steps - schedule.warmup_steps);
    return schedule.peak_lr + (schedule.final_lr - schedule.peak_lr) * frac;
}

}  // namespace bifrec
