#include "bnfair/optimizer.hpp"

#include <cmath>
#include <stdexcept>

namespace bnfair {

const char* optimizer_arm_name(OptimizerArm arm) {
    return arm == OptimizerArm::SgdMomentum ? "sgd-momentum" : "adaptive";
}

OptimizerArm parse_optimizer_arm(const std::string& name) {
    if (name == "sgd-momentum") return OptimizerArm::SgdMomentum;
    if (name == "adaptive") return OptimizerArm::Adaptive;
    throw std::invalid_argument("unknown optimizer arm: " + name);
}

Optimizer::Optimizer(std::vector<Tensor> params, OptimizerConfig config)
    : params_(std::move(params)), config_(config) {
    slots_.reserve(params_.size());
    for (const auto& p : params_) {
        slots_.emplace_back(p.size(), 0.0);
    }
}

void Optimizer::step(double lr) {
    for (std::size_t pi = 0; pi < params_.size(); ++pi) {
        Tensor& p = params_[pi];
        if (!p.has_grad()) {
            continue;
        }
        const std::vector<double>& g = p.grad();
        std::vector<double>& slot = slots_[pi];
        std::vector<double>& theta = p.values();
        if (g.size() != theta.size() || slot.size() != theta.size()) {
            throw TensorError("optimizer: parameter/gradient/slot shape mismatch");
        }
        if (config_.arm == OptimizerArm::SgdMomentum) {
            for (std::size_t i = 0; i < theta.size(); ++i) {
                slot[i] = config_.momentum * slot[i] + g[i] + config_.weight_decay * theta[i];
                theta[i] -= lr * slot[i];
            }
        } else {
            for (std::size_t i = 0; i < theta.size(); ++i) {
                const double gd = g[i] + config_.weight_decay * theta[i];
                slot[i] = config_.rho * slot[i] + (1.0 - config_.rho) * gd * gd;
                theta[i] -= lr * gd / (std::sqrt(slot[i]) + config_.eps);
            }
        }
    }
    ++step_count_;
}

void Optimizer::zero_grad() {
    for (auto& p : params_) {
        p.zero_grad();
    }
}

const char* schedule_kind_name(ScheduleKind kind) {
    switch (kind) {
        case ScheduleKind::Constant: return "constant";
        case ScheduleKind::WarmupCosine: return "warmup-cosine";
        case ScheduleKind::OneCycle: return "one-cycle";
    }
    return "?";
}

ScheduleKind parse_schedule_kind(const std::string& name) {
    if (name == "constant") return ScheduleKind::Constant;
    if (name == "warmup-cosine") return ScheduleKind::WarmupCosine;
    if (name == "one-cycle") return ScheduleKind::OneCycle;
    throw std::invalid_argument("unknown schedule kind: " + name);
}

double LrSchedule::at(std::size_t step) const {
    if (step >= total_steps) {
        throw std::out_of_range("lr_at: step outside the schedule horizon");
    }
    constexpr double kPi = 3.14159265358979323846;
    switch (kind) {
        case ScheduleKind::Constant: {
            if (step < warmup_steps) {
                return base * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
            }
            return base;
        }
        case ScheduleKind::WarmupCosine: {
            if (step < warmup_steps) {
                return base * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
            }
            const double span = static_cast<double>(total_steps - warmup_steps);
            const double progress = static_cast<double>(step - warmup_steps) / span;
            return base * 0.5 * (1.0 + std::cos(kPi * progress));
        }
        case ScheduleKind::OneCycle: {
            const std::size_t up = std::max<std::size_t>(
                1, std::max(warmup_steps, total_steps / 10));
            const double lo = base / 25.0;
            const double final_lr = base / 1e4;
            if (step < up) {
                return lo + (base - lo) * static_cast<double>(step + 1) / static_cast<double>(up);
            }
            if (up >= total_steps) {
                return base;
            }
            const double span = static_cast<double>(total_steps - up);
            const double progress = static_cast<double>(step - up) / span;
            return final_lr + (base - final_lr) * 0.5 * (1.0 + std::cos(kPi * progress));
        }
    }
    throw std::logic_error("lr_at: unreachable");
}

}  // namespace bnfair
