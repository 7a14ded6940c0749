#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bnfair/tensor.hpp"

namespace bnfair {

enum class OptimizerArm { SgdMomentum, Adaptive };

const char* optimizer_arm_name(OptimizerArm arm);
OptimizerArm parse_optimizer_arm(const std::string& name);

struct OptimizerConfig {
    OptimizerArm arm = OptimizerArm::SgdMomentum;
    double momentum = 0.9;      // SGD arm
    double weight_decay = 0.0;  // classic L2, folded into the update
    double rho = 0.99;          // adaptive arm second-moment decay
    double eps = 1e-8;          // adaptive arm denominator floor
};

/// SGD with momentum:   v <- momentum*v + g + wd*theta;  theta <- theta - lr*v
/// Adaptive (momentum-free, per-parameter second-moment scaling):
///   g' <- g + wd*theta;  s <- rho*s + (1-rho)*g'^2;  theta <- theta - lr*g'/(sqrt(s)+eps)
class Optimizer {
public:
    Optimizer(std::vector<Tensor> params, OptimizerConfig config);

    /// Applies one update using each parameter's current gradient. Parameters
    /// without an allocated gradient are skipped (they received no gradient
    /// this step).
    void step(double lr);
    void zero_grad();

    std::uint64_t step_count() const { return step_count_; }
    const std::vector<std::vector<double>>& slot_buffers() const { return slots_; }

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> slots_;  // momentum or second moment
    OptimizerConfig config_;
    std::uint64_t step_count_ = 0;
};

enum class ScheduleKind { Constant, WarmupCosine, OneCycle };

const char* schedule_kind_name(ScheduleKind kind);
ScheduleKind parse_schedule_kind(const std::string& name);

/// Learning-rate schedule over a fixed horizon.
///   Constant:      base everywhere (warmup ramp still applies if set).
///   WarmupCosine:  linear ramp base*(step+1)/warmup, then cosine decay to 0
///                  (strictly positive for every step < total).
///   OneCycle:      ramp base/25 -> base over the up phase, cosine down to
///                  base/1e4. Up phase = max(warmup, total/10).
struct LrSchedule {
    double base = 0.1;
    std::size_t warmup_steps = 0;
    std::size_t total_steps = 1;
    ScheduleKind kind = ScheduleKind::WarmupCosine;

    double at(std::size_t step) const;
};

inline double lr_at(const LrSchedule& schedule, std::size_t step) { return schedule.at(step); }

}  // namespace bnfair
