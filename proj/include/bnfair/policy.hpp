#pragma once

#include <array>
#include <string>

namespace bnfair {

/// The six tuning regimes. All of them train the linear task head; they
/// differ in how the backbone is treated.
enum class TuningPolicy {
    Frozen,             // backbone fully frozen, BN buffers frozen too
    BNStats,            // backbone frozen, BN buffers keep updating
    BNStatsAffine,      // BNStats + BN gamma/beta trainable
    BNStatsSkip,        // BNStats + projection-skip branches trainable
    FullFT,             // everything trainable
    SupervisedScratch,  // FullFT from a fresh initialization (no pretraining)
};

inline constexpr std::array<TuningPolicy, 6> kAllPolicies = {
    TuningPolicy::Frozen,       TuningPolicy::BNStats, TuningPolicy::BNStatsAffine,
    TuningPolicy::BNStatsSkip,  TuningPolicy::FullFT,  TuningPolicy::SupervisedScratch,
};

const char* policy_name(TuningPolicy policy);
TuningPolicy parse_policy(const std::string& name);

/// Display label used in tables ("Frozen", "BN Stats", ...).
const char* policy_label(TuningPolicy policy);

}  // namespace bnfair
