#pragma once

#include <limits>
#include <span>
#include <vector>

#include "dflow/ratio.hpp"

namespace dflow {

// (r - mean) / max(std, 1e-8) with the population standard deviation.
// Throws ArgumentError for fewer than two rewards.
std::vector<double> advantages(std::span<const double> rewards);

inline constexpr double kAdvantageEps = 1e-8;

struct ClipConfig {
  double eps_low = 1e-3;
  double eps_high = 1.5e-3;
  double beta_kl = 0.0;
  bool token_level_kl = false;

  // Infinite bounds: clip() becomes the identity.
  static ClipConfig disabled() {
    const double inf = std::numeric_limits<double>::infinity();
    return {inf, inf, 0.0, false};
  }
  void validate() const;
};

// Per-position log-ratios indexed [trajectory][step][position].
using LogRatioGrid = std::vector<std::vector<std::vector<double>>>;

LogRatioGrid to_log_ratio_grid(const std::vector<std::vector<StepRatioEstimate>>& ratios);

// Value of an objective that is maximized, plus its gradient with respect to
// the per-position log-ratios it was built from.
struct ObjectiveValue {
  double value = 0.0;
  double surrogate = 0.0;      // clipped policy term only
  double kl = 0.0;             // mean KL estimate (before beta)
  double clip_fraction = 0.0;  // share of terms whose gradient was clipped away
  double ratio_dispersion = 0.0;  // population std of the sequence-level ratios
  std::vector<std::vector<double>> contributions;  // [i][k], already including -beta KL
  LogRatioGrid dlog_ratio;  // d value / d log rho (current vs old)
  LogRatioGrid dlog_kl;     // d value / d log rho (current vs reference); empty if beta = 0
  int best = -1;            // preference pair (dFlowDPO only)
  int worst = -1;
};

// (1/G) sum_i (1/K) sum_k [ min(g A_i, clip(g, 1-eps_low, 1+eps_high) A_i) - beta KL_ik ]
// with g = exp(mean_d log rho_ikd). kl_refs holds log-ratios of the current
// policy against the reference policy on the same cached samples.
ObjectiveValue dflow_grpo(std::span<const double> adv, const LogRatioGrid& log_ratios,
                          const ClipConfig& clip, const LogRatioGrid* kl_refs = nullptr);

// Mean-field baselines on terminal token ratios at the source state,
// indexed [trajectory][position]. diffu-GRPO clips every token ratio and
// averages; diffu-GSPO clips the geometric mean.
ObjectiveValue diffu_grpo(std::span<const double> adv,
                          const std::vector<std::vector<double>>& token_log_ratios,
                          const ClipConfig& clip,
                          const std::vector<std::vector<double>>* kl_refs = nullptr);
ObjectiveValue diffu_gspo(std::span<const double> adv,
                          const std::vector<std::vector<double>>& token_log_ratios,
                          const ClipConfig& clip,
                          const std::vector<std::vector<double>>* kl_refs = nullptr);

// Highest- and lowest-reward members; ties go to the smaller index.
std::pair<int, int> preference_pair(std::span<const double> rewards);

// value = (1/K) sum_k log sigma(beta K [Delta+_k - Delta-_k]), the negated
// dFlowDPO loss, where Delta_k is the step log transition ratio summed over
// positions. beta <= 0 selects the default 100 / K.
ObjectiveValue dflow_dpo(std::span<const double> rewards, const LogRatioGrid& log_ratios,
                         double beta = 0.0);

}  // namespace dflow
