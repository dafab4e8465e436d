#pragma once

#include <span>
#include <vector>

#include "dflow/cache.hpp"
#include "dflow/paths.hpp"
#include "dflow/policy.hpp"
#include "dflow/rates.hpp"

namespace dflow {

// Rate-dependent weight w~ of a single posterior sample x1 for the token
// move x -> x_next over a step of length h:
//   stay: exp(-h lambda)
//   move: Q(x, x_next | x1) / lambda * (1 - exp(-h lambda))
// A move with lambda = 0 is impossible and weighs 0.
double unnormalized_weight(const RateSlice& slice, Token x, Token x_next, Token x1, double h);
double log_unnormalized_weight(const RateSlice& slice, Token x, Token x_next, Token x1,
                               double h);

// Unnormalized and self-normalized weights (hat w averages to 1 per position).
struct WeightTable {
  int length = 0;
  int n = 0;
  std::vector<double> unnormalized;  // [d * n + j]
  std::vector<double> normalized;    // [d * n + j]
};

WeightTable weight_table(const StepCache& cache);

// Exact per-token Euler transition probability under a posterior row
// (log-probabilities over S): sum over x1 of p(x1) w~(x1).
double exact_token_transition_prob(std::span<const double> posterior_logp, Token x,
                                   Token x_next, const RateSlice& slice, double h);
double exact_token_transition_prob(const PosteriorModel& policy, const SequenceState& x_k,
                                   int d, Token x_next, const ConditionalRate& cr,
                                   double t_k, double t_next, int prompt = 0);

// Per-step ratio estimate, carried in log space.
struct StepRatioEstimate {
  int length = 0;
  int n = 0;
  std::vector<double> log_ratio;  // per position
  double mean_log_ratio = 0.0;    // log of the geometric-mean ratio [r]^{1/D}
  // d log r^d / d logp_num(X_{j}^d), [d * n + j]. Zero for degenerate positions.
  std::vector<double> sample_grad;
  int degenerate = 0;  // positions whose cached weights were all zero

  double geometric_mean() const;
  double total_log_ratio() const;
};

struct RatioOptions {
  // Throw DegenerateWeightError instead of contributing log-ratio 0.
  bool strict = false;
  // One-time stderr note on the first degenerate position.
  bool warn = true;
};

// Self-normalized estimate of p_num / p_den for the cached move using the
// cached samples and their rate-dependent weights. Samples came from the old
// policy (cache.old_logp). With den == nullptr the denominator is the old
// policy itself, which is the standard policy ratio.
StepRatioEstimate ratio_estimate(const StepCache& cache, const LogProbs& num,
                                 const LogProbs* den = nullptr, RatioOptions options = {});

// Same estimate with weights recomputed from the rate for (x_k -> x_next).
StepRatioEstimate ratio_estimate(const StepCache& cache, const LogProbs& new_logp,
                                 const ConditionalRate& cr, double t_k, double t_next,
                                 const SequenceState& x_k, const SequenceState& x_next,
                                 RatioOptions options = {});

// Fills cache.log_weights for the realized move x_k -> x_next.
void fill_log_weights(StepCache& cache, const RateSlice& slice, const SequenceState& x_k,
                      const SequenceState& x_next);

// Upstream gradient w.r.t. the numerator log-probabilities given
// d(objective)/d(log r^d) per position.
void accumulate_logprob_grad(const StepRatioEstimate& est, const StepCache& cache,
                             std::span<const double> dlog_ratio, LogProbs& upstream);

// Closed-form mixture-path ratio: moved tokens contribute
// the posterior ratio at the new token, stayed tokens contribute
// (p + (1-p) g) / (p_old + (1-p_old) g) with g = exp(-h kappa'/(1-kappa)).
// Returns per-position log factors.
std::vector<double> mixture_closed_form_log_ratios(const LogProbs& new_logp,
                                                   const LogProbs& old_logp,
                                                   const SequenceState& x_k,
                                                   const SequenceState& x_next, double t_k,
                                                   double t_next, const Scheduler& scheduler);
double mixture_closed_form_ratio(const LogProbs& new_logp, const LogProbs& old_logp,
                                 const SequenceState& x_k, const SequenceState& x_next,
                                 double t_k, double t_next, const Scheduler& scheduler);

// KL estimators from per-position ratios rho_d:
//   sequence: [r]^{1/D} - log [r]^{1/D} - 1
//   token:    (1/D) sum_d (rho_d - log rho_d - 1)   (upper bound of the above)
double kl_estimate(const StepRatioEstimate& ratio, bool token_level);
double kl_from_log_ratios(std::span<const double> log_ratio, bool token_level);
// d KL / d log rho_d for the same estimators.
void kl_gradient(std::span<const double> log_ratio, bool token_level, std::span<double> out);

}  // namespace dflow
