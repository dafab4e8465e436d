#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace dflow {

struct CheckResult {
  std::string name;
  double measured = 0.0;
  double tolerance = 0.0;
  bool pass = false;
  std::string detail;
};

// "name<TAB>measured<TAB>tolerance<TAB>PASS|FAIL[<TAB>detail]"
std::string format_check(const CheckResult& c);

// Each check compares engine output against the oracle library or an
// algebraic identity. Seeds fix every random configuration.
CheckResult check_rate_properties(std::uint64_t seed, int draws = 1000);
CheckResult check_transition_stochasticity(std::uint64_t seed, int configs = 200);
CheckResult check_engine_vs_oracle_transition(std::uint64_t seed, int configs = 200);
CheckResult check_dual_path_enumeration(std::uint64_t seed, int configs = 200);
CheckResult check_weight_normalization(std::uint64_t seed, int configs = 100);
CheckResult check_identity_ratio(std::uint64_t seed);
CheckResult check_single_sample_weight(std::uint64_t seed);
CheckResult check_mixture_closed_form(std::uint64_t seed);
CheckResult check_masked_stay_factor(std::uint64_t seed);
// measured = number of strict RMS decreases along n = 1, 4, 16, exhaustive
// (pass needs 3); detail lists the RMS values.
CheckResult check_estimator_consistency(std::uint64_t seed, int configs = 200);
CheckResult check_chain_fidelity();
CheckResult check_sampler_marginals(std::uint64_t seed, int trajectories = 200000);
CheckResult check_gradient_fd(std::uint64_t seed);
CheckResult check_weighted_score_form(std::uint64_t seed);
CheckResult check_kl_properties(std::uint64_t seed, int draws = 1000);
CheckResult check_mean_field_single_token(std::uint64_t seed, int draws = 200);

// All of the above. quick shrinks the sampler check to 20000 trajectories.
std::vector<CheckResult> run_verify_suite(std::uint64_t seed, bool quick = false);

}  // namespace dflow
