#pragma once

#include <span>
#include <vector>

#include "dflow/policy.hpp"
#include "dflow/state.hpp"

namespace dflow {

// Monte-Carlo record of one Euler step, reused for ratio estimation.
struct StepCache {
  int n = 0;  // samples per position
  int length = 0;
  double t = 0.0;
  double t_next = 0.0;
  std::vector<Token> samples;       // [d * n + j] = X_{j,1}^d ~ p^{old}(. | x_{t_k})
  LogProbs old_logp;                // old policy at (x_{t_k}, t_k), all tokens
  std::vector<double> log_weights;  // [d * n + j] = log w~ for the realized move

  std::span<const Token> samples_at(int d) const {
    return {samples.data() + static_cast<std::size_t>(d) * n, static_cast<std::size_t>(n)};
  }
  std::span<const double> log_weights_at(int d) const {
    return {log_weights.data() + static_cast<std::size_t>(d) * n, static_cast<std::size_t>(n)};
  }
};

struct McCache {
  int n = 0;
  std::vector<StepCache> steps;
};

}  // namespace dflow
