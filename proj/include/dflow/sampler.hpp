#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "dflow/cache.hpp"
#include "dflow/paths.hpp"
#include "dflow/policy.hpp"
#include "dflow/random.hpp"
#include "dflow/rates.hpp"

namespace dflow {

struct RolloutConfig {
  TimeGrid grid = TimeGrid::uniform(8);
  int n_mc = 8;
  std::uint64_t seed = 0;
  int group_size = 8;
};

struct Trajectory {
  int prompt = 0;
  std::vector<SequenceState> states;  // K + 1 states at grid times
  McCache cache;                      // K step caches
  std::optional<double> reward;

  const SequenceState& terminal() const { return states.back(); }
  int steps() const { return static_cast<int>(cache.steps.size()); }
};

struct StepResult {
  SequenceState next;
  StepCache cache;
};

using RewardFn = std::function<double(int prompt, const SequenceState& terminal)>;

// x_0 ~ q_0 independently per position.
SequenceState draw_source(const ProbabilityPath& path, int length, RandomStream& rng);

// One always-valid Euler step from t_k to t_{k+1}. Each position draws n_mc
// posterior samples, averages the conditional rate over them, stays with
// probability exp(-h lambda) and otherwise jumps proportionally to the
// averaged rate. One uniform per position selects against the cumulative
// kernel with the stay mass first.
StepResult euler_step(const SequenceState& x, int k, const PosteriorModel& policy,
                      const ConditionalRate& cr, const RolloutConfig& cfg, RandomStream& rng,
                      int prompt = 0);

Trajectory rollout(int prompt, const PosteriorModel& policy, const ConditionalRate& cr,
                   const RolloutConfig& cfg, RandomStream& rng);

// G trajectories on private sub-streams keyed by (stream base, prompt, index),
// rewards filled on terminal states. Requires G >= 2.
std::vector<Trajectory> group_rollout(int prompt, const PosteriorModel& policy,
                                      const ConditionalRate& cr, const RolloutConfig& cfg,
                                      RandomStream& rng, const RewardFn& reward);

// Line-delimited dump, one step per line:
//   traj  prompt  step  t  state  samples  reward
// state is comma-separated; samples are comma-separated per position with
// positions separated by ';' ("-" on the terminal line); reward is only
// present on the terminal line.
void write_trajectories(std::ostream& out, std::span<const Trajectory> trajs);

}  // namespace dflow
