#include "dflow/sampler.hpp"

#include <cmath>
#include <cstdio>
#include <ostream>

#include "dflow/errors.hpp"
#include "dflow/ratio.hpp"

namespace dflow {

SequenceState draw_source(const ProbabilityPath& path, int length, RandomStream& rng) {
  SequenceState x(length, 0);
  const auto q0 = path.source_probs();
  for (int d = 0; d < length; ++d) x[d] = sample_categorical(q0, rng.uniform());
  return x;
}

StepResult euler_step(const SequenceState& x, int k, const PosteriorModel& policy,
                      const ConditionalRate& cr, const RolloutConfig& cfg, RandomStream& rng,
                      int prompt) {
  const TimeGrid& grid = cfg.grid;
  if (k < 0 || k >= grid.steps()) throw ArgumentError("euler_step: step index out of range");
  if (cfg.n_mc < 1) throw ConfigError("euler_step: n_mc must be >= 1");
  if (policy.spec().vocab_size != cr.vocab_size())
    throw ConfigError("policy and rate disagree on the vocabulary");
  const int D = x.length(), S = cr.vocab_size(), n = cfg.n_mc;
  const double t = grid[k], h = grid.step_size(k);

  StepResult out;
  ForwardPass pass = policy.forward(x, t, prompt);
  const RateSlice slice = cr.at(t);
  StepCache& cache = out.cache;
  cache.n = n;
  cache.length = D;
  cache.t = t;
  cache.t_next = grid[k + 1];
  cache.samples.resize(static_cast<std::size_t>(D) * n);
  cache.old_logp = std::move(pass.logp);

  out.next = x;
  std::vector<double> qbar(S), row(S);
  for (int d = 0; d < D; ++d) {
    const Token cur = x[d];
    auto lp = cache.old_logp.row(d);
    std::fill(qbar.begin(), qbar.end(), 0.0);
    for (int j = 0; j < n; ++j) {
      const Token x1 = sample_log_categorical(lp, rng.uniform());
      cache.samples[static_cast<std::size_t>(d) * n + j] = x1;
      slice.row(cur, x1, row);
      for (Token z = 0; z < S; ++z)
        if (z != cur) qbar[z] += row[z];
    }
    double lambda = 0.0;
    for (Token z = 0; z < S; ++z) {
      qbar[z] /= n;
      if (z != cur) lambda += qbar[z];
    }
    const double u = rng.uniform();
    const double stay = std::exp(-h * lambda);
    if (lambda <= 0.0 || u < stay) continue;
    const double jump = -std::expm1(-h * lambda);
    double cum = stay;
    Token chosen = -1;
    for (Token z = 0; z < S; ++z) {
      if (z == cur || qbar[z] <= 0.0) continue;
      cum += jump * qbar[z] / lambda;
      chosen = z;
      if (u < cum) break;
    }
    out.next[d] = chosen;
  }
  fill_log_weights(cache, slice, x, out.next);
  return out;
}

Trajectory rollout(int prompt, const PosteriorModel& policy, const ConditionalRate& cr,
                   const RolloutConfig& cfg, RandomStream& rng) {
  const int D = policy.spec().length;
  Trajectory traj;
  traj.prompt = prompt;
  traj.cache.n = cfg.n_mc;
  traj.states.reserve(cfg.grid.steps() + 1);
  traj.states.push_back(draw_source(cr.path(), D, rng));
  for (int k = 0; k < cfg.grid.steps(); ++k) {
    StepResult step = euler_step(traj.states.back(), k, policy, cr, cfg, rng, prompt);
    traj.states.push_back(std::move(step.next));
    traj.cache.steps.push_back(std::move(step.cache));
  }
  return traj;
}

std::vector<Trajectory> group_rollout(int prompt, const PosteriorModel& policy,
                                      const ConditionalRate& cr, const RolloutConfig& cfg,
                                      RandomStream& rng, const RewardFn& reward) {
  if (cfg.group_size < 2) throw ArgumentError("group_rollout: group size must be >= 2");
  const std::uint64_t base = rng.next_u64();
  std::vector<Trajectory> group;
  group.reserve(cfg.group_size);
  for (int i = 0; i < cfg.group_size; ++i) {
    RandomStream member(derive_seed(base, {static_cast<std::uint64_t>(prompt),
                                           static_cast<std::uint64_t>(i)}));
    group.push_back(rollout(prompt, policy, cr, cfg, member));
  }
  for (auto& traj : group) traj.reward = reward(prompt, traj.terminal());
  return group;
}

void write_trajectories(std::ostream& out, std::span<const Trajectory> trajs) {
  out << "# dflow-trajectory v1\n";
  out << "# traj\tprompt\tstep\tt\tstate\tsamples\treward\n";
  char buf[64];
  for (std::size_t i = 0; i < trajs.size(); ++i) {
    const Trajectory& tr = trajs[i];
    for (std::size_t k = 0; k < tr.states.size(); ++k) {
      const bool last = k + 1 == tr.states.size();
      const double t = last ? 1.0 : tr.cache.steps[k].t;
      std::snprintf(buf, sizeof buf, "%.17g", t);
      out << i << '\t' << tr.prompt << '\t' << k << '\t' << buf << '\t'
          << format_tokens(tr.states[k].view()) << '\t';
      if (last) {
        out << '-' << '\t';
        if (tr.reward) {
          std::snprintf(buf, sizeof buf, "%.17g", *tr.reward);
          out << buf;
        }
      } else {
        const StepCache& c = tr.cache.steps[k];
        for (int d = 0; d < c.length; ++d) {
          if (d) out << ';';
          out << format_tokens(c.samples_at(d));
        }
        out << '\t';
      }
      out << '\n';
    }
  }
}

}  // namespace dflow
