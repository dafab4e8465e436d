#include "dflow/verify.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "dflow/bridge.hpp"
#include "dflow/errors.hpp"
#include "dflow/objectives.hpp"
#include "dflow/oracle/oracle.hpp"
#include "dflow/ratio.hpp"
#include "dflow/sampler.hpp"
#include "dflow/training.hpp"

namespace dflow {
namespace {

CheckResult result(const std::string& name, double measured, double tol, bool pass,
                   std::string detail = "") {
  return {name, measured, tol, pass, std::move(detail)};
}

// Random mixture or metric path over at most max_vocab tokens (mask included).
ProbabilityPath random_path(RandomStream& rng, int max_vocab, int kind = -1) {
  const bool metric = kind < 0 ? rng.uniform() < 0.5 : kind == 1;
  if (metric) {
    const int S = 2 + rng.uniform_int(max_vocab - 1);
    if (rng.uniform() < 0.5)
      return ProbabilityPath::metric(Vocabulary(S), Scheduler::metric(),
                                     TokenMetric::absolute_difference(S));
    std::vector<double> table(S * S, 0.0);
    for (int a = 0; a < S; ++a)
      for (int b = a + 1; b < S; ++b) table[a * S + b] = table[b * S + a] = 0.2 + 2.0 * rng.uniform();
    return ProbabilityPath::metric(Vocabulary(S), Scheduler::metric(),
                                   TokenMetric(S, std::move(table)));
  }
  const bool masked = rng.uniform() < 0.5;
  const int S = (masked ? 3 : 2) + rng.uniform_int(max_vocab - (masked ? 2 : 1));
  const double shape = rng.uniform();
  const Scheduler k = shape < 1.0 / 3 ? Scheduler::linear()
                      : shape < 2.0 / 3 ? Scheduler::cosine()
                                        : Scheduler::polynomial(0.5 + 2.5 * rng.uniform());
  if (masked) return ProbabilityPath::mixture(Vocabulary(S, S - 1), k, SourceDistribution::mask());
  return ProbabilityPath::mixture(Vocabulary(S), k, SourceDistribution::uniform());
}

// Random posterior row over the path's vocabulary; zero on the mask.
LogProbs random_posterior(RandomStream& rng, const ProbabilityPath& path, int length,
                          double spread = 1.5) {
  const int S = path.vocab().size();
  LogProbs lp(length, S);
  for (int d = 0; d < length; ++d) {
    auto row = lp.row(d);
    double mx = -INFINITY;
    for (int x = 0; x < S; ++x) {
      row[x] = path.vocab().is_mask(x) ? -INFINITY : rng.normal(0.0, spread);
      mx = std::max(mx, row[x]);
    }
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    for (double& v : row) v -= mx + std::log(z);
  }
  return lp;
}

Token random_token(RandomStream& rng, int S) { return rng.uniform_int(S); }

Token random_target(RandomStream& rng, const ProbabilityPath& path) {
  const int live = path.vocab().size() - (path.vocab().has_mask() ? 1 : 0);
  return rng.uniform_int(live);  // the mask is always the last id
}

// t_k in [0, 0.95] and h in (0, 1 - t_k].
std::pair<double, double> random_step(RandomStream& rng) {
  const double t = 0.95 * rng.uniform();
  const double h = (1.0 - t) * (0.02 + 0.98 * rng.uniform());
  return {t, h};
}

std::unique_ptr<PosteriorModel> random_model(const ModelSpec& spec, RandomStream& rng,
                                             double scale = 1.0) {
  auto m = make_model(spec, rng.next_u64());
  for (double& p : m->params()) p = rng.normal(0.0, scale);
  return m;
}

ModelSpec spec_for(const ProbabilityPath& path, int length, int buckets,
                   ModelKind kind = ModelKind::kTabular, int prompts = 1) {
  ModelSpec s;
  s.kind = kind;
  s.vocab_size = path.vocab().size();
  s.mask = path.vocab().mask();
  s.length = length;
  s.num_prompts = prompts;
  s.time_buckets = buckets;
  s.hidden = kind == ModelKind::kMlp ? 6 : 0;
  return s;
}

std::string join(const std::vector<double>& v) {
  std::ostringstream out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4g", v[i]);
    out << (i ? "," : "") << buf;
  }
  return out.str();
}

double norm2(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace

std::string format_check(const CheckResult& c) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%s\t%.6g\t%.3g\t%s", c.name.c_str(), c.measured, c.tolerance,
                c.pass ? "PASS" : "FAIL");
  std::string out = buf;
  if (!c.detail.empty()) out += "\t" + c.detail;
  return out;
}

CheckResult check_rate_properties(std::uint64_t seed, int draws) {
  RandomStream rng(derive_seed(seed, {1}));
  double worst_sum = 0.0, min_off = INFINITY;
  std::vector<double> row;
  for (int i = 0; i < draws; ++i) {
    const ProbabilityPath path = random_path(rng, 8, i % 2);
    const ConditionalRate cr(path);
    const int S = path.vocab().size();
    const double t = 0.99 * rng.uniform();
    const Token x = random_token(rng, S), x1 = random_target(rng, path);
    row.assign(S, 0.0);
    cr.at(t).row(x, x1, row);
    double sum = 0.0;
    for (int z = 0; z < S; ++z) {
      sum += row[z];
      if (z != x) min_off = std::min(min_off, row[z]);
    }
    worst_sum = std::max(worst_sum, std::abs(sum));
  }
  const bool pass = min_off >= 0.0 && worst_sum <= 1e-10;
  return result("rate_properties", worst_sum, 1e-10, pass,
                "min_offdiag=" + std::to_string(min_off));
}

CheckResult check_transition_stochasticity(std::uint64_t seed, int configs) {
  RandomStream rng(derive_seed(seed, {2}));
  double worst = 0.0;
  for (int i = 0; i < configs; ++i) {
    const ProbabilityPath path = random_path(rng, 5);
    const ConditionalRate cr(path);
    const int S = path.vocab().size();
    const LogProbs lp = random_posterior(rng, path, 1);
    const auto [t, h] = random_step(rng);
    const Token x = random_token(rng, S);
    const RateSlice slice = cr.at(t);
    double total = 0.0;
    for (Token y = 0; y < S; ++y) total += exact_token_transition_prob(lp.row(0), x, y, slice, h);
    worst = std::max(worst, std::abs(total - 1.0));
  }
  return result("transition_stochasticity", worst, 1e-12, worst <= 1e-12);
}

CheckResult check_engine_vs_oracle_transition(std::uint64_t seed, int configs) {
  RandomStream rng(derive_seed(seed, {3}));
  double worst = 0.0;
  for (int i = 0; i < configs; ++i) {
    const ProbabilityPath path = random_path(rng, 5);
    const ConditionalRate cr(path);
    const int S = path.vocab().size();
    const LogProbs lp = random_posterior(rng, path, 1);
    const auto [t, h] = random_step(rng);
    const Token x = random_token(rng, S);
    const oracle::TransitionTable tt =
        oracle::enumerate_transition(to_oracle(path), to_table(lp), {x}, t, h);
    const RateSlice slice = cr.at(t);
    for (Token y = 0; y < S; ++y)
      worst = std::max(worst, std::abs(exact_token_transition_prob(lp.row(0), x, y, slice, h) -
                                       tt.rows[0][y]));
  }
  return result("engine_vs_oracle_transition", worst, 1e-13, worst <= 1e-13);
}

CheckResult check_dual_path_enumeration(std::uint64_t seed, int configs) {
  RandomStream rng(derive_seed(seed, {4}));
  double worst = 0.0;
  for (int i = 0; i < configs; ++i) {
    const ProbabilityPath path = random_path(rng, 5);
    const int S = path.vocab().size();
    const int D = 1 + rng.uniform_int(3);
    const oracle::Table post = to_table(random_posterior(rng, path, D));
    const auto [t, h] = random_step(rng);
    std::vector<int> x(D);
    for (int& v : x) v = random_token(rng, S);
    const oracle::PathSpec p = to_oracle(path);
    worst = std::max(worst, oracle::max_abs_gap(oracle::enumerate_transition(p, post, x, t, h),
                                                oracle::enumerate_transition_complement(p, post, x, t, h)));
  }
  return result("dual_path_enumeration", worst, 1e-14, worst <= 1e-14);
}

CheckResult check_weight_normalization(std::uint64_t seed, int configs) {
  RandomStream rng(derive_seed(seed, {5}));
  double worst = 0.0;
  for (int i = 0; i < configs; ++i) {
    const ProbabilityPath path = random_path(rng, 5);
    const ConditionalRate cr(path);
    const int S = path.vocab().size();
    const LogProbs lp = random_posterior(rng, path, 1);
    const auto [t, h] = random_step(rng);
    const Token x = random_token(rng, S);
    const RateSlice slice = cr.at(t);
    std::vector<double> law(S);
    for (Token y = 0; y < S; ++y) law[y] = exact_token_transition_prob(lp.row(0), x, y, slice, h);
    const Token y = sample_categorical(law, rng.uniform());
    double expect = 0.0;
    for (Token x1 = 0; x1 < S; ++x1) {
      if (lp.at(0, x1) == -INFINITY) continue;
      expect += std::exp(lp.at(0, x1)) * unnormalized_weight(slice, x, y, x1, h) / law[y];
    }
    worst = std::max(worst, std::abs(expect - 1.0));
  }
  return result("weight_normalization", worst, 1e-12, worst <= 1e-12);
}

CheckResult check_identity_ratio(std::uint64_t seed) {
  RandomStream rng(derive_seed(seed, {6}));
  double worst = 0.0;
  int steps = 0;
  for (int trial = 0; trial < 12; ++trial) {
    const ProbabilityPath path = random_path(rng, 6, trial % 2);
    const ConditionalRate cr(path);
    const int D = 1 + rng.uniform_int(5), K = 2 + rng.uniform_int(6);
    const ModelKind kind = trial % 3 == 2 ? ModelKind::kMlp : ModelKind::kTabular;
    auto model = random_model(spec_for(path, D, K, kind), rng);
    const PolicySnapshot old = snapshot(*model);
    RolloutConfig cfg;
    cfg.grid = TimeGrid::uniform(K);
    cfg.n_mc = 1 + rng.uniform_int(6);
    for (int g = 0; g < 4; ++g) {
      const Trajectory tr = rollout(0, old.model(), cr, cfg, rng);
      for (int k = 0; k < K; ++k) {
        const StepCache& c = tr.cache.steps[k];
        const StepRatioEstimate est =
            ratio_estimate(c, model->log_probs(tr.states[k], c.t, 0));
        for (double v : est.log_ratio) worst = std::max(worst, std::abs(v));
        worst = std::max(worst, std::abs(est.mean_log_ratio));
        ++steps;
      }
    }
  }
  return result("identity_ratio", worst, 1e-15, worst <= 1e-15,
                "steps=" + std::to_string(steps));
}

CheckResult check_single_sample_weight(std::uint64_t seed) {
  RandomStream rng(derive_seed(seed, {7}));
  double worst = 0.0;
  long positions = 0;
  for (int trial = 0; trial < 12; ++trial) {
    const ProbabilityPath path = random_path(rng, 6, trial % 2);
    const ConditionalRate cr(path);
    const int D = 1 + rng.uniform_int(6), K = 2 + rng.uniform_int(6);
    auto model = random_model(spec_for(path, D, K), rng);
    RolloutConfig cfg;
    cfg.grid = TimeGrid::uniform(K);
    cfg.n_mc = 1;
    for (int g = 0; g < 4; ++g) {
      const Trajectory tr = rollout(0, *model, cr, cfg, rng);
      for (const StepCache& c : tr.cache.steps)
        for (double w : weight_table(c).normalized) {
          worst = std::max(worst, std::abs(w - 1.0));
          ++positions;
        }
    }
  }
  return result("single_sample_weight", worst, 0.0, worst == 0.0,
                "positions=" + std::to_string(positions));
}

CheckResult check_mixture_closed_form(std::uint64_t seed) {
  RandomStream rng(derive_seed(seed, {8}));
  double worst = 0.0;
  long cases = 0;
  const std::vector<std::pair<double, double>> times = {{0.0, 0.5}, {0.0, 0.1}, {0.25, 0.25},
                                                        {0.5, 0.3}, {0.7, 0.3}};
  for (bool masked : {true, false})
    for (const Scheduler& k : {Scheduler::linear(), Scheduler::cosine()}) {
      const ProbabilityPath path =
          masked ? ProbabilityPath::mixture(Vocabulary(4, 3), k, SourceDistribution::mask())
                 : ProbabilityPath::mixture(Vocabulary(4), k, SourceDistribution::uniform());
      const oracle::PathSpec p = to_oracle(path);
      const ModelSpec spec = spec_for(path, 2, 4);
      auto fresh = random_model(spec, rng), stale = random_model(spec, rng);
      for (const auto& [t, h] : times)
        for (int a = 0; a < 16; ++a) {
          const SequenceState xk(std::vector<Token>{a / 4, a % 4});
          const LogProbs lp_new = fresh->log_probs(xk, t, 0), lp_old = stale->log_probs(xk, t, 0);
          const auto tn = oracle::enumerate_transition(p, to_table(lp_new), xk.tokens, t, h);
          const auto to = oracle::enumerate_transition(p, to_table(lp_old), xk.tokens, t, h);
          for (int b = 0; b < 16; ++b) {
            const SequenceState xn(std::vector<Token>{b / 4, b % 4});
            const double den = to.joint(xn.tokens);
            if (den == 0.0) continue;
            const double exact = tn.joint(xn.tokens) / den;
            const double closed =
                mixture_closed_form_ratio(lp_new, lp_old, xk, xn, t, t + h, path.scheduler());
            worst = std::max(worst, std::abs(closed - exact) / std::max(1.0, std::abs(exact)));
            ++cases;
          }
        }
    }
  return result("mixture_closed_form", worst, 1e-12, worst <= 1e-12,
                "cases=" + std::to_string(cases));
}

CheckResult check_masked_stay_factor(std::uint64_t seed) {
  RandomStream rng(derive_seed(seed, {9}));
  double worst_closed = 0.0, worst_exact = 0.0;
  for (const Scheduler& k : {Scheduler::linear(), Scheduler::cosine()}) {
    const ProbabilityPath path =
        ProbabilityPath::mixture(Vocabulary(4, 3), k, SourceDistribution::mask());
    const oracle::PathSpec p = to_oracle(path);
    const ModelSpec spec = spec_for(path, 2, 4);
    for (int trial = 0; trial < 50; ++trial) {
      auto fresh = random_model(spec, rng), stale = random_model(spec, rng);
      const auto [t, h] = random_step(rng);
      const SequenceState xk(std::vector<Token>{3, rng.uniform_int(4)});
      SequenceState xn = xk;
      xn[1] = rng.uniform_int(4);
      const LogProbs lp_new = fresh->log_probs(xk, t, 0), lp_old = stale->log_probs(xk, t, 0);
      const auto factors =
          mixture_closed_form_log_ratios(lp_new, lp_old, xk, xn, t, t + h, path.scheduler());
      worst_closed = std::max(worst_closed, std::abs(factors[0]));
      const auto tn = oracle::enumerate_transition(p, to_table(lp_new), xk.tokens, t, h);
      const auto to = oracle::enumerate_transition(p, to_table(lp_old), xk.tokens, t, h);
      worst_exact = std::max(worst_exact, std::abs(tn.rows[0][3] / to.rows[0][3] - 1.0));
    }
  }
  const bool pass = worst_closed == 0.0 && worst_exact <= 1e-12;
  return result("masked_stay_factor", worst_exact, 1e-12, pass,
                "closed_form_log_factor_max=" + std::to_string(worst_closed));
}

CheckResult check_estimator_consistency(std::uint64_t seed, int configs) {
  RandomStream rng(derive_seed(seed, {10}));
  const std::vector<int> sizes = {1, 4, 16};
  std::vector<double> sq(sizes.size() + 1, 0.0);
  for (int i = 0; i < configs; ++i) {
    const ProbabilityPath path = random_path(rng, 5);
    const ConditionalRate cr(path);
    const int S = path.vocab().size();
    const LogProbs lp_old = random_posterior(rng, path, 1);
    LogProbs lp_new = lp_old;
    {
      double mx = -INFINITY;
      auto row = lp_new.row(0);
      for (double& v : row)
        if (std::isfinite(v)) v += rng.normal(0.0, 0.5);
      for (double v : row) mx = std::max(mx, v);
      double z = 0.0;
      for (double v : row) z += std::exp(v - mx);
      for (double& v : row) v -= mx + std::log(z);
    }
    const auto [t, h] = random_step(rng);
    const Token x = random_token(rng, S);
    const oracle::PathSpec p = to_oracle(path);
    const auto t_old = oracle::enumerate_transition(p, to_table(lp_old), {x}, t, h);
    const auto t_new = oracle::enumerate_transition(p, to_table(lp_new), {x}, t, h);
    const Token y = sample_categorical(t_old.rows[0], rng.uniform());
    const double exact = t_new.rows[0][y] / t_old.rows[0][y];
    const RateSlice slice = cr.at(t);
    const SequenceState xs(std::vector<Token>{x}), ys(std::vector<Token>{y});
    for (std::size_t s = 0; s < sizes.size(); ++s) {
      StepCache c;
      c.n = sizes[s];
      c.length = 1;
      c.t = t;
      c.t_next = t + h;
      c.old_logp = lp_old;
      for (int j = 0; j < c.n; ++j) c.samples.push_back(sample_log_categorical(lp_old.row(0), rng.uniform()));
      fill_log_weights(c, slice, xs, ys);
      const StepRatioEstimate est = ratio_estimate(c, lp_new, nullptr, {.strict = false, .warn = false});
      const double err = std::exp(est.log_ratio[0]) - exact;
      sq[s] += err * err;
    }
    const double full = exact_token_transition_prob(lp_new.row(0), x, y, slice, h) /
                        exact_token_transition_prob(lp_old.row(0), x, y, slice, h);
    sq.back() += (full - exact) * (full - exact);
  }
  std::vector<double> rms;
  for (double v : sq) rms.push_back(std::sqrt(v / configs));
  int decreases = 0;
  for (std::size_t i = 0; i + 1 < rms.size(); ++i) decreases += rms[i + 1] < rms[i];
  const int needed = static_cast<int>(rms.size()) - 1;
  return result("estimator_consistency", decreases, needed, decreases == needed,
                "rms(n=1,4,16,exhaustive)=" + join(rms));
}

CheckResult check_chain_fidelity() {
  double worst = 0.0;
  std::vector<double> grid;
  for (int k = 0; k <= 200; ++k) grid.push_back(k / 200.0);
  grid.back() = 1.0;
  struct Case {
    ProbabilityPath path;
    oracle::Table data;
  };
  std::vector<Case> cases;
  cases.push_back({ProbabilityPath::mixture(Vocabulary(4, 3), Scheduler::linear(),
                                            SourceDistribution::mask()),
                   {{0.5, 0.3, 0.2, 0.0}, {0.1, 0.6, 0.3, 0.0}}});
  cases.push_back({ProbabilityPath::mixture(Vocabulary(3), Scheduler::linear(),
                                            SourceDistribution::uniform()),
                   {{0.7, 0.2, 0.1}, {0.2, 0.2, 0.6}}});
  double terminal = 0.0;
  for (const Case& c : cases) {
    const oracle::PathSpec p = to_oracle(c.path);
    const int D = static_cast<int>(c.data.size());
    const auto posterior = [&](const std::vector<int>& x, double t) {
      return oracle::bayes_posterior(p, c.data, x, t);
    };
    const oracle::ChainMarginals m = oracle::compose_chain(p, posterior, grid, D);
    for (std::size_t k = 0; k < grid.size(); ++k)
      for (int d = 0; d < D; ++d)
        worst = std::max(worst, oracle::total_variation(m.position_marginal(k, d),
                                                        oracle::path_marginal(p, c.data[d], grid[k])));
    for (int d = 0; d < D; ++d)
      terminal = std::max(terminal, oracle::total_variation(m.position_marginal(grid.size() - 1, d), c.data[d]));
  }
  const double measured = std::max(worst, terminal);
  return result("chain_fidelity", measured, 5e-3, measured <= 5e-3,
                "terminal_tv=" + std::to_string(terminal));
}

CheckResult check_sampler_marginals(std::uint64_t seed, int trajectories) {
  const int K = 64, S = 3;
  const ProbabilityPath path =
      ProbabilityPath::mixture(Vocabulary(S), Scheduler::linear(), SourceDistribution::uniform());
  const ConditionalRate cr(path);
  const oracle::PathSpec p = to_oracle(path);
  const oracle::Table data = {{0.5, 0.3, 0.2}};
  RolloutConfig cfg;
  cfg.grid = TimeGrid::uniform(K);
  cfg.n_mc = 1;

  // Exact posterior for every (grid time, token), looked up by time.
  std::vector<oracle::Table> table(K + 1);
  for (int k = 0; k < K; ++k)
    for (int x = 0; x < S; ++x) table[k].push_back(oracle::bayes_posterior(p, data, {x}, cfg.grid[k])[0]);
  ModelSpec spec = spec_for(path, 1, 1, ModelKind::kFunction);
  FunctionPosterior exact(spec, [&](const SequenceState& x, double t, int, LogProbs& out) {
    const int k = std::clamp(static_cast<int>(std::lround(t * K)), 0, K - 1);
    for (int z = 0; z < S; ++z) out.at(0, z) = table[k][x[0]][z];
  });

  std::vector<double> counts(static_cast<std::size_t>(K + 1) * S, 0.0);
  RandomStream rng(derive_seed(seed, {11}));
  for (int n = 0; n < trajectories; ++n) {
    const Trajectory tr = rollout(0, exact, cr, cfg, rng);
    for (int k = 0; k <= K; ++k) counts[k * S + tr.states[k][0]] += 1.0;
  }
  const auto posterior = [&](const std::vector<int>& x, double t) {
    return oracle::bayes_posterior(p, data, x, t);
  };
  const std::vector<double> grid(cfg.grid.times().begin(), cfg.grid.times().end());
  const oracle::ChainMarginals m = oracle::compose_chain(p, posterior, grid, 1);
  double worst = 0.0;
  const double N = trajectories;
  for (int k = 0; k <= K; ++k)
    for (int x = 0; x < S; ++x) {
      const double q = m.joint[k][x];
      const double emp = counts[k * S + x] / N;
      const double se = std::sqrt(q * (1.0 - q) / N);
      const double z = se > 0.0 ? std::abs(emp - q) / se : (emp == q ? 0.0 : INFINITY);
      worst = std::max(worst, z);
    }
  return result("sampler_marginals", worst, 3.0, worst <= 3.0,
                "trajectories=" + std::to_string(trajectories) + " max_standard_errors");
}

namespace {

struct FrozenRollout {
  ProbabilityPath path;
  std::unique_ptr<PosteriorModel> old_model;
  std::vector<Group> groups;
};

FrozenRollout frozen_rollout(RandomStream& rng, const ProbabilityPath& path, int D, int K,
                             int G, int n) {
  const ConditionalRate cr(path);
  FrozenRollout out{path, random_model(spec_for(path, D, K), rng), {}};
  RolloutConfig cfg;
  cfg.grid = TimeGrid::uniform(K);
  cfg.n_mc = n;
  cfg.group_size = G;
  const RewardFn reward = [&rng](int, const SequenceState&) { return rng.uniform(); };
  for (int prompt = 0; prompt < 2; ++prompt) {
    auto members = group_rollout(0, *out.old_model, cr, cfg, rng, reward);
    out.groups.push_back(make_group(0, std::move(members)));
  }
  return out;
}

}  // namespace

CheckResult check_gradient_fd(std::uint64_t seed) {
  RandomStream rng(derive_seed(seed, {12}));
  double worst = 0.0;
  std::size_t params = 0;
  const std::vector<ProbabilityPath> paths = {
      ProbabilityPath::metric(Vocabulary(4), Scheduler::metric(), TokenMetric::absolute_difference(4)),
      ProbabilityPath::mixture(Vocabulary(4, 3), Scheduler::linear(), SourceDistribution::mask())};
  for (const ProbabilityPath& path : paths)
    for (bool token_kl : {false, true}) {
      const int D = 2, K = 3;
      FrozenRollout fr = frozen_rollout(rng, path, D, K, 4, 3);
      auto model = fr.old_model->clone();
      for (double& v : model->params()) v += rng.normal(0.0, 0.3);
      auto ref = fr.old_model->clone();
      for (double& v : ref->params()) v += rng.normal(0.0, 0.3);
      ClipConfig clip = ClipConfig::disabled();
      clip.beta_kl = 0.1;
      clip.token_level_kl = token_kl;
      const UpdateResult analytic =
          objective_and_grad(Method::kDflowGrpo, *model, ref.get(), fr.groups, clip);
      auto probe = model->clone();
      const auto f = [&](const std::vector<double>& theta) {
        std::copy(theta.begin(), theta.end(), probe->params().begin());
        return objective_and_grad(Method::kDflowGrpo, *probe, ref.get(), fr.groups, clip).objective;
      };
      const std::vector<double> theta(model->params().begin(), model->params().end());
      const oracle::ValueAndGrad fd = oracle::exact_objective_and_grad(f, theta);
      std::vector<double> diff(theta.size());
      for (std::size_t i = 0; i < theta.size(); ++i) diff[i] = analytic.grad[i] - fd.grad[i];
      worst = std::max(worst, norm2(diff) / std::max(norm2(fd.grad), 1e-300));
      params = std::max(params, theta.size());
    }
  return result("gradient_fd", worst, 1e-4, worst <= 1e-4, "params=" + std::to_string(params));
}

CheckResult check_weighted_score_form(std::uint64_t seed) {
  RandomStream rng(derive_seed(seed, {13}));
  double worst = 0.0;
  const std::vector<ProbabilityPath> paths = {
      ProbabilityPath::metric(Vocabulary(5), Scheduler::metric(), TokenMetric::absolute_difference(5)),
      ProbabilityPath::mixture(Vocabulary(5, 4), Scheduler::cosine(), SourceDistribution::mask())};
  for (const ProbabilityPath& path : paths) {
    const int D = 3, K = 4;
    FrozenRollout fr = frozen_rollout(rng, path, D, K, 4, 5);
    const PosteriorModel& model = *fr.old_model;
    const UpdateResult analytic =
        objective_and_grad(Method::kDflowGrpo, model, nullptr, fr.groups, ClipConfig::disabled());
    const oracle::PathSpec p = to_oracle(path);
    std::vector<double> independent(model.num_params(), 0.0);
    for (const Group& g : fr.groups) {
      std::vector<oracle::ScoreTerm> terms;
      for (int i = 0; i < static_cast<int>(g.members.size()); ++i) {
        const Trajectory& tr = g.members[i];
        for (int k = 0; k < K; ++k) {
          const StepCache& c = tr.cache.steps[k];
          const ForwardPass pass = model.forward(tr.states[k], c.t, g.prompt);
          for (int d = 0; d < D; ++d) {
            oracle::ScoreTerm term;
            term.i = i;
            term.t_k = c.t;
            term.h = c.t_next - c.t;
            term.x = tr.states[k][d];
            term.x_next = tr.states[k + 1][d];
            for (Token s : c.samples_at(d)) {
              term.samples.push_back(s);
              LogProbs up(D, model.spec().vocab_size);
              up.at(d, s) = 1.0;
              std::vector<double> score(model.num_params(), 0.0);
              model.backward(pass, up.data(), score);
              term.scores.push_back(std::move(score));
            }
            terms.push_back(std::move(term));
          }
        }
      }
      const auto part =
          oracle::weighted_score_gradient(p, g.advantages, K, D, terms, model.num_params());
      for (std::size_t q = 0; q < part.size(); ++q) independent[q] += part[q] / fr.groups.size();
    }
    for (std::size_t q = 0; q < independent.size(); ++q)
      worst = std::max(worst, std::abs(independent[q] - analytic.grad[q]));
  }
  return result("weighted_score_form", worst, 1e-8, worst <= 1e-8);
}

CheckResult check_kl_properties(std::uint64_t seed, int draws) {
  RandomStream rng(derive_seed(seed, {14}));
  int violations = 0;
  for (int i = 0; i < draws; ++i) {
    const int D = 1 + rng.uniform_int(16);
    const double sigma = std::pow(10.0, -2.0 + 2.3 * rng.uniform());
    std::vector<double> u(D);
    for (double& v : u) v = rng.normal(0.0, sigma);
    const double seq = kl_from_log_ratios(u, false), tok = kl_from_log_ratios(u, true);
    if (seq < 0.0 || tok < 0.0) ++violations;
    if (tok < seq - 1e-15) ++violations;
    if (!(tok > 0.0)) ++violations;  // some ratio differs from 1
    const std::vector<double> ones(D, 0.0);
    if (kl_from_log_ratios(ones, false) != 0.0 || kl_from_log_ratios(ones, true) != 0.0) ++violations;
  }
  return result("kl_properties", violations, 0.0, violations == 0,
                "draws=" + std::to_string(draws));
}

CheckResult check_mean_field_single_token(std::uint64_t seed, int draws) {
  RandomStream rng(derive_seed(seed, {15}));
  double worst = 0.0;
  for (int i = 0; i < draws; ++i) {
    const int G = 2 + rng.uniform_int(6);
    std::vector<double> rewards(G);
    for (double& r : rewards) r = rng.uniform();
    const std::vector<double> adv = advantages(rewards);
    std::vector<std::vector<double>> u(G, std::vector<double>(1));
    for (auto& v : u) v[0] = rng.normal(0.0, 0.3);
    const double eps = 0.05 + 0.2 * rng.uniform();
    const ClipConfig clip{eps, eps * 1.4, 0.0, false};
    const ObjectiveValue a = diffu_grpo(adv, u, clip), b = diffu_gspo(adv, u, clip);
    worst = std::max(worst, std::abs(a.value - b.value));
    for (int g = 0; g < G; ++g)
      worst = std::max(worst, std::abs(a.dlog_ratio[g][0][0] - b.dlog_ratio[g][0][0]));
  }
  return result("mean_field_single_token", worst, 1e-12, worst <= 1e-12);
}

std::vector<CheckResult> run_verify_suite(std::uint64_t seed, bool quick) {
  return {check_rate_properties(seed),
          check_transition_stochasticity(seed),
          check_engine_vs_oracle_transition(seed),
          check_dual_path_enumeration(seed),
          check_weight_normalization(seed),
          check_identity_ratio(seed),
          check_single_sample_weight(seed),
          check_mixture_closed_form(seed),
          check_masked_stay_factor(seed),
          check_estimator_consistency(seed),
          check_chain_fidelity(),
          check_sampler_marginals(seed, quick ? 20000 : 200000),
          check_gradient_fd(seed),
          check_weighted_score_form(seed),
          check_kl_properties(seed),
          check_mean_field_single_token(seed)};
}

}  // namespace dflow
