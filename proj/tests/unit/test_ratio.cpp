#include <doctest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "dflow/bridge.hpp"
#include "dflow/errors.hpp"
#include "dflow/ratio.hpp"
#include "dflow/sampler.hpp"

using namespace dflow;

namespace {

LogProbs row_of(std::vector<double> probs) {
  LogProbs lp(1, static_cast<int>(probs.size()));
  for (std::size_t x = 0; x < probs.size(); ++x) lp.at(0, x) = probs[x] > 0 ? std::log(probs[x]) : -INFINITY;
  return lp;
}

ProbabilityPath masked3() {
  return ProbabilityPath::mixture(Vocabulary(4, 3), Scheduler::linear(), SourceDistribution::mask());
}

ProbabilityPath uniform3() {
  return ProbabilityPath::mixture(Vocabulary(3), Scheduler::linear(), SourceDistribution::uniform());
}

StepCache cache_for(const LogProbs& old_logp, std::vector<Token> samples, const RateSlice& slice,
                    Token x, Token y, double t, double h) {
  StepCache c;
  c.n = static_cast<int>(samples.size());
  c.length = 1;
  c.t = t;
  c.t_next = t + h;
  c.old_logp = old_logp;
  c.samples = std::move(samples);
  fill_log_weights(c, slice, SequenceState(std::vector<Token>{x}), SequenceState(std::vector<Token>{y}));
  return c;
}

}  // namespace

TEST_CASE("unnormalized weight closed forms") {
  const ConditionalRate cr(masked3());
  const RateSlice s = cr.at(0.5);  // lambda = 2 for a masked token
  CHECK(unnormalized_weight(s, 3, 3, 1, 0.5) == doctest::Approx(std::exp(-1.0)).epsilon(1e-15));
  CHECK(unnormalized_weight(s, 3, 1, 1, 0.5) == doctest::Approx(1.0 - std::exp(-1.0)).epsilon(1e-15));
  CHECK(unnormalized_weight(s, 3, 0, 1, 0.5) == 0.0);
  CHECK(unnormalized_weight(s, 1, 0, 1, 0.5) == 0.0);  // lambda = 0 move
  CHECK(unnormalized_weight(s, 1, 1, 1, 0.5) == 1.0);
  CHECK(log_unnormalized_weight(s, 1, 0, 1, 0.5) == -INFINITY);
  CHECK(log_unnormalized_weight(s, 3, 1, 1, 0.5) ==
        doctest::Approx(std::log(1.0 - std::exp(-1.0))).epsilon(1e-15));
}

TEST_CASE("exact transition: point mass reduces to the single-sample law") {
  const ConditionalRate cr(uniform3());
  const RateSlice s = cr.at(0.2);
  const LogProbs lp = row_of({0.0, 0.0, 1.0});
  for (Token y = 0; y < 3; ++y)
    CHECK(exact_token_transition_prob(lp.row(0), 0, y, s, 0.3) ==
          doctest::Approx(unnormalized_weight(s, 0, y, 2, 0.3)).epsilon(1e-15));
}

TEST_CASE("exact transition: uniform policy against enumeration") {
  const ProbabilityPath path = uniform3();
  const ConditionalRate cr(path);
  const RateSlice s = cr.at(0.0);
  const LogProbs lp = row_of({1.0 / 3, 1.0 / 3, 1.0 / 3});
  const auto table = oracle::enumerate_transition(to_oracle(path), to_table(lp), {1}, 0.0, 0.5);
  double total = 0.0;
  for (Token y = 0; y < 3; ++y) {
    const double p = exact_token_transition_prob(lp.row(0), 1, y, s, 0.5);
    CHECK(p == doctest::Approx(table.rows[0][y]).epsilon(1e-14));
    total += p;
  }
  CHECK(std::abs(total - 1.0) <= 1e-15);
  // Stay: 1/3 (X1 = x) + 2/3 exp(-0.5); each other token gets 1/3 (1 - exp(-0.5)).
  CHECK(exact_token_transition_prob(lp.row(0), 1, 1, s, 0.5) ==
        doctest::Approx(1.0 / 3 + 2.0 / 3 * std::exp(-0.5)).epsilon(1e-15));
  CHECK(exact_token_transition_prob(lp.row(0), 1, 1, s, 0.0) == 1.0);
}

TEST_CASE("identity ratio and single-sample weights") {
  const ProbabilityPath path = ProbabilityPath::metric(Vocabulary(5), Scheduler::metric(),
                                                       TokenMetric::absolute_difference(5));
  const ConditionalRate cr(path);
  ModelSpec spec;
  spec.vocab_size = 5;
  spec.length = 4;
  spec.time_buckets = 4;
  auto model = make_model(spec, 0);
  RandomStream rng(21);
  for (double& p : model->params()) p = rng.normal();
  RolloutConfig cfg;
  cfg.grid = TimeGrid::uniform(4);
  for (int n : {1, 3}) {
    cfg.n_mc = n;
    const Trajectory tr = rollout(0, *model, cr, cfg, rng);
    for (int k = 0; k < tr.steps(); ++k) {
      const StepCache& c = tr.cache.steps[k];
      const StepRatioEstimate est = ratio_estimate(c, model->log_probs(tr.states[k], c.t, 0));
      for (double v : est.log_ratio) CHECK(v == 0.0);
      CHECK(est.geometric_mean() == 1.0);
      if (n == 1)
        for (double w : weight_table(c).normalized) CHECK(w == 1.0);
    }
  }
}

TEST_CASE("n = 1 ratio is the posterior ratio at the sample") {
  const ConditionalRate cr(masked3());
  const RateSlice s = cr.at(0.25);
  const LogProbs old_lp = row_of({0.5, 0.3, 0.2, 0.0}), new_lp = row_of({0.2, 0.6, 0.2, 0.0});
  const StepCache c = cache_for(old_lp, {1}, s, 3, 1, 0.25, 0.25);
  const StepRatioEstimate est = ratio_estimate(c, new_lp);
  CHECK(est.log_ratio[0] == doctest::Approx(std::log(0.6 / 0.3)).epsilon(1e-14));
}

TEST_CASE("exhaustive exactly-weighted samples give the exact ratio") {
  // Samples cover S once each under a uniform proposal, so the importance
  // sums are exact expectations over X1.
  for (const ProbabilityPath& path :
       {uniform3(), ProbabilityPath::metric(Vocabulary(3), Scheduler::metric(),
                                            TokenMetric::absolute_difference(3))}) {
    const ConditionalRate cr(path);
    const double t = 0.3, h = 0.2;
    const RateSlice s = cr.at(t);
    const LogProbs proposal = row_of({1.0 / 3, 1.0 / 3, 1.0 / 3});
    const LogProbs lp_old = row_of({0.5, 0.2, 0.3}), lp_new = row_of({0.1, 0.7, 0.2});
    for (Token x = 0; x < 3; ++x)
      for (Token y = 0; y < 3; ++y) {
        const double po = exact_token_transition_prob(lp_old.row(0), x, y, s, h);
        if (po == 0.0) continue;
        const double exact = exact_token_transition_prob(lp_new.row(0), x, y, s, h) / po;
        const StepCache c = cache_for(proposal, {0, 1, 2}, s, x, y, t, h);
        const StepRatioEstimate est = ratio_estimate(c, lp_new, &lp_old);
        CHECK(std::exp(est.log_ratio[0]) == doctest::Approx(exact).epsilon(1e-12));
      }
  }
}

TEST_CASE("weights: self-normalized average is one and expectation is one") {
  const ProbabilityPath path = masked3();
  const ConditionalRate cr(path);
  const RateSlice s = cr.at(0.4);
  const LogProbs lp = row_of({0.5, 0.3, 0.2, 0.0});
  const StepCache c = cache_for(lp, {0, 1, 1, 2, 0}, s, 3, 1, 0.4, 0.2);
  const WeightTable w = weight_table(c);
  double avg = 0.0;
  for (double v : w.normalized) avg += v / w.n;
  CHECK(avg == doctest::Approx(1.0).epsilon(1e-15));
  for (Token y : {1, 3}) {
    const double p = exact_token_transition_prob(lp.row(0), 3, y, s, 0.2);
    double e = 0.0;
    for (Token x1 = 0; x1 < 3; ++x1) e += std::exp(lp.at(0, x1)) * unnormalized_weight(s, 3, y, x1, 0.2) / p;
    CHECK(std::abs(e - 1.0) <= 1e-12);
  }
}

TEST_CASE("degenerate weights") {
  const ConditionalRate cr(masked3());
  const RateSlice s = cr.at(0.4);
  const LogProbs lp = row_of({0.5, 0.3, 0.2, 0.0});
  // Move to token 1 while every sample says 0: no sample explains the move.
  const StepCache c = cache_for(lp, {0, 0}, s, 3, 1, 0.4, 0.2);
  CHECK_THROWS_AS(ratio_estimate(c, lp, nullptr, {.strict = true, .warn = false}), DegenerateWeightError);
  const StepRatioEstimate est = ratio_estimate(c, lp, nullptr, {.strict = false, .warn = false});
  CHECK(est.degenerate == 1);
  CHECK(est.log_ratio[0] == 0.0);
  for (double g : est.sample_grad) CHECK(g == 0.0);
}

TEST_CASE("sample gradient matches finite differences of the log-ratio") {
  const ConditionalRate cr(uniform3());
  const RateSlice s = cr.at(0.3);
  const LogProbs lp_old = row_of({0.5, 0.2, 0.3});
  LogProbs lp_new = row_of({0.3, 0.3, 0.4});
  const StepCache c = cache_for(lp_old, {0, 2, 2, 1}, s, 0, 0, 0.3, 0.25);
  const StepRatioEstimate est = ratio_estimate(c, lp_new);
  const std::vector<double> one = {1.0};
  LogProbs up(1, 3);
  accumulate_logprob_grad(est, c, one, up);
  for (Token x = 0; x < 3; ++x) {
    const double e = 1e-6;
    LogProbs plus = lp_new, minus = lp_new;
    plus.at(0, x) += e;
    minus.at(0, x) -= e;
    const double fd = (ratio_estimate(c, plus).log_ratio[0] - ratio_estimate(c, minus).log_ratio[0]) / (2 * e);
    CHECK(up.at(0, x) == doctest::Approx(fd).epsilon(1e-8));
  }
}

TEST_CASE("mixture closed form") {
  // kappa = t, t_k = 0, h = 0.5: g = exp(-0.5). A stayed token with p_new = 1
  // and p_old = 1/2 gives 1 / (1/2 + g/2).
  const Scheduler k = Scheduler::linear();
  const LogProbs lp_new = row_of({1.0, 0.0, 0.0}), lp_old = row_of({0.5, 0.25, 0.25});
  const SequenceState x(std::vector<Token>{0});
  const double g = std::exp(-0.5);
  CHECK(g == doctest::Approx(0.60653).epsilon(1e-5));
  CHECK(mixture_closed_form_ratio(lp_new, lp_old, x, x, 0.0, 0.5, k) ==
        doctest::Approx(1.0 / (0.5 + 0.5 * g)).epsilon(1e-15));

  // Against the exact transition ratio on a uniform-source |S| = 4 path.
  const ProbabilityPath path =
      ProbabilityPath::mixture(Vocabulary(4), Scheduler::cosine(), SourceDistribution::uniform());
  const ConditionalRate cr(path);
  const LogProbs a = row_of({0.1, 0.2, 0.3, 0.4}), b = row_of({0.4, 0.3, 0.2, 0.1});
  for (Token xk = 0; xk < 4; ++xk)
    for (Token y = 0; y < 4; ++y) {
      const double exact = exact_token_transition_prob(a.row(0), xk, y, cr.at(0.2), 0.3) /
                           exact_token_transition_prob(b.row(0), xk, y, cr.at(0.2), 0.3);
      const double closed = mixture_closed_form_ratio(a, b, SequenceState(std::vector<Token>{xk}),
                                                      SequenceState(std::vector<Token>{y}), 0.2, 0.5,
                                                      path.scheduler());
      CHECK(closed == doctest::Approx(exact).epsilon(1e-12));
    }
}

TEST_CASE("masked token that stays masked contributes exactly one") {
  const LogProbs lp_new = row_of({0.7, 0.2, 0.1, 0.0}), lp_old = row_of({0.1, 0.1, 0.8, 0.0});
  const SequenceState x(std::vector<Token>{3});
  for (const Scheduler& k : {Scheduler::linear(), Scheduler::cosine(), Scheduler::polynomial(2.5)})
    for (double t : {0.0, 0.3, 0.8})
      CHECK(mixture_closed_form_log_ratios(lp_new, lp_old, x, x, t, t + 0.1, k)[0] == 0.0);
}

TEST_CASE("KL estimators") {
  const std::vector<double> zero(4, 0.0), ones(4, 1.0);
  CHECK(kl_from_log_ratios(zero, false) == 0.0);
  CHECK(kl_from_log_ratios(zero, true) == 0.0);
  CHECK(kl_from_log_ratios(ones, true) == doctest::Approx(std::numbers::e - 2.0).epsilon(1e-15));
  CHECK(kl_from_log_ratios(ones, false) == doctest::Approx(std::numbers::e - 2.0).epsilon(1e-15));
  RandomStream rng(31);
  for (int i = 0; i < 1000; ++i) {
    std::vector<double> u(1 + rng.uniform_int(8));
    for (double& v : u) v = rng.normal(0.0, 0.5);
    const double seq = kl_from_log_ratios(u, false), tok = kl_from_log_ratios(u, true);
    CHECK(seq >= 0.0);
    CHECK(tok >= seq - 1e-15);
    for (bool token : {false, true}) {
      std::vector<double> g(u.size());
      kl_gradient(u, token, g);
      for (std::size_t d = 0; d < u.size(); ++d) {
        auto p = u, m = u;
        p[d] += 1e-6;
        m[d] -= 1e-6;
        const double fd = (kl_from_log_ratios(p, token) - kl_from_log_ratios(m, token)) / 2e-6;
        CHECK(g[d] == doctest::Approx(fd).epsilon(1e-5).scale(1e-6));
      }
    }
  }
}
