#include <doctest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "dflow/errors.hpp"
#include "dflow/paths.hpp"

using namespace dflow;

TEST_CASE("kappa closed forms") {
  auto v = kappa(Scheduler::linear(), 0.3);
  CHECK(v.value == doctest::Approx(0.3).epsilon(1e-15));
  CHECK(v.derivative == 1.0);
  v = kappa(Scheduler::linear(), 0.0);
  CHECK(v.value == 0.0);
  CHECK(v.derivative == 1.0);

  v = kappa(Scheduler::cosine(), 1.0);
  CHECK(v.value == 1.0);
  // d/dt [1 - cos(pi t / 2)] = (pi/2) sin(pi t / 2), which is pi/2 at t = 1.
  CHECK(v.derivative == doctest::Approx(std::numbers::pi / 2).epsilon(1e-14));

  v = kappa(Scheduler::polynomial(3.0), 0.5);
  CHECK(v.value == doctest::Approx(1.0 - 0.125).epsilon(1e-15));
  CHECK(v.derivative == doctest::Approx(3.0 * 0.25).epsilon(1e-15));
}

TEST_CASE("kappa is monotone on [0, 1]") {
  for (const Scheduler& s : {Scheduler::linear(), Scheduler::cosine(), Scheduler::polynomial(0.7)}) {
    double prev = -1.0;
    for (int i = 0; i <= 100; ++i) {
      const auto v = kappa(s, i / 100.0);
      CHECK(v.value >= prev);
      CHECK(v.value >= 0.0);
      CHECK(v.value <= 1.0);
      CHECK(v.derivative >= 0.0);
      prev = v.value;
    }
  }
}

TEST_CASE("kappa rejects times outside [0, 1] and metric schedulers") {
  CHECK_THROWS_AS(kappa(Scheduler::linear(), -0.1), DomainError);
  CHECK_THROWS_AS(kappa(Scheduler::linear(), 1.1), DomainError);
  CHECK_THROWS_AS(kappa(Scheduler::metric(), 0.5), ConfigError);
}

TEST_CASE("beta scheduler") {
  const Scheduler s = Scheduler::metric();
  CHECK(beta(s, 0.5).value == doctest::Approx(3.0).epsilon(1e-14));
  CHECK(beta(s, 0.25).value == doctest::Approx(3.0 * std::pow(1.0 / 3.0, 0.9)).epsilon(1e-14));
  CHECK(beta(s, 0.25).value == doctest::Approx(1.1160).epsilon(1e-4));
  CHECK(beta(s, 0.0).value == 0.0);
  CHECK(beta(s, 1e-9).value < 1e-6);
  CHECK(std::isfinite(beta(s, 0.0).derivative));
  CHECK_THROWS_AS(beta(s, 1.0), SingularityError);
  // Derivative against a central difference away from the clamp.
  const double t = 0.4, h = 1e-6;
  const double fd = (beta(s, t + h).value - beta(s, t - h).value) / (2 * h);
  CHECK(beta(s, t).derivative == doctest::Approx(fd).epsilon(1e-7));
}

TEST_CASE("mixture path probabilities") {
  const auto path = ProbabilityPath::mixture(Vocabulary(4, 3), Scheduler::linear(),
                                             SourceDistribution::mask());
  CHECK(path.prob(3, 1, 0.3) == doctest::Approx(0.7).epsilon(1e-15));
  CHECK(path.prob(1, 1, 0.3) == doctest::Approx(0.3).epsilon(1e-15));
  CHECK(path.prob(0, 1, 0.3) == 0.0);
  for (Token x = 0; x < 4; ++x) CHECK(path.prob(x, 2, 1.0) == (x == 2 ? 1.0 : 0.0));
}

TEST_CASE("metric path probabilities") {
  // beta(t) = 1 at t = 0.5 with scale 1.
  const auto path = ProbabilityPath::metric(Vocabulary(3), Scheduler::metric(1.0, 0.9),
                                            TokenMetric::absolute_difference(3));
  const double z = 1.0 + std::exp(-1.0) + std::exp(-2.0);
  CHECK(path.prob(0, 0, 0.5) == doctest::Approx(1.0 / z).epsilon(1e-14));
  CHECK(path.prob(1, 0, 0.5) == doctest::Approx(std::exp(-1.0) / z).epsilon(1e-14));
  CHECK(path.prob(2, 0, 0.5) == doctest::Approx(std::exp(-2.0) / z).epsilon(1e-14));
  CHECK(path.prob(0, 0, 0.5) == doctest::Approx(0.6652).epsilon(1e-4));
  CHECK(path.prob(1, 0, 0.5) == doctest::Approx(0.2447).epsilon(1e-3));
  CHECK(path.prob(2, 0, 0.5) == doctest::Approx(0.0900).epsilon(1e-3));
}

TEST_CASE("path rows sum to one on a time grid") {
  std::vector<ProbabilityPath> paths = {
      ProbabilityPath::mixture(Vocabulary(5, 4), Scheduler::cosine(), SourceDistribution::mask()),
      ProbabilityPath::mixture(Vocabulary(5), Scheduler::linear(), SourceDistribution::uniform()),
      ProbabilityPath::mixture(Vocabulary(3), Scheduler::polynomial(2.0),
                               SourceDistribution::custom({0.2, 0.5, 0.3})),
      ProbabilityPath::metric(Vocabulary(6), Scheduler::metric(), TokenMetric::absolute_difference(6))};
  for (const auto& path : paths) {
    const int S = path.vocab().size();
    std::vector<double> row(S);
    for (int i = 0; i < 50; ++i) {
      const double t = i / 49.0;
      for (Token x1 = 0; x1 < S; ++x1) {
        if (path.vocab().is_mask(x1)) continue;
        path.probs(x1, t, row);
        double s = 0.0;
        for (double v : row) {
          CHECK(v >= 0.0);
          s += v;
        }
        CHECK(std::abs(s - 1.0) <= 1e-12);
      }
    }
  }
}

TEST_CASE("metric path clamps time at both ends") {
  const auto path = ProbabilityPath::metric(Vocabulary(4), Scheduler::metric(),
                                            TokenMetric::absolute_difference(4));
  CHECK(path.effective_time(0.0) == kMetricTimeEps);
  CHECK(path.effective_time(1.0) == 1.0 - kMetricTimeEps);
  CHECK(path.effective_time(0.5) == 0.5);
  CHECK(path.prob(2, 2, 1.0) > 0.99);
  // At t = 0 the path is (numerically) uniform.
  CHECK(path.prob(0, 3, 0.0) == doctest::Approx(0.25).epsilon(1e-3));
}

TEST_CASE("metric validation") {
  CHECK_THROWS(TokenMetric(2, {0.0, 1.0, 2.0, 0.0}));   // asymmetric
  CHECK_THROWS(TokenMetric(2, {1.0, 1.0, 1.0, 0.0}));   // nonzero diagonal
  CHECK_THROWS(TokenMetric(2, {0.0, -1.0, -1.0, 0.0}));  // negative
  CHECK_THROWS(ProbabilityPath::metric(Vocabulary(3), Scheduler::metric(), std::nullopt));
  CHECK_THROWS(ProbabilityPath::metric(Vocabulary(3, 2), Scheduler::metric(),
                                       TokenMetric::absolute_difference(3)));
}

TEST_CASE("time grid") {
  const TimeGrid g = TimeGrid::uniform(4);
  CHECK(g.steps() == 4);
  CHECK(g[0] == 0.0);
  CHECK(g[4] == 1.0);
  CHECK(g.step_size(1) == doctest::Approx(0.25));
  CHECK_THROWS(TimeGrid({0.0, 0.5, 0.4, 1.0}));
  CHECK_THROWS(TimeGrid({0.1, 1.0}));
  CHECK_THROWS(TimeGrid::uniform(0));
}
