#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "dflow/bridge.hpp"
#include "dflow/errors.hpp"
#include "dflow/objectives.hpp"
#include "dflow/random.hpp"

using namespace dflow;

namespace {

double clamp_clip(double g, const ClipConfig& c) {
  return std::clamp(g, 1.0 - c.eps_low, 1.0 + c.eps_high);
}

double clipped(double g, double a, const ClipConfig& c) {
  return std::min(g * a, clamp_clip(g, c) * a);
}

LogRatioGrid random_grid(RandomStream& rng, int G, int K, int D, double sigma) {
  LogRatioGrid grid(G, std::vector<std::vector<double>>(K, std::vector<double>(D)));
  for (auto& traj : grid)
    for (auto& step : traj)
      for (double& v : step) v = rng.normal(0.0, sigma);
  return grid;
}

}  // namespace

TEST_CASE("advantages") {
  const std::vector<double> r = {1, 0, 1, 0};
  const auto a = advantages(r);
  for (int i = 0; i < 4; ++i) CHECK(a[i] == doctest::Approx(i % 2 == 0 ? 1.0 : -1.0).epsilon(1e-15));
  for (double v : advantages(std::vector<double>{2.5, 2.5, 2.5})) CHECK(v == 0.0);
  CHECK_THROWS_AS(advantages(std::vector<double>{3.0}), ArgumentError);

  RandomStream rng(1);
  for (int i = 0; i < 100; ++i) {
    std::vector<double> x(2 + rng.uniform_int(10));
    for (double& v : x) v = rng.uniform();
    auto y = x;
    const double c = 10.0 * rng.normal();
    for (double& v : y) v += c;
    const auto ax = advantages(x), ay = advantages(y);
    double mean = 0.0;
    for (std::size_t j = 0; j < x.size(); ++j) {
      CHECK(std::abs(ax[j] - ay[j]) <= 1e-10);
      mean += ax[j];
    }
    CHECK(std::abs(mean) <= 1e-12);
  }
}

TEST_CASE("clip config validation") {
  CHECK_NOTHROW(ClipConfig{}.validate());
  CHECK_THROWS(ClipConfig{2e-3, 1e-3, 0.0, false}.validate());
  CHECK_THROWS(ClipConfig{0.0, 1e-3, 0.0, false}.validate());
  CHECK_THROWS(ClipConfig{1e-3, 1e-3, -1.0, false}.validate());
}

TEST_CASE("dflow-grpo: identity ratio gives zero objective") {
  RandomStream rng(2);
  const auto adv = advantages(std::vector<double>{0.1, 0.7, 0.4, 0.9});
  const LogRatioGrid zero(4, std::vector<std::vector<double>>(3, std::vector<double>(5, 0.0)));
  const ObjectiveValue v = dflow_grpo(adv, zero, ClipConfig{});
  CHECK(std::abs(v.value) <= 1e-15);
  CHECK(v.clip_fraction == 0.0);
}

TEST_CASE("dflow-grpo: clipped branch example") {
  const ClipConfig clip{1e-3, 1e-3, 0.0, false};
  const std::vector<double> adv = {1.0};
  const LogRatioGrid grid = {{{std::log(1.01)}}};
  const ObjectiveValue v = dflow_grpo(adv, grid, clip);
  CHECK(v.contributions[0][0] == doctest::Approx(1.001).epsilon(1e-14));
  CHECK(v.clip_fraction == 1.0);
  CHECK(v.dlog_ratio[0][0][0] == 0.0);
}

TEST_CASE("dflow-grpo: tiny instance from exact transition ratios") {
  // D = 2, |S| = 3, K = 2, G = 2 on a uniform-source mixture; ratios taken
  // from the enumerated kernels of two posteriors, objective rebuilt here.
  const ProbabilityPath path =
      ProbabilityPath::mixture(Vocabulary(3), Scheduler::linear(), SourceDistribution::uniform());
  const oracle::PathSpec p = to_oracle(path);
  const oracle::Table cur = {{0.2, 0.5, 0.3}, {0.6, 0.3, 0.1}}, old = {{0.3, 0.4, 0.3}, {0.5, 0.25, 0.25}};
  const std::vector<std::vector<std::vector<int>>> states = {{{0, 1}, {2, 1}, {2, 0}},
                                                             {{1, 1}, {1, 1}, {1, 2}}};
  const std::vector<double> grid_t = {0.0, 0.5, 1.0};
  const std::vector<double> adv = advantages(std::vector<double>{1.0, 0.0});
  const ClipConfig clip{0.05, 0.08, 0.0, false};
  LogRatioGrid lr(2, std::vector<std::vector<double>>(2, std::vector<double>(2)));
  double expect = 0.0;
  for (int i = 0; i < 2; ++i)
    for (int k = 0; k < 2; ++k) {
      const auto a = oracle::enumerate_transition(p, cur, states[i][k], grid_t[k], 0.5);
      const auto b = oracle::enumerate_transition(p, old, states[i][k], grid_t[k], 0.5);
      double joint = 1.0;
      for (int d = 0; d < 2; ++d) {
        const int y = states[i][k + 1][d];
        lr[i][k][d] = std::log(a.rows[d][y] / b.rows[d][y]);
        joint *= a.rows[d][y] / b.rows[d][y];
      }
      expect += clipped(std::sqrt(joint), adv[i], clip) / 4.0;
    }
  CHECK(dflow_grpo(adv, lr, clip).value == doctest::Approx(expect).epsilon(1e-14));
}

TEST_CASE("dflow-grpo: clipping never helps and gradients match finite differences") {
  RandomStream rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const int G = 2 + rng.uniform_int(5), K = 1 + rng.uniform_int(4), D = 1 + rng.uniform_int(4);
    std::vector<double> r(G);
    for (double& v : r) v = rng.uniform();
    const auto adv = advantages(r);
    const LogRatioGrid grid = random_grid(rng, G, K, D, 0.1);
    const ClipConfig clip{0.05, 0.07, 0.0, false};
    const ObjectiveValue c = dflow_grpo(adv, grid, clip), u = dflow_grpo(adv, grid, ClipConfig::disabled());
    CHECK(c.value <= u.value + 1e-15);
    for (int i = 0; i < G; ++i)
      for (int k = 0; k < K; ++k) CHECK(c.contributions[i][k] <= u.contributions[i][k] + 1e-15);

    ClipConfig kl = clip;
    kl.beta_kl = 0.3;
    kl.token_level_kl = trial % 2;
    const LogRatioGrid ref = random_grid(rng, G, K, D, 0.1);
    CHECK_THROWS_AS(dflow_grpo(adv, grid, kl), ConfigError);
    const ObjectiveValue v = dflow_grpo(adv, grid, kl, &ref);
    const double e = 1e-6;
    for (int i = 0; i < G; ++i)
      for (int k = 0; k < K; ++k)
        for (int d = 0; d < D; ++d) {
          auto gp = grid, gm = grid;
          gp[i][k][d] += e;
          gm[i][k][d] -= e;
          const double fd = (dflow_grpo(adv, gp, kl, &ref).value - dflow_grpo(adv, gm, kl, &ref).value) / (2 * e);
          CHECK(v.dlog_ratio[i][k][d] == doctest::Approx(fd).epsilon(1e-5).scale(1e-6));
          auto rp = ref, rm = ref;
          rp[i][k][d] += e;
          rm[i][k][d] -= e;
          const double fk = (dflow_grpo(adv, grid, kl, &rp).value - dflow_grpo(adv, grid, kl, &rm).value) / (2 * e);
          CHECK(v.dlog_kl[i][k][d] == doctest::Approx(fk).epsilon(1e-5).scale(1e-6));
        }
  }
}

TEST_CASE("mean-field baselines") {
  const std::vector<double> adv = {1.0, -1.0};
  const ClipConfig clip{0.2, 0.28, 0.0, false};
  const std::vector<std::vector<double>> zero = {{0.0, 0.0}, {0.0, 0.0}};
  CHECK(diffu_grpo(adv, zero, clip).value == 0.0);
  CHECK(diffu_gspo(adv, zero, clip).value == 0.0);

  // D = 2 by hand: token ratios (1.1, 1.5) and (0.7, 0.9).
  const std::vector<std::vector<double>> u2 = {{std::log(1.1), std::log(1.5)}, {std::log(0.7), std::log(0.9)}};
  const double h2 = ((clipped(1.1, 1, clip) + clipped(1.5, 1, clip)) / 2 +
                     (clipped(0.7, -1, clip) + clipped(0.9, -1, clip)) / 2) / 2;
  CHECK(diffu_grpo(adv, u2, clip).value == doctest::Approx(h2).epsilon(1e-14));

  // D = 3 geometric mean by hand.
  const std::vector<std::vector<double>> u3 = {{std::log(1.2), std::log(0.9), std::log(1.05)},
                                               {std::log(4.0), std::log(0.25), 0.0}};
  const double g0 = std::cbrt(1.2 * 0.9 * 1.05);
  const double h3 = (clipped(g0, 1, clip) + clipped(1.0, -1, clip)) / 2;
  CHECK(diffu_gspo(adv, u3, clip).value == doctest::Approx(h3).epsilon(1e-14));

  // Equal token ratios r: sequence ratio r.
  const std::vector<std::vector<double>> eq = {{0.1, 0.1, 0.1}, {0.0, 0.0, 0.0}};
  CHECK(diffu_gspo(adv, eq, ClipConfig::disabled()).value == doctest::Approx(std::exp(0.1) / 2 - 0.5).epsilon(1e-14));

  RandomStream rng(4);
  for (int i = 0; i < 100; ++i) {
    std::vector<std::vector<double>> u1(3, std::vector<double>(1));
    for (auto& v : u1) v[0] = rng.normal(0.0, 0.4);
    const auto a = advantages(std::vector<double>{rng.uniform(), rng.uniform(), rng.uniform()});
    CHECK(std::abs(diffu_grpo(a, u1, clip).value - diffu_gspo(a, u1, clip).value) <= 1e-12);
  }
}

TEST_CASE("mean-field gradients match finite differences") {
  RandomStream rng(5);
  const ClipConfig clip{0.1, 0.15, 0.2, false};
  for (int trial = 0; trial < 20; ++trial) {
    const int G = 3, D = 4;
    const auto adv = advantages(std::vector<double>{rng.uniform(), rng.uniform(), rng.uniform()});
    std::vector<std::vector<double>> u(G, std::vector<double>(D)), ref = u;
    for (int i = 0; i < G; ++i)
      for (int d = 0; d < D; ++d) u[i][d] = rng.normal(0, 0.2), ref[i][d] = rng.normal(0, 0.2);
    for (int which = 0; which < 2; ++which) {
      const auto f = [&](const std::vector<std::vector<double>>& x) {
        return which == 0 ? diffu_grpo(adv, x, clip, &ref) : diffu_gspo(adv, x, clip, &ref);
      };
      const ObjectiveValue v = f(u);
      for (int i = 0; i < G; ++i)
        for (int d = 0; d < D; ++d) {
          auto p = u, m = u;
          p[i][d] += 1e-6;
          m[i][d] -= 1e-6;
          const double fd = (f(p).value - f(m).value) / 2e-6;
          CHECK(v.dlog_ratio[i][0][d] == doctest::Approx(fd).epsilon(1e-5).scale(1e-6));
        }
    }
  }
}

TEST_CASE("preference pair") {
  CHECK(preference_pair(std::vector<double>{0.2, 0.9, 0.1, 0.9}) == std::pair{1, 2});
  CHECK(preference_pair(std::vector<double>{0.5, 0.5, 0.5}) == std::pair{0, 1});
}

TEST_CASE("dflow-dpo") {
  const std::vector<double> rewards = {1.0, 0.0};
  const LogRatioGrid same = {{{0.1, 0.2}, {0.3, 0.0}}, {{0.2, 0.1}, {0.0, 0.3}}};
  CHECK(dflow_dpo(rewards, same).value == doctest::Approx(-std::log(2.0)).epsilon(1e-15));

  // K = 1 by hand with the default beta = 100.
  const LogRatioGrid one = {{{0.004, 0.006}}, {{0.0, 0.0}}};
  const double z = 100.0 * 1.0 * 0.01;
  CHECK(dflow_dpo(rewards, one).value == doctest::Approx(-std::log1p(std::exp(-z))).epsilon(1e-14));

  // Default beta is 100 / K.
  RandomStream rng(6);
  const LogRatioGrid g = random_grid(rng, 3, 4, 2, 0.01);
  const std::vector<double> r3 = {0.3, 0.8, 0.1};
  CHECK(dflow_dpo(r3, g).value == dflow_dpo(r3, g, 25.0).value);
  const ObjectiveValue v = dflow_dpo(r3, g, 7.0);
  CHECK(v.best == 1);
  CHECK(v.worst == 2);
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 4; ++k)
      for (int d = 0; d < 2; ++d) {
        auto p = g, m = g;
        p[i][k][d] += 1e-6;
        m[i][k][d] -= 1e-6;
        const double fd = (dflow_dpo(r3, p, 7.0).value - dflow_dpo(r3, m, 7.0).value) / 2e-6;
        CHECK(v.dlog_ratio[i][k][d] == doctest::Approx(fd).epsilon(1e-5).scale(1e-6));
      }
}
