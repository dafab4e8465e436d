#include "dflow/oracle/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace dflow::oracle {
namespace {

constexpr double kPi = 3.14159265358979323846;

double clamp_metric_time(const PathSpec& p, double t) {
  if (t < p.time_eps) return p.time_eps;
  if (t > 1.0 - p.time_eps) return 1.0 - p.time_eps;
  return t;
}

double dist(const PathSpec& p, int a, int b) { return p.metric[a * p.vocab + b]; }

void check_vocab(const PathSpec& p) {
  if (p.vocab > kMaxEnumVocab) throw OracleError("oracle: vocabulary too large to enumerate");
}

}  // namespace

double kappa_of(const PathSpec& p, double t) {
  switch (p.kappa) {
    case PathSpec::Kappa::kLinear: return t;
    case PathSpec::Kappa::kCosine: return 1.0 - std::cos(kPi * t / 2.0);
    case PathSpec::Kappa::kPolynomial: return 1.0 - std::pow(1.0 - t, p.kappa_exponent);
  }
  return 0.0;
}

double kappa_rate_factor(const PathSpec& p, double t) {
  if (t >= 1.0) throw OracleError("oracle: mixture rate diverges at t = 1");
  switch (p.kappa) {
    case PathSpec::Kappa::kLinear: return 1.0 / (1.0 - t);
    case PathSpec::Kappa::kCosine: return kPi / 2.0 * std::tan(kPi * t / 2.0);
    case PathSpec::Kappa::kPolynomial: return p.kappa_exponent / (1.0 - t);
  }
  return 0.0;
}

double beta_of(const PathSpec& p, double t) {
  const double s = clamp_metric_time(p, t);
  return p.beta_scale * std::pow(s / (1.0 - s), p.beta_exponent);
}

double beta_dot_of(const PathSpec& p, double t) {
  const double s = clamp_metric_time(p, t);
  return p.beta_scale * p.beta_exponent * std::pow(s / (1.0 - s), p.beta_exponent - 1.0) /
         ((1.0 - s) * (1.0 - s));
}

Row path_row(const PathSpec& p, int x1, double t) {
  Row out(p.vocab, 0.0);
  if (p.kind == PathSpec::Kind::kMixture) {
    const double k = kappa_of(p, t);
    for (int x = 0; x < p.vocab; ++x) out[x] = (1.0 - k) * p.source[x];
    out[x1] += k;
    return out;
  }
  const double b = beta_of(p, t);
  double z = 0.0;
  for (int x = 0; x < p.vocab; ++x) {
    out[x] = std::exp(-b * dist(p, x, x1));
    z += out[x];
  }
  for (double& v : out) v /= z;
  return out;
}

double jump_rate(const PathSpec& p, int x, int z, int x1, double t) {
  if (z == x) throw OracleError("oracle: jump_rate is defined off the diagonal only");
  if (p.kind == PathSpec::Kind::kMixture) return z == x1 ? kappa_rate_factor(p, t) : 0.0;
  const double gap = dist(p, x, x1) - dist(p, z, x1);
  if (gap <= 0.0) return 0.0;
  return path_row(p, x1, t)[z] * beta_dot_of(p, t) * gap;
}

double step_weight(const PathSpec& p, int x, int x_next, int x1, double t_k, double h) {
  double lambda = 0.0;
  for (int z = 0; z < p.vocab; ++z)
    if (z != x) lambda += jump_rate(p, x, z, x1, t_k);
  if (x_next == x) return std::exp(-h * lambda);
  if (lambda == 0.0) return 0.0;
  return jump_rate(p, x, x_next, x1, t_k) / lambda * (1.0 - std::exp(-h * lambda));
}

double TransitionTable::joint(const std::vector<int>& next) const {
  double out = 1.0;
  for (std::size_t d = 0; d < rows.size(); ++d) out *= rows[d][next[d]];
  return out;
}

TransitionTable enumerate_transition(const PathSpec& p, const Table& posterior,
                                     const std::vector<int>& x_k, double t_k, double h) {
  check_vocab(p);
  TransitionTable out;
  for (std::size_t d = 0; d < x_k.size(); ++d) {
    Row row(p.vocab, 0.0);
    for (int x1 = 0; x1 < p.vocab; ++x1) {
      if (posterior[d][x1] == 0.0) continue;
      for (int y = 0; y < p.vocab; ++y)
        row[y] += posterior[d][x1] * step_weight(p, x_k[d], y, x1, t_k, h);
    }
    out.rows.push_back(std::move(row));
  }
  return out;
}

TransitionTable enumerate_transition_complement(const PathSpec& p, const Table& posterior,
                                                const std::vector<int>& x_k, double t_k,
                                                double h) {
  check_vocab(p);
  TransitionTable out;
  for (std::size_t d = 0; d < x_k.size(); ++d) {
    const int x = x_k[d];
    Row row(p.vocab, 0.0);
    double moved = 0.0;
    for (int y = 0; y < p.vocab; ++y) {
      if (y == x) continue;
      double acc = 0.0;
      for (int x1 = 0; x1 < p.vocab; ++x1) {
        double lambda = 0.0;
        for (int z = 0; z < p.vocab; ++z)
          if (z != x) lambda += jump_rate(p, x, z, x1, t_k);
        if (lambda == 0.0) continue;
        acc += posterior[d][x1] * jump_rate(p, x, y, x1, t_k) *
               (-std::expm1(-h * lambda)) / lambda;
      }
      row[y] = acc;
      moved += acc;
    }
    row[x] = 1.0 - moved;
    out.rows.push_back(std::move(row));
  }
  return out;
}

double max_abs_gap(const TransitionTable& a, const TransitionTable& b) {
  double gap = 0.0;
  for (std::size_t d = 0; d < a.rows.size(); ++d)
    for (std::size_t y = 0; y < a.rows[d].size(); ++y)
      gap = std::max(gap, std::abs(a.rows[d][y] - b.rows[d][y]));
  return gap;
}

Row ChainMarginals::position_marginal(std::size_t k, int d) const {
  Row out(vocab, 0.0);
  const Row& dist = joint[k];
  for (std::size_t s = 0; s < dist.size(); ++s) {
    std::size_t rest = s;
    for (int e = length - 1; e > d; --e) rest /= vocab;
    out[rest % vocab] += dist[s];
  }
  return out;
}

namespace {

std::vector<int> decode(std::size_t s, int length, int vocab) {
  std::vector<int> x(length);
  for (int d = length - 1; d >= 0; --d) {
    x[d] = static_cast<int>(s % vocab);
    s /= vocab;
  }
  return x;
}

}  // namespace

ChainMarginals compose_chain(const PathSpec& p, const PosteriorFn& posterior,
                             const std::vector<double>& grid, int length) {
  check_vocab(p);
  std::size_t states = 1;
  for (int d = 0; d < length; ++d) {
    states *= p.vocab;
    if (states > kMaxJointStates) throw OracleError("oracle: joint state space too large");
  }
  if (grid.size() < 2 || grid.front() != 0.0 || grid.back() != 1.0)
    throw OracleError("oracle: grid must run from 0 to 1");

  ChainMarginals out{length, p.vocab, grid, {}};
  Row start(states, 0.0);
  for (std::size_t s = 0; s < states; ++s) {
    double m = 1.0;
    for (int v : decode(s, length, p.vocab)) m *= p.source[v];
    start[s] = m;
  }
  out.joint.push_back(std::move(start));

  for (std::size_t k = 0; k + 1 < grid.size(); ++k) {
    const Row& cur = out.joint.back();
    Row next(states, 0.0);
    for (std::size_t s = 0; s < states; ++s) {
      if (cur[s] == 0.0) continue;
      const std::vector<int> x = decode(s, length, p.vocab);
      const TransitionTable tt =
          enumerate_transition(p, posterior(x, grid[k]), x, grid[k], grid[k + 1] - grid[k]);
      for (std::size_t n = 0; n < states; ++n) {
        double m = cur[s];
        std::size_t rest = n;
        for (int d = length - 1; d >= 0 && m != 0.0; --d) {
          m *= tt.rows[d][rest % p.vocab];
          rest /= p.vocab;
        }
        next[n] += m;
      }
    }
    out.joint.push_back(std::move(next));
  }
  return out;
}

Table bayes_posterior(const PathSpec& p, const Table& data_marginals,
                      const std::vector<int>& x_t, double t) {
  Table out;
  for (std::size_t d = 0; d < x_t.size(); ++d) {
    Row row(p.vocab, 0.0);
    double z = 0.0;
    for (int x1 = 0; x1 < p.vocab; ++x1) {
      if (data_marginals[d][x1] == 0.0) continue;
      row[x1] = path_row(p, x1, t)[x_t[d]] * data_marginals[d][x1];
      z += row[x1];
    }
    if (!(z > 0.0)) throw OracleError("oracle: state has zero probability under the path");
    for (double& v : row) v /= z;
    out.push_back(std::move(row));
  }
  return out;
}

Row path_marginal(const PathSpec& p, const Row& data, double t) {
  Row out(p.vocab, 0.0);
  for (int x1 = 0; x1 < p.vocab; ++x1) {
    if (data[x1] == 0.0) continue;
    const Row q = path_row(p, x1, t);
    for (int x = 0; x < p.vocab; ++x) out[x] += data[x1] * q[x];
  }
  return out;
}

double total_variation(const Row& a, const Row& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return 0.5 * s;
}

ValueAndGrad exact_objective_and_grad(const std::function<double(const std::vector<double>&)>& f,
                                      const std::vector<double>& params, double step,
                                      bool richardson) {
  ValueAndGrad out;
  out.value = f(params);
  const double again = f(params);
  if (std::memcmp(&out.value, &again, sizeof(double)) != 0)
    throw OracleError("oracle: objective is not deterministic in its parameters");
  std::vector<double> theta = params;
  auto central = [&](std::size_t i, double hh) {
    theta[i] = params[i] + hh;
    const double up = f(theta);
    theta[i] = params[i] - hh;
    const double down = f(theta);
    theta[i] = params[i];
    return (up - down) / (2.0 * hh);
  };
  out.grad.resize(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double coarse = central(i, step);
    out.grad[i] = richardson ? (4.0 * central(i, step / 2.0) - coarse) / 3.0 : coarse;
  }
  return out;
}

std::vector<double> weighted_score_gradient(const PathSpec& p, const std::vector<double>& adv,
                                            int steps, int length,
                                            const std::vector<ScoreTerm>& terms,
                                            std::size_t num_params) {
  std::vector<double> grad(num_params, 0.0);
  const double G = static_cast<double>(adv.size());
  for (const ScoreTerm& term : terms) {
    const std::size_t n = term.samples.size();
    std::vector<double> w(n);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      w[j] = step_weight(p, term.x, term.x_next, term.samples[j], term.t_k, term.h);
      total += w[j];
    }
    if (total == 0.0) continue;
    const double coeff = adv[term.i] / (G * steps * length);
    for (std::size_t j = 0; j < n; ++j) {
      // (1/n) * w^_j with w^_j = n w~_j / sum w~.
      const double c = coeff * w[j] / total;
      for (std::size_t q = 0; q < num_params; ++q) grad[q] += c * term.scores[j][q];
    }
  }
  return grad;
}

}  // namespace dflow::oracle
