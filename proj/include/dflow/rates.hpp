#pragma once

#include <span>
#include <vector>

#include "dflow/paths.hpp"
#include "dflow/state.hpp"

namespace dflow {

enum class RateKind { kMixture, kMetricKinetic };

// Total off-diagonal rate out of the current token (events per unit time).
struct Intensity {
  double value = 0.0;
};

class RateSlice;

// Conditional rate Q_t(x, z | x1) generating a ProbabilityPath.
//   mixture:        kappa'/(1-kappa) (delta_{x1}(z) - delta_x(z))
//   metric-kinetic: q_t(z|x1) beta' [d(x,x1) - d(z,x1)]_+   for z != x
// Diagonal entries are always the negated off-diagonal sum.
class ConditionalRate {
 public:
  explicit ConditionalRate(ProbabilityPath path);

  RateKind kind() const { return kind_; }
  const ProbabilityPath& path() const { return path_; }
  int vocab_size() const { return path_.vocab().size(); }

  // Freezes the time-dependent coefficients at t. Mixture rates throw
  // SingularityError once kappa reaches 1.
  RateSlice at(double t) const;

 private:
  RateKind kind_;
  ProbabilityPath path_;
};

// Rates at a fixed time. Only |S|-vectors are materialized per query.
class RateSlice {
 public:
  double time() const { return t_; }
  int vocab_size() const { return size_; }

  double rate(Token x, Token z, Token x1) const;
  double intensity(Token x, Token x1) const;
  // out[z] = Q(x, z | x1) for every z, diagonal included.
  void row(Token x, Token x1, std::span<double> out) const;

 private:
  friend class ConditionalRate;
  RateSlice() = default;

  double off_diagonal(Token x, Token z, Token x1) const;

  RateKind kind_ = RateKind::kMixture;
  int size_ = 0;
  double t_ = 0.0;
  double mixture_factor_ = 0.0;   // kappa' / (1 - kappa)
  double beta_dot_ = 0.0;
  const TokenMetric* metric_ = nullptr;
  std::vector<double> path_table_;  // [x1 * S + z] = q_t(z | x1), metric only
};

double rate(const ConditionalRate& cr, Token x, Token z, Token x1, double t);
Intensity intensity(const ConditionalRate& cr, Token x, Token x1, double t);

// Mean of Q_t(x^d, z | X) over posterior samples X (Monte-Carlo estimate of
// the marginal rate at position d).
double averaged_rate(const ConditionalRate& cr, const SequenceState& x, int d,
                     Token z, double t, std::span<const Token> samples);

}  // namespace dflow
