#include "dflow/bridge.hpp"

#include <cmath>

namespace dflow {

oracle::PathSpec to_oracle(const ProbabilityPath& path) {
  oracle::PathSpec p;
  p.vocab = path.vocab().size();
  p.mask = path.vocab().mask().value_or(-1);
  p.source.assign(path.source_probs().begin(), path.source_probs().end());
  p.time_eps = kMetricTimeEps;
  const Scheduler& s = path.scheduler();
  if (path.kind() == PathKind::kMixture) {
    p.kind = oracle::PathSpec::Kind::kMixture;
    switch (s.shape()) {
      case KappaShape::kLinear: p.kappa = oracle::PathSpec::Kappa::kLinear; break;
      case KappaShape::kCosine: p.kappa = oracle::PathSpec::Kappa::kCosine; break;
      case KappaShape::kPolynomial:
        p.kappa = oracle::PathSpec::Kappa::kPolynomial;
        p.kappa_exponent = s.exponent();
        break;
    }
  } else {
    p.kind = oracle::PathSpec::Kind::kMetric;
    p.beta_scale = s.scale();
    p.beta_exponent = s.exponent();
    const TokenMetric& m = path.require_metric();
    for (Token a = 0; a < p.vocab; ++a)
      for (Token b = 0; b < p.vocab; ++b) p.metric.push_back(m(a, b));
  }
  return p;
}

oracle::Table to_table(const LogProbs& logp) {
  oracle::Table out;
  for (int d = 0; d < logp.length(); ++d) {
    oracle::Row row;
    for (double v : logp.row(d)) row.push_back(std::exp(v));
    out.push_back(std::move(row));
  }
  return out;
}

oracle::PosteriorFn to_posterior_fn(const PosteriorModel& model, int prompt) {
  return [&model, prompt](const std::vector<int>& x, double t) {
    return to_table(model.log_probs(SequenceState(x), t, prompt));
  };
}

}  // namespace dflow
