#include "dflow/rates.hpp"

#include <algorithm>
#include <cmath>

#include "dflow/errors.hpp"

namespace dflow {

ConditionalRate::ConditionalRate(ProbabilityPath path)
    : kind_(path.kind() == PathKind::kMixture ? RateKind::kMixture
                                              : RateKind::kMetricKinetic),
      path_(std::move(path)) {
  if (kind_ == RateKind::kMetricKinetic) path_.require_metric();
}

// The slice keeps a pointer into this rate's metric; it must not outlive it.
RateSlice ConditionalRate::at(double t) const {
  RateSlice s;
  s.kind_ = kind_;
  s.size_ = path_.vocab().size();
  s.t_ = t;
  const double te = path_.effective_time(t);
  if (kind_ == RateKind::kMixture) {
    const SchedulerValue k = kappa(path_.scheduler(), te);
    if (!(k.value < 1.0)) throw SingularityError("mixture rate diverges where kappa = 1");
    s.mixture_factor_ = k.derivative / (1.0 - k.value);
    if (!std::isfinite(s.mixture_factor_))
      throw SingularityError("mixture rate is not finite at this time");
    return s;
  }
  s.beta_dot_ = beta(path_.scheduler(), te).derivative;
  s.metric_ = &path_.require_metric();
  const int n = s.size_;
  s.path_table_.resize(static_cast<std::size_t>(n) * n);
  for (int x1 = 0; x1 < n; ++x1)
    path_.probs(x1, t, std::span<double>(s.path_table_.data() + x1 * n, n));
  return s;
}

double RateSlice::off_diagonal(Token x, Token z, Token x1) const {
  if (kind_ == RateKind::kMixture) return z == x1 ? mixture_factor_ : 0.0;
  const double gain = (*metric_)(x, x1) - (*metric_)(z, x1);
  if (gain <= 0.0) return 0.0;
  return path_table_[x1 * size_ + z] * beta_dot_ * gain;
}

double RateSlice::rate(Token x, Token z, Token x1) const {
  if (x != z) return off_diagonal(x, z, x1);
  return -intensity(x, x1);
}

double RateSlice::intensity(Token x, Token x1) const {
  if (kind_ == RateKind::kMixture) return x == x1 ? 0.0 : mixture_factor_;
  double total = 0.0;
  for (Token z = 0; z < size_; ++z)
    if (z != x) total += off_diagonal(x, z, x1);
  return total;
}

void RateSlice::row(Token x, Token x1, std::span<double> out) const {
  double total = 0.0;
  for (Token z = 0; z < size_; ++z) {
    out[z] = z == x ? 0.0 : off_diagonal(x, z, x1);
    total += out[z];
  }
  out[x] = -total;
}

double rate(const ConditionalRate& cr, Token x, Token z, Token x1, double t) {
  const int n = cr.vocab_size();
  if (x < 0 || x >= n || z < 0 || z >= n || x1 < 0 || x1 >= n)
    throw DomainError("rate: token out of range");
  return cr.at(t).rate(x, z, x1);
}

Intensity intensity(const ConditionalRate& cr, Token x, Token x1, double t) {
  const int n = cr.vocab_size();
  if (x < 0 || x >= n || x1 < 0 || x1 >= n) throw DomainError("intensity: token out of range");
  return {cr.at(t).intensity(x, x1)};
}

double averaged_rate(const ConditionalRate& cr, const SequenceState& x, int d,
                     Token z, double t, std::span<const Token> samples) {
  if (samples.empty()) throw ArgumentError("averaged_rate: empty sample list");
  if (d < 0 || d >= x.length()) throw ArgumentError("averaged_rate: bad position");
  const RateSlice slice = cr.at(t);
  double total = 0.0;
  for (Token x1 : samples) total += slice.rate(x[d], z, x1);
  return total / static_cast<double>(samples.size());
}

}  // namespace dflow
