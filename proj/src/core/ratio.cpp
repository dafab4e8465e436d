#include "dflow/ratio.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

#include "dflow/errors.hpp"

namespace dflow {
namespace {

double log_sum_exp(std::span<const double> v) {
  double mx = -INFINITY;
  for (double x : v) mx = std::max(mx, x);
  if (mx == -INFINITY) return -INFINITY;
  double total = 0.0;
  for (double x : v) total += std::exp(x - mx);
  return mx + std::log(total);
}

void warn_degenerate() {
  static bool warned = false;
  if (warned) return;
  warned = true;
  std::cerr << "dflow: warning: every cached sample gives zero weight to an observed "
               "transition; using log-ratio 0 for that position\n";
}

}  // namespace

double unnormalized_weight(const RateSlice& slice, Token x, Token x_next, Token x1, double h) {
  const double lambda = slice.intensity(x, x1);
  if (x == x_next) return std::exp(-h * lambda);
  if (lambda <= 0.0) return 0.0;
  return slice.rate(x, x_next, x1) / lambda * -std::expm1(-h * lambda);
}

double log_unnormalized_weight(const RateSlice& slice, Token x, Token x_next, Token x1,
                               double h) {
  const double lambda = slice.intensity(x, x1);
  if (x == x_next) return -h * lambda;
  if (lambda <= 0.0) return -INFINITY;
  const double q = slice.rate(x, x_next, x1);
  if (q <= 0.0) return -INFINITY;
  return std::log(q) - std::log(lambda) + std::log(-std::expm1(-h * lambda));
}

WeightTable weight_table(const StepCache& cache) {
  WeightTable w{cache.length, cache.n, std::vector<double>(cache.log_weights.size()),
                std::vector<double>(cache.log_weights.size())};
  const double log_n = std::log(static_cast<double>(cache.n));
  for (int d = 0; d < cache.length; ++d) {
    auto a = cache.log_weights_at(d);
    const double lse = log_sum_exp(a);
    for (int j = 0; j < cache.n; ++j) {
      const std::size_t i = static_cast<std::size_t>(d) * cache.n + j;
      w.unnormalized[i] = std::exp(a[j]);
      w.normalized[i] = lse == -INFINITY ? 0.0 : std::exp(a[j] - lse + log_n);
    }
  }
  return w;
}

double exact_token_transition_prob(std::span<const double> posterior_logp, Token x,
                                   Token x_next, const RateSlice& slice, double h) {
  double total = 0.0;
  for (Token x1 = 0; x1 < static_cast<Token>(posterior_logp.size()); ++x1) {
    if (posterior_logp[x1] == -INFINITY) continue;
    total += std::exp(posterior_logp[x1]) * unnormalized_weight(slice, x, x_next, x1, h);
  }
  return total;
}

double exact_token_transition_prob(const PosteriorModel& policy, const SequenceState& x_k,
                                   int d, Token x_next, const ConditionalRate& cr, double t_k,
                                   double t_next, int prompt) {
  if (!(t_next >= t_k)) throw DomainError("exact_token_transition_prob: t_next < t_k");
  const LogProbs lp = policy.log_probs(x_k, t_k, prompt);
  return exact_token_transition_prob(lp.row(d), x_k[d], x_next, cr.at(t_k), t_next - t_k);
}

double StepRatioEstimate::geometric_mean() const { return std::exp(mean_log_ratio); }

double StepRatioEstimate::total_log_ratio() const {
  double s = 0.0;
  for (double v : log_ratio) s += v;
  return s;
}

StepRatioEstimate ratio_estimate(const StepCache& cache, const LogProbs& num,
                                 const LogProbs* den, RatioOptions options) {
  const int n = cache.n, D = cache.length;
  if (num.length() != D || (den && den->length() != D))
    throw ArgumentError("ratio_estimate: log-prob table has the wrong length");
  StepRatioEstimate est;
  est.length = D;
  est.n = n;
  est.log_ratio.assign(D, 0.0);
  est.sample_grad.assign(static_cast<std::size_t>(D) * n, 0.0);
  std::vector<double> top(n), bottom(n);
  for (int d = 0; d < D; ++d) {
    auto a = cache.log_weights_at(d);
    auto xs = cache.samples_at(d);
    bool any = false;
    for (int j = 0; j < n; ++j) {
      const double old_lp = cache.old_logp.at(d, xs[j]);
      top[j] = a[j] + (num.at(d, xs[j]) - old_lp);
      bottom[j] = den ? a[j] + (den->at(d, xs[j]) - old_lp) : a[j];
      any = any || a[j] != -INFINITY;
    }
    if (!any) {
      if (options.strict)
        throw DegenerateWeightError("position " + std::to_string(d) +
                                    ": all cached weights are zero");
      ++est.degenerate;
      if (options.warn) warn_degenerate();
      continue;
    }
    const double hi = log_sum_exp(top);
    const double lo = log_sum_exp(bottom);
    est.log_ratio[d] = hi - lo;
    for (int j = 0; j < n; ++j)
      est.sample_grad[static_cast<std::size_t>(d) * n + j] =
          hi == -INFINITY ? 0.0 : std::exp(top[j] - hi);
  }
  double s = 0.0;
  for (double v : est.log_ratio) s += v;
  est.mean_log_ratio = s / D;
  return est;
}

void fill_log_weights(StepCache& cache, const RateSlice& slice, const SequenceState& x_k,
                      const SequenceState& x_next) {
  const double h = cache.t_next - cache.t;
  cache.log_weights.resize(cache.samples.size());
  for (int d = 0; d < cache.length; ++d) {
    auto xs = cache.samples_at(d);
    for (int j = 0; j < cache.n; ++j)
      cache.log_weights[static_cast<std::size_t>(d) * cache.n + j] =
          log_unnormalized_weight(slice, x_k[d], x_next[d], xs[j], h);
  }
}

StepRatioEstimate ratio_estimate(const StepCache& cache, const LogProbs& new_logp,
                                 const ConditionalRate& cr, double t_k, double t_next,
                                 const SequenceState& x_k, const SequenceState& x_next,
                                 RatioOptions options) {
  StepCache local = cache;
  local.t = t_k;
  local.t_next = t_next;
  fill_log_weights(local, cr.at(t_k), x_k, x_next);
  return ratio_estimate(local, new_logp, nullptr, options);
}

void accumulate_logprob_grad(const StepRatioEstimate& est, const StepCache& cache,
                             std::span<const double> dlog_ratio, LogProbs& upstream) {
  for (int d = 0; d < est.length; ++d) {
    if (dlog_ratio[d] == 0.0) continue;
    auto xs = cache.samples_at(d);
    for (int j = 0; j < est.n; ++j)
      upstream.at(d, xs[j]) +=
          dlog_ratio[d] * est.sample_grad[static_cast<std::size_t>(d) * est.n + j];
  }
}

std::vector<double> mixture_closed_form_log_ratios(const LogProbs& new_logp,
                                                   const LogProbs& old_logp,
                                                   const SequenceState& x_k,
                                                   const SequenceState& x_next, double t_k,
                                                   double t_next, const Scheduler& scheduler) {
  const SchedulerValue k = kappa(scheduler, t_k);
  if (!(k.value < 1.0)) throw SingularityError("closed form: kappa = 1 at t_k");
  const double g = std::exp(-(t_next - t_k) * k.derivative / (1.0 - k.value));
  std::vector<double> out(x_k.length());
  for (int d = 0; d < x_k.length(); ++d) {
    if (x_next[d] != x_k[d]) {
      out[d] = new_logp.at(d, x_next[d]) - old_logp.at(d, x_next[d]);
      continue;
    }
    const double p = std::exp(new_logp.at(d, x_k[d]));
    const double po = std::exp(old_logp.at(d, x_k[d]));
    out[d] = std::log((p + (1.0 - p) * g) / (po + (1.0 - po) * g));
  }
  return out;
}

double mixture_closed_form_ratio(const LogProbs& new_logp, const LogProbs& old_logp,
                                 const SequenceState& x_k, const SequenceState& x_next,
                                 double t_k, double t_next, const Scheduler& scheduler) {
  double s = 0.0;
  for (double v : mixture_closed_form_log_ratios(new_logp, old_logp, x_k, x_next, t_k, t_next,
                                                 scheduler))
    s += v;
  return std::exp(s);
}

double kl_from_log_ratios(std::span<const double> u, bool token_level) {
  const double D = static_cast<double>(u.size());
  if (token_level) {
    double total = 0.0;
    for (double v : u) total += std::max(0.0, std::expm1(v) - v);
    return total / D;
  }
  double s = 0.0;
  for (double v : u) s += v;
  s /= D;
  return std::max(0.0, std::expm1(s) - s);
}

double kl_estimate(const StepRatioEstimate& ratio, bool token_level) {
  return kl_from_log_ratios(ratio.log_ratio, token_level);
}

void kl_gradient(std::span<const double> u, bool token_level, std::span<double> out) {
  const double D = static_cast<double>(u.size());
  if (token_level) {
    for (std::size_t d = 0; d < u.size(); ++d) out[d] = std::expm1(u[d]) / D;
    return;
  }
  double s = 0.0;
  for (double v : u) s += v;
  s /= D;
  for (std::size_t d = 0; d < u.size(); ++d) out[d] = std::expm1(s) / D;
}

}  // namespace dflow
