#include "dflow/objectives.hpp"

#include <algorithm>
#include <cmath>

#include "dflow/errors.hpp"

namespace dflow {
namespace {

double mean_of(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

double population_std(std::span<const double> v) {
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return v.empty() ? 0.0 : std::sqrt(ss / static_cast<double>(v.size()));
}

// min(g A, clip(g) A) and whether the gradient passes through g.
struct ClippedTerm {
  double value;
  bool passes;
};

ClippedTerm clipped(double g, double a, const ClipConfig& clip) {
  const double c = std::clamp(g, 1.0 - clip.eps_low, 1.0 + clip.eps_high);
  const double raw = g * a, cut = c * a;
  if (raw <= cut) return {raw, true};
  return {cut, false};
}

void check_group(std::span<const double> adv, std::size_t members) {
  if (adv.size() != members)
    throw ArgumentError("objective: advantages and trajectories disagree in count");
  if (members == 0) throw ArgumentError("objective: empty group");
}

double log_sigmoid(double z) {
  return z >= 0 ? -std::log1p(std::exp(-z)) : z - std::log1p(std::exp(z));
}

}  // namespace

std::vector<double> advantages(std::span<const double> rewards) {
  if (rewards.size() < 2) throw ArgumentError("advantages: group size must be >= 2");
  const double m = mean_of(rewards);
  const double s = std::max(population_std(rewards), kAdvantageEps);
  std::vector<double> out(rewards.size());
  for (std::size_t i = 0; i < rewards.size(); ++i) out[i] = (rewards[i] - m) / s;
  return out;
}

void ClipConfig::validate() const {
  if (!(eps_low > 0.0) || !(eps_high >= eps_low))
    throw ConfigError("clip: need eps_high >= eps_low > 0");
  if (!(beta_kl >= 0.0)) throw ConfigError("clip: beta_kl must be >= 0");
}

LogRatioGrid to_log_ratio_grid(const std::vector<std::vector<StepRatioEstimate>>& ratios) {
  LogRatioGrid out(ratios.size());
  for (std::size_t i = 0; i < ratios.size(); ++i)
    for (const auto& est : ratios[i]) out[i].push_back(est.log_ratio);
  return out;
}

ObjectiveValue dflow_grpo(std::span<const double> adv, const LogRatioGrid& log_ratios,
                          const ClipConfig& clip, const LogRatioGrid* kl_refs) {
  clip.validate();
  check_group(adv, log_ratios.size());
  const bool use_kl = clip.beta_kl > 0.0;
  if (use_kl && !kl_refs) throw ConfigError("dflow_grpo: beta_kl > 0 needs reference ratios");
  if (use_kl && kl_refs->size() != log_ratios.size())
    throw ArgumentError("dflow_grpo: reference ratios have the wrong shape");

  const double G = static_cast<double>(log_ratios.size());
  ObjectiveValue out;
  out.contributions.resize(log_ratios.size());
  out.dlog_ratio.resize(log_ratios.size());
  if (use_kl) out.dlog_kl.resize(log_ratios.size());
  std::vector<double> seq_ratios;
  long terms = 0, clipped_terms = 0;

  for (std::size_t i = 0; i < log_ratios.size(); ++i) {
    const auto& steps = log_ratios[i];
    const double K = static_cast<double>(steps.size());
    if (steps.empty()) throw ArgumentError("dflow_grpo: trajectory without steps");
    for (std::size_t k = 0; k < steps.size(); ++k) {
      const auto& u = steps[k];
      const double D = static_cast<double>(u.size());
      const double g = std::exp(mean_of(u));
      seq_ratios.push_back(g);
      const ClippedTerm term = clipped(g, adv[i], clip);
      ++terms;
      if (!term.passes) ++clipped_terms;
      std::vector<double> grad(u.size(), term.passes ? adv[i] * g / D / (G * K) : 0.0);
      double contribution = term.value;
      out.surrogate += term.value / (G * K);
      if (use_kl) {
        const auto& ref = (*kl_refs)[i].at(k);
        const double kl = kl_from_log_ratios(ref, clip.token_level_kl);
        out.kl += kl / (G * K);
        contribution -= clip.beta_kl * kl;
        std::vector<double> g_kl(ref.size());
        kl_gradient(ref, clip.token_level_kl, g_kl);
        for (double& v : g_kl) v *= -clip.beta_kl / (G * K);
        out.dlog_kl[i].push_back(std::move(g_kl));
      }
      out.contributions[i].push_back(contribution);
      out.value += contribution / (G * K);
      out.dlog_ratio[i].push_back(std::move(grad));
    }
  }
  out.clip_fraction = terms ? static_cast<double>(clipped_terms) / terms : 0.0;
  out.ratio_dispersion = population_std(seq_ratios);
  return out;
}

namespace {

ObjectiveValue mean_field(std::span<const double> adv,
                          const std::vector<std::vector<double>>& token_log_ratios,
                          const ClipConfig& clip,
                          const std::vector<std::vector<double>>* kl_refs, bool geometric) {
  clip.validate();
  check_group(adv, token_log_ratios.size());
  const bool use_kl = clip.beta_kl > 0.0;
  if (use_kl && !kl_refs) throw ConfigError("mean-field objective: beta_kl > 0 needs reference ratios");
  const double G = static_cast<double>(token_log_ratios.size());
  ObjectiveValue out;
  out.contributions.resize(token_log_ratios.size());
  out.dlog_ratio.resize(token_log_ratios.size());
  if (use_kl) out.dlog_kl.resize(token_log_ratios.size());
  std::vector<double> seq_ratios;
  long terms = 0, clipped_terms = 0;

  for (std::size_t i = 0; i < token_log_ratios.size(); ++i) {
    const auto& u = token_log_ratios[i];
    const double D = static_cast<double>(u.size());
    std::vector<double> grad(u.size(), 0.0);
    double surrogate = 0.0;
    if (geometric) {
      const double g = std::exp(mean_of(u));
      const ClippedTerm term = clipped(g, adv[i], clip);
      ++terms;
      if (!term.passes) ++clipped_terms;
      surrogate = term.value;
      if (term.passes)
        for (double& v : grad) v = adv[i] * g / D / G;
    } else {
      for (std::size_t d = 0; d < u.size(); ++d) {
        const double r = std::exp(u[d]);
        const ClippedTerm term = clipped(r, adv[i], clip);
        ++terms;
        if (!term.passes) ++clipped_terms;
        surrogate += term.value / D;
        if (term.passes) grad[d] = adv[i] * r / D / G;
      }
    }
    seq_ratios.push_back(std::exp(mean_of(u)));
    double contribution = surrogate;
    out.surrogate += surrogate / G;
    if (use_kl) {
      const auto& ref = (*kl_refs)[i];
      const double kl = kl_from_log_ratios(ref, clip.token_level_kl);
      out.kl += kl / G;
      contribution -= clip.beta_kl * kl;
      std::vector<double> g_kl(ref.size());
      kl_gradient(ref, clip.token_level_kl, g_kl);
      for (double& v : g_kl) v *= -clip.beta_kl / G;
      out.dlog_kl[i].push_back(std::move(g_kl));
    }
    out.contributions[i].push_back(contribution);
    out.value += contribution / G;
    out.dlog_ratio[i].push_back(std::move(grad));
  }
  out.clip_fraction = terms ? static_cast<double>(clipped_terms) / terms : 0.0;
  out.ratio_dispersion = population_std(seq_ratios);
  return out;
}

}  // namespace

ObjectiveValue diffu_grpo(std::span<const double> adv,
                          const std::vector<std::vector<double>>& token_log_ratios,
                          const ClipConfig& clip,
                          const std::vector<std::vector<double>>* kl_refs) {
  return mean_field(adv, token_log_ratios, clip, kl_refs, false);
}

ObjectiveValue diffu_gspo(std::span<const double> adv,
                          const std::vector<std::vector<double>>& token_log_ratios,
                          const ClipConfig& clip,
                          const std::vector<std::vector<double>>* kl_refs) {
  return mean_field(adv, token_log_ratios, clip, kl_refs, true);
}

std::pair<int, int> preference_pair(std::span<const double> rewards) {
  if (rewards.size() < 2) throw ArgumentError("dflow_dpo: group size must be >= 2");
  int best = 0, worst = 0;
  for (int i = 1; i < static_cast<int>(rewards.size()); ++i) {
    if (rewards[i] > rewards[best]) best = i;
    if (rewards[i] < rewards[worst]) worst = i;
  }
  if (best == worst) worst = best == 0 ? 1 : 0;
  return {best, worst};
}

ObjectiveValue dflow_dpo(std::span<const double> rewards, const LogRatioGrid& log_ratios,
                         double beta) {
  if (log_ratios.size() != rewards.size())
    throw ArgumentError("dflow_dpo: rewards and trajectories disagree in count");
  const auto [best, worst] = preference_pair(rewards);
  const auto& plus = log_ratios[best];
  const auto& minus = log_ratios[worst];
  if (plus.size() != minus.size() || plus.empty())
    throw ArgumentError("dflow_dpo: trajectories need the same nonzero step count");
  const double K = static_cast<double>(plus.size());
  if (beta <= 0.0) beta = 100.0 / K;

  ObjectiveValue out;
  out.best = best;
  out.worst = worst;
  out.contributions.assign(log_ratios.size(), std::vector<double>(plus.size(), 0.0));
  out.dlog_ratio.resize(log_ratios.size());
  for (std::size_t i = 0; i < log_ratios.size(); ++i)
    for (const auto& u : log_ratios[i]) out.dlog_ratio[i].emplace_back(u.size(), 0.0);

  std::vector<double> margins;
  for (std::size_t k = 0; k < plus.size(); ++k) {
    double dp = 0.0, dm = 0.0;
    for (double v : plus[k]) dp += v;
    for (double v : minus[k]) dm += v;
    const double z = beta * K * (dp - dm);
    const double term = log_sigmoid(z);
    out.value += term / K;
    out.contributions[best][k] = term;
    margins.push_back(z);
    // d/dz log sigma(z) = sigma(-z); dz/dDelta+ = beta K.
    const double s = std::exp(log_sigmoid(-z)) * beta;
    for (double& g : out.dlog_ratio[best][k]) g += s;
    for (double& g : out.dlog_ratio[worst][k]) g -= s;
  }
  out.surrogate = out.value;
  out.ratio_dispersion = population_std(margins);
  return out;
}

}  // namespace dflow
