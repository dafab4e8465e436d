#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dflow/state.hpp"

namespace dflow {

// Time clamp applied before evaluating the metric scheduler. Keeps beta and
// its derivative finite at both ends of [0, 1].
inline constexpr double kMetricTimeEps = 1e-4;

class Vocabulary {
 public:
  explicit Vocabulary(int size, std::optional<Token> mask = std::nullopt);

  int size() const { return size_; }
  std::optional<Token> mask() const { return mask_; }
  bool has_mask() const { return mask_.has_value(); }
  bool is_mask(Token x) const { return mask_ && *mask_ == x; }
  bool valid(Token x) const { return x >= 0 && x < size_; }

  friend bool operator==(const Vocabulary&, const Vocabulary&) = default;

 private:
  int size_;
  std::optional<Token> mask_;
};

// 0 = t_0 < t_1 < ... < t_K = 1.
class TimeGrid {
 public:
  explicit TimeGrid(std::vector<double> times);
  static TimeGrid uniform(int steps);

  int steps() const { return static_cast<int>(times_.size()) - 1; }
  double operator[](int k) const { return times_[k]; }
  double step_size(int k) const { return times_[k + 1] - times_[k]; }
  std::span<const double> times() const { return times_; }

 private:
  std::vector<double> times_;
};

enum class SchedulerKind { kMixtureKappa, kMetricBeta };

// Shape of a mixture scheduler kappa_t.
//   linear:     t
//   cosine:     1 - cos(pi t / 2)
//   polynomial: 1 - (1 - t)^a   (a > 0; rate factor a / (1 - t))
enum class KappaShape { kLinear, kCosine, kPolynomial };

struct SchedulerValue {
  double value;
  double derivative;
};

class Scheduler {
 public:
  static Scheduler linear();
  static Scheduler cosine();
  static Scheduler polynomial(double exponent);
  // beta_t = scale * (t / (1 - t))^exponent
  static Scheduler metric(double scale = 3.0, double exponent = 0.9);

  SchedulerKind kind() const { return kind_; }
  KappaShape shape() const { return shape_; }
  double scale() const { return scale_; }
  double exponent() const { return exponent_; }
  std::string describe() const;

 private:
  Scheduler(SchedulerKind kind, KappaShape shape, double scale, double exponent)
      : kind_(kind), shape_(shape), scale_(scale), exponent_(exponent) {}

  SchedulerKind kind_;
  KappaShape shape_;
  double scale_;
  double exponent_;
};

// (kappa_t, d kappa / dt). Throws DomainError outside [0, 1] and
// ConfigError for a metric scheduler.
SchedulerValue kappa(const Scheduler& scheduler, double t);

// (beta_t, d beta / dt) at t in [0, 1). beta(0) = 0; the derivative is
// evaluated at max(t, kMetricTimeEps) since it diverges at 0 for
// exponents below one. t >= 1 throws SingularityError.
SchedulerValue beta(const Scheduler& scheduler, double t);

// Symmetric nonnegative token distance with a zero diagonal.
class TokenMetric {
 public:
  TokenMetric(int size, std::vector<double> table);
  static TokenMetric absolute_difference(int size);
  // |S| rows of |S| comma-separated nonnegative reals.
  static TokenMetric load_csv(const std::string& path, int size);

  int size() const { return size_; }
  double operator()(Token a, Token b) const { return table_[a * size_ + b]; }
  std::span<const double> row(Token a) const {
    return {table_.data() + a * size_, static_cast<std::size_t>(size_)};
  }

 private:
  int size_;
  std::vector<double> table_;
};

enum class PathKind { kMixture, kMetric };
enum class SourceKind { kMask, kUniform, kCustom };

struct SourceDistribution {
  SourceKind kind = SourceKind::kMask;
  std::vector<double> probs;  // kCustom only

  static SourceDistribution mask() { return {SourceKind::kMask, {}}; }
  static SourceDistribution uniform() { return {SourceKind::kUniform, {}}; }
  static SourceDistribution custom(std::vector<double> p) {
    return {SourceKind::kCustom, std::move(p)};
  }
};

// Per-token conditional probability path q_{t|1}(x | x1).
class ProbabilityPath {
 public:
  // kappa_t delta_{x1}(x) + (1 - kappa_t) q_0(x)
  static ProbabilityPath mixture(Vocabulary vocab, Scheduler kappa,
                                 SourceDistribution source);
  // softmax_x(-beta_t d(x, x1)); source is uniform (beta_0 = 0).
  static ProbabilityPath metric(Vocabulary vocab, Scheduler beta,
                                std::optional<TokenMetric> metric);

  PathKind kind() const { return kind_; }
  const Vocabulary& vocab() const { return vocab_; }
  const Scheduler& scheduler() const { return scheduler_; }
  const std::optional<TokenMetric>& metric() const { return metric_; }
  const TokenMetric& require_metric() const;
  SourceKind source_kind() const { return source_kind_; }

  // q_0 over S.
  std::span<const double> source_probs() const { return source_; }

  // Fills out[x] = q_{t|1}(x | x1) for all x.
  void probs(Token x1, double t, std::span<double> out) const;
  double prob(Token x, Token x1, double t) const;

  // Time at which the scheduler is actually evaluated (identity for mixture,
  // clamped into [eps, 1 - eps] for metric).
  double effective_time(double t) const;

 private:
  ProbabilityPath(PathKind kind, Vocabulary vocab, Scheduler scheduler,
                  std::optional<TokenMetric> metric, SourceKind source_kind,
                  std::vector<double> source);

  PathKind kind_;
  Vocabulary vocab_;
  Scheduler scheduler_;
  std::optional<TokenMetric> metric_;
  SourceKind source_kind_;
  std::vector<double> source_;
};

double path_prob(const ProbabilityPath& path, Token x, Token x1, double t);

}  // namespace dflow
