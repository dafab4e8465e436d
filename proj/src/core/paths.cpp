#include "dflow/paths.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "dflow/errors.hpp"

namespace dflow {

Vocabulary::Vocabulary(int size, std::optional<Token> mask)
    : size_(size), mask_(mask) {
  if (size < 2) throw ConfigError("vocabulary size must be at least 2");
  if (mask && (*mask < 0 || *mask >= size))
    throw ConfigError("mask index out of range");
}

TimeGrid::TimeGrid(std::vector<double> times) : times_(std::move(times)) {
  if (times_.size() < 2) throw ConfigError("time grid needs K >= 1");
  if (times_.front() != 0.0 || times_.back() != 1.0)
    throw ConfigError("time grid must start at 0 and end at 1");
  for (std::size_t k = 1; k < times_.size(); ++k)
    if (!(times_[k] > times_[k - 1]))
      throw ConfigError("time grid must be strictly increasing");
}

TimeGrid TimeGrid::uniform(int steps) {
  if (steps < 1) throw ConfigError("time grid needs K >= 1");
  std::vector<double> t(steps + 1);
  for (int k = 0; k <= steps; ++k) t[k] = static_cast<double>(k) / steps;
  t.back() = 1.0;
  return TimeGrid(std::move(t));
}

Scheduler Scheduler::linear() {
  return {SchedulerKind::kMixtureKappa, KappaShape::kLinear, 1.0, 1.0};
}
Scheduler Scheduler::cosine() {
  return {SchedulerKind::kMixtureKappa, KappaShape::kCosine, 1.0, 1.0};
}
Scheduler Scheduler::polynomial(double exponent) {
  if (!(exponent > 0.0)) throw ConfigError("polynomial kappa exponent must be > 0");
  return {SchedulerKind::kMixtureKappa, KappaShape::kPolynomial, 1.0, exponent};
}
Scheduler Scheduler::metric(double scale, double exponent) {
  if (!(scale >= 0.0) || !(exponent > 0.0))
    throw ConfigError("metric scheduler needs scale >= 0 and exponent > 0");
  return {SchedulerKind::kMetricBeta, KappaShape::kLinear, scale, exponent};
}

std::string Scheduler::describe() const {
  std::ostringstream os;
  if (kind_ == SchedulerKind::kMetricBeta) {
    os << "beta(scale=" << scale_ << ",exponent=" << exponent_ << ")";
  } else {
    switch (shape_) {
      case KappaShape::kLinear: os << "kappa(linear)"; break;
      case KappaShape::kCosine: os << "kappa(cosine)"; break;
      case KappaShape::kPolynomial: os << "kappa(polynomial," << exponent_ << ")"; break;
    }
  }
  return os.str();
}

SchedulerValue kappa(const Scheduler& s, double t) {
  if (s.kind() != SchedulerKind::kMixtureKappa)
    throw ConfigError("kappa() requires a mixture scheduler");
  if (!(t >= 0.0 && t <= 1.0)) throw DomainError("kappa: t outside [0, 1]");
  switch (s.shape()) {
    case KappaShape::kLinear:
      return {t, 1.0};
    case KappaShape::kCosine: {
      const double a = std::numbers::pi * t / 2.0;
      // 2 sin^2(a/2) avoids cancellation near 0; cos(a) = sin(pi (1 - t) / 2) is exact at 1.
      const double h = std::sin(a / 2.0);
      const double value = t < 0.5 ? 2.0 * h * h : 1.0 - std::sin(std::numbers::pi * (1.0 - t) / 2.0);
      return {std::min(1.0, value), std::numbers::pi / 2.0 * std::sin(a)};
    }
    case KappaShape::kPolynomial: {
      const double a = s.exponent();
      const double rest = std::pow(1.0 - t, a);
      return {1.0 - rest, a * std::pow(1.0 - t, a - 1.0)};
    }
  }
  return {t, 1.0};
}

SchedulerValue beta(const Scheduler& s, double t) {
  if (s.kind() != SchedulerKind::kMetricBeta)
    throw ConfigError("beta() requires a metric scheduler");
  if (!(t >= 0.0 && t <= 1.0)) throw DomainError("beta: t outside [0, 1]");
  if (t >= 1.0) throw SingularityError("beta diverges at t = 1");
  const double a = s.scale(), p = s.exponent();
  const double value = t == 0.0 ? 0.0 : a * std::pow(t / (1.0 - t), p);
  const double td = std::max(t, kMetricTimeEps);
  const double odds = td / (1.0 - td);
  const double derivative = a * p * std::pow(odds, p - 1.0) / ((1.0 - td) * (1.0 - td));
  return {value, derivative};
}

TokenMetric::TokenMetric(int size, std::vector<double> table)
    : size_(size), table_(std::move(table)) {
  if (size < 1 || table_.size() != static_cast<std::size_t>(size) * size)
    throw ConfigError("metric table must be |S| x |S|");
  for (int a = 0; a < size; ++a) {
    if ((*this)(a, a) != 0.0) throw ConfigError("metric must vanish on the diagonal");
    for (int b = 0; b < size; ++b) {
      const double v = (*this)(a, b);
      if (!(v >= 0.0) || !std::isfinite(v))
        throw ConfigError("metric entries must be finite and nonnegative");
      if (v != (*this)(b, a)) throw ConfigError("metric must be symmetric");
    }
  }
}

TokenMetric TokenMetric::absolute_difference(int size) {
  std::vector<double> t(static_cast<std::size_t>(size) * size);
  for (int a = 0; a < size; ++a)
    for (int b = 0; b < size; ++b) t[a * size + b] = std::abs(a - b);
  return TokenMetric(size, std::move(t));
}

TokenMetric TokenMetric::load_csv(const std::string& path, int size) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open metric table " + path);
  std::vector<double> t;
  std::string line;
  int rows = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::stringstream ss(line);
    std::string cell;
    int cols = 0;
    while (std::getline(ss, cell, ',')) {
      try {
        t.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw ConfigError("bad metric entry '" + cell + "' in " + path);
      }
      ++cols;
    }
    if (cols != size) throw ConfigError("metric row has wrong width in " + path);
    ++rows;
  }
  if (rows != size) throw ConfigError("metric table has wrong height in " + path);
  return TokenMetric(size, std::move(t));
}

ProbabilityPath::ProbabilityPath(PathKind kind, Vocabulary vocab, Scheduler scheduler,
                                 std::optional<TokenMetric> metric,
                                 SourceKind source_kind, std::vector<double> source)
    : kind_(kind),
      vocab_(vocab),
      scheduler_(scheduler),
      metric_(std::move(metric)),
      source_kind_(source_kind),
      source_(std::move(source)) {}

ProbabilityPath ProbabilityPath::mixture(Vocabulary vocab, Scheduler kappa,
                                         SourceDistribution source) {
  if (kappa.kind() != SchedulerKind::kMixtureKappa)
    throw ConfigError("mixture path needs a kappa scheduler");
  const int n = vocab.size();
  std::vector<double> q0(n, 0.0);
  switch (source.kind) {
    case SourceKind::kMask:
      if (!vocab.has_mask()) throw ConfigError("masked source needs a mask token");
      q0[*vocab.mask()] = 1.0;
      break;
    case SourceKind::kUniform: {
      const int support = n - (vocab.has_mask() ? 1 : 0);
      for (int x = 0; x < n; ++x)
        if (!vocab.is_mask(x)) q0[x] = 1.0 / support;
      break;
    }
    case SourceKind::kCustom: {
      if (static_cast<int>(source.probs.size()) != n)
        throw ConfigError("custom source must have |S| entries");
      double total = 0.0;
      for (double p : source.probs) {
        if (!(p >= 0.0)) throw ConfigError("custom source entries must be >= 0");
        total += p;
      }
      if (std::abs(total - 1.0) > 1e-12) throw ConfigError("custom source must sum to 1");
      q0 = source.probs;
      break;
    }
  }
  return ProbabilityPath(PathKind::kMixture, vocab, kappa, std::nullopt, source.kind,
                         std::move(q0));
}

ProbabilityPath ProbabilityPath::metric(Vocabulary vocab, Scheduler beta,
                                        std::optional<TokenMetric> metric) {
  if (beta.kind() != SchedulerKind::kMetricBeta)
    throw ConfigError("metric path needs a beta scheduler");
  if (vocab.has_mask()) throw ConfigError("metric path does not use a mask token");
  if (!metric) throw ConfigError("metric path needs a token metric");
  if (metric->size() != vocab.size())
    throw ConfigError("metric table size does not match vocabulary");
  std::vector<double> q0(vocab.size(), 1.0 / vocab.size());
  return ProbabilityPath(PathKind::kMetric, vocab, beta, std::move(metric),
                         SourceKind::kUniform, std::move(q0));
}

const TokenMetric& ProbabilityPath::require_metric() const {
  if (!metric_) throw ConfigError("metric path has no token metric configured");
  return *metric_;
}

double ProbabilityPath::effective_time(double t) const {
  if (!(t >= 0.0 && t <= 1.0)) throw DomainError("path: t outside [0, 1]");
  if (kind_ == PathKind::kMixture) return t;
  return std::clamp(t, kMetricTimeEps, 1.0 - kMetricTimeEps);
}

void ProbabilityPath::probs(Token x1, double t, std::span<double> out) const {
  const int n = vocab_.size();
  if (!vocab_.valid(x1)) throw DomainError("path: token out of range");
  const double te = effective_time(t);
  if (kind_ == PathKind::kMixture) {
    const double k = kappa(scheduler_, te).value;
    for (int x = 0; x < n; ++x) out[x] = (1.0 - k) * source_[x];
    out[x1] += k;
    return;
  }
  const TokenMetric& m = require_metric();
  const double b = beta(scheduler_, te).value;
  double max_logit = -INFINITY;
  for (int x = 0; x < n; ++x) max_logit = std::max(max_logit, -b * m(x, x1));
  double total = 0.0;
  for (int x = 0; x < n; ++x) {
    out[x] = std::exp(-b * m(x, x1) - max_logit);
    total += out[x];
  }
  for (int x = 0; x < n; ++x) out[x] /= total;
}

double ProbabilityPath::prob(Token x, Token x1, double t) const {
  if (!vocab_.valid(x)) throw DomainError("path: token out of range");
  std::vector<double> row(vocab_.size());
  probs(x1, t, row);
  return row[x];
}

double path_prob(const ProbabilityPath& path, Token x, Token x1, double t) {
  return path.prob(x, x1, t);
}

}  // namespace dflow
