#pragma once

// Brute-force reference computations. Everything here is written against
// plain vectors and shares no code with the engine.

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <vector>

namespace dflow::oracle {

class OracleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Row = std::vector<double>;
using Table = std::vector<Row>;  // [d][token]

struct PathSpec {
  enum class Kind { kMixture, kMetric } kind = Kind::kMixture;
  enum class Kappa { kLinear, kCosine, kPolynomial } kappa = Kappa::kLinear;
  int vocab = 2;
  int mask = -1;            // -1 when absent
  Row source;               // q_0; filled by the caller
  double kappa_exponent = 1.0;
  double beta_scale = 3.0;
  double beta_exponent = 0.9;
  Row metric;               // vocab * vocab, metric paths only
  double time_eps = 1e-4;   // metric time clamp
};

// Scheduler quantities.
double kappa_of(const PathSpec& p, double t);
double kappa_rate_factor(const PathSpec& p, double t);  // kappa' / (1 - kappa)
double beta_of(const PathSpec& p, double t);
double beta_dot_of(const PathSpec& p, double t);

// q_{t|1}(. | x1).
Row path_row(const PathSpec& p, int x1, double t);
// Q_t(x, z | x1) for z != x.
double jump_rate(const PathSpec& p, int x, int z, int x1, double t);

// Exact per-position law of one Euler step with a single posterior sample,
// averaged over the posterior row.
struct TransitionTable {
  Table rows;  // [d][next token]
  double joint(const std::vector<int>& next) const;
};

inline constexpr int kMaxEnumVocab = 32;
inline constexpr std::size_t kMaxJointStates = 4096;

// Sum over x1 of posterior(x1) times the single-sample step law.
TransitionTable enumerate_transition(const PathSpec& p, const Table& posterior,
                                     const std::vector<int>& x_k, double t_k, double h);
// Same table assembled the other way round: every move probability first,
// then the stay entry as the complement.
TransitionTable enumerate_transition_complement(const PathSpec& p, const Table& posterior,
                                                const std::vector<int>& x_k, double t_k,
                                                double h);
double max_abs_gap(const TransitionTable& a, const TransitionTable& b);

// Posterior rows for a joint state at time t.
using PosteriorFn = std::function<Table(const std::vector<int>& x, double t)>;

struct ChainMarginals {
  int length = 0;
  int vocab = 0;
  std::vector<double> times;
  std::vector<Row> joint;  // [k][flattened state], base-vocab digits, position 0 most significant
  Row position_marginal(std::size_t k, int d) const;
};

ChainMarginals compose_chain(const PathSpec& p, const PosteriorFn& posterior,
                             const std::vector<double>& grid, int length);

// Exact q_{1|t}(. | x_t) for positionwise independent data.
Table bayes_posterior(const PathSpec& p, const Table& data_marginals,
                      const std::vector<int>& x_t, double t);

// Analytic marginal q_t(x) = sum_{x1} q_{t|1}(x|x1) data(x1) for one position.
Row path_marginal(const PathSpec& p, const Row& data, double t);

double total_variation(const Row& a, const Row& b);

// Scalar objective of a parameter vector, value plus central differences.
struct ValueAndGrad {
  double value = 0.0;
  std::vector<double> grad;
};

inline constexpr double kFdStep = 1e-6;

// Evaluates f twice at the base point and refuses if the results differ
// bit-for-bit (hidden randomness). With richardson, combines steps h and
// h/2 to cancel the leading error term.
ValueAndGrad exact_objective_and_grad(const std::function<double(const std::vector<double>&)>& f,
                                      const std::vector<double>& params,
                                      double step = kFdStep, bool richardson = false);

// Gradient at theta = theta_old written as a rate-weighted posterior score:
//   (1/GK) sum_{i,k} A_i (1/D) sum_d (1/n) sum_j w^_j grad log p(X_j)
// with self-normalized weights w^ computed from the path here.
struct ScoreTerm {
  int i = 0;                  // trajectory
  double t_k = 0.0;
  double h = 0.0;
  int x = 0;                  // token at t_k
  int x_next = 0;             // token at t_{k+1}
  std::vector<int> samples;   // cached posterior samples
  // grad log p(sample) w.r.t. parameters, one per sample.
  std::vector<std::vector<double>> scores;
};

std::vector<double> weighted_score_gradient(const PathSpec& p, const std::vector<double>& adv,
                                            int steps, int length,
                                            const std::vector<ScoreTerm>& terms,
                                            std::size_t num_params);

// Single-sample step law w~(x1) for one position.
double step_weight(const PathSpec& p, int x, int x_next, int x1, double t_k, double h);

}  // namespace dflow::oracle
