#pragma once

#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "dflow/objectives.hpp"
#include "dflow/policy.hpp"
#include "dflow/sampler.hpp"

namespace dflow {

// Positionwise-independent distribution over S^D.
struct DataDistribution {
  int length = 0;
  int vocab = 0;
  std::vector<std::vector<double>> marginals;  // [d][x]

  static DataDistribution point_mass(const SequenceState& x, int vocab);
  static DataDistribution uniform(int length, int vocab, std::optional<Token> exclude = {});
  // target[d] with probability p, the remaining mass spread evenly over the
  // other non-excluded tokens.
  static DataDistribution noisy(const SequenceState& target, int vocab, double p,
                                std::optional<Token> exclude = {});

  SequenceState sample(RandomStream& rng) const;
  double prob(const SequenceState& x) const;
};

struct PretrainConfig {
  int steps = 500;
  int batch = 16;
  AdamConfig adam{.lr = 0.05};
  TimeGrid grid = TimeGrid::uniform(8);  // t drawn uniformly from t_0..t_{K-1}
};

struct PretrainReport {
  std::vector<double> losses;  // mean per-sequence loss at each step
};

// Minimizes -E[sum_d log p(x1^d | x_t, c)] with x1 ~ data[c], x_t ~ q_{t|1}.
// data holds one distribution per prompt.
PretrainReport pretrain_ce(PosteriorModel& model, const ProbabilityPath& path,
                           const std::vector<DataDistribution>& data,
                           const PretrainConfig& config, RandomStream& rng);

enum class Method { kDflowGrpo, kDiffuGrpo, kDiffuGspo, kDflowDpo };

const char* to_string(Method method);
Method parse_method(const std::string& name);

// One group of rollouts sharing a prompt.
struct Group {
  int prompt = 0;
  std::vector<Trajectory> members;
  std::vector<double> rewards;
  std::vector<double> advantages;
};

Group make_group(int prompt, std::vector<Trajectory> members);

struct UpdateResult {
  double objective = 0.0;
  double clip_fraction = 0.0;
  double mean_kl = 0.0;
  double ratio_dispersion = 0.0;
  int degenerate = 0;
  std::vector<double> grad;  // d objective / d params (ascent direction)
};

// Objective and gradient of `method` for the current model on frozen
// rollouts (caches hold theta_old). Groups are averaged with equal weight.
// ref is required when clip.beta_kl > 0.
UpdateResult objective_and_grad(Method method, const PosteriorModel& model,
                                const PosteriorModel* ref, const std::vector<Group>& groups,
                                const ClipConfig& clip, double dpo_beta = 0.0);

struct MetricsRecord {
  std::string kind = "train";  // train | eval
  long step = 0;
  double mean_reward = 0.0;
  double max_reward = 0.0;
  double min_reward = 0.0;
  double objective = 0.0;
  double clip_fraction = 0.0;
  double mean_kl = 0.0;
  double ratio_dispersion = 0.0;
  double grad_norm = 0.0;
  double wall_time = 0.0;

  friend bool operator==(const MetricsRecord&, const MetricsRecord&) = default;
};

// "# dflow-metrics v1" then a field-name comment line, then one CSV record
// per line in the MetricsRecord field order. Doubles use %.17g.
void write_metrics_header(std::ostream& out);
std::string format_metrics(const MetricsRecord& rec);
MetricsRecord parse_metrics(const std::string& line);
std::vector<MetricsRecord> read_metrics(std::istream& in);

struct TrainConfig {
  Method method = Method::kDflowGrpo;
  RolloutConfig rollout;
  ClipConfig clip;
  AdamConfig adam;
  int sync_every = 48;
  int updates = 0;
  int prompts_per_update = 4;
  double dpo_beta = 0.0;  // <= 0: 100 / K
  int eval_every = 0;     // 0: evaluate only at start and end
  int eval_samples = 64;
  // Stop once the trailing mean of per-update mean reward reaches this.
  std::optional<double> stop_reward;
  int stop_window = 20;
  bool record_wall_time = false;
};

struct TrainReport {
  std::vector<MetricsRecord> records;
  long updates_run = 0;
  bool reached_stop = false;
};

using MetricsSink = std::function<void(const MetricsRecord&)>;

// Mean terminal reward of fresh rollouts under the model.
double evaluate(const PosteriorModel& model, const ConditionalRate& cr,
                const RolloutConfig& rollout, int num_prompts, int samples,
                std::uint64_t seed, const RewardFn& reward);

// Training loop. theta_old is refreshed every sync_every updates; rollouts come
// from theta_old and the update ascends the chosen objective. NaN or Inf
// throws NumericalAbort after writing a dump of the offending group to
// stderr.
TrainReport train(PosteriorModel& model, const ConditionalRate& cr, const TrainConfig& config,
                  int num_prompts, const RewardFn& reward, const MetricsSink& sink = {});

}  // namespace dflow
