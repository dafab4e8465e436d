#pragma once

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "dflow/paths.hpp"
#include "dflow/policy.hpp"
#include "dflow/rates.hpp"
#include "dflow/task.hpp"
#include "dflow/training.hpp"

namespace dflow {

// Everything a run needs. Loaded from a sectioned key = value file whose
// first line is "# dflow-config v1"; see configs/ for examples.
struct RunConfig {
  // [run]
  std::optional<std::uint64_t> seed;
  std::string name = "run";
  std::string method = "dflow-grpo";
  int updates = 200;
  int eval_every = 0;
  int eval_samples = 64;
  int checkpoint_every = 0;  // 0: final checkpoint only
  std::optional<double> stop_reward;
  int stop_window = 20;
  bool record_wall_time = false;

  // [path]
  std::string path_kind = "metric";  // mixture | metric
  std::string source = "uniform";    // mask | uniform (mixture only)
  std::string kappa = "linear";      // linear | cosine | polynomial
  double kappa_exponent = 2.0;
  double beta_scale = 3.0;
  double beta_exponent = 0.9;
  std::string metric = "absolute";  // absolute | path to an |S| x |S| CSV
  int vocab = 16;                   // tokens excluding the mask

  // [model]
  std::string model = "tabular";  // tabular | mlp
  int hidden = 32;
  std::uint64_t init_seed = 0;

  // [rollout]
  int steps = 8;
  int n_mc = 8;
  int group_size = 8;

  // [clip]
  double eps_low = 1e-3;
  double eps_high = 1.5e-3;
  double beta_kl = 0.0;
  bool token_level_kl = false;

  // [optim]
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.0;
  double clip_norm = 1.0;
  int sync_every = 48;
  int prompts_per_update = 4;
  double dpo_beta = 0.0;

  // [pretrain]
  int pretrain_steps = 0;
  int pretrain_batch = 16;
  double pretrain_lr = 0.05;
  double pretrain_target_prob = 0.3;  // target-sequence data: P(target token)

  // [task]
  std::string task = "target-sequence";
  int length = 8;
  int prompts = 4;
  std::uint64_t task_seed = 7;
  double target_frac = 0.5;

  // Assigns "section.key" from text; ConfigError for unknown keys or
  // unparsable values.
  void set(const std::string& key, const std::string& value);
  // Parses an override of the form section.key=value.
  void apply_override(const std::string& assignment);
  // Consistency checks across sections.
  void validate() const;
  // Canonical text form (round-trips through parse_config).
  std::string to_text() const;
  // Canonical form with run.method and run.name blanked, for comparing
  // configurations that may differ only in the objective.
  std::string comparable_text() const;
};

RunConfig parse_config(std::istream& in);
RunConfig load_config(const std::string& path);

// Objects built from a validated config.
struct RunSetup {
  ProbabilityPath path;
  ConditionalRate rate;
  TaskSpec task;
  ModelSpec model_spec;
  TrainConfig train;
  PretrainConfig pretrain;
  std::vector<DataDistribution> pretrain_data;
};

RunSetup build_setup(const RunConfig& cfg);

}  // namespace dflow
