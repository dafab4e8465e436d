#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "dflow/config.hpp"

namespace dflow {

// Output root: $DFLOW_OUTPUT_ROOT, else "runs" under the working directory.
std::filesystem::path output_root();

// Model for a run: loaded from `checkpoint` when given, else freshly
// initialized and (if pretrain.steps > 0) cross-entropy pretrained.
std::unique_ptr<PosteriorModel> initial_model(const RunConfig& cfg, const RunSetup& setup,
                                              const std::string& checkpoint = "");

// Writes <dir>/config.cfg, <dir>/metrics.csv and <dir>/checkpoint.txt
// (plus checkpoint-<step>.txt at the configured cadence). Requires a seed.
TrainReport run_train(const RunConfig& cfg, const std::filesystem::path& dir,
                      const std::string& init_checkpoint = "");

// Pretraining only; writes the checkpoint and a loss log.
void run_pretrain(const RunConfig& cfg, const std::filesystem::path& dir);

struct EvalPoint {
  int steps = 0;
  double mean_reward = 0.0;
};

// Fresh rollouts at each grid size. Writes <dir>/eval.csv when dir is not
// empty.
std::vector<EvalPoint> run_eval(const RunConfig& cfg, const std::string& checkpoint,
                                const std::vector<int>& nfe, const std::filesystem::path& dir);

// Dumps `count` trajectories (one per prompt in turn) to `out`.
void run_sample(const RunConfig& cfg, const std::string& checkpoint, int count,
                std::ostream& out);

struct CompareRow {
  std::string method;
  double final_eval = 0.0;
  double last_train_reward = 0.0;
  long updates = 0;
};

// Runs every config into <dir>/<method>/ after checking that they differ
// only in run.method; writes <dir>/compare.csv.
std::vector<CompareRow> run_compare(const std::vector<RunConfig>& configs,
                                    const std::filesystem::path& dir);

}  // namespace dflow
