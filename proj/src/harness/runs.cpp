#include "dflow/runs.hpp"

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <set>

#include "dflow/errors.hpp"

namespace dflow {
namespace fs = std::filesystem;

fs::path output_root() {
  if (const char* env = std::getenv("DFLOW_OUTPUT_ROOT"); env && *env) return env;
  return "runs";
}

namespace {

std::ofstream open_out(const fs::path& p) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw ConfigError("cannot write '" + p.string() + "'");
  return out;
}

RewardFn reward_of(const TaskSpec& task) {
  return [&task](int prompt, const SequenceState& x) { return task.reward(prompt, x); };
}

}  // namespace

std::unique_ptr<PosteriorModel> initial_model(const RunConfig& cfg, const RunSetup& setup,
                                              const std::string& checkpoint) {
  if (!checkpoint.empty()) {
    const PolicySnapshot snap = load_checkpoint(checkpoint);
    if (!(snap.spec() == setup.model_spec))
      throw ConfigError("checkpoint architecture does not match the config");
    return restore(snap);
  }
  auto model = make_model(setup.model_spec, cfg.init_seed);
  if (cfg.pretrain_steps > 0) {
    RandomStream rng(derive_seed(cfg.init_seed, {0x70726574}));
    pretrain_ce(*model, setup.path, setup.pretrain_data, setup.pretrain, rng);
  }
  return model;
}

TrainReport run_train(const RunConfig& cfg, const fs::path& dir,
                      const std::string& init_checkpoint) {
  if (!cfg.seed) throw ConfigError("train: a seed is required");
  const RunSetup setup = build_setup(cfg);
  auto model = initial_model(cfg, setup, init_checkpoint);
  fs::create_directories(dir);
  open_out(dir / "config.cfg") << cfg.to_text();

  std::ofstream metrics = open_out(dir / "metrics.csv");
  write_metrics_header(metrics);
  const RewardFn reward = reward_of(setup.task);
  const auto sink = [&](const MetricsRecord& r) {
    metrics << format_metrics(r) << "\n";
    metrics.flush();
    if (cfg.checkpoint_every > 0 && r.kind == "train" && r.step % cfg.checkpoint_every == 0)
      save_checkpoint(snapshot(*model),
                      (dir / ("checkpoint-" + std::to_string(r.step) + ".txt")).string());
  };
  TrainReport report;
  try {
    report = train(*model, setup.rate, setup.train, setup.task.num_prompts(), reward, sink);
  } catch (const NumericalAbort&) {
    save_checkpoint(snapshot(*model), (dir / "checkpoint-abort.txt").string());
    throw;
  }
  save_checkpoint(snapshot(*model), (dir / "checkpoint.txt").string());
  return report;
}

void run_pretrain(const RunConfig& cfg, const fs::path& dir) {
  const RunSetup setup = build_setup(cfg);
  auto model = make_model(setup.model_spec, cfg.init_seed);
  RandomStream rng(derive_seed(cfg.init_seed, {0x70726574}));
  const PretrainReport rep = pretrain_ce(*model, setup.path, setup.pretrain_data, setup.pretrain, rng);
  fs::create_directories(dir);
  open_out(dir / "config.cfg") << cfg.to_text();
  std::ofstream log = open_out(dir / "pretrain.csv");
  log << "# dflow-pretrain v1\n# step,loss\n";
  char buf[64];
  for (std::size_t i = 0; i < rep.losses.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g", rep.losses[i]);
    log << i + 1 << "," << buf << "\n";
  }
  save_checkpoint(snapshot(*model), (dir / "checkpoint.txt").string());
}

std::vector<EvalPoint> run_eval(const RunConfig& cfg, const std::string& checkpoint,
                                const std::vector<int>& nfe, const fs::path& dir) {
  const RunSetup setup = build_setup(cfg);
  auto model = initial_model(cfg, setup, checkpoint);
  const RewardFn reward = reward_of(setup.task);
  std::vector<EvalPoint> out;
  for (int K : nfe) {
    if (K < 1) throw ConfigError("eval: step counts must be >= 1");
    RolloutConfig rollout = setup.train.rollout;
    rollout.grid = TimeGrid::uniform(K);
    const std::uint64_t seed = derive_seed(cfg.seed.value_or(0), {0x6e6665, static_cast<std::uint64_t>(K)});
    out.push_back({K, evaluate(*model, setup.rate, rollout, setup.task.num_prompts(),
                               cfg.eval_samples, seed, reward)});
  }
  if (!dir.empty()) {
    fs::create_directories(dir);
    std::ofstream log = open_out(dir / "eval.csv");
    log << "# dflow-eval v1\n# steps,mean_reward\n";
    char buf[64];
    for (const EvalPoint& p : out) {
      std::snprintf(buf, sizeof buf, "%.17g", p.mean_reward);
      log << p.steps << "," << buf << "\n";
    }
  }
  return out;
}

void run_sample(const RunConfig& cfg, const std::string& checkpoint, int count, std::ostream& out) {
  if (count < 1) throw ConfigError("sample: count must be >= 1");
  const RunSetup setup = build_setup(cfg);
  auto model = initial_model(cfg, setup, checkpoint);
  RandomStream rng(cfg.seed.value_or(0));
  std::vector<Trajectory> trajs;
  for (int i = 0; i < count; ++i) {
    const int prompt = i % setup.task.num_prompts();
    Trajectory tr = rollout(prompt, *model, setup.rate, setup.train.rollout, rng);
    tr.reward = setup.task.reward(prompt, tr.terminal());
    trajs.push_back(std::move(tr));
  }
  write_trajectories(out, trajs);
}

std::vector<CompareRow> run_compare(const std::vector<RunConfig>& configs, const fs::path& dir) {
  if (configs.empty()) throw ConfigError("compare: no configs");
  const std::string base = configs.front().comparable_text();
  std::set<std::string> methods;
  for (const RunConfig& c : configs) {
    if (c.comparable_text() != base)
      throw ConfigError("compare: configs differ in more than run.method");
    if (!methods.insert(c.method).second)
      throw ConfigError("compare: method '" + c.method + "' listed twice");
  }
  std::vector<CompareRow> rows;
  for (const RunConfig& c : configs) {
    const TrainReport rep = run_train(c, dir / c.method);
    CompareRow row{c.method, 0.0, 0.0, rep.updates_run};
    for (const MetricsRecord& r : rep.records) {
      if (r.kind == "eval") row.final_eval = r.mean_reward;
      if (r.kind == "train") row.last_train_reward = r.mean_reward;
    }
    rows.push_back(row);
  }
  std::ofstream table = open_out(dir / "compare.csv");
  table << "# dflow-compare v1\n# method,final_eval_reward,last_train_reward,updates\n";
  char a[64], b[64];
  for (const CompareRow& r : rows) {
    std::snprintf(a, sizeof a, "%.17g", r.final_eval);
    std::snprintf(b, sizeof b, "%.17g", r.last_train_reward);
    table << r.method << "," << a << "," << b << "," << r.updates << "\n";
  }
  return rows;
}

}  // namespace dflow
