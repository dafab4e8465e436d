#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "dflow/config.hpp"
#include "dflow/errors.hpp"
#include "dflow/runs.hpp"
#include "dflow/verify.hpp"

namespace fs = std::filesystem;
using namespace dflow;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool need_config = true) {
  auto* opt = cmd->add_option("-c,--config", c.config, "run configuration file");
  if (need_config) opt->required();
  cmd->add_option("-s,--set", c.overrides, "override, e.g. optim.lr=0.01")->take_all();
  cmd->add_option("--seed", c.seed, "run seed");
}

RunConfig load(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : load_config(c.config);
  for (const auto& o : c.overrides) cfg.apply_override(o);
  if (c.seed) cfg.seed = *c.seed;
  cfg.validate();
  return cfg;
}

fs::path out_dir(const Common& c, const RunConfig& cfg) {
  return c.out.empty() ? output_root() / cfg.name : fs::path(c.out);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Discrete flow policy optimization on toy tasks"};
  app.require_subcommand(1);

  std::uint64_t verify_seed = 20261016;
  bool quick = false;
  auto* verify = app.add_subcommand("verify", "run the oracle suite");
  verify->add_option("--seed", verify_seed);
  verify->add_flag("--quick", quick, "smaller sampler check");

  Common pre;
  auto* pretrain = app.add_subcommand("pretrain", "cross-entropy pretraining only");
  add_common(pretrain, pre);
  pretrain->add_option("-o,--out", pre.out, "output directory");

  Common tr;
  std::string init;
  auto* train = app.add_subcommand("train", "policy optimization run");
  add_common(train, tr);
  train->get_option("--seed")->required();
  train->add_option("-o,--out", tr.out, "output directory");
  train->add_option("--init", init, "start from this checkpoint");

  Common ev;
  std::string ev_ckpt;
  std::vector<int> nfe;
  auto* eval = app.add_subcommand("eval", "mean reward at several step counts");
  add_common(eval, ev);
  eval->add_option("--checkpoint", ev_ckpt, "checkpoint to evaluate");
  eval->add_option("--nfe", nfe, "grid sizes")->delimiter(',');
  eval->add_option("-o,--out", ev.out, "output directory");

  Common sm;
  std::string sm_ckpt, sm_file;
  int count = 4;
  auto* sample = app.add_subcommand("sample", "dump trajectories");
  add_common(sample, sm);
  sample->add_option("--checkpoint", sm_ckpt);
  sample->add_option("-n,--count", count);
  sample->add_option("-f,--file", sm_file, "write here instead of stdout");

  std::vector<std::string> cmp_configs;
  std::vector<std::string> cmp_methods;
  Common cmp;
  auto* compare = app.add_subcommand("compare", "same run under several objectives");
  add_common(compare, cmp, false);
  compare->add_option("--configs", cmp_configs, "one config per method");
  compare->add_option("--methods", cmp_methods, "methods applied to --config")->delimiter(',');
  compare->add_option("-o,--out", cmp.out, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(ExitCode::kConfig);
  }

  try {
    if (*verify) {
      bool ok = true;
      for (const CheckResult& c : run_verify_suite(verify_seed, quick)) {
        std::cout << format_check(c) << '\n';
        ok = ok && c.pass;
      }
      return static_cast<int>(ok ? ExitCode::kSuccess : ExitCode::kVerification);
    }
    if (*pretrain) {
      const RunConfig cfg = load(pre);
      run_pretrain(cfg, out_dir(pre, cfg));
      return 0;
    }
    if (*train) {
      const RunConfig cfg = load(tr);
      const fs::path dir = out_dir(tr, cfg);
      const TrainReport r = run_train(cfg, dir, init);
      std::printf("updates %ld reached_stop %d dir %s\n", r.updates_run, r.reached_stop ? 1 : 0,
                  dir.string().c_str());
      return 0;
    }
    if (*eval) {
      const RunConfig cfg = load(ev);
      if (nfe.empty()) nfe = {cfg.steps};
      const fs::path dir = ev.out.empty() ? fs::path() : fs::path(ev.out);
      for (const EvalPoint& p : run_eval(cfg, ev_ckpt, nfe, dir))
        std::printf("%d\t%.17g\n", p.steps, p.mean_reward);
      return 0;
    }
    if (*sample) {
      const RunConfig cfg = load(sm);
      if (sm_file.empty()) {
        run_sample(cfg, sm_ckpt, count, std::cout);
      } else {
        std::ofstream f(sm_file);
        if (!f) throw ConfigError("cannot write " + sm_file);
        run_sample(cfg, sm_ckpt, count, f);
      }
      return 0;
    }
    if (*compare) {
      std::vector<RunConfig> configs;
      for (const auto& path : cmp_configs) {
        Common c = cmp;
        c.config = path;
        configs.push_back(load(c));
      }
      if (!cmp_methods.empty()) {
        if (cmp.config.empty()) throw ConfigError("--methods needs --config");
        for (const auto& m : cmp_methods) {
          Common c = cmp;
          c.overrides.push_back("run.method=" + m);
          configs.push_back(load(c));
        }
      }
      if (configs.size() < 2) throw ConfigError("compare needs at least two configurations");
      const fs::path dir = cmp.out.empty() ? output_root() / "compare" : fs::path(cmp.out);
      for (const CompareRow& r : run_compare(configs, dir))
        std::printf("%s\t%.17g\t%.17g\t%ld\n", r.method.c_str(), r.final_eval,
                    r.last_train_reward, r.updates);
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "dflow: config error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::kConfig);
  } catch (const NumericalAbort& e) {
    std::cerr << "dflow: numerical abort: " << e.what() << '\n';
    return static_cast<int>(ExitCode::kNumerical);
  } catch (const Error& e) {
    std::cerr << "dflow: error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::kConfig);
  }
  return 0;
}
