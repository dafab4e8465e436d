#include "dflow/training.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <deque>
#include <iostream>
#include <sstream>

#include "dflow/errors.hpp"

namespace dflow {

DataDistribution DataDistribution::point_mass(const SequenceState& x, int vocab) {
  DataDistribution out{x.length(), vocab, {}};
  for (int d = 0; d < x.length(); ++d) {
    std::vector<double> row(vocab, 0.0);
    row.at(x[d]) = 1.0;
    out.marginals.push_back(std::move(row));
  }
  return out;
}

DataDistribution DataDistribution::uniform(int length, int vocab, std::optional<Token> exclude) {
  const int live = vocab - (exclude ? 1 : 0);
  std::vector<double> row(vocab, 1.0 / live);
  if (exclude) row.at(*exclude) = 0.0;
  return {length, vocab, std::vector<std::vector<double>>(length, row)};
}

DataDistribution DataDistribution::noisy(const SequenceState& target, int vocab, double p,
                                         std::optional<Token> exclude) {
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("noisy data: p must lie in [0, 1]");
  const int others = vocab - 1 - (exclude ? 1 : 0);
  DataDistribution out{target.length(), vocab, {}};
  for (int d = 0; d < target.length(); ++d) {
    std::vector<double> row(vocab, others > 0 ? (1.0 - p) / others : 0.0);
    if (exclude) row.at(*exclude) = 0.0;
    row.at(target[d]) = others > 0 ? p : 1.0;
    out.marginals.push_back(std::move(row));
  }
  return out;
}

SequenceState DataDistribution::sample(RandomStream& rng) const {
  SequenceState x(length, 0);
  for (int d = 0; d < length; ++d) x[d] = sample_categorical(marginals[d], rng.uniform());
  return x;
}

double DataDistribution::prob(const SequenceState& x) const {
  double p = 1.0;
  for (int d = 0; d < length; ++d) p *= marginals[d][x[d]];
  return p;
}

PretrainReport pretrain_ce(PosteriorModel& model, const ProbabilityPath& path,
                           const std::vector<DataDistribution>& data,
                           const PretrainConfig& config, RandomStream& rng) {
  const ModelSpec& spec = model.spec();
  if (static_cast<int>(data.size()) != spec.num_prompts)
    throw ConfigError("pretrain: need one data distribution per prompt");
  if (path.vocab().size() != spec.vocab_size)
    throw ConfigError("pretrain: model and path disagree on the vocabulary");
  for (const auto& dist : data)
    if (dist.length != spec.length || dist.vocab != spec.vocab_size)
      throw ConfigError("pretrain: data shape does not match the model");

  AdamW opt(model.num_params(), config.adam);
  PretrainReport report;
  std::vector<double> grad(model.num_params()), probs(spec.vocab_size);
  const int K = config.grid.steps();
  for (int step = 0; step < config.steps; ++step) {
    std::fill(grad.begin(), grad.end(), 0.0);
    double loss = 0.0;
    for (int b = 0; b < config.batch; ++b) {
      const int prompt = rng.uniform_int(spec.num_prompts);
      const SequenceState x1 = data[prompt].sample(rng);
      const double t = config.grid[rng.uniform_int(K)];
      SequenceState xt(spec.length, 0);
      for (int d = 0; d < spec.length; ++d) {
        path.probs(x1[d], t, probs);
        xt[d] = sample_categorical(probs, rng.uniform());
      }
      ForwardPass pass = model.forward(xt, t, prompt);
      LogProbs upstream(spec.length, spec.vocab_size);
      for (int d = 0; d < spec.length; ++d) {
        loss -= pass.logp.at(d, x1[d]);
        upstream.at(d, x1[d]) = 1.0 / config.batch;  // gradient of -loss
      }
      model.backward(pass, upstream.data(), grad);
    }
    for (double& g : grad) g = -g;
    opt.step(model.params(), grad);
    report.losses.push_back(loss / config.batch);
  }
  return report;
}

const char* to_string(Method method) {
  switch (method) {
    case Method::kDflowGrpo: return "dflow-grpo";
    case Method::kDiffuGrpo: return "diffu-grpo";
    case Method::kDiffuGspo: return "diffu-gspo";
    case Method::kDflowDpo: return "dflow-dpo";
  }
  return "?";
}

Method parse_method(const std::string& name) {
  for (Method m : {Method::kDflowGrpo, Method::kDiffuGrpo, Method::kDiffuGspo, Method::kDflowDpo})
    if (name == to_string(m)) return m;
  throw ConfigError("unknown method '" + name + "'");
}

Group make_group(int prompt, std::vector<Trajectory> members) {
  Group g;
  g.prompt = prompt;
  g.members = std::move(members);
  for (const auto& tr : g.members) {
    if (!tr.reward) throw ArgumentError("make_group: trajectory without reward");
    g.rewards.push_back(*tr.reward);
  }
  g.advantages = advantages(g.rewards);
  return g;
}

namespace {

struct GroupTerm {
  ObjectiveValue value;
  int degenerate = 0;
};

GroupTerm grpo_group(const PosteriorModel& model, const PosteriorModel* ref, const Group& g,
                     const ClipConfig& clip, double scale, std::span<double> grad) {
  const int G = static_cast<int>(g.members.size());
  const bool use_kl = clip.beta_kl > 0.0;
  std::vector<std::vector<ForwardPass>> passes(G);
  std::vector<std::vector<StepRatioEstimate>> ests(G), kl_ests(G);
  LogRatioGrid grid(G), kl_grid(G);
  GroupTerm out;
  for (int i = 0; i < G; ++i) {
    const Trajectory& tr = g.members[i];
    for (int k = 0; k < tr.steps(); ++k) {
      const StepCache& c = tr.cache.steps[k];
      passes[i].push_back(model.forward(tr.states[k], c.t, g.prompt));
      ests[i].push_back(ratio_estimate(c, passes[i].back().logp));
      out.degenerate += ests[i].back().degenerate;
      grid[i].push_back(ests[i].back().log_ratio);
      if (use_kl) {
        const LogProbs ref_lp = ref->log_probs(tr.states[k], c.t, g.prompt);
        kl_ests[i].push_back(ratio_estimate(c, passes[i].back().logp, &ref_lp));
        kl_grid[i].push_back(kl_ests[i].back().log_ratio);
      }
    }
  }
  out.value = dflow_grpo(g.advantages, grid, clip, use_kl ? &kl_grid : nullptr);
  const ModelSpec& spec = model.spec();
  for (int i = 0; i < G; ++i) {
    const Trajectory& tr = g.members[i];
    for (int k = 0; k < tr.steps(); ++k) {
      const StepCache& c = tr.cache.steps[k];
      LogProbs upstream(spec.length, spec.vocab_size);
      std::vector<double> dl = out.value.dlog_ratio[i][k];
      for (double& v : dl) v *= scale;
      accumulate_logprob_grad(ests[i][k], c, dl, upstream);
      if (use_kl) {
        std::vector<double> dk = out.value.dlog_kl[i][k];
        for (double& v : dk) v *= scale;
        accumulate_logprob_grad(kl_ests[i][k], c, dk, upstream);
      }
      model.backward(passes[i][k], upstream.data(), grad);
    }
  }
  return out;
}

GroupTerm mean_field_group(Method method, const PosteriorModel& model, const PosteriorModel* ref,
                           const Group& g, const ClipConfig& clip, double scale,
                           std::span<double> grad) {
  const int G = static_cast<int>(g.members.size());
  const bool use_kl = clip.beta_kl > 0.0;
  std::vector<ForwardPass> passes;
  std::vector<std::vector<double>> u(G), u_ref(G);
  for (int i = 0; i < G; ++i) {
    const Trajectory& tr = g.members[i];
    const StepCache& c0 = tr.cache.steps.at(0);
    const SequenceState& x1 = tr.terminal();
    passes.push_back(model.forward(tr.states[0], c0.t, g.prompt));
    LogProbs ref_lp;
    if (use_kl) ref_lp = ref->log_probs(tr.states[0], c0.t, g.prompt);
    for (int d = 0; d < x1.length(); ++d) {
      // A token left on the source mask carries no posterior ratio.
      const double old_lp = c0.old_logp.at(d, x1[d]);
      const bool live = std::isfinite(old_lp);
      u[i].push_back(live ? passes[i].logp.at(d, x1[d]) - old_lp : 0.0);
      if (use_kl)
        u_ref[i].push_back(live ? passes[i].logp.at(d, x1[d]) - ref_lp.at(d, x1[d]) : 0.0);
    }
  }
  GroupTerm out;
  out.value = method == Method::kDiffuGrpo
                  ? diffu_grpo(g.advantages, u, clip, use_kl ? &u_ref : nullptr)
                  : diffu_gspo(g.advantages, u, clip, use_kl ? &u_ref : nullptr);
  const ModelSpec& spec = model.spec();
  for (int i = 0; i < G; ++i) {
    const SequenceState& x1 = g.members[i].terminal();
    LogProbs upstream(spec.length, spec.vocab_size);
    for (int d = 0; d < x1.length(); ++d) {
      if (!std::isfinite(g.members[i].cache.steps[0].old_logp.at(d, x1[d]))) continue;
      double v = out.value.dlog_ratio[i][0][d];
      if (use_kl) v += out.value.dlog_kl[i][0][d];
      upstream.at(d, x1[d]) += scale * v;
    }
    model.backward(passes[i], upstream.data(), grad);
  }
  return out;
}

GroupTerm dpo_group(const PosteriorModel& model, const Group& g, double beta, double scale,
                    std::span<double> grad) {
  const int G = static_cast<int>(g.members.size());
  const auto [best, worst] = preference_pair(g.rewards);
  LogRatioGrid grid(G);
  std::vector<std::vector<ForwardPass>> passes(G);
  std::vector<std::vector<StepRatioEstimate>> ests(G);
  GroupTerm out;
  for (int i = 0; i < G; ++i) {
    const Trajectory& tr = g.members[i];
    const bool used = i == best || i == worst;
    for (int k = 0; k < tr.steps(); ++k) {
      if (!used) {
        grid[i].emplace_back(tr.states[k].length(), 0.0);
        continue;
      }
      const StepCache& c = tr.cache.steps[k];
      passes[i].push_back(model.forward(tr.states[k], c.t, g.prompt));
      ests[i].push_back(ratio_estimate(c, passes[i].back().logp));
      out.degenerate += ests[i].back().degenerate;
      grid[i].push_back(ests[i].back().log_ratio);
    }
  }
  out.value = dflow_dpo(g.rewards, grid, beta);
  const ModelSpec& spec = model.spec();
  for (int i : {best, worst}) {
    const Trajectory& tr = g.members[i];
    for (int k = 0; k < tr.steps(); ++k) {
      LogProbs upstream(spec.length, spec.vocab_size);
      std::vector<double> dl = out.value.dlog_ratio[i][k];
      for (double& v : dl) v *= scale;
      accumulate_logprob_grad(ests[i][k], tr.cache.steps[k], dl, upstream);
      model.backward(passes[i][k], upstream.data(), grad);
    }
  }
  return out;
}

}  // namespace

UpdateResult objective_and_grad(Method method, const PosteriorModel& model,
                                const PosteriorModel* ref, const std::vector<Group>& groups,
                                const ClipConfig& clip, double dpo_beta) {
  if (groups.empty()) throw ArgumentError("objective_and_grad: no groups");
  if (clip.beta_kl > 0.0 && method != Method::kDflowDpo) {
    if (!ref) throw ConfigError("beta_kl > 0 needs a reference policy");
    if (!(ref->spec() == model.spec()))
      throw ConfigError("reference policy does not match the model");
  }
  UpdateResult out;
  out.grad.assign(model.num_params(), 0.0);
  const double scale = 1.0 / static_cast<double>(groups.size());
  for (const Group& g : groups) {
    GroupTerm term;
    switch (method) {
      case Method::kDflowGrpo:
        term = grpo_group(model, ref, g, clip, scale, out.grad);
        break;
      case Method::kDiffuGrpo:
      case Method::kDiffuGspo:
        term = mean_field_group(method, model, ref, g, clip, scale, out.grad);
        break;
      case Method::kDflowDpo:
        term = dpo_group(model, g, dpo_beta, scale, out.grad);
        break;
    }
    out.objective += scale * term.value.value;
    out.clip_fraction += scale * term.value.clip_fraction;
    out.mean_kl += scale * term.value.kl;
    out.ratio_dispersion += scale * term.value.ratio_dispersion;
    out.degenerate += term.degenerate;
  }
  return out;
}

void write_metrics_header(std::ostream& out) {
  out << "# dflow-metrics v1\n"
      << "# kind,step,mean_reward,max_reward,min_reward,objective,clip_fraction,mean_kl,"
         "ratio_dispersion,grad_norm,wall_time\n";
}

std::string format_metrics(const MetricsRecord& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%s,%ld,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g",
                r.kind.c_str(), r.step, r.mean_reward, r.max_reward, r.min_reward, r.objective,
                r.clip_fraction, r.mean_kl, r.ratio_dispersion, r.grad_norm, r.wall_time);
  return buf;
}

MetricsRecord parse_metrics(const std::string& line) {
  std::vector<std::string> fields;
  std::stringstream ss(line);
  std::string f;
  while (std::getline(ss, f, ',')) fields.push_back(f);
  if (fields.size() != 11) throw ConfigError("metrics: expected 11 fields in '" + line + "'");
  MetricsRecord r;
  try {
    r.kind = fields[0];
    r.step = std::stol(fields[1]);
    double* slots[] = {&r.mean_reward, &r.max_reward,       &r.min_reward, &r.objective,
                       &r.clip_fraction, &r.mean_kl, &r.ratio_dispersion, &r.grad_norm,
                       &r.wall_time};
    for (int i = 0; i < 9; ++i) *slots[i] = std::stod(fields[2 + i]);
  } catch (const std::logic_error&) {
    throw ConfigError("metrics: malformed record '" + line + "'");
  }
  return r;
}

std::vector<MetricsRecord> read_metrics(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "# dflow-metrics v1")
    throw ConfigError("metrics: missing or unsupported version header");
  std::vector<MetricsRecord> out;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    out.push_back(parse_metrics(line));
  }
  return out;
}

double evaluate(const PosteriorModel& model, const ConditionalRate& cr,
                const RolloutConfig& rollout, int num_prompts, int samples, std::uint64_t seed,
                const RewardFn& reward) {
  if (samples < 1) throw ConfigError("evaluate: need at least one sample");
  double total = 0.0;
  for (int s = 0; s < samples; ++s) {
    const int prompt = s % num_prompts;
    RandomStream rng(derive_seed(seed, {static_cast<std::uint64_t>(s)}));
    const Trajectory tr = dflow::rollout(prompt, model, cr, rollout, rng);
    total += reward(prompt, tr.terminal());
  }
  return total / samples;
}

namespace {

constexpr std::uint64_t kEvalStream = 0x6576616c;  // "eval"

bool all_finite(std::span<const double> v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

void dump_groups(const std::vector<Group>& groups, long step) {
  std::cerr << "dflow: numerical abort at update " << step << "\n";
  for (const Group& g : groups) {
    std::cerr << "  prompt " << g.prompt << "\n";
    for (std::size_t i = 0; i < g.members.size(); ++i)
      std::cerr << "    member " << i << " reward " << g.rewards[i] << " advantage "
                << g.advantages[i] << " terminal " << format_tokens(g.members[i].terminal().view())
                << "\n";
  }
}

}  // namespace

TrainReport train(PosteriorModel& model, const ConditionalRate& cr, const TrainConfig& config,
                  int num_prompts, const RewardFn& reward, const MetricsSink& sink) {
  if (num_prompts < 1) throw ConfigError("train: need at least one prompt");
  if (config.sync_every < 1) throw ConfigError("train: sync_every must be >= 1");
  if (config.prompts_per_update < 1) throw ConfigError("train: prompts_per_update must be >= 1");
  if (config.updates < 0) throw ConfigError("train: negative update budget");
  if (config.method != Method::kDflowDpo) config.clip.validate();
  if (model.spec().vocab_size != cr.vocab_size())
    throw ConfigError("train: model and rate disagree on the vocabulary");

  const auto start = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    if (!config.record_wall_time) return 0.0;
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  };
  TrainReport report;
  auto emit = [&](const MetricsRecord& r) {
    report.records.push_back(r);
    if (sink) sink(r);
  };
  const std::uint64_t eval_seed = derive_seed(config.rollout.seed, {kEvalStream});
  auto run_eval = [&](long step) {
    MetricsRecord r;
    r.kind = "eval";
    r.step = step;
    r.mean_reward = evaluate(model, cr, config.rollout, num_prompts, config.eval_samples,
                             eval_seed, reward);
    r.max_reward = r.min_reward = r.mean_reward;
    r.wall_time = elapsed();
    emit(r);
  };

  run_eval(0);
  const PolicySnapshot ref = snapshot(model);
  std::optional<PolicySnapshot> old;
  AdamW opt(model.num_params(), config.adam);
  RandomStream rng(config.rollout.seed);
  std::deque<double> window;
  double window_sum = 0.0;
  long last_eval = 0;

  for (int u = 0; u < config.updates; ++u) {
    if (u % config.sync_every == 0) old = snapshot(model);
    std::vector<Group> groups;
    for (int p = 0; p < config.prompts_per_update; ++p) {
      const int prompt = static_cast<int>(
          (static_cast<long>(u) * config.prompts_per_update + p) % num_prompts);
      groups.push_back(make_group(
          prompt, group_rollout(prompt, old->model(), cr, config.rollout, rng, reward)));
    }
    UpdateResult res = objective_and_grad(config.method, model, &ref.model(), groups,
                                          config.clip, config.dpo_beta);
    if (!std::isfinite(res.objective) || !all_finite(res.grad)) {
      dump_groups(groups, u + 1);
      throw NumericalAbort("non-finite objective or gradient at update " + std::to_string(u + 1));
    }
    for (double& g : res.grad) g = -g;
    const double norm = opt.step(model.params(), res.grad);
    if (!all_finite(model.params())) {
      dump_groups(groups, u + 1);
      throw NumericalAbort("non-finite parameters after update " + std::to_string(u + 1));
    }

    MetricsRecord r;
    r.step = u + 1;
    double sum = 0.0;
    long count = 0;
    r.max_reward = -INFINITY;
    r.min_reward = INFINITY;
    for (const Group& g : groups)
      for (double v : g.rewards) {
        sum += v;
        ++count;
        r.max_reward = std::max(r.max_reward, v);
        r.min_reward = std::min(r.min_reward, v);
      }
    r.mean_reward = sum / count;
    r.objective = res.objective;
    r.clip_fraction = res.clip_fraction;
    r.mean_kl = res.mean_kl;
    r.ratio_dispersion = res.ratio_dispersion;
    r.grad_norm = norm;
    r.wall_time = elapsed();
    emit(r);
    report.updates_run = u + 1;

    if (config.eval_every > 0 && (u + 1) % config.eval_every == 0) {
      run_eval(u + 1);
      last_eval = u + 1;
    }
    window.push_back(r.mean_reward);
    window_sum += r.mean_reward;
    if (static_cast<int>(window.size()) > config.stop_window) {
      window_sum -= window.front();
      window.pop_front();
    }
    if (config.stop_reward && static_cast<int>(window.size()) == config.stop_window &&
        window_sum / config.stop_window >= *config.stop_reward) {
      report.reached_stop = true;
      break;
    }
  }
  if (report.updates_run > last_eval) run_eval(report.updates_run);
  return report;
}

}  // namespace dflow
