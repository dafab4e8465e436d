#include "dflow/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "dflow/errors.hpp"

namespace dflow {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  const std::string v = trim(text);
  T out{};
  if constexpr (std::is_floating_point_v<T>) {
    std::size_t used = 0;
    try {
      out = static_cast<T>(std::stod(v, &used));
    } catch (const std::logic_error&) {
      used = 0;
    }
    if (used == 0 || used != v.size()) throw ConfigError(key + ": expected a number, got '" + v + "'");
  } else {
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size())
      throw ConfigError(key + ": expected an integer, got '" + v + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& text) {
  const std::string v = trim(text);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

std::string number_text(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct Field {
  const char* key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename T>
Field field(const char* key, T RunConfig::*member) {
  Field f{key, {}, {}};
  if constexpr (std::is_same_v<T, std::string>) {
    f.set = [member](RunConfig& c, const std::string& v) { c.*member = trim(v); };
    f.get = [member](const RunConfig& c) { return c.*member; };
  } else if constexpr (std::is_same_v<T, bool>) {
    f.set = [key, member](RunConfig& c, const std::string& v) { c.*member = parse_bool(key, v); };
    f.get = [member](const RunConfig& c) { return std::string(c.*member ? "true" : "false"); };
  } else if constexpr (std::is_floating_point_v<T>) {
    f.set = [key, member](RunConfig& c, const std::string& v) {
      c.*member = parse_number<T>(key, v);
    };
    f.get = [member](const RunConfig& c) { return number_text(c.*member); };
  } else {
    f.set = [key, member](RunConfig& c, const std::string& v) {
      c.*member = parse_number<T>(key, v);
    };
    f.get = [member](const RunConfig& c) { return std::to_string(c.*member); };
  }
  return f;
}

template <typename T>
Field optional_field(const char* key, std::optional<T> RunConfig::*member) {
  Field f{key, {}, {}};
  f.set = [key, member](RunConfig& c, const std::string& v) {
    if (trim(v) == "none" || trim(v).empty())
      c.*member = std::nullopt;
    else
      c.*member = parse_number<T>(key, v);
  };
  f.get = [member](const RunConfig& c) -> std::string {
    if (!(c.*member)) return "none";
    if constexpr (std::is_floating_point_v<T>)
      return number_text(*(c.*member));
    else
      return std::to_string(*(c.*member));
  };
  return f;
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      optional_field("run.seed", &RunConfig::seed),
      field("run.name", &RunConfig::name),
      field("run.method", &RunConfig::method),
      field("run.updates", &RunConfig::updates),
      field("run.eval_every", &RunConfig::eval_every),
      field("run.eval_samples", &RunConfig::eval_samples),
      field("run.checkpoint_every", &RunConfig::checkpoint_every),
      optional_field("run.stop_reward", &RunConfig::stop_reward),
      field("run.stop_window", &RunConfig::stop_window),
      field("run.record_wall_time", &RunConfig::record_wall_time),
      field("path.kind", &RunConfig::path_kind),
      field("path.source", &RunConfig::source),
      field("path.kappa", &RunConfig::kappa),
      field("path.kappa_exponent", &RunConfig::kappa_exponent),
      field("path.beta_scale", &RunConfig::beta_scale),
      field("path.beta_exponent", &RunConfig::beta_exponent),
      field("path.metric", &RunConfig::metric),
      field("path.vocab", &RunConfig::vocab),
      field("model.kind", &RunConfig::model),
      field("model.hidden", &RunConfig::hidden),
      field("model.init_seed", &RunConfig::init_seed),
      field("rollout.steps", &RunConfig::steps),
      field("rollout.n_mc", &RunConfig::n_mc),
      field("rollout.group_size", &RunConfig::group_size),
      field("clip.eps_low", &RunConfig::eps_low),
      field("clip.eps_high", &RunConfig::eps_high),
      field("clip.beta_kl", &RunConfig::beta_kl),
      field("clip.token_level_kl", &RunConfig::token_level_kl),
      field("optim.lr", &RunConfig::lr),
      field("optim.beta1", &RunConfig::beta1),
      field("optim.beta2", &RunConfig::beta2),
      field("optim.weight_decay", &RunConfig::weight_decay),
      field("optim.clip_norm", &RunConfig::clip_norm),
      field("optim.sync_every", &RunConfig::sync_every),
      field("optim.prompts_per_update", &RunConfig::prompts_per_update),
      field("optim.dpo_beta", &RunConfig::dpo_beta),
      field("pretrain.steps", &RunConfig::pretrain_steps),
      field("pretrain.batch", &RunConfig::pretrain_batch),
      field("pretrain.lr", &RunConfig::pretrain_lr),
      field("pretrain.target_prob", &RunConfig::pretrain_target_prob),
      field("task.kind", &RunConfig::task),
      field("task.length", &RunConfig::length),
      field("task.prompts", &RunConfig::prompts),
      field("task.seed", &RunConfig::task_seed),
      field("task.target_frac", &RunConfig::target_frac),
  };
  return table;
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  for (const Field& f : fields())
    if (key == f.key) {
      f.set(*this, value);
      return;
    }
  throw ConfigError("unknown config key '" + key + "'");
}

void RunConfig::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' lacks '='");
  set(trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

void RunConfig::validate() const {
  parse_method(method);
  parse_task_kind(task);
  parse_model_kind(model);
  if (path_kind != "mixture" && path_kind != "metric")
    throw ConfigError("path.kind must be mixture or metric");
  if (source != "mask" && source != "uniform") throw ConfigError("path.source must be mask or uniform");
  if (path_kind == "metric" && source == "mask")
    throw ConfigError("a metric path has no mask source; use path.source = uniform");
  if (kappa != "linear" && kappa != "cosine" && kappa != "polynomial")
    throw ConfigError("path.kappa must be linear, cosine or polynomial");
  if (vocab < 2) throw ConfigError("path.vocab must be >= 2");
  if (steps < 1 || n_mc < 1) throw ConfigError("rollout.steps and rollout.n_mc must be >= 1");
  if (group_size < 2) throw ConfigError("rollout.group_size must be >= 2");
  if (length < 1 || prompts < 1) throw ConfigError("task.length and task.prompts must be >= 1");
  if (updates < 0) throw ConfigError("run.updates must be >= 0");
  if (eval_samples < 1) throw ConfigError("run.eval_samples must be >= 1");
  if (stop_window < 1) throw ConfigError("run.stop_window must be >= 1");
  if (sync_every < 1 || prompts_per_update < 1)
    throw ConfigError("optim.sync_every and optim.prompts_per_update must be >= 1");
  if (model == "mlp" && hidden < 1) throw ConfigError("model.hidden must be >= 1");
  if (!(pretrain_target_prob >= 0.0 && pretrain_target_prob <= 1.0))
    throw ConfigError("pretrain.target_prob must lie in [0, 1]");
  ClipConfig{eps_low, eps_high, beta_kl, token_level_kl}.validate();
}

std::string RunConfig::to_text() const {
  std::ostringstream out;
  out << "# dflow-config v1\n";
  std::string section;
  for (const Field& f : fields()) {
    const std::string key = f.key;
    const auto dot = key.find('.');
    const std::string sec = key.substr(0, dot);
    if (sec != section) {
      out << (section.empty() ? "" : "\n") << "[" << sec << "]\n";
      section = sec;
    }
    out << key.substr(dot + 1) << " = " << f.get(*this) << "\n";
  }
  return out.str();
}

std::string RunConfig::comparable_text() const {
  RunConfig c = *this;
  c.method.clear();
  c.name.clear();
  return c.to_text();
}

RunConfig parse_config(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || trim(line) != "# dflow-config v1")
    throw ConfigError("config: missing or unsupported version header");
  std::ostringstream body;
  while (std::getline(in, line)) {
    const std::string t = trim(line);
    if (!t.empty() && t[0] == '#') continue;
    body << line << "\n";
  }
  boost::property_tree::ptree tree;
  std::istringstream text(body.str());
  try {
    boost::property_tree::ini_parser::read_ini(text, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  RunConfig cfg;
  for (const auto& [section, entries] : tree) {
    if (entries.empty()) throw ConfigError("config: key '" + section + "' outside a section");
    for (const auto& [key, value] : entries) cfg.set(section + "." + key, value.data());
  }
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  return parse_config(in);
}

RunSetup build_setup(const RunConfig& cfg) {
  cfg.validate();
  const bool masked = cfg.path_kind == "mixture" && cfg.source == "mask";
  const int S = cfg.vocab + (masked ? 1 : 0);
  const std::optional<Token> mask = masked ? std::optional<Token>(cfg.vocab) : std::nullopt;
  const Vocabulary vocab(S, mask);

  auto make_path = [&] {
    if (cfg.path_kind == "metric") {
      TokenMetric metric = cfg.metric == "absolute" ? TokenMetric::absolute_difference(S)
                                                    : TokenMetric::load_csv(cfg.metric, S);
      return ProbabilityPath::metric(vocab, Scheduler::metric(cfg.beta_scale, cfg.beta_exponent),
                                     std::move(metric));
    }
    const Scheduler k = cfg.kappa == "linear"   ? Scheduler::linear()
                        : cfg.kappa == "cosine" ? Scheduler::cosine()
                                                : Scheduler::polynomial(cfg.kappa_exponent);
    return ProbabilityPath::mixture(
        vocab, k, masked ? SourceDistribution::mask() : SourceDistribution::uniform());
  };
  ProbabilityPath path = make_path();
  ConditionalRate rate(path);

  TaskSpec task = TaskSpec::generate(parse_task_kind(cfg.task), cfg.length, cfg.vocab,
                                     cfg.prompts, cfg.task_seed, cfg.target_frac);

  ModelSpec spec;
  spec.kind = parse_model_kind(cfg.model);
  spec.vocab_size = S;
  spec.mask = mask;
  spec.length = cfg.length;
  spec.num_prompts = cfg.prompts;
  spec.time_buckets = cfg.steps;
  spec.hidden = spec.kind == ModelKind::kMlp ? cfg.hidden : 0;

  TrainConfig train;
  train.method = parse_method(cfg.method);
  train.rollout.grid = TimeGrid::uniform(cfg.steps);
  train.rollout.n_mc = cfg.n_mc;
  train.rollout.group_size = cfg.group_size;
  train.rollout.seed = cfg.seed.value_or(0);
  train.clip = {cfg.eps_low, cfg.eps_high, cfg.beta_kl, cfg.token_level_kl};
  train.adam = {cfg.lr, cfg.beta1, cfg.beta2, 1e-8, cfg.weight_decay, cfg.clip_norm};
  train.sync_every = cfg.sync_every;
  train.updates = cfg.updates;
  train.prompts_per_update = cfg.prompts_per_update;
  train.dpo_beta = cfg.dpo_beta;
  train.eval_every = cfg.eval_every;
  train.eval_samples = cfg.eval_samples;
  train.stop_reward = cfg.stop_reward;
  train.stop_window = cfg.stop_window;
  train.record_wall_time = cfg.record_wall_time;

  PretrainConfig pre;
  pre.steps = cfg.pretrain_steps;
  pre.batch = cfg.pretrain_batch;
  pre.adam.lr = cfg.pretrain_lr;
  pre.grid = TimeGrid::uniform(cfg.steps);

  std::vector<DataDistribution> data;
  for (int p = 0; p < cfg.prompts; ++p) {
    if (task.kind() == TaskKind::kTargetSequence)
      data.push_back(DataDistribution::noisy(task.target(p), S, cfg.pretrain_target_prob, mask));
    else
      data.push_back(DataDistribution::uniform(cfg.length, S, mask));
  }
  return {std::move(path), std::move(rate), std::move(task), spec, train, pre, std::move(data)};
}

}  // namespace dflow
