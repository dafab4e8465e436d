#include "dflow/policy.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

#include "dflow/errors.hpp"

namespace dflow {

const char* to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::kTabular: return "tabular";
    case ModelKind::kMlp: return "mlp";
    case ModelKind::kFunction: return "function";
  }
  return "?";
}

ModelKind parse_model_kind(const std::string& name) {
  if (name == "tabular") return ModelKind::kTabular;
  if (name == "mlp") return ModelKind::kMlp;
  throw ConfigError("unknown model kind '" + name + "'");
}

void PosteriorModel::check_input(const SequenceState& x, double t, int prompt) const {
  if (x.length() != spec_.length)
    throw ConfigError("posterior: sequence length " + std::to_string(x.length()) +
                      " does not match model length " + std::to_string(spec_.length));
  for (Token tok : x.tokens)
    if (tok < 0 || tok >= spec_.vocab_size) throw ConfigError("posterior: token out of range");
  if (!(t >= 0.0 && t <= 1.0)) throw DomainError("posterior: t outside [0, 1]");
  if (prompt < 0 || prompt >= spec_.num_prompts) throw ConfigError("posterior: unknown prompt");
}

void PosteriorModel::log_softmax_row(std::span<double> z) const {
  const int mask = spec_.mask.value_or(-1);
  double mx = -INFINITY;
  for (int i = 0; i < static_cast<int>(z.size()); ++i)
    if (i != mask) mx = std::max(mx, z[i]);
  double total = 0.0;
  for (int i = 0; i < static_cast<int>(z.size()); ++i)
    if (i != mask) total += std::exp(z[i] - mx);
  const double lse = mx + std::log(total);
  for (int i = 0; i < static_cast<int>(z.size()); ++i)
    z[i] = i == mask ? -INFINITY : z[i] - lse;
}

void PosteriorModel::log_softmax_backward(std::span<const double> logp,
                                          std::span<const double> g,
                                          std::span<double> dz) const {
  const int mask = spec_.mask.value_or(-1);
  double gsum = 0.0;
  for (int i = 0; i < static_cast<int>(g.size()); ++i)
    if (i != mask) gsum += g[i];
  for (int i = 0; i < static_cast<int>(g.size()); ++i)
    dz[i] = i == mask ? 0.0 : g[i] - std::exp(logp[i]) * gsum;
}

// --- tabular -------------------------------------------------------------

namespace {

std::size_t tabular_size(const ModelSpec& s) {
  if (s.time_buckets < 1) throw ConfigError("tabular model needs time_buckets >= 1");
  return static_cast<std::size_t>(s.num_prompts) * s.length * s.vocab_size *
         s.time_buckets * s.vocab_size;
}

ModelSpec checked(ModelSpec s, ModelKind kind) {
  s.kind = kind;
  if (s.vocab_size < 2 || s.length < 1 || s.num_prompts < 1)
    throw ConfigError("model spec needs |S| >= 2, D >= 1, prompts >= 1");
  if (s.mask && (*s.mask < 0 || *s.mask >= s.vocab_size))
    throw ConfigError("model mask index out of range");
  return s;
}

}  // namespace

TabularPosterior::TabularPosterior(ModelSpec spec)
    : PosteriorModel(checked(spec, ModelKind::kTabular),
                     tabular_size(checked(spec, ModelKind::kTabular))) {}

int TabularPosterior::bucket(double t) const {
  const int b = static_cast<int>(std::floor(t * spec_.time_buckets + 1e-9));
  return std::clamp(b, 0, spec_.time_buckets - 1);
}

std::size_t TabularPosterior::offset(int prompt, int d, Token current, int b) const {
  const std::size_t s = spec_.vocab_size;
  return (((static_cast<std::size_t>(prompt) * spec_.length + d) * s + current) *
              spec_.time_buckets + b) * s;
}

ForwardPass TabularPosterior::forward(const SequenceState& x, double t, int prompt) const {
  check_input(x, t, prompt);
  ForwardPass pass{LogProbs(spec_.length, spec_.vocab_size), x, t, prompt, {}, true};
  const int b = bucket(t);
  for (int d = 0; d < spec_.length; ++d) {
    auto row = pass.logp.row(d);
    const double* logits = params_.data() + offset(prompt, d, x[d], b);
    std::copy(logits, logits + spec_.vocab_size, row.begin());
    log_softmax_row(row);
  }
  return pass;
}

void TabularPosterior::backward(const ForwardPass& pass, std::span<const double> upstream,
                                std::span<double> grad) const {
  if (!pass.valid) throw UsageError("backward() called without a forward pass");
  if (upstream.size() != pass.logp.data().size() || grad.size() != params_.size())
    throw UsageError("backward(): buffer size mismatch");
  const int s = spec_.vocab_size;
  const int b = bucket(pass.t);
  std::vector<double> dz(s);
  for (int d = 0; d < spec_.length; ++d) {
    log_softmax_backward(pass.logp.row(d), upstream.subspan(static_cast<std::size_t>(d) * s, s), dz);
    double* g = grad.data() + offset(pass.prompt, d, pass.input[d], b);
    for (int i = 0; i < s; ++i) g[i] += dz[i];
  }
}

std::unique_ptr<PosteriorModel> TabularPosterior::clone() const {
  return std::make_unique<TabularPosterior>(*this);
}

// --- mlp -----------------------------------------------------------------

namespace {

ModelSpec mlp_spec(ModelSpec s) {
  s = checked(s, ModelKind::kMlp);
  if (s.hidden < 1) throw ConfigError("mlp model needs hidden >= 1");
  return s;
}

std::size_t mlp_size(const ModelSpec& s) {
  const std::size_t in = static_cast<std::size_t>(s.length) * s.vocab_size +
                         MlpPosterior::kTimeFeatures + s.num_prompts;
  const std::size_t out = static_cast<std::size_t>(s.length) * s.vocab_size;
  return s.hidden * in + s.hidden + out * s.hidden + out;
}

void time_features(double t, double* f) {
  f[0] = t;
  f[1] = std::sin(std::numbers::pi * t);
  f[2] = std::cos(std::numbers::pi * t);
}

}  // namespace

MlpPosterior::MlpPosterior(ModelSpec spec)
    : PosteriorModel(mlp_spec(spec), mlp_size(mlp_spec(spec))) {
  const std::size_t in = input_dim();
  const std::size_t h = spec_.hidden;
  const std::size_t out = static_cast<std::size_t>(spec_.length) * spec_.vocab_size;
  w1_ = 0;
  b1_ = w1_ + h * in;
  w2_ = b1_ + h;
  b2_ = w2_ + out * h;
}

int MlpPosterior::input_dim() const {
  return spec_.length * spec_.vocab_size + kTimeFeatures + spec_.num_prompts;
}

void MlpPosterior::initialize(RandomStream& rng) {
  const int in = input_dim(), h = spec_.hidden;
  const int out = spec_.length * spec_.vocab_size;
  const double s1 = 1.0 / std::sqrt(static_cast<double>(spec_.length + kTimeFeatures + 1));
  const double s2 = 0.5 / std::sqrt(static_cast<double>(h));
  for (int i = 0; i < h * in; ++i) params_[w1_ + i] = rng.normal(0.0, s1);
  for (int i = 0; i < out * h; ++i) params_[w2_ + i] = rng.normal(0.0, s2);
}

ForwardPass MlpPosterior::forward(const SequenceState& x, double t, int prompt) const {
  check_input(x, t, prompt);
  const int in = input_dim(), h = spec_.hidden, s = spec_.vocab_size;
  const int time_col = spec_.length * s, prompt_col = time_col + kTimeFeatures;
  double feats[kTimeFeatures];
  time_features(t, feats);

  ForwardPass pass{LogProbs(spec_.length, s), x, t, prompt, std::vector<double>(h), true};
  for (int j = 0; j < h; ++j) {
    const double* w = params_.data() + w1_ + static_cast<std::size_t>(j) * in;
    double a = params_[b1_ + j];
    for (int d = 0; d < spec_.length; ++d) a += w[d * s + x[d]];
    for (int f = 0; f < kTimeFeatures; ++f) a += w[time_col + f] * feats[f];
    a += w[prompt_col + prompt];
    pass.activations[j] = std::tanh(a);
  }
  auto out = pass.logp.data();
  for (std::size_t o = 0; o < out.size(); ++o) {
    const double* w = params_.data() + w2_ + o * h;
    double z = params_[b2_ + o];
    for (int j = 0; j < h; ++j) z += w[j] * pass.activations[j];
    out[o] = z;
  }
  for (int d = 0; d < spec_.length; ++d) log_softmax_row(pass.logp.row(d));
  return pass;
}

void MlpPosterior::backward(const ForwardPass& pass, std::span<const double> upstream,
                            std::span<double> grad) const {
  if (!pass.valid) throw UsageError("backward() called without a forward pass");
  if (upstream.size() != pass.logp.data().size() || grad.size() != params_.size())
    throw UsageError("backward(): buffer size mismatch");
  const int in = input_dim(), h = spec_.hidden, s = spec_.vocab_size;
  const int time_col = spec_.length * s, prompt_col = time_col + kTimeFeatures;
  const std::size_t out = static_cast<std::size_t>(spec_.length) * s;

  std::vector<double> dz(out);
  for (int d = 0; d < spec_.length; ++d)
    log_softmax_backward(pass.logp.row(d), upstream.subspan(static_cast<std::size_t>(d) * s, s),
                         std::span<double>(dz.data() + static_cast<std::size_t>(d) * s, s));

  std::vector<double> da(h, 0.0);
  for (std::size_t o = 0; o < out; ++o) {
    if (dz[o] == 0.0) continue;
    grad[b2_ + o] += dz[o];
    double* gw = grad.data() + w2_ + o * h;
    const double* w = params_.data() + w2_ + o * h;
    for (int j = 0; j < h; ++j) {
      gw[j] += dz[o] * pass.activations[j];
      da[j] += dz[o] * w[j];
    }
  }
  double feats[kTimeFeatures];
  time_features(pass.t, feats);
  for (int j = 0; j < h; ++j) {
    const double a = pass.activations[j];
    const double g = da[j] * (1.0 - a * a);
    if (g == 0.0) continue;
    grad[b1_ + j] += g;
    double* gw = grad.data() + w1_ + static_cast<std::size_t>(j) * in;
    for (int d = 0; d < spec_.length; ++d) gw[d * s + pass.input[d]] += g;
    for (int f = 0; f < kTimeFeatures; ++f) gw[time_col + f] += g * feats[f];
    gw[prompt_col + pass.prompt] += g;
  }
}

std::unique_ptr<PosteriorModel> MlpPosterior::clone() const {
  return std::make_unique<MlpPosterior>(*this);
}

// --- function ------------------------------------------------------------

FunctionPosterior::FunctionPosterior(ModelSpec spec, Fn probs)
    : PosteriorModel(checked(spec, ModelKind::kFunction), 0), probs_(std::move(probs)) {}

ForwardPass FunctionPosterior::forward(const SequenceState& x, double t, int prompt) const {
  check_input(x, t, prompt);
  ForwardPass pass{LogProbs(spec_.length, spec_.vocab_size), x, t, prompt, {}, true};
  probs_(x, t, prompt, pass.logp);
  for (double& v : pass.logp.data()) v = v > 0.0 ? std::log(v) : -INFINITY;
  return pass;
}

void FunctionPosterior::backward(const ForwardPass& pass, std::span<const double>,
                                 std::span<double>) const {
  if (!pass.valid) throw UsageError("backward() called without a forward pass");
}

std::unique_ptr<PosteriorModel> FunctionPosterior::clone() const {
  return std::make_unique<FunctionPosterior>(*this);
}

std::unique_ptr<PosteriorModel> make_model(const ModelSpec& spec, std::uint64_t init_seed) {
  switch (spec.kind) {
    case ModelKind::kTabular:
      return std::make_unique<TabularPosterior>(spec);
    case ModelKind::kMlp: {
      auto m = std::make_unique<MlpPosterior>(spec);
      RandomStream rng(derive_seed(init_seed, {0x6d6c70}));
      m->initialize(rng);
      return m;
    }
    case ModelKind::kFunction:
      break;
  }
  throw ConfigError("make_model: function posteriors are built directly");
}

// --- snapshots and checkpoints -------------------------------------------

PolicySnapshot snapshot(const PosteriorModel& model) {
  return PolicySnapshot(std::shared_ptr<const PosteriorModel>(model.clone()));
}

std::unique_ptr<PosteriorModel> restore(const PolicySnapshot& snap) {
  return snap.model().clone();
}

void restore_into(PosteriorModel& target, const PolicySnapshot& snap) {
  if (!(target.spec() == snap.spec()))
    throw ConfigError("restore: architecture metadata does not match");
  std::copy(snap.params().begin(), snap.params().end(), target.params().begin());
}

namespace {
constexpr const char* kCheckpointHeader = "# dflow-checkpoint v1";
}

void save_checkpoint(const PolicySnapshot& snap, std::ostream& out) {
  const ModelSpec& s = snap.spec();
  if (s.kind == ModelKind::kFunction)
    throw ConfigError("function posteriors cannot be checkpointed");
  out << kCheckpointHeader << '\n'
      << "kind " << to_string(s.kind) << '\n'
      << "vocab_size " << s.vocab_size << '\n'
      << "mask " << (s.mask ? std::to_string(*s.mask) : std::string("none")) << '\n'
      << "length " << s.length << '\n'
      << "num_prompts " << s.num_prompts << '\n'
      << "time_buckets " << s.time_buckets << '\n'
      << "hidden " << s.hidden << '\n'
      << "num_params " << snap.params().size() << '\n';
  char buf[64];
  for (double p : snap.params()) {
    std::snprintf(buf, sizeof buf, "%a\n", p);
    out << buf;
  }
  out << "end\n";
}

void save_checkpoint(const PolicySnapshot& snap, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write checkpoint " + path);
  save_checkpoint(snap, out);
}

PolicySnapshot load_checkpoint(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kCheckpointHeader)
    throw ConfigError("not a dflow checkpoint (bad header)");
  ModelSpec s;
  std::size_t n = 0;
  auto field = [&](const char* key) {
    if (!std::getline(in, line)) throw ConfigError("truncated checkpoint");
    std::istringstream ls(line);
    std::string k, v;
    ls >> k >> v;
    if (k != key) throw ConfigError(std::string("checkpoint: expected field ") + key);
    return v;
  };
  try {
    s.kind = parse_model_kind(field("kind"));
    s.vocab_size = std::stoi(field("vocab_size"));
    const std::string mask = field("mask");
    if (mask != "none") s.mask = std::stoi(mask);
    s.length = std::stoi(field("length"));
    s.num_prompts = std::stoi(field("num_prompts"));
    s.time_buckets = std::stoi(field("time_buckets"));
    s.hidden = std::stoi(field("hidden"));
    n = std::stoull(field("num_params"));
  } catch (const std::logic_error&) {
    throw ConfigError("checkpoint: malformed metadata");
  }
  auto model = make_model(s, 0);
  if (model->num_params() != n) throw ConfigError("checkpoint: parameter count mismatch");
  auto p = model->params();
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::getline(in, line)) throw ConfigError("checkpoint: truncated parameters");
    char* end = nullptr;
    p[i] = std::strtod(line.c_str(), &end);
    if (end == line.c_str()) throw ConfigError("checkpoint: bad parameter value");
  }
  if (!std::getline(in, line) || line != "end") throw ConfigError("checkpoint: missing end marker");
  return PolicySnapshot(std::shared_ptr<const PosteriorModel>(std::move(model)));
}

PolicySnapshot load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint " + path);
  return load_checkpoint(in);
}

// --- optimizer -----------------------------------------------------------

AdamW::AdamW(std::size_t n, AdamConfig config)
    : config_(config), m_(n, 0.0), v_(n, 0.0) {}

double AdamW::step(std::span<double> params, std::span<const double> grad) {
  if (params.size() != m_.size() || grad.size() != m_.size())
    throw UsageError("AdamW::step: size mismatch");
  double sq = 0.0;
  for (double g : grad) sq += g * g;
  const double norm = std::sqrt(sq);
  const double scale =
      config_.clip_norm > 0.0 && norm > config_.clip_norm ? config_.clip_norm / norm : 1.0;
  ++steps_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grad[i] * scale;
    m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * g;
    v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * g * g;
    const double mhat = m_[i] / c1, vhat = v_[i] / c2;
    params[i] -= config_.lr * (mhat / (std::sqrt(vhat) + config_.eps) +
                               config_.weight_decay * params[i]);
  }
  return norm;
}

}  // namespace dflow
