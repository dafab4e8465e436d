#include <doctest.h>

#include <cmath>
#include <sstream>
#include <vector>

#include "dflow/bridge.hpp"
#include "dflow/errors.hpp"
#include "dflow/policy.hpp"
#include "dflow/training.hpp"

using namespace dflow;

namespace {

ModelSpec small_spec(ModelKind kind, int S, int D, std::optional<Token> mask = {}) {
  ModelSpec s;
  s.kind = kind;
  s.vocab_size = S;
  s.mask = mask;
  s.length = D;
  s.num_prompts = 2;
  s.time_buckets = 4;
  s.hidden = kind == ModelKind::kMlp ? 5 : 0;
  return s;
}

SequenceState random_state(RandomStream& rng, int D, int S) {
  SequenceState x(D, 0);
  for (int d = 0; d < D; ++d) x[d] = rng.uniform_int(S);
  return x;
}

void randomize(PosteriorModel& m, RandomStream& rng) {
  for (double& p : m.params()) p = rng.normal();
}

}  // namespace

TEST_CASE("zero logits give a uniform posterior over live tokens") {
  auto m = make_model(small_spec(ModelKind::kTabular, 5, 3), 0);
  const LogProbs lp = m->log_probs(SequenceState(3, 1), 0.3, 1);
  for (double v : lp.data()) CHECK(std::exp(v) == doctest::Approx(0.2).epsilon(1e-15));

  auto masked = make_model(small_spec(ModelKind::kTabular, 5, 3, 4), 0);
  const LogProbs lq = masked->log_probs(SequenceState(3, 4), 0.0, 0);
  for (int d = 0; d < 3; ++d) {
    CHECK(lq.at(d, 4) == -INFINITY);
    for (Token x = 0; x < 4; ++x) CHECK(std::exp(lq.at(d, x)) == doctest::Approx(0.25).epsilon(1e-15));
  }
}

TEST_CASE("forward outputs are normalized") {
  RandomStream rng(1);
  for (ModelKind kind : {ModelKind::kTabular, ModelKind::kMlp}) {
    auto m = make_model(small_spec(kind, 8, 4, 7), 3);
    for (int i = 0; i < 1000; ++i) {
      if (i % 50 == 0) randomize(*m, rng);
      const LogProbs lp = m->log_probs(random_state(rng, 4, 8), rng.uniform(), rng.uniform_int(2));
      for (int d = 0; d < 4; ++d) {
        double s = 0.0;
        for (double v : lp.row(d)) {
          CHECK(!std::isnan(v));
          s += std::exp(v);
        }
        CHECK(std::abs(s - 1.0) <= 1e-10);
      }
    }
  }
}

TEST_CASE("input validation") {
  auto m = make_model(small_spec(ModelKind::kTabular, 4, 2), 0);
  CHECK_THROWS(m->log_probs(SequenceState(3, 0), 0.5, 0));
  CHECK_THROWS(m->log_probs(SequenceState(2, 4), 0.5, 0));
  CHECK_THROWS(m->log_probs(SequenceState(2, 0), 1.5, 0));
  CHECK_THROWS(m->log_probs(SequenceState(2, 0), 0.5, 2));
  std::vector<double> g(m->num_params());
  ForwardPass stale;
  CHECK_THROWS_AS(m->backward(stale, std::vector<double>(8, 0.0), g), UsageError);
}

TEST_CASE("backward matches finite differences") {
  RandomStream rng(2);
  for (ModelKind kind : {ModelKind::kTabular, ModelKind::kMlp}) {
    auto m = make_model(small_spec(kind, 5, 3, 4), 4);
    randomize(*m, rng);
    const SequenceState x = random_state(rng, 3, 5);
    const double t = 0.6;
    std::vector<double> up(15);
    for (int d = 0; d < 3; ++d)
      for (int z = 0; z < 4; ++z) up[d * 5 + z] = rng.normal();  // masked column has no gradient
    const auto f = [&](const PosteriorModel& model) {
      const LogProbs lp = model.log_probs(x, t, 1);
      double s = 0.0;
      for (int i = 0; i < 15; ++i)
        if (std::isfinite(lp.data()[i])) s += up[i] * lp.data()[i];
      return s;
    };
    std::vector<double> g(m->num_params(), 0.0);
    m->backward(m->forward(x, t, 1), up, g);
    auto probe = m->clone();
    for (std::size_t q = 0; q < m->num_params(); ++q) {
      const double base = m->params()[q];
      probe->params()[q] = base + 1e-6;
      const double hi = f(*probe);
      probe->params()[q] = base - 1e-6;
      const double lo = f(*probe);
      probe->params()[q] = base;
      CHECK(g[q] == doctest::Approx((hi - lo) / 2e-6).epsilon(1e-5).scale(1e-5));
    }
    std::vector<double> z(m->num_params(), 0.0);
    m->backward(m->forward(x, t, 1), std::vector<double>(15, 0.0), z);
    for (double v : z) CHECK(v == 0.0);
  }
}

TEST_CASE("tabular cross-entropy gradient is p - onehot") {
  RandomStream rng(3);
  auto m = make_model(small_spec(ModelKind::kTabular, 4, 2), 0);
  randomize(*m, rng);
  auto& tab = dynamic_cast<TabularPosterior&>(*m);
  const SequenceState x(std::vector<Token>{2, 0});
  const ForwardPass pass = m->forward(x, 0.55, 1);
  std::vector<double> up(8, 0.0);
  up[1 * 4 + 3] = -1.0;  // loss = -log p(3) at position 1
  std::vector<double> g(m->num_params(), 0.0);
  m->backward(pass, up, g);
  const std::size_t off = tab.offset(1, 1, x[1], tab.bucket(0.55));
  for (Token z = 0; z < 4; ++z)
    CHECK(g[off + z] == doctest::Approx(std::exp(pass.logp.at(1, z)) - (z == 3)).epsilon(1e-14));
}

TEST_CASE("snapshots and checkpoints") {
  RandomStream rng(4);
  for (ModelKind kind : {ModelKind::kTabular, ModelKind::kMlp}) {
    auto m = make_model(small_spec(kind, 6, 3, 5), 9);
    randomize(*m, rng);
    const SequenceState x = random_state(rng, 3, 6);
    const PolicySnapshot snap = snapshot(*m);
    const LogProbs before = m->log_probs(x, 0.4, 0);
    for (double& p : m->params()) p += 1.0;
    CHECK(snap.model().log_probs(x, 0.4, 0) == before);
    CHECK(restore(snap)->log_probs(x, 0.4, 0) == before);
    restore_into(*m, snap);
    CHECK(m->log_probs(x, 0.4, 0) == before);

    std::stringstream a;
    save_checkpoint(snap, a);
    CHECK(a.str().rfind("# dflow-checkpoint v1", 0) == 0);
    const PolicySnapshot back = load_checkpoint(a);
    CHECK(back.spec() == snap.spec());
    CHECK(std::equal(back.params().begin(), back.params().end(), snap.params().begin()));
    std::stringstream b;
    save_checkpoint(back, b);
    CHECK(a.str() == b.str());

    auto other = make_model(small_spec(kind, 6, 4, 5), 9);
    CHECK_THROWS_AS(restore_into(*other, snap), ConfigError);
  }
  std::stringstream bad("# something else\n");
  CHECK_THROWS(load_checkpoint(bad));
}

TEST_CASE("AdamW") {
  std::vector<double> p = {1.0, -2.0, 0.5};
  const std::vector<double> g = {0.3, -0.1, 0.0};
  AdamW zero(3, {.lr = 0.0});
  zero.step(p, g);
  CHECK(p == std::vector<double>{1.0, -2.0, 0.5});

  AdamW opt(3, {.lr = 0.1, .clip_norm = 0.0});
  opt.step(p, g);
  // First bias-corrected step moves each coordinate by lr * g / (|g| + eps).
  CHECK(p[0] == doctest::Approx(1.0 - 0.1 * 0.3 / (0.3 + 1e-8)).epsilon(1e-12));
  CHECK(p[1] == doctest::Approx(-2.0 + 0.1 * 0.1 / (0.1 + 1e-8)).epsilon(1e-12));
  CHECK(p[2] == 0.5);
  CHECK(opt.steps() == 1);

  AdamW clipped(2, {.lr = 0.1, .clip_norm = 1.0});
  std::vector<double> q = {0.0, 0.0};
  CHECK(clipped.step(q, std::vector<double>{3.0, 4.0}) == doctest::Approx(5.0));
  CHECK(clipped.first_moment()[0] == doctest::Approx(0.1 * 0.6).epsilon(1e-14));
  CHECK(clipped.first_moment()[1] == doctest::Approx(0.1 * 0.8).epsilon(1e-14));

  AdamW decay(1, {.lr = 0.1, .weight_decay = 0.5, .clip_norm = 0.0});
  std::vector<double> w = {2.0};
  decay.step(w, std::vector<double>{0.0});
  CHECK(w[0] == doctest::Approx(2.0 * (1.0 - 0.1 * 0.5)).epsilon(1e-14));
}

TEST_CASE("pretraining on a point mass recovers the sequence") {
  const auto path = ProbabilityPath::mixture(Vocabulary(6, 5), Scheduler::linear(),
                                             SourceDistribution::mask());
  ModelSpec spec = small_spec(ModelKind::kTabular, 6, 4, 5);
  spec.num_prompts = 1;
  auto m = make_model(spec, 0);
  const SequenceState target(std::vector<Token>{3, 0, 4, 1});
  PretrainConfig cfg;
  cfg.steps = 500;
  cfg.grid = TimeGrid::uniform(4);
  RandomStream rng(5);
  const PretrainReport rep =
      pretrain_ce(*m, path, {DataDistribution::point_mass(target, 6)}, cfg, rng);
  CHECK(rep.losses.size() == 500);
  double head = 0.0, tail = 0.0;
  for (int i = 0; i < 50; ++i) head += rep.losses[i], tail += rep.losses[450 + i];
  CHECK(tail < head);
  for (double t : {0.0, 0.25, 0.5, 0.75}) {
    const LogProbs lp = m->log_probs(SequenceState(4, 5), t, 0);
    for (int d = 0; d < 4; ++d) {
      int best = 0;
      for (Token z = 1; z < 6; ++z)
        if (lp.at(d, z) > lp.at(d, best)) best = z;
      CHECK(best == target[d]);
    }
  }
}

TEST_CASE("pretraining loss is bounded below by the conditional entropy") {
  // |S| = 2, D = 1, uniform-source mixture. Expected cross-entropy of the
  // trained model versus the entropy of the exact posterior, both computed
  // by enumeration over the pretraining times.
  const auto path = ProbabilityPath::mixture(Vocabulary(2), Scheduler::linear(),
                                             SourceDistribution::uniform());
  ModelSpec spec = small_spec(ModelKind::kTabular, 2, 1);
  spec.num_prompts = 1;
  auto m = make_model(spec, 0);
  DataDistribution data;
  data.length = 1;
  data.vocab = 2;
  data.marginals = {{0.8, 0.2}};
  PretrainConfig cfg;
  cfg.steps = 2000;
  cfg.batch = 32;
  cfg.adam.lr = 0.02;
  cfg.grid = TimeGrid::uniform(4);
  RandomStream rng(6);
  pretrain_ce(*m, path, {data}, cfg, rng);
  const oracle::PathSpec p = to_oracle(path);
  double ce = 0.0, h = 0.0;
  for (int k = 0; k < 4; ++k) {
    const double t = cfg.grid[k];
    for (int x1 = 0; x1 < 2; ++x1)
      for (int xt = 0; xt < 2; ++xt) {
        const double joint = data.marginals[0][x1] * oracle::path_row(p, x1, t)[xt];
        const auto post = oracle::bayes_posterior(p, data.marginals, {xt}, t)[0];
        ce -= joint * m->log_probs(SequenceState(std::vector<Token>{xt}), t, 0).at(0, x1) / 4;
        h -= joint * std::log(post[x1]) / 4;
      }
  }
  CHECK(ce >= h - 1e-12);
  CHECK(ce <= h + 0.02);
}

TEST_CASE("data distributions") {
  const SequenceState target(std::vector<Token>{1, 2});
  const auto noisy = DataDistribution::noisy(target, 4, 0.4, 3);
  CHECK(noisy.marginals[0] == std::vector<double>{0.3, 0.4, 0.3, 0.0});
  CHECK(noisy.prob(target) == doctest::Approx(0.16));
  const auto uni = DataDistribution::uniform(2, 4, 3);
  CHECK(uni.prob(SequenceState(std::vector<Token>{0, 0})) == doctest::Approx(1.0 / 9));
  RandomStream rng(7);
  for (int i = 0; i < 100; ++i) CHECK(uni.sample(rng)[0] != 3);
}

TEST_CASE("metrics records round-trip") {
  MetricsRecord r;
  r.kind = "eval";
  r.step = 17;
  r.mean_reward = 0.1 + 0.2;
  r.max_reward = 1.0 / 3.0;
  r.min_reward = -0.0;
  r.objective = 1e-300;
  r.clip_fraction = 0.125;
  r.mean_kl = 3.14159;
  r.ratio_dispersion = 2.5e-17;
  r.grad_norm = 12345.678;
  r.wall_time = 0.5;
  CHECK(parse_metrics(format_metrics(r)) == r);
  std::stringstream s;
  write_metrics_header(s);
  s << format_metrics(r) << '\n' << format_metrics(r) << '\n';
  const auto back = read_metrics(s);
  CHECK(back.size() == 2);
  CHECK(back[1] == r);
  CHECK_THROWS(parse_metrics("train,1,2"));
}

namespace {

struct ToySetup {
  ProbabilityPath path = ProbabilityPath::metric(Vocabulary(4), Scheduler::metric(),
                                                 TokenMetric::absolute_difference(4));
  ConditionalRate cr{path};
  ModelSpec spec;
  RewardFn reward = [](int prompt, const SequenceState& x) {
    double s = 0.0;
    for (Token v : x.tokens) s += v == prompt + 1;
    return s / x.length();
  };
  ToySetup() {
    spec = small_spec(ModelKind::kTabular, 4, 3);
    spec.time_buckets = 4;
  }
  TrainConfig config(Method m, int updates) const {
    TrainConfig c;
    c.method = m;
    c.rollout.grid = TimeGrid::uniform(4);
    c.rollout.n_mc = 3;
    c.rollout.group_size = 4;
    c.rollout.seed = 3;
    c.clip = {0.2, 0.28, 0.0, false};
    c.adam.lr = 0.05;
    c.sync_every = 2;
    c.updates = updates;
    c.prompts_per_update = 2;
    c.eval_samples = 16;
    return c;
  }
};

}  // namespace

TEST_CASE("training with zero learning rate leaves parameters unchanged") {
  ToySetup s;
  auto m = make_model(s.spec, 0);
  RandomStream rng(8);
  randomize(*m, rng);
  const std::vector<double> before(m->params().begin(), m->params().end());
  TrainConfig c = s.config(Method::kDflowGrpo, 5);
  c.adam.lr = 0.0;
  int emitted = 0;
  const TrainReport r = train(*m, s.cr, c, 2, s.reward, [&](const MetricsRecord&) { ++emitted; });
  CHECK(std::equal(before.begin(), before.end(), m->params().begin()));
  CHECK(r.updates_run == 5);
  CHECK(emitted == static_cast<int>(r.records.size()));
  int train_records = 0;
  long last = -1;
  for (const auto& rec : r.records)
    if (rec.kind == "train") {
      ++train_records;
      CHECK(rec.step > last);
      last = rec.step;
    }
  CHECK(train_records == 5);
}

TEST_CASE("training with a KL penalty keeps the KL finite") {
  ToySetup s;
  auto m = make_model(s.spec, 0);
  TrainConfig c = s.config(Method::kDflowGrpo, 30);
  c.clip.beta_kl = 0.05;
  const TrainReport r = train(*m, s.cr, c, 2, s.reward);
  for (const auto& rec : r.records) {
    CHECK(std::isfinite(rec.mean_kl));
    CHECK(rec.mean_kl >= 0.0);
    CHECK(rec.mean_kl < 10.0);
  }
}

TEST_CASE("every method trains deterministically and improves the toy reward") {
  ToySetup s;
  for (Method method : {Method::kDflowGrpo, Method::kDiffuGrpo, Method::kDiffuGspo, Method::kDflowDpo}) {
    auto a = make_model(s.spec, 0), b = make_model(s.spec, 0);
    const TrainConfig c = s.config(method, 40);
    const TrainReport ra = train(*a, s.cr, c, 2, s.reward);
    const TrainReport rb = train(*b, s.cr, c, 2, s.reward);
    CHECK(ra.records == rb.records);
    CHECK(std::equal(a->params().begin(), a->params().end(), b->params().begin()));
    CHECK(parse_method(to_string(method)) == method);
  }
  auto m = make_model(s.spec, 0);
  const TrainReport r = train(*m, s.cr, s.config(Method::kDflowGrpo, 150), 2, s.reward);
  CHECK(r.records.back().kind == "eval");
  CHECK(r.records.back().mean_reward > r.records.front().mean_reward + 0.2);
  CHECK_THROWS(parse_method("ppo"));
}

TEST_CASE("objective gradient on frozen rollouts matches finite differences") {
  ToySetup s;
  auto old = make_model(s.spec, 0);
  RandomStream rng(9);
  randomize(*old, rng);
  RolloutConfig rc = s.config(Method::kDflowGrpo, 0).rollout;
  std::vector<Group> groups;
  for (int prompt = 0; prompt < 2; ++prompt)
    groups.push_back(make_group(prompt, group_rollout(prompt, *old, s.cr, rc, rng, s.reward)));
  auto ref = old->clone();
  for (double& p : ref->params()) p += rng.normal(0.0, 0.2);
  for (Method method : {Method::kDflowGrpo, Method::kDiffuGrpo, Method::kDiffuGspo, Method::kDflowDpo}) {
    auto m = old->clone();
    for (double& p : m->params()) p += rng.normal(0.0, 0.2);
    ClipConfig clip = ClipConfig::disabled();
    clip.beta_kl = method == Method::kDflowDpo ? 0.0 : 0.1;
    const UpdateResult u = objective_and_grad(method, *m, ref.get(), groups, clip, 3.0);
    auto probe = m->clone();
    const auto f = [&](const std::vector<double>& theta) {
      std::copy(theta.begin(), theta.end(), probe->params().begin());
      return objective_and_grad(method, *probe, ref.get(), groups, clip, 3.0).objective;
    };
    const std::vector<double> theta(m->params().begin(), m->params().end());
    const auto fd = oracle::exact_objective_and_grad(f, theta);
    double num = 0.0, den = 0.0;
    for (std::size_t q = 0; q < theta.size(); ++q) {
      num += (u.grad[q] - fd.grad[q]) * (u.grad[q] - fd.grad[q]);
      den += fd.grad[q] * fd.grad[q];
    }
    CHECK(std::sqrt(num / den) <= 1e-5);
  }
}
