#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "dflow/bridge.hpp"
#include "dflow/config.hpp"
#include "dflow/errors.hpp"
#include "dflow/objectives.hpp"
#include "dflow/ratio.hpp"
#include "dflow/runs.hpp"
#include "dflow/sampler.hpp"
#include "dflow/verify.hpp"

namespace py = pybind11;
using namespace dflow;

namespace {

std::vector<std::vector<double>> to_rows(const LogProbs& lp) {
  std::vector<std::vector<double>> out(lp.length());
  for (int d = 0; d < lp.length(); ++d) out[d].assign(lp.row(d).begin(), lp.row(d).end());
  return out;
}

LogProbs from_rows(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) throw ArgumentError("empty log-probability table");
  LogProbs lp(static_cast<int>(rows.size()), static_cast<int>(rows[0].size()));
  for (std::size_t d = 0; d < rows.size(); ++d) {
    if (rows[d].size() != rows[0].size()) throw ArgumentError("ragged log-probability table");
    std::copy(rows[d].begin(), rows[d].end(), lp.row(static_cast<int>(d)).begin());
  }
  return lp;
}

ProbabilityPath make_path(const std::string& kind, int vocab, const std::string& source,
                          const std::string& kappa, double exponent) {
  RunConfig c;
  c.path_kind = kind;
  c.vocab = vocab;
  c.source = source;
  c.kappa = kappa;
  c.kappa_exponent = exponent;
  c.validate();
  return build_setup(c).path;
}

}  // namespace

PYBIND11_MODULE(_dflow, m) {
  m.doc() = "Discrete flow policy optimization core";

  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ArgumentError>(m, "ArgumentError", PyExc_ValueError);
  py::register_exception<NumericalAbort>(m, "NumericalAbort", PyExc_ArithmeticError);

  py::class_<SequenceState>(m, "SequenceState")
      .def(py::init<std::vector<Token>>())
      .def_readwrite("tokens", &SequenceState::tokens)
      .def("__len__", &SequenceState::length)
      .def("__eq__", [](const SequenceState& a, const SequenceState& b) { return a == b; })
      .def("__repr__", [](const SequenceState& s) { return "SequenceState([" + format_tokens(s.tokens) + "])"; });

  py::class_<ProbabilityPath>(m, "ProbabilityPath")
      .def_static("create", &make_path, py::arg("kind") = "metric", py::arg("vocab") = 16,
                  py::arg("source") = "uniform", py::arg("kappa") = "linear",
                  py::arg("kappa_exponent") = 2.0,
                  "Build a mixture or metric path; vocab excludes the mask token.")
      .def_property_readonly("vocab_size", [](const ProbabilityPath& p) { return p.vocab().size(); })
      .def_property_readonly("mask", [](const ProbabilityPath& p) { return p.vocab().mask(); })
      .def("prob", &ProbabilityPath::prob, py::arg("x"), py::arg("x1"), py::arg("t"))
      .def("probs", [](const ProbabilityPath& p, Token x1, double t) {
        std::vector<double> out(p.vocab().size());
        p.probs(x1, t, out);
        return out;
      });

  py::class_<ConditionalRate>(m, "ConditionalRate")
      .def(py::init<ProbabilityPath>())
      .def("rate", [](const ConditionalRate& cr, Token x, Token z, Token x1, double t) {
        return rate(cr, x, z, x1, t);
      })
      .def("intensity", [](const ConditionalRate& cr, Token x, Token x1, double t) {
        return intensity(cr, x, x1, t).value;
      })
      .def("row", [](const ConditionalRate& cr, Token x, Token x1, double t) {
        std::vector<double> out(cr.vocab_size());
        cr.at(t).row(x, x1, out);
        return out;
      })
      .def("transition_prob",
           [](const ConditionalRate& cr, const std::vector<double>& posterior_logp, Token x,
              Token x_next, double t, double h) {
             return exact_token_transition_prob(posterior_logp, x, x_next, cr.at(t), h);
           },
           py::arg("posterior_logp"), py::arg("x"), py::arg("x_next"), py::arg("t"), py::arg("h"));

  py::class_<PosteriorModel, std::shared_ptr<PosteriorModel>>(m, "PosteriorModel")
      .def_property("params",
                    [](const PosteriorModel& p) {
                      return std::vector<double>(p.params().begin(), p.params().end());
                    },
                    [](PosteriorModel& p, const std::vector<double>& v) {
                      if (v.size() != p.num_params()) throw ArgumentError("parameter count mismatch");
                      std::copy(v.begin(), v.end(), p.params().begin());
                    })
      .def("log_probs", [](const PosteriorModel& p, const SequenceState& x, double t, int prompt) {
        return to_rows(p.log_probs(x, t, prompt));
      }, py::arg("x"), py::arg("t"), py::arg("prompt") = 0);

  m.def("make_model",
        [](const ProbabilityPath& path, int length, const std::string& kind, int prompts,
           int buckets, int hidden, std::uint64_t seed) {
          ModelSpec s;
          s.kind = parse_model_kind(kind);
          s.vocab_size = path.vocab().size();
          s.mask = path.vocab().mask();
          s.length = length;
          s.num_prompts = prompts;
          s.time_buckets = buckets;
          s.hidden = s.kind == ModelKind::kMlp ? hidden : 0;
          return std::shared_ptr<PosteriorModel>(make_model(s, seed));
        },
        py::arg("path"), py::arg("length"), py::arg("kind") = "tabular", py::arg("prompts") = 1,
        py::arg("buckets") = 8, py::arg("hidden") = 16, py::arg("seed") = 0);

  py::class_<Trajectory>(m, "Trajectory")
      .def_readonly("prompt", &Trajectory::prompt)
      .def_readonly("states", &Trajectory::states)
      .def_readonly("reward", &Trajectory::reward)
      .def_property_readonly("terminal", &Trajectory::terminal)
      .def("samples", [](const Trajectory& tr, int k) {
        const StepCache& c = tr.cache.steps.at(k);
        std::vector<std::vector<Token>> out(c.length);
        for (int d = 0; d < c.length; ++d) out[d].assign(c.samples_at(d).begin(), c.samples_at(d).end());
        return out;
      })
      .def("log_ratios",
           [](const Trajectory& tr, const PosteriorModel& model) {
             std::vector<std::vector<double>> out;
             for (int k = 0; k < tr.steps(); ++k) {
               const StepCache& c = tr.cache.steps[k];
               out.push_back(ratio_estimate(c, model.log_probs(tr.states[k], c.t, tr.prompt),
                                            nullptr, RatioOptions{.strict = false, .warn = false})
                                 .log_ratio);
             }
             return out;
           },
           "Per-step, per-position log-ratio estimates of model against the rollout policy.");

  m.def("rollout",
        [](const PosteriorModel& model, const ConditionalRate& cr, int steps, int n_mc,
           std::uint64_t seed, int prompt) {
          RolloutConfig cfg;
          cfg.grid = TimeGrid::uniform(steps);
          cfg.n_mc = n_mc;
          RandomStream rng(seed);
          return rollout(prompt, model, cr, cfg, rng);
        },
        py::arg("model"), py::arg("rate"), py::arg("steps") = 8, py::arg("n_mc") = 8,
        py::arg("seed") = 0, py::arg("prompt") = 0);

  py::class_<ClipConfig>(m, "ClipConfig")
      .def(py::init([](double lo, double hi, double beta, bool token) {
             ClipConfig c{lo, hi, beta, token};
             c.validate();
             return c;
           }),
           py::arg("eps_low") = 1e-3, py::arg("eps_high") = 1.5e-3, py::arg("beta_kl") = 0.0,
           py::arg("token_level_kl") = false)
      .def_static("disabled", &ClipConfig::disabled)
      .def_readwrite("eps_low", &ClipConfig::eps_low)
      .def_readwrite("eps_high", &ClipConfig::eps_high)
      .def_readwrite("beta_kl", &ClipConfig::beta_kl)
      .def_readwrite("token_level_kl", &ClipConfig::token_level_kl);

  py::class_<ObjectiveValue>(m, "ObjectiveValue")
      .def_readonly("value", &ObjectiveValue::value)
      .def_readonly("surrogate", &ObjectiveValue::surrogate)
      .def_readonly("kl", &ObjectiveValue::kl)
      .def_readonly("clip_fraction", &ObjectiveValue::clip_fraction)
      .def_readonly("contributions", &ObjectiveValue::contributions)
      .def_readonly("dlog_ratio", &ObjectiveValue::dlog_ratio)
      .def_readonly("best", &ObjectiveValue::best)
      .def_readonly("worst", &ObjectiveValue::worst);

  m.def("advantages", [](const std::vector<double>& r) { return advantages(r); });
  m.def("dflow_grpo",
        [](const std::vector<double>& adv, const LogRatioGrid& grid, const ClipConfig& clip,
           std::optional<LogRatioGrid> kl_refs) {
          return dflow_grpo(adv, grid, clip, kl_refs ? &*kl_refs : nullptr);
        },
        py::arg("advantages"), py::arg("log_ratios"), py::arg("clip") = ClipConfig{},
        py::arg("kl_refs") = py::none());
  m.def("diffu_grpo",
        [](const std::vector<double>& adv, const std::vector<std::vector<double>>& u,
           const ClipConfig& clip) { return diffu_grpo(adv, u, clip); },
        py::arg("advantages"), py::arg("token_log_ratios"), py::arg("clip") = ClipConfig{});
  m.def("diffu_gspo",
        [](const std::vector<double>& adv, const std::vector<std::vector<double>>& u,
           const ClipConfig& clip) { return diffu_gspo(adv, u, clip); },
        py::arg("advantages"), py::arg("token_log_ratios"), py::arg("clip") = ClipConfig{});
  m.def("dflow_dpo",
        [](const std::vector<double>& rewards, const LogRatioGrid& grid, double beta) {
          return dflow_dpo(rewards, grid, beta);
        },
        py::arg("rewards"), py::arg("log_ratios"), py::arg("beta") = 0.0);
  m.def("kl_estimate",
        [](const std::vector<double>& u, bool token) { return kl_from_log_ratios(u, token); },
        py::arg("log_ratios"), py::arg("token_level") = false);

  m.def("enumerate_transition",
        [](const ProbabilityPath& path, const std::vector<std::vector<double>>& posterior_logp,
           const std::vector<int>& x, double t, double h) {
          return oracle::enumerate_transition(to_oracle(path), to_table(from_rows(posterior_logp)),
                                              x, t, h)
              .rows;
        },
        py::arg("path"), py::arg("posterior_logp"), py::arg("x"), py::arg("t"), py::arg("h"),
        "Exact per-position next-token law of one Euler step (oracle).");

  py::class_<RunConfig>(m, "RunConfig")
      .def(py::init<>())
      .def_static("load", &load_config)
      .def_static("parse", [](const std::string& text) {
        std::istringstream in(text);
        return parse_config(in);
      })
      .def("set", &RunConfig::set)
      .def("override", &RunConfig::apply_override)
      .def("validate", &RunConfig::validate)
      .def("to_text", &RunConfig::to_text)
      .def_readwrite("seed", &RunConfig::seed)
      .def_readwrite("method", &RunConfig::method)
      .def_readwrite("updates", &RunConfig::updates);

  py::class_<MetricsRecord>(m, "MetricsRecord")
      .def_readonly("kind", &MetricsRecord::kind)
      .def_readonly("step", &MetricsRecord::step)
      .def_readonly("mean_reward", &MetricsRecord::mean_reward)
      .def_readonly("objective", &MetricsRecord::objective)
      .def_readonly("clip_fraction", &MetricsRecord::clip_fraction)
      .def_readonly("mean_kl", &MetricsRecord::mean_kl);

  py::class_<TrainReport>(m, "TrainReport")
      .def_readonly("records", &TrainReport::records)
      .def_readonly("updates_run", &TrainReport::updates_run)
      .def_readonly("reached_stop", &TrainReport::reached_stop);

  m.def("run_train",
        [](const RunConfig& c, const std::filesystem::path& dir, const std::string& init) {
          py::gil_scoped_release release;
          return run_train(c, dir, init);
        },
        py::arg("config"), py::arg("out_dir"), py::arg("init_checkpoint") = "");
  m.def("run_eval",
        [](const RunConfig& c, const std::string& ckpt, const std::vector<int>& nfe) {
          std::vector<std::pair<int, double>> out;
          for (const EvalPoint& p : run_eval(c, ckpt, nfe, std::filesystem::path())) out.emplace_back(p.steps, p.mean_reward);
          return out;
        },
        py::arg("config"), py::arg("checkpoint") = "", py::arg("nfe") = std::vector<int>{8});

  py::class_<CheckResult>(m, "CheckResult")
      .def_readonly("name", &CheckResult::name)
      .def_readonly("measured", &CheckResult::measured)
      .def_readonly("tolerance", &CheckResult::tolerance)
      .def_readonly("passed", &CheckResult::pass)
      .def_readonly("detail", &CheckResult::detail)
      .def("__str__", &format_check);
  m.def("verify", &run_verify_suite, py::arg("seed") = 20261016, py::arg("quick") = true);
}
