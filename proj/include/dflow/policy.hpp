#pragma once

#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dflow/paths.hpp"
#include "dflow/random.hpp"
#include "dflow/state.hpp"

namespace dflow {

// D x |S| table of per-position log-probabilities, row-major.
class LogProbs {
 public:
  LogProbs() = default;
  LogProbs(int length, int vocab)
      : length_(length), vocab_(vocab),
        data_(static_cast<std::size_t>(length) * vocab, 0.0) {}

  int length() const { return length_; }
  int vocab() const { return vocab_; }
  bool empty() const { return data_.empty(); }

  std::span<double> row(int d) {
    return {data_.data() + static_cast<std::size_t>(d) * vocab_,
            static_cast<std::size_t>(vocab_)};
  }
  std::span<const double> row(int d) const {
    return {data_.data() + static_cast<std::size_t>(d) * vocab_,
            static_cast<std::size_t>(vocab_)};
  }
  double at(int d, Token x) const { return data_[static_cast<std::size_t>(d) * vocab_ + x]; }
  double& at(int d, Token x) { return data_[static_cast<std::size_t>(d) * vocab_ + x]; }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }

  friend bool operator==(const LogProbs&, const LogProbs&) = default;

 private:
  int length_ = 0;
  int vocab_ = 0;
  std::vector<double> data_;
};

enum class ModelKind { kTabular, kMlp, kFunction };

const char* to_string(ModelKind kind);
ModelKind parse_model_kind(const std::string& name);

// Architecture metadata. Two models are interchangeable iff specs are equal.
struct ModelSpec {
  ModelKind kind = ModelKind::kTabular;
  int vocab_size = 2;
  std::optional<Token> mask;  // posterior assigns zero mass here
  int length = 1;             // D
  int num_prompts = 1;
  int time_buckets = 1;       // tabular: aligned with a uniform grid
  int hidden = 0;             // mlp hidden width

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

// Output of a forward evaluation plus whatever backward() needs.
struct ForwardPass {
  LogProbs logp;
  SequenceState input;
  double t = 0.0;
  int prompt = 0;
  std::vector<double> activations;
  bool valid = false;
};

// Parameterized posterior p^{theta,d}_{1|t}(. | x_t, c), factorized over
// positions. Forward is const and safe to call concurrently.
class PosteriorModel {
 public:
  virtual ~PosteriorModel() = default;

  const ModelSpec& spec() const { return spec_; }
  std::span<double> params() { return params_; }
  std::span<const double> params() const { return params_; }
  std::size_t num_params() const { return params_.size(); }

  virtual ForwardPass forward(const SequenceState& x, double t, int prompt) const = 0;

  // Accumulates d(objective)/d(params) into grad given upstream gradients
  // with respect to the D x |S| log-probabilities of `pass`.
  virtual void backward(const ForwardPass& pass, std::span<const double> upstream,
                        std::span<double> grad) const = 0;

  virtual std::unique_ptr<PosteriorModel> clone() const = 0;

  LogProbs log_probs(const SequenceState& x, double t, int prompt) const {
    return forward(x, t, prompt).logp;
  }

 protected:
  PosteriorModel(ModelSpec spec, std::size_t n) : spec_(spec), params_(n, 0.0) {}

  void check_input(const SequenceState& x, double t, int prompt) const;
  // In-place log-softmax of one row; the mask column (if any) becomes -inf.
  void log_softmax_row(std::span<double> logits) const;
  // Gradient through log_softmax_row: dlogits = g - p * sum(g).
  void log_softmax_backward(std::span<const double> logp, std::span<const double> g,
                            std::span<double> dlogits) const;

  ModelSpec spec_;
  std::vector<double> params_;
};

// Logits indexed by (prompt, position, current token, time bucket).
class TabularPosterior final : public PosteriorModel {
 public:
  explicit TabularPosterior(ModelSpec spec);

  ForwardPass forward(const SequenceState& x, double t, int prompt) const override;
  void backward(const ForwardPass& pass, std::span<const double> upstream,
                std::span<double> grad) const override;
  std::unique_ptr<PosteriorModel> clone() const override;

  int bucket(double t) const;
  std::size_t offset(int prompt, int d, Token current, int bucket) const;
};

// One tanh hidden layer over [one-hot(x), time features, one-hot(prompt)].
class MlpPosterior final : public PosteriorModel {
 public:
  static constexpr int kTimeFeatures = 3;

  explicit MlpPosterior(ModelSpec spec);

  ForwardPass forward(const SequenceState& x, double t, int prompt) const override;
  void backward(const ForwardPass& pass, std::span<const double> upstream,
                std::span<double> grad) const override;
  std::unique_ptr<PosteriorModel> clone() const override;

  int input_dim() const;
  void initialize(RandomStream& rng);

 private:
  std::size_t w1_, b1_, w2_, b2_;  // parameter block offsets
};

// Fixed posterior given by a callback; no trainable parameters. Used for
// exact (Bayes) posteriors in tests and verification.
class FunctionPosterior final : public PosteriorModel {
 public:
  // Fills D x |S| probabilities for (x, t, prompt).
  using Fn = std::function<void(const SequenceState&, double, int, LogProbs&)>;

  FunctionPosterior(ModelSpec spec, Fn probs);

  ForwardPass forward(const SequenceState& x, double t, int prompt) const override;
  void backward(const ForwardPass& pass, std::span<const double> upstream,
                std::span<double> grad) const override;
  std::unique_ptr<PosteriorModel> clone() const override;

 private:
  Fn probs_;
};

// Builds a zero-initialized tabular model or a randomly initialized mlp.
std::unique_ptr<PosteriorModel> make_model(const ModelSpec& spec, std::uint64_t init_seed);

// Frozen copy of a model (theta_old, pi_ref).
class PolicySnapshot {
 public:
  explicit PolicySnapshot(std::shared_ptr<const PosteriorModel> model)
      : model_(std::move(model)) {}

  const ModelSpec& spec() const { return model_->spec(); }
  std::span<const double> params() const { return model_->params(); }
  const PosteriorModel& model() const { return *model_; }

 private:
  std::shared_ptr<const PosteriorModel> model_;
};

PolicySnapshot snapshot(const PosteriorModel& model);
std::unique_ptr<PosteriorModel> restore(const PolicySnapshot& snap);
// Copies parameters into an existing model; ConfigError on spec mismatch.
void restore_into(PosteriorModel& target, const PolicySnapshot& snap);

// Versioned text checkpoint; parameters are written as hex floats so the
// round trip is exact.
void save_checkpoint(const PolicySnapshot& snap, std::ostream& out);
void save_checkpoint(const PolicySnapshot& snap, const std::string& path);
PolicySnapshot load_checkpoint(std::istream& in);
PolicySnapshot load_checkpoint(const std::string& path);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double clip_norm = 1.0;  // <= 0 disables clipping
};

// AdamW with global-norm gradient clipping. Minimizes.
class AdamW {
 public:
  AdamW(std::size_t n, AdamConfig config);

  // Returns the gradient norm before clipping.
  double step(std::span<double> params, std::span<const double> grad);

  const AdamConfig& config() const { return config_; }
  long steps() const { return steps_; }
  std::span<const double> first_moment() const { return m_; }
  std::span<const double> second_moment() const { return v_; }

 private:
  AdamConfig config_;
  std::vector<double> m_, v_;
  long steps_ = 0;
};

}  // namespace dflow
