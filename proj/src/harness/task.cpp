#include "dflow/task.hpp"

#include <algorithm>
#include <cmath>

#include "dflow/errors.hpp"
#include "dflow/random.hpp"

namespace dflow {

const char* to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::kTargetSequence: return "target-sequence";
    case TaskKind::kTokenCount: return "token-count";
    case TaskKind::kParity: return "parity";
  }
  return "?";
}

TaskKind parse_task_kind(const std::string& name) {
  for (TaskKind k : {TaskKind::kTargetSequence, TaskKind::kTokenCount, TaskKind::kParity})
    if (name == to_string(k)) return k;
  throw ConfigError("unknown task kind '" + name + "'");
}

TaskSpec TaskSpec::target_sequence(std::vector<SequenceState> targets) {
  if (targets.empty()) throw ConfigError("task: need at least one target");
  TaskSpec t(TaskKind::kTargetSequence, targets.front().length(),
             static_cast<int>(targets.size()));
  for (const auto& s : targets)
    if (s.length() != t.length_) throw ConfigError("task: targets differ in length");
  t.targets_ = std::move(targets);
  return t;
}

TaskSpec TaskSpec::token_count(int length, std::vector<Token> tokens, std::vector<double> fracs) {
  if (tokens.empty() || tokens.size() != fracs.size())
    throw ConfigError("task: token-count needs one token and fraction per prompt");
  for (double f : fracs)
    if (!(f >= 0.0 && f <= 1.0)) throw ConfigError("task: target fraction outside [0, 1]");
  TaskSpec t(TaskKind::kTokenCount, length, static_cast<int>(tokens.size()));
  t.tokens_ = std::move(tokens);
  t.fracs_ = std::move(fracs);
  return t;
}

TaskSpec TaskSpec::parity(int length, std::vector<int> parities) {
  if (parities.empty()) throw ConfigError("task: parity needs at least one prompt");
  TaskSpec t(TaskKind::kParity, length, static_cast<int>(parities.size()));
  for (int& p : parities) p &= 1;
  t.parities_ = std::move(parities);
  return t;
}

TaskSpec TaskSpec::generate(TaskKind kind, int length, int live_vocab, int prompts,
                            std::uint64_t seed, double target_frac) {
  if (length < 1 || live_vocab < 2 || prompts < 1)
    throw ConfigError("task: need length >= 1, vocab >= 2, prompts >= 1");
  RandomStream rng(derive_seed(seed, {0x7461736b}));
  switch (kind) {
    case TaskKind::kTargetSequence: {
      std::vector<SequenceState> targets;
      for (int p = 0; p < prompts; ++p) {
        SequenceState s(length, 0);
        for (int d = 0; d < length; ++d) s[d] = rng.uniform_int(live_vocab);
        targets.push_back(std::move(s));
      }
      return target_sequence(std::move(targets));
    }
    case TaskKind::kTokenCount: {
      std::vector<Token> tokens;
      for (int p = 0; p < prompts; ++p) tokens.push_back(rng.uniform_int(live_vocab));
      return token_count(length, std::move(tokens), std::vector<double>(prompts, target_frac));
    }
    case TaskKind::kParity: {
      std::vector<int> par;
      for (int p = 0; p < prompts; ++p) par.push_back(p % 2);
      return parity(length, std::move(par));
    }
  }
  throw ConfigError("task: unknown kind");
}

void TaskSpec::check_prompt(int prompt) const {
  if (prompt < 0 || prompt >= prompts_)
    throw ArgumentError("task: unknown prompt id " + std::to_string(prompt));
}

const SequenceState& TaskSpec::target(int prompt) const {
  check_prompt(prompt);
  if (kind_ != TaskKind::kTargetSequence) throw ArgumentError("task: no target sequence");
  return targets_[prompt];
}

double TaskSpec::reward(int prompt, const SequenceState& x) const {
  check_prompt(prompt);
  if (x.length() != length_) throw ArgumentError("task: terminal state has the wrong length");
  const double D = static_cast<double>(length_);
  switch (kind_) {
    case TaskKind::kTargetSequence: {
      int hits = 0;
      for (int d = 0; d < length_; ++d) hits += x[d] == targets_[prompt][d];
      return hits / D;
    }
    case TaskKind::kTokenCount: {
      int count = 0;
      for (int d = 0; d < length_; ++d) count += x[d] == tokens_[prompt];
      const double f = fracs_[prompt];
      const double worst = std::max(f, 1.0 - f);
      return worst > 0.0 ? 1.0 - std::abs(count / D - f) / worst : 1.0;
    }
    case TaskKind::kParity: {
      long sum = 0;
      for (int d = 0; d < length_; ++d) sum += x[d];
      return (sum & 1) == parities_[prompt] ? 1.0 : 0.0;
    }
  }
  return 0.0;
}

double TaskSpec::chance_reward(int live_vocab) const {
  const double V = static_cast<double>(live_vocab);
  double total = 0.0;
  for (int p = 0; p < prompts_; ++p) {
    switch (kind_) {
      case TaskKind::kTargetSequence:
        total += 1.0 / V;
        break;
      case TaskKind::kTokenCount: {
        // count ~ Binomial(D, 1/V)
        const double q = 1.0 / V;
        for (int c = 0; c <= length_; ++c) {
          const double logc = std::lgamma(length_ + 1.0) - std::lgamma(c + 1.0) -
                              std::lgamma(length_ - c + 1.0);
          const double pc = std::exp(logc + c * std::log(q) + (length_ - c) * std::log1p(-q));
          SequenceState s(length_, tokens_[p] == 0 ? 1 : 0);
          for (int d = 0; d < c; ++d) s[d] = tokens_[p];
          total += pc * reward(p, s);
        }
        break;
      }
      case TaskKind::kParity: {
        // Probability that the sum of D uniform ids is odd.
        const int odd = live_vocab / 2;
        const double bias = (V - 2.0 * odd) / V;  // P(even) - P(odd) for one token
        const double p_even = 0.5 * (1.0 + std::pow(bias, length_));
        total += parities_[p] == 0 ? p_even : 1.0 - p_even;
        break;
      }
    }
  }
  return total / prompts_;
}

}  // namespace dflow
