#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dflow/state.hpp"

namespace dflow {

enum class TaskKind { kTargetSequence, kTokenCount, kParity };

const char* to_string(TaskKind kind);
TaskKind parse_task_kind(const std::string& name);

// Verifiable reward over terminal states, indexed by prompt id.
//   target-sequence: fraction of positions equal to the prompt's target
//   token-count:     1 - |count(token)/D - frac| / max(frac, 1 - frac)
//   parity:          1 if the token-id sum has the prompt's parity, else 0
class TaskSpec {
 public:
  static TaskSpec target_sequence(std::vector<SequenceState> targets);
  static TaskSpec token_count(int length, std::vector<Token> tokens, std::vector<double> fracs);
  static TaskSpec parity(int length, std::vector<int> parities);
  // Prompt parameters drawn from `seed` over tokens 0..live_vocab-1.
  static TaskSpec generate(TaskKind kind, int length, int live_vocab, int prompts,
                           std::uint64_t seed, double target_frac = 0.5);

  TaskKind kind() const { return kind_; }
  int length() const { return length_; }
  int num_prompts() const { return prompts_; }
  const SequenceState& target(int prompt) const;

  // In [0, 1]. Throws ArgumentError for an unknown prompt or wrong length.
  double reward(int prompt, const SequenceState& terminal) const;

  // Expected reward when every terminal token is uniform over the first
  // live_vocab ids, averaged over prompts.
  double chance_reward(int live_vocab) const;

 private:
  TaskSpec(TaskKind kind, int length, int prompts) : kind_(kind), length_(length), prompts_(prompts) {}
  void check_prompt(int prompt) const;

  TaskKind kind_;
  int length_;
  int prompts_;
  std::vector<SequenceState> targets_;
  std::vector<Token> tokens_;
  std::vector<double> fracs_;
  std::vector<int> parities_;
};

}  // namespace dflow
