#pragma once

#include <span>
#include <string>
#include <vector>

namespace dflow {

using Token = int;

// A length-D sequence of token indices (x_t in S^D).
struct SequenceState {
  std::vector<Token> tokens;

  SequenceState() = default;
  explicit SequenceState(std::vector<Token> t) : tokens(std::move(t)) {}
  SequenceState(int length, Token fill) : tokens(length, fill) {}

  int length() const { return static_cast<int>(tokens.size()); }
  Token operator[](int d) const { return tokens[d]; }
  Token& operator[](int d) { return tokens[d]; }
  std::span<const Token> view() const { return tokens; }

  friend bool operator==(const SequenceState&, const SequenceState&) = default;
};

// Comma-separated token ids, e.g. "3,0,15".
std::string format_tokens(std::span<const Token> tokens);
std::vector<Token> parse_tokens(const std::string& text);

}  // namespace dflow
