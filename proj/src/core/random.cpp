#include "dflow/random.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "dflow/state.hpp"

namespace dflow {
namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed,
                          std::initializer_list<std::uint64_t> keys) {
  std::uint64_t h = splitmix64(seed);
  for (std::uint64_t k : keys) h = splitmix64(h ^ splitmix64(k + 0x632be59bd9b4e019ULL));
  return h;
}

int sample_log_categorical(std::span<const double> logp, double u) {
  double cum = 0.0;
  int last = -1;
  for (std::size_t i = 0; i < logp.size(); ++i) {
    if (logp[i] == -INFINITY) continue;
    cum += std::exp(logp[i]);
    last = static_cast<int>(i);
    if (u < cum) return last;
  }
  if (last < 0) throw std::invalid_argument("sample_log_categorical: no support");
  return last;
}

int sample_categorical(std::span<const double> probs, double u) {
  double total = 0.0;
  for (double p : probs) total += p;
  double target = u * total, cum = 0.0;
  int last = -1;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] <= 0.0) continue;
    cum += probs[i];
    last = static_cast<int>(i);
    if (target < cum) return last;
  }
  if (last < 0) throw std::invalid_argument("sample_categorical: no support");
  return last;
}

std::string format_tokens(std::span<const Token> tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(tokens[i]);
  }
  return out;
}

std::vector<Token> parse_tokens(const std::string& text) {
  std::vector<Token> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    out.push_back(std::stoi(item));
  }
  return out;
}

}  // namespace dflow
