#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace xrs {

using TokenId = std::int32_t;

// A prompt plus the tokens generated so far. Doubles as an MDP state and as
// the input handed to scorers and attribution methods.
struct TokenSequence {
  std::vector<TokenId> prompt;
  std::vector<TokenId> completion;
  bool terminated = false;

  bool operator==(const TokenSequence&) const = default;
};

std::string to_string(const TokenSequence& seq);

// Finite token-level MDP with deterministic append dynamics. The scorer
// vocabulary reserves one extra id, `mask_token() == vocab_size`, that the
// policy can never emit.
struct MdpSpec {
  int vocab_size = 2;
  int horizon = 1;
  TokenId eos_token = 0;
  double beta = 0.1;
  double gamma = 1.0;
  std::vector<std::vector<TokenId>> prompts;
  std::size_t state_cap = 1'000'000;

  TokenId mask_token() const { return static_cast<TokenId>(vocab_size); }
  TokenSequence initial_state(std::size_t prompt_index) const;

  // Throws UsageError when an invariant does not hold.
  void validate() const;
};

// Checks token ranges and length bounds; `allow_mask` admits the reserved
// mask id in the completion.
void validate_sequence(const MdpSpec& mdp, const TokenSequence& seq,
                       bool allow_mask = false);

bool is_terminal(const MdpSpec& mdp, const TokenSequence& seq);

TokenSequence step(const MdpSpec& mdp, const TokenSequence& state,
                   TokenId action);

// state -> probability vector over the vocab_size actions.
using PolicyFn = std::function<std::vector<double>(const TokenSequence&)>;
using StateFn = std::function<double(const TokenSequence&)>;

PolicyFn uniform_policy(int vocab_size);

// Per-transition reward r(s, a) plus an optional value attached to terminal
// states (zero when unset).
struct TokenReward {
  std::function<double(const TokenSequence&, TokenId)> transition;
  StateFn terminal;

  double at_terminal(const TokenSequence& s) const {
    return terminal ? terminal(s) : 0.0;
  }
};

// All reachable states, enumerated per prompt in lexicographic order of the
// completion (depth-first, actions ascending).
class StateSpace {
 public:
  static constexpr int kNoChild = -1;

  explicit StateSpace(const MdpSpec& mdp);

  std::size_t size() const { return states_.size(); }
  const TokenSequence& state(std::size_t i) const { return states_[i]; }
  const std::vector<int>& children(std::size_t i) const { return children_[i]; }
  bool terminal(std::size_t i) const { return states_[i].terminated; }
  std::size_t root(std::size_t prompt_index) const { return roots_[prompt_index]; }
  std::size_t num_roots() const { return roots_.size(); }

  // Index of `seq`; throws UsageError if it is not in the space.
  std::size_t index_of(const TokenSequence& seq) const;

  // Upper bound on the number of states, computed without enumerating.
  static double count_states(const MdpSpec& mdp);

 private:
  std::vector<TokenSequence> states_;
  std::vector<std::vector<int>> children_;
  std::vector<std::size_t> roots_;
  std::map<std::pair<std::vector<TokenId>, std::vector<TokenId>>, std::size_t>
      index_;
};

// Exact solution of the KL-regularized objective by backward induction.
struct SoftSolution {
  std::shared_ptr<const StateSpace> space;
  std::vector<double> soft_values;
  std::vector<std::vector<double>> soft_q;  // empty rows at terminal states
  std::vector<std::vector<double>> policy;  // empty rows at terminal states

  double value(const TokenSequence& s) const;
  const std::vector<double>& action_probs(const TokenSequence& s) const;
};

// V(s) = beta * log sum_a ref(a|s) exp(Q(s,a)/beta),
// Q(s,a) = r(s,a) + V(s'), pi(a|s) ∝ ref(a|s) exp(Q(s,a)/beta).
SoftSolution soft_value_iteration(const MdpSpec& mdp, const TokenReward& reward,
                                  const PolicyFn& ref_policy);

// Same recursion over a prebuilt state space (shared between solves).
SoftSolution soft_value_iteration(std::shared_ptr<const StateSpace> space,
                                  const MdpSpec& mdp, const TokenReward& reward,
                                  const PolicyFn& ref_policy);

// Per-step rewards r_t = shaped[t] - beta * (logp[t] - ref_logp[t]).
// With beta == 0 the penalty term is dropped entirely.
std::vector<double> assemble_dense_rewards(std::span<const double> shaped,
                                           std::span<const double> logp,
                                           std::span<const double> ref_logp,
                                           double beta);

// Sparse case: `terminal_reward` on the final step only.
std::vector<double> assemble_token_rewards(std::span<const double> logp,
                                           std::span<const double> ref_logp,
                                           double terminal_reward, double beta);

// Evaluates both policies along the trajectory's prefixes. Throws DomainError
// if either assigns zero probability to a taken action.
std::vector<double> assemble_token_rewards(const MdpSpec& mdp,
                                           const TokenSequence& traj,
                                           double terminal_reward,
                                           const PolicyFn& policy,
                                           const PolicyFn& ref_policy,
                                           double beta);

}  // namespace xrs
