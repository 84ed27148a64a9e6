#include "xrs/mdp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "xrs/errors.hpp"

namespace xrs {

std::string to_string(const TokenSequence& seq) {
  std::ostringstream out;
  for (std::size_t i = 0; i < seq.prompt.size(); ++i) {
    out << (i ? " " : "") << seq.prompt[i];
  }
  out << " |";
  for (TokenId t : seq.completion) out << ' ' << t;
  return out.str();
}

TokenSequence MdpSpec::initial_state(std::size_t prompt_index) const {
  if (prompt_index >= prompts.size()) {
    throw UsageError("prompt index " + std::to_string(prompt_index) +
                     " out of range");
  }
  return TokenSequence{prompts[prompt_index], {}, false};
}

void MdpSpec::validate() const {
  if (vocab_size < 1) throw UsageError("vocab_size must be positive");
  if (horizon < 1) throw UsageError("horizon must be at least 1");
  if (eos_token < 0 || eos_token >= vocab_size) {
    throw UsageError("eos_token must be < vocab_size");
  }
  if (!(beta > 0.0) || !std::isfinite(beta)) {
    throw UsageError("beta must be positive and finite");
  }
  if (gamma != 1.0) {
    throw UsageError("only the undiscounted setting gamma = 1 is supported");
  }
  for (const auto& p : prompts) {
    for (TokenId t : p) {
      if (t < 0 || t >= vocab_size) {
        throw UsageError("prompt token " + std::to_string(t) +
                         " outside vocabulary");
      }
    }
  }
}

bool is_terminal(const MdpSpec& mdp, const TokenSequence& seq) {
  if (static_cast<int>(seq.completion.size()) >= mdp.horizon) return true;
  return !seq.completion.empty() && seq.completion.back() == mdp.eos_token;
}

void validate_sequence(const MdpSpec& mdp, const TokenSequence& seq,
                       bool allow_mask) {
  for (TokenId t : seq.prompt) {
    if (t < 0 || t >= mdp.vocab_size) {
      throw UsageError("prompt token " + std::to_string(t) +
                       " outside vocabulary");
    }
  }
  for (TokenId t : seq.completion) {
    const bool is_mask = allow_mask && t == mdp.mask_token();
    if (!is_mask && (t < 0 || t >= mdp.vocab_size)) {
      throw UsageError("completion token " + std::to_string(t) +
                       " outside vocabulary");
    }
  }
  if (static_cast<int>(seq.completion.size()) > mdp.horizon) {
    throw UsageError("completion longer than horizon");
  }
  if (!allow_mask && seq.terminated != is_terminal(mdp, seq)) {
    throw UsageError("terminated flag inconsistent with completion");
  }
}

TokenSequence step(const MdpSpec& mdp, const TokenSequence& state,
                   TokenId action) {
  if (state.terminated) throw UsageError("cannot step a terminated state");
  if (action < 0 || action >= mdp.vocab_size) {
    throw UsageError("action " + std::to_string(action) +
                     " outside vocabulary");
  }
  TokenSequence next = state;
  next.completion.push_back(action);
  next.terminated = is_terminal(mdp, next);
  return next;
}

PolicyFn uniform_policy(int vocab_size) {
  return [vocab_size](const TokenSequence&) {
    return std::vector<double>(vocab_size, 1.0 / vocab_size);
  };
}

double StateSpace::count_states(const MdpSpec& mdp) {
  const double v = mdp.vocab_size;
  double open = 1.0;  // nonterminal states at the current depth
  double total = 1.0;
  for (int depth = 1; depth <= mdp.horizon; ++depth) {
    total += open * v;
    open *= (v - 1.0);
  }
  return total * static_cast<double>(mdp.prompts.size());
}

StateSpace::StateSpace(const MdpSpec& mdp) {
  mdp.validate();
  if (mdp.prompts.empty()) throw UsageError("MDP has no prompts");
  const double count = count_states(mdp);
  if (count > static_cast<double>(mdp.state_cap)) {
    std::ostringstream msg;
    msg << "state space of " << count << " states exceeds cap "
        << mdp.state_cap;
    throw CapacityError(msg.str());
  }
  states_.reserve(static_cast<std::size_t>(count));
  children_.reserve(static_cast<std::size_t>(count));

  // Iterative DFS, pushing actions in reverse so they pop in ascending order.
  for (std::size_t p = 0; p < mdp.prompts.size(); ++p) {
    std::vector<std::pair<TokenSequence, int>> stack;  // (state, parent)
    stack.push_back({mdp.initial_state(p), -1});
    std::vector<TokenId> pending_action;
    pending_action.push_back(-1);
    while (!stack.empty()) {
      auto [s, parent] = std::move(stack.back());
      const TokenId via = pending_action.back();
      stack.pop_back();
      pending_action.pop_back();

      const std::size_t idx = states_.size();
      if (parent < 0) {
        roots_.push_back(idx);
      } else {
        children_[parent][via] = static_cast<int>(idx);
      }
      index_.emplace(std::make_pair(s.prompt, s.completion), idx);
      children_.emplace_back(s.terminated ? 0 : mdp.vocab_size, kNoChild);
      if (!s.terminated) {
        for (TokenId a = mdp.vocab_size - 1; a >= 0; --a) {
          stack.push_back({step(mdp, s, a), static_cast<int>(idx)});
          pending_action.push_back(a);
        }
      }
      states_.push_back(std::move(s));
    }
  }
}

std::size_t StateSpace::index_of(const TokenSequence& seq) const {
  auto it = index_.find(std::make_pair(seq.prompt, seq.completion));
  if (it == index_.end()) {
    throw UsageError("state not in enumerated space: " + to_string(seq));
  }
  return it->second;
}

double SoftSolution::value(const TokenSequence& s) const {
  return soft_values[space->index_of(s)];
}

const std::vector<double>& SoftSolution::action_probs(
    const TokenSequence& s) const {
  return policy[space->index_of(s)];
}

SoftSolution soft_value_iteration(const MdpSpec& mdp, const TokenReward& reward,
                                  const PolicyFn& ref_policy) {
  return soft_value_iteration(std::make_shared<const StateSpace>(mdp), mdp,
                              reward, ref_policy);
}

SoftSolution soft_value_iteration(std::shared_ptr<const StateSpace> space,
                                  const MdpSpec& mdp, const TokenReward& reward,
                                  const PolicyFn& ref_policy) {
  mdp.validate();
  const std::size_t n = space->size();
  SoftSolution sol;
  sol.soft_values.assign(n, 0.0);
  sol.soft_q.assign(n, {});
  sol.policy.assign(n, {});
  const double beta = mdp.beta;

  // Children always follow their parent in the enumeration order.
  for (std::size_t i = n; i-- > 0;) {
    const TokenSequence& s = space->state(i);
    if (space->terminal(i)) {
      sol.soft_values[i] = reward.at_terminal(s);
      continue;
    }
    const std::vector<double> ref = ref_policy(s);
    if (static_cast<int>(ref.size()) != mdp.vocab_size) {
      throw UsageError("reference policy returned wrong action count");
    }
    const auto& kids = space->children(i);
    std::vector<double>& q = sol.soft_q[i];
    q.resize(mdp.vocab_size);
    std::vector<double> logits(mdp.vocab_size,
                               -std::numeric_limits<double>::infinity());
    double max_logit = -std::numeric_limits<double>::infinity();
    for (TokenId a = 0; a < mdp.vocab_size; ++a) {
      q[a] = reward.transition(s, a) + sol.soft_values[kids[a]];
      if (ref[a] > 0.0) {
        logits[a] = std::log(ref[a]) + q[a] / beta;
        max_logit = std::max(max_logit, logits[a]);
      }
    }
    if (!std::isfinite(max_logit)) {
      throw DomainError("reference policy has no support at " + to_string(s));
    }
    double total = 0.0;
    for (double l : logits) total += std::exp(l - max_logit);
    const double log_z = max_logit + std::log(total);
    sol.soft_values[i] = beta * log_z;
    std::vector<double>& pi = sol.policy[i];
    pi.resize(mdp.vocab_size);
    for (TokenId a = 0; a < mdp.vocab_size; ++a) {
      pi[a] = std::exp(logits[a] - log_z);
    }
  }
  sol.space = std::move(space);
  return sol;
}

std::vector<double> assemble_dense_rewards(std::span<const double> shaped,
                                           std::span<const double> logp,
                                           std::span<const double> ref_logp,
                                           double beta) {
  if (shaped.size() != logp.size() || logp.size() != ref_logp.size()) {
    throw UsageError("reward, log-prob and reference log-prob lengths differ");
  }
  if (beta < 0.0) throw UsageError("beta must be nonnegative");
  std::vector<double> out(shaped.size());
  for (std::size_t t = 0; t < shaped.size(); ++t) {
    out[t] = shaped[t];
    if (beta != 0.0) out[t] += -beta * (logp[t] - ref_logp[t]);
  }
  return out;
}

std::vector<double> assemble_token_rewards(std::span<const double> logp,
                                           std::span<const double> ref_logp,
                                           double terminal_reward,
                                           double beta) {
  std::vector<double> sparse(logp.size(), 0.0);
  if (!sparse.empty()) sparse.back() = terminal_reward;
  return assemble_dense_rewards(sparse, logp, ref_logp, beta);
}

std::vector<double> assemble_token_rewards(const MdpSpec& mdp,
                                           const TokenSequence& traj,
                                           double terminal_reward,
                                           const PolicyFn& policy,
                                           const PolicyFn& ref_policy,
                                           double beta) {
  if (!traj.terminated) {
    throw UsageError("reward assembly requires a terminated trajectory");
  }
  std::vector<double> logp, ref_logp;
  TokenSequence s{traj.prompt, {}, false};
  for (TokenId a : traj.completion) {
    const double p = policy(s).at(a);
    const double q = ref_policy(s).at(a);
    if (!(q > 0.0)) {
      throw DomainError("reference policy gives zero probability to action " +
                        std::to_string(a) + " at " + to_string(s));
    }
    if (!(p > 0.0)) {
      throw DomainError("policy gives zero probability to taken action " +
                        std::to_string(a) + " at " + to_string(s));
    }
    logp.push_back(std::log(p));
    ref_logp.push_back(std::log(q));
    s = step(mdp, s, a);
  }
  return assemble_token_rewards(logp, ref_logp, terminal_reward, beta);
}

}  // namespace xrs
