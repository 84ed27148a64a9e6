#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "xrs/attribution.hpp"
#include "xrs/mdp.hpp"
#include "xrs/reward_model.hpp"

namespace xrs {

// prompt ids, a -1 separator, then completion ids.
using StateKey = std::vector<TokenId>;
StateKey state_key(const TokenSequence& s);

// Tabular softmax policy with a per-state value head. Entries are created on
// first write; unseen states have zero logits (uniform) and zero value, so
// the table scales to any reachable state set.
class TabularPolicy {
 public:
  explicit TabularPolicy(int vocab_size) : vocab_size_(vocab_size) {}

  int vocab_size() const { return vocab_size_; }

  std::vector<double> logits(const TokenSequence& s) const;
  std::vector<double> probs(const TokenSequence& s) const;
  std::vector<double> log_probs(const TokenSequence& s) const;
  double value(const TokenSequence& s) const;

  // Mutable access; creates the entry when missing.
  std::vector<double>& logits_at(const StateKey& key);
  double& value_at(const StateKey& key);

  std::size_t num_entries() const { return table_.size(); }
  bool operator==(const TabularPolicy&) const = default;

  // The returned function reads this object; it must outlive the function.
  PolicyFn as_policy_fn() const;

  nlohmann::json to_json() const;
  static TabularPolicy from_json(const nlohmann::json& j);

 private:
  struct Entry {
    std::vector<double> logits;
    double value = 0.0;
    bool operator==(const Entry&) const = default;
  };
  const Entry* find(const TokenSequence& s) const;
  Entry& entry(const StateKey& key);

  int vocab_size_;
  std::map<StateKey, Entry> table_;
};

// Gradient (or any per-parameter quantity) in the policy's parameterization.
struct PolicyGradient {
  std::map<StateKey, std::vector<double>> logits;
  std::map<StateKey, double> values;
};

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t steps = 0;
  PolicyGradient first_moment;
  PolicyGradient second_moment;

  bool operator==(const AdamState& o) const;
  nlohmann::json to_json() const;
  static AdamState from_json(const nlohmann::json& j);
};

struct TrainConfig {
  int epochs = 10;          // rollout + update iterations per training run
  int batch_size = 8;       // trajectories per iteration
  int ppo_epochs = 1;       // optimization passes over each batch
  int minibatch_size = 0;   // 0: whole batch
  double learning_rate = 0.05;
  double clip_epsilon = 0.2;
  double gae_lambda = 0.95;
  double beta = 0.05;
  double value_coef = 0.5;
  bool normalize_advantages = false;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
  static TrainConfig from_json(const nlohmann::json& j,
                               const TrainConfig& defaults);
};

struct Trajectory {
  std::size_t prompt_index = 0;
  TokenSequence sequence;
  std::vector<double> logp;      // under the sampling policy
  std::vector<double> ref_logp;  // under the frozen reference

  // State before step t.
  TokenSequence state_at(std::size_t t) const;
};

// One trajectory per entry of `prompt_indices`, each with its own seed
// derived from (seed, position).
std::vector<Trajectory> rollout(const TabularPolicy& policy,
                                const TabularPolicy& reference,
                                const MdpSpec& mdp,
                                const std::vector<std::size_t>& prompt_indices,
                                std::uint64_t seed);

// Flattened per-step training data after reward assembly and GAE.
struct PpoStep {
  StateKey state;
  TokenId action = 0;
  double old_logp = 0.0;
  double advantage = 0.0;
  double ret = 0.0;
};

struct PpoBatch {
  std::vector<std::vector<PpoStep>> trajectories;
  double mean_reward = 0.0;  // mean over trajectories of the shaped return
  double mean_kl = 0.0;      // mean over trajectories of sum(logp - ref_logp)
};

// `shaped[i]` holds trajectory i's per-token shaped reward before the KL
// penalty; the penalty is added here with config.beta.
PpoBatch prepare_batch(const TabularPolicy& policy,
                       const std::vector<Trajectory>& trajectories,
                       const std::vector<std::vector<double>>& shaped,
                       const TrainConfig& config);

// Mean clipped-surrogate loss plus value_coef * squared error, over the steps
// of the listed trajectories (all when empty).
double surrogate_loss(const TabularPolicy& policy, const PpoBatch& batch,
                      const TrainConfig& config,
                      const std::vector<std::size_t>& members = {});

PolicyGradient surrogate_gradient(const TabularPolicy& policy,
                                  const PpoBatch& batch,
                                  const TrainConfig& config,
                                  const std::vector<std::size_t>& members = {},
                                  double* clip_fraction = nullptr);

void adam_step(TabularPolicy& policy, AdamState& state,
               const PolicyGradient& grad, double learning_rate);

struct PpoStats {
  double mean_reward = 0.0;
  double value_loss = 0.0;
  double kl = 0.0;
  double clip_fraction = 0.0;
  double loss = 0.0;
};

// Assembles rewards, estimates advantages, then runs config.ppo_epochs passes
// of minibatch updates. Throws NumericError on a non-finite gradient.
PpoStats ppo_update(TabularPolicy& policy, AdamState& optimizer,
                    const std::vector<Trajectory>& trajectories,
                    const std::vector<std::vector<double>>& shaped,
                    const TrainConfig& config, std::uint64_t seed);

struct EvalResult {
  double mean = 0.0;
  double standard_error = 0.0;
  std::size_t samples = 0;
};

// Sample i rolls out prompt prompt_indices[i % size] with seed (seed, i).
EvalResult evaluate_policy(const TabularPolicy& policy, const MdpSpec& mdp,
                           const std::vector<std::size_t>& prompt_indices,
                           const Scorer& reward_model, std::size_t n_samples,
                           std::uint64_t seed);

// Exact KL-regularized objective: mean over prompts of
// E[sum r - beta log(pi / ref)], by backward recursion over the state space.
double exact_objective(const TabularPolicy& policy, const MdpSpec& mdp,
                       const TokenReward& reward, const PolicyFn& ref_policy);

// dJ/dlogit(s, b) = d(s) pi(b|s) (q(s, b) - V(s)), d = reach probability.
PolicyGradient exact_policy_gradient(const TabularPolicy& policy,
                                     const MdpSpec& mdp,
                                     const TokenReward& reward,
                                     const PolicyFn& ref_policy);

struct PolicyCheckpoint {
  TabularPolicy params{1};
  AdamState optimizer;
  int trial_index = -1;
  double validation_reward = 0.0;
  std::uint64_t updates = 0;  // completed training iterations

  nlohmann::json to_json() const;
  static PolicyCheckpoint from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static PolicyCheckpoint load(const std::filesystem::path& path);
};

// Per-trajectory scalar reward and per-token shaped reward, plus the
// attributions and normalized traces behind it for auditing.
struct ShapedOutcome {
  double scalar = 0.0;
  std::vector<double> per_token;
  std::vector<std::vector<double>> source_trace;
  std::vector<Attribution> attributions;
};
using ShapingFn = std::function<ShapedOutcome(const Trajectory&)>;

struct StepMetrics {
  std::uint64_t step = 0;
  double mean_reward = 0.0;  // mean scalar reward of the batch
  PpoStats ppo;
  std::vector<TokenSequence> sequences;  // the batch, in rollout order
  std::vector<ShapedOutcome> outcomes;
};

// Iterates over `prompt_indices` in batches of config.batch_size for
// config.epochs iterations (wrapping when exhausted), calling `on_step` after
// every update. Resumes at checkpoint.updates. With threads > 1 the shaping
// function runs concurrently across a batch and must be thread-safe.
void train_policy(PolicyCheckpoint& checkpoint, const TabularPolicy& reference,
                  const MdpSpec& mdp,
                  const std::vector<std::size_t>& prompt_indices,
                  const ShapingFn& shaping, const TrainConfig& config,
                  const std::function<void(const StepMetrics&)>& on_step = {},
                  std::size_t threads = 1);

nlohmann::json to_json(const StepMetrics& m);

}  // namespace xrs
