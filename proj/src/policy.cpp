#include "xrs/policy.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "xrs/errors.hpp"
#include "xrs/io.hpp"
#include "xrs/parallel.hpp"
#include "xrs/rng.hpp"

namespace xrs {

namespace {

std::vector<double> softmax(const std::vector<double>& logits) {
  const double hi = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - hi);
    total += p[i];
  }
  for (double& v : p) v /= total;
  return p;
}

TokenSequence sequence_from_key(const StateKey& key) {
  TokenSequence s;
  auto sep = std::find(key.begin(), key.end(), -1);
  s.prompt.assign(key.begin(), sep);
  if (sep != key.end()) s.completion.assign(sep + 1, key.end());
  return s;
}

Trajectory sample_trajectory(const TabularPolicy& policy,
                             const TabularPolicy& reference, const MdpSpec& mdp,
                             std::size_t prompt_index, std::uint64_t seed) {
  Rng rng(seed);
  Trajectory traj;
  traj.prompt_index = prompt_index;
  TokenSequence s = mdp.initial_state(prompt_index);
  while (!s.terminated) {
    const auto logp = policy.log_probs(s);
    std::vector<double> p(logp.size());
    for (std::size_t a = 0; a < p.size(); ++a) p[a] = std::exp(logp[a]);
    const auto a = static_cast<TokenId>(rng.categorical(p));
    traj.logp.push_back(logp[a]);
    traj.ref_logp.push_back(reference.log_probs(s)[a]);
    s = step(mdp, s, a);
  }
  traj.sequence = std::move(s);
  return traj;
}

nlohmann::json gradient_to_json(const PolicyGradient& g) {
  auto logits = nlohmann::json::array();
  for (const auto& [k, v] : g.logits) logits.push_back({{"key", k}, {"v", v}});
  auto values = nlohmann::json::array();
  for (const auto& [k, v] : g.values) values.push_back({{"key", k}, {"v", v}});
  return {{"logits", logits}, {"values", values}};
}

PolicyGradient gradient_from_json(const nlohmann::json& j) {
  PolicyGradient g;
  for (const auto& e : j.at("logits")) {
    g.logits[e.at("key").get<StateKey>()] = e.at("v").get<std::vector<double>>();
  }
  for (const auto& e : j.at("values")) {
    g.values[e.at("key").get<StateKey>()] = e.at("v").get<double>();
  }
  return g;
}

void check_finite(const PolicyGradient& g, std::size_t batch_index) {
  auto fail = [&] {
    throw NumericError("non-finite gradient in minibatch " +
                       std::to_string(batch_index));
  };
  for (const auto& [k, v] : g.logits) {
    for (double x : v) {
      if (!std::isfinite(x)) fail();
    }
  }
  for (const auto& [k, v] : g.values) {
    if (!std::isfinite(v)) fail();
  }
}

}  // namespace

StateKey state_key(const TokenSequence& s) {
  StateKey key = s.prompt;
  key.push_back(-1);
  key.insert(key.end(), s.completion.begin(), s.completion.end());
  return key;
}

const TabularPolicy::Entry* TabularPolicy::find(const TokenSequence& s) const {
  auto it = table_.find(state_key(s));
  return it == table_.end() ? nullptr : &it->second;
}

TabularPolicy::Entry& TabularPolicy::entry(const StateKey& key) {
  auto it = table_.find(key);
  if (it == table_.end()) {
    it = table_.emplace(key, Entry{std::vector<double>(vocab_size_, 0.0), 0.0})
             .first;
  }
  return it->second;
}

std::vector<double> TabularPolicy::logits(const TokenSequence& s) const {
  const Entry* e = find(s);
  return e ? e->logits : std::vector<double>(vocab_size_, 0.0);
}

std::vector<double> TabularPolicy::probs(const TokenSequence& s) const {
  return softmax(logits(s));
}

std::vector<double> TabularPolicy::log_probs(const TokenSequence& s) const {
  auto l = logits(s);
  const double hi = *std::max_element(l.begin(), l.end());
  double total = 0.0;
  for (double v : l) total += std::exp(v - hi);
  const double log_z = hi + std::log(total);
  for (double& v : l) v -= log_z;
  return l;
}

double TabularPolicy::value(const TokenSequence& s) const {
  const Entry* e = find(s);
  return e ? e->value : 0.0;
}

std::vector<double>& TabularPolicy::logits_at(const StateKey& key) {
  return entry(key).logits;
}

double& TabularPolicy::value_at(const StateKey& key) { return entry(key).value; }

PolicyFn TabularPolicy::as_policy_fn() const {
  return [this](const TokenSequence& s) { return probs(s); };
}

nlohmann::json TabularPolicy::to_json() const {
  auto entries = nlohmann::json::array();
  for (const auto& [key, e] : table_) {
    entries.push_back({{"key", key}, {"logits", e.logits}, {"value", e.value}});
  }
  return {{"vocab_size", vocab_size_}, {"entries", entries}};
}

TabularPolicy TabularPolicy::from_json(const nlohmann::json& j) {
  TabularPolicy p(j.at("vocab_size").get<int>());
  for (const auto& e : j.at("entries")) {
    Entry& dst = p.entry(e.at("key").get<StateKey>());
    dst.logits = e.at("logits").get<std::vector<double>>();
    dst.value = e.at("value").get<double>();
    if (static_cast<int>(dst.logits.size()) != p.vocab_size_) {
      throw UsageError("policy entry has wrong logit count");
    }
  }
  return p;
}

bool AdamState::operator==(const AdamState& o) const {
  return beta1 == o.beta1 && beta2 == o.beta2 && epsilon == o.epsilon &&
         steps == o.steps && first_moment.logits == o.first_moment.logits &&
         first_moment.values == o.first_moment.values &&
         second_moment.logits == o.second_moment.logits &&
         second_moment.values == o.second_moment.values;
}

nlohmann::json AdamState::to_json() const {
  return {{"beta1", beta1},
          {"beta2", beta2},
          {"epsilon", epsilon},
          {"steps", steps},
          {"first_moment", gradient_to_json(first_moment)},
          {"second_moment", gradient_to_json(second_moment)}};
}

AdamState AdamState::from_json(const nlohmann::json& j) {
  AdamState s;
  s.beta1 = j.at("beta1").get<double>();
  s.beta2 = j.at("beta2").get<double>();
  s.epsilon = j.at("epsilon").get<double>();
  s.steps = j.at("steps").get<std::uint64_t>();
  s.first_moment = gradient_from_json(j.at("first_moment"));
  s.second_moment = gradient_from_json(j.at("second_moment"));
  return s;
}

void TrainConfig::validate() const {
  if (epochs < 0) throw UsageError("epochs must be >= 0");
  if (batch_size < 1) throw UsageError("batch_size must be >= 1");
  if (ppo_epochs < 1) throw UsageError("ppo_epochs must be >= 1");
  if (minibatch_size < 0) throw UsageError("minibatch_size must be >= 0");
  if (!(clip_epsilon > 0.0 && clip_epsilon < 1.0)) {
    throw UsageError("clip_epsilon must lie in (0, 1)");
  }
  if (!(gae_lambda >= 0.0 && gae_lambda <= 1.0)) {
    throw UsageError("gae_lambda must lie in [0, 1]");
  }
  if (!(learning_rate >= 0.0)) throw UsageError("learning_rate must be >= 0");
  if (!(beta >= 0.0)) throw UsageError("beta must be >= 0");
  if (!(value_coef >= 0.0)) throw UsageError("value_coef must be >= 0");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"epochs", epochs},
          {"batch_size", batch_size},
          {"ppo_epochs", ppo_epochs},
          {"minibatch_size", minibatch_size},
          {"learning_rate", learning_rate},
          {"clip_epsilon", clip_epsilon},
          {"gae_lambda", gae_lambda},
          {"beta", beta},
          {"value_coef", value_coef},
          {"normalize_advantages", normalize_advantages},
          {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  return from_json(j, TrainConfig{});
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j,
                                   const TrainConfig& defaults) {
  TrainConfig c = defaults;
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.ppo_epochs = j.value("ppo_epochs", c.ppo_epochs);
  c.minibatch_size = j.value("minibatch_size", c.minibatch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.clip_epsilon = j.value("clip_epsilon", c.clip_epsilon);
  c.gae_lambda = j.value("gae_lambda", c.gae_lambda);
  c.beta = j.value("beta", c.beta);
  c.value_coef = j.value("value_coef", c.value_coef);
  c.normalize_advantages = j.value("normalize_advantages", c.normalize_advantages);
  c.seed = j.value("seed", c.seed);
  return c;
}

TokenSequence Trajectory::state_at(std::size_t t) const {
  TokenSequence s{sequence.prompt,
                  {sequence.completion.begin(),
                   sequence.completion.begin() + static_cast<std::ptrdiff_t>(t)},
                  false};
  return s;
}

std::vector<Trajectory> rollout(const TabularPolicy& policy,
                                const TabularPolicy& reference,
                                const MdpSpec& mdp,
                                const std::vector<std::size_t>& prompt_indices,
                                std::uint64_t seed) {
  if (prompt_indices.empty()) throw UsageError("rollout needs prompts");
  std::vector<Trajectory> out;
  out.reserve(prompt_indices.size());
  for (std::size_t i = 0; i < prompt_indices.size(); ++i) {
    out.push_back(sample_trajectory(policy, reference, mdp, prompt_indices[i],
                                    derive_seed(seed, i)));
  }
  return out;
}

PpoBatch prepare_batch(const TabularPolicy& policy,
                       const std::vector<Trajectory>& trajectories,
                       const std::vector<std::vector<double>>& shaped,
                       const TrainConfig& config) {
  if (shaped.size() != trajectories.size()) {
    throw UsageError("one shaped reward vector per trajectory is required");
  }
  PpoBatch batch;
  for (std::size_t i = 0; i < trajectories.size(); ++i) {
    const Trajectory& tr = trajectories[i];
    const std::size_t n = tr.logp.size();
    const auto rewards =
        assemble_dense_rewards(shaped[i], tr.logp, tr.ref_logp, config.beta);
    std::vector<double> values(n + 1, 0.0);  // terminal value is zero
    for (std::size_t t = 0; t < n; ++t) values[t] = policy.value(tr.state_at(t));

    std::vector<PpoStep> steps(n);
    double gae = 0.0;
    for (std::size_t t = n; t-- > 0;) {
      const double delta = rewards[t] + values[t + 1] - values[t];
      gae = delta + config.gae_lambda * gae;
      steps[t].state = state_key(tr.state_at(t));
      steps[t].action = tr.sequence.completion[t];
      steps[t].old_logp = tr.logp[t];
      steps[t].advantage = gae;
      steps[t].ret = gae + values[t];
    }
    batch.trajectories.push_back(std::move(steps));
    batch.mean_reward += std::accumulate(shaped[i].begin(), shaped[i].end(), 0.0);
    for (std::size_t t = 0; t < n; ++t) batch.mean_kl += tr.logp[t] - tr.ref_logp[t];
  }
  if (!trajectories.empty()) {
    batch.mean_reward /= static_cast<double>(trajectories.size());
    batch.mean_kl /= static_cast<double>(trajectories.size());
  }
  if (config.normalize_advantages) {
    double sum = 0.0, sq = 0.0;
    std::size_t count = 0;
    for (const auto& tr : batch.trajectories) {
      for (const auto& s : tr) {
        sum += s.advantage;
        sq += s.advantage * s.advantage;
        ++count;
      }
    }
    if (count > 1) {
      const double mean = sum / count;
      const double sd = std::sqrt(std::max(0.0, sq / count - mean * mean));
      for (auto& tr : batch.trajectories) {
        for (auto& s : tr) s.advantage = (s.advantage - mean) / (sd + 1e-8);
      }
    }
  }
  return batch;
}

namespace {

std::vector<std::size_t> all_members(const PpoBatch& batch,
                                     const std::vector<std::size_t>& members) {
  if (!members.empty()) return members;
  std::vector<std::size_t> all(batch.trajectories.size());
  std::iota(all.begin(), all.end(), 0);
  return all;
}

std::size_t count_steps(const PpoBatch& batch,
                        const std::vector<std::size_t>& members) {
  std::size_t n = 0;
  for (std::size_t i : members) n += batch.trajectories[i].size();
  return n;
}

}  // namespace

double surrogate_loss(const TabularPolicy& policy, const PpoBatch& batch,
                      const TrainConfig& config,
                      const std::vector<std::size_t>& members) {
  const auto idx = all_members(batch, members);
  const std::size_t n = count_steps(batch, idx);
  if (n == 0) return 0.0;
  const double eps = config.clip_epsilon;
  double loss = 0.0;
  for (std::size_t i : idx) {
    for (const auto& st : batch.trajectories[i]) {
      const TokenSequence s = sequence_from_key(st.state);
      const double ratio = std::exp(policy.log_probs(s)[st.action] - st.old_logp);
      const double clipped = std::clamp(ratio, 1.0 - eps, 1.0 + eps);
      loss -= std::min(ratio * st.advantage, clipped * st.advantage);
      const double err = policy.value(s) - st.ret;
      loss += config.value_coef * err * err;
    }
  }
  return loss / static_cast<double>(n);
}

PolicyGradient surrogate_gradient(const TabularPolicy& policy,
                                  const PpoBatch& batch,
                                  const TrainConfig& config,
                                  const std::vector<std::size_t>& members,
                                  double* clip_fraction) {
  const auto idx = all_members(batch, members);
  const std::size_t n = count_steps(batch, idx);
  PolicyGradient grad;
  if (n == 0) return grad;
  const double eps = config.clip_epsilon;
  const double scale = 1.0 / static_cast<double>(n);
  std::size_t clipped_steps = 0;
  for (std::size_t i : idx) {
    for (const auto& st : batch.trajectories[i]) {
      const TokenSequence s = sequence_from_key(st.state);
      const auto logp = policy.log_probs(s);
      const double ratio = std::exp(logp[st.action] - st.old_logp);
      if (std::abs(ratio - 1.0) > eps) ++clipped_steps;
      const double clipped = std::clamp(ratio, 1.0 - eps, 1.0 + eps);

      auto& g = grad.logits[st.state];
      if (g.empty()) g.assign(policy.vocab_size(), 0.0);
      // The unclipped branch carries the gradient whenever it is the minimum.
      if (ratio * st.advantage <= clipped * st.advantage) {
        const double coeff = -st.advantage * ratio * scale;
        for (int b = 0; b < policy.vocab_size(); ++b) {
          const double indicator = b == st.action ? 1.0 : 0.0;
          g[b] += coeff * (indicator - std::exp(logp[b]));
        }
      }
      grad.values[st.state] +=
          2.0 * config.value_coef * (policy.value(s) - st.ret) * scale;
    }
  }
  if (clip_fraction) *clip_fraction = static_cast<double>(clipped_steps) * scale;
  return grad;
}

void adam_step(TabularPolicy& policy, AdamState& state,
               const PolicyGradient& grad, double learning_rate) {
  ++state.steps;
  const double t = static_cast<double>(state.steps);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  bool finite = true;
  auto update = [&](double& param, double& m, double& v, double g) {
    m = state.beta1 * m + (1.0 - state.beta1) * g;
    v = state.beta2 * v + (1.0 - state.beta2) * g * g;
    param -= learning_rate * (m / c1) / (std::sqrt(v / c2) + state.epsilon);
    finite = finite && std::isfinite(param) && std::isfinite(v);
  };
  for (const auto& [key, g] : grad.logits) {
    auto& m = state.first_moment.logits[key];
    auto& v = state.second_moment.logits[key];
    if (m.empty()) m.assign(g.size(), 0.0);
    if (v.empty()) v.assign(g.size(), 0.0);
    auto& logits = policy.logits_at(key);
    for (std::size_t b = 0; b < g.size(); ++b) update(logits[b], m[b], v[b], g[b]);
  }
  for (const auto& [key, g] : grad.values) {
    update(policy.value_at(key), state.first_moment.values[key],
           state.second_moment.values[key], g);
  }
  // Squared gradients can overflow even when the gradient itself is finite.
  if (!finite) throw NumericError("non-finite parameter after optimizer step");
}

PpoStats ppo_update(TabularPolicy& policy, AdamState& optimizer,
                    const std::vector<Trajectory>& trajectories,
                    const std::vector<std::vector<double>>& shaped,
                    const TrainConfig& config, std::uint64_t seed) {
  config.validate();
  const PpoBatch batch = prepare_batch(policy, trajectories, shaped, config);
  PpoStats stats;
  stats.mean_reward = batch.mean_reward;
  stats.kl = batch.mean_kl;

  const std::size_t count = batch.trajectories.size();
  const std::size_t mb = config.minibatch_size > 0
                             ? static_cast<std::size_t>(config.minibatch_size)
                             : std::max<std::size_t>(count, 1);
  std::size_t minibatches = 0;
  std::size_t batch_index = 0;
  double value_loss = 0.0, clip = 0.0, loss = 0.0;
  for (int epoch = 0; epoch < config.ppo_epochs; ++epoch) {
    std::vector<std::size_t> order(count);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);
    for (std::size_t start = 0; start < count; start += mb) {
      std::vector<std::size_t> members(
          order.begin() + static_cast<std::ptrdiff_t>(start),
          order.begin() + static_cast<std::ptrdiff_t>(std::min(count, start + mb)));
      std::sort(members.begin(), members.end());

      double vl = 0.0;
      std::size_t steps = 0;
      for (std::size_t i : members) {
        for (const auto& st : batch.trajectories[i]) {
          const double err = policy.value(sequence_from_key(st.state)) - st.ret;
          vl += config.value_coef * err * err;
          ++steps;
        }
      }
      value_loss += steps ? vl / steps : 0.0;
      loss += surrogate_loss(policy, batch, config, members);

      double cf = 0.0;
      const PolicyGradient grad =
          surrogate_gradient(policy, batch, config, members, &cf);
      check_finite(grad, batch_index);
      clip += cf;
      try {
        adam_step(policy, optimizer, grad, config.learning_rate);
      } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + " in minibatch " +
                           std::to_string(batch_index));
      }
      ++minibatches;
      ++batch_index;
    }
  }
  if (minibatches) {
    stats.value_loss = value_loss / minibatches;
    stats.clip_fraction = clip / minibatches;
    stats.loss = loss / minibatches;
  }
  return stats;
}

EvalResult evaluate_policy(const TabularPolicy& policy, const MdpSpec& mdp,
                           const std::vector<std::size_t>& prompt_indices,
                           const Scorer& reward_model, std::size_t n_samples,
                           std::uint64_t seed) {
  if (n_samples < 1) throw UsageError("n_samples must be >= 1");
  if (prompt_indices.empty()) throw UsageError("evaluation needs prompts");
  std::vector<double> scores(n_samples);
  for (std::size_t i = 0; i < n_samples; ++i) {
    const auto traj =
        sample_trajectory(policy, policy, mdp,
                          prompt_indices[i % prompt_indices.size()],
                          derive_seed(seed, i));
    scores[i] = reward_model.score(traj.sequence);
  }
  EvalResult r;
  r.samples = n_samples;
  r.mean = std::accumulate(scores.begin(), scores.end(), 0.0) /
           static_cast<double>(n_samples);
  if (n_samples > 1) {
    double ss = 0.0;
    for (double s : scores) ss += (s - r.mean) * (s - r.mean);
    r.standard_error =
        std::sqrt(ss / static_cast<double>(n_samples - 1)) /
        std::sqrt(static_cast<double>(n_samples));
  }
  return r;
}

namespace {

struct ExactEvaluation {
  std::shared_ptr<const StateSpace> space;
  std::vector<double> value;
  std::vector<std::vector<double>> q;  // reward - beta log ratio + V(s')
  std::vector<std::vector<double>> pi;
};

ExactEvaluation evaluate_exact(const TabularPolicy& policy, const MdpSpec& mdp,
                               const TokenReward& reward,
                               const PolicyFn& ref_policy) {
  ExactEvaluation ev;
  ev.space = std::make_shared<const StateSpace>(mdp);
  const std::size_t n = ev.space->size();
  ev.value.assign(n, 0.0);
  ev.q.assign(n, {});
  ev.pi.assign(n, {});
  for (std::size_t i = n; i-- > 0;) {
    const TokenSequence& s = ev.space->state(i);
    if (ev.space->terminal(i)) {
      ev.value[i] = reward.at_terminal(s);
      continue;
    }
    ev.pi[i] = policy.probs(s);
    const auto ref = ref_policy(s);
    const auto& kids = ev.space->children(i);
    ev.q[i].resize(mdp.vocab_size);
    double v = 0.0;
    for (TokenId a = 0; a < mdp.vocab_size; ++a) {
      if (!(ref[a] > 0.0)) {
        throw DomainError("reference policy has zero mass on action " +
                          std::to_string(a));
      }
      ev.q[i][a] = reward.transition(s, a) -
                   mdp.beta * std::log(ev.pi[i][a] / ref[a]) +
                   ev.value[kids[a]];
      v += ev.pi[i][a] * ev.q[i][a];
    }
    ev.value[i] = v;
  }
  return ev;
}

}  // namespace

double exact_objective(const TabularPolicy& policy, const MdpSpec& mdp,
                       const TokenReward& reward, const PolicyFn& ref_policy) {
  const auto ev = evaluate_exact(policy, mdp, reward, ref_policy);
  double j = 0.0;
  for (std::size_t p = 0; p < ev.space->num_roots(); ++p) {
    j += ev.value[ev.space->root(p)];
  }
  return j / static_cast<double>(ev.space->num_roots());
}

PolicyGradient exact_policy_gradient(const TabularPolicy& policy,
                                     const MdpSpec& mdp,
                                     const TokenReward& reward,
                                     const PolicyFn& ref_policy) {
  const auto ev = evaluate_exact(policy, mdp, reward, ref_policy);
  const std::size_t n = ev.space->size();
  std::vector<double> reach(n, 0.0);
  for (std::size_t p = 0; p < ev.space->num_roots(); ++p) {
    reach[ev.space->root(p)] = 1.0 / static_cast<double>(ev.space->num_roots());
  }
  PolicyGradient grad;
  for (std::size_t i = 0; i < n; ++i) {  // parents precede children
    if (ev.space->terminal(i)) continue;
    const auto& kids = ev.space->children(i);
    auto& g = grad.logits[state_key(ev.space->state(i))];
    g.resize(mdp.vocab_size);
    for (TokenId b = 0; b < mdp.vocab_size; ++b) {
      reach[kids[b]] += reach[i] * ev.pi[i][b];
      g[b] = reach[i] * ev.pi[i][b] * (ev.q[i][b] - ev.value[i]);
    }
  }
  return grad;
}

nlohmann::json PolicyCheckpoint::to_json() const {
  return {{"format", "xrs-policy-checkpoint"},
          {"version", 1},
          {"params", params.to_json()},
          {"optimizer", optimizer.to_json()},
          {"trial_index", trial_index},
          {"validation_reward", validation_reward},
          {"updates", updates}};
}

PolicyCheckpoint PolicyCheckpoint::from_json(const nlohmann::json& j) {
  PolicyCheckpoint c;
  c.params = TabularPolicy::from_json(j.at("params"));
  c.optimizer = AdamState::from_json(j.at("optimizer"));
  c.trial_index = j.at("trial_index").get<int>();
  c.validation_reward = j.at("validation_reward").get<double>();
  c.updates = j.at("updates").get<std::uint64_t>();
  return c;
}

void PolicyCheckpoint::save(const std::filesystem::path& path) const {
  write_file_atomic(path, to_json().dump() + "\n");
}

PolicyCheckpoint PolicyCheckpoint::load(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const UsageError& e) {
    throw PersistenceError(std::string("missing checkpoint: ") + e.what());
  }
  try {
    return from_json(nlohmann::json::parse(text));
  } catch (const nlohmann::json::exception& e) {
    throw PersistenceError("cannot load checkpoint " + path.string() + ": " +
                           e.what());
  }
}

void train_policy(PolicyCheckpoint& checkpoint, const TabularPolicy& reference,
                  const MdpSpec& mdp,
                  const std::vector<std::size_t>& prompt_indices,
                  const ShapingFn& shaping, const TrainConfig& config,
                  const std::function<void(const StepMetrics&)>& on_step,
                  std::size_t threads) {
  config.validate();
  if (prompt_indices.empty()) throw UsageError("training needs prompts");
  const std::size_t bs = static_cast<std::size_t>(config.batch_size);
  for (int it = 0; it < config.epochs; ++it) {
    const std::uint64_t step_index = checkpoint.updates;
    std::vector<std::size_t> batch(bs);
    for (std::size_t j = 0; j < bs; ++j) {
      batch[j] = prompt_indices[(step_index * bs + j) % prompt_indices.size()];
    }
    const auto trajectories =
        rollout(checkpoint.params, reference, mdp, batch,
                derive_seed(config.seed, 2 * step_index));
    std::vector<ShapedOutcome> outcomes(trajectories.size());
    parallel_for(trajectories.size(), threads,
                 [&](std::size_t i) { outcomes[i] = shaping(trajectories[i]); });

    StepMetrics metrics;
    metrics.step = step_index;
    std::vector<std::vector<double>> shaped;
    for (std::size_t i = 0; i < outcomes.size(); ++i) {
      if (outcomes[i].per_token.size() != trajectories[i].logp.size()) {
        throw UsageError("shaped reward length does not match the trajectory");
      }
      metrics.mean_reward += outcomes[i].scalar;
      shaped.push_back(outcomes[i].per_token);
      metrics.sequences.push_back(trajectories[i].sequence);
    }
    metrics.mean_reward /= static_cast<double>(trajectories.size());
    metrics.ppo = ppo_update(checkpoint.params, checkpoint.optimizer,
                             trajectories, shaped, config,
                             derive_seed(config.seed, 2 * step_index + 1));
    metrics.outcomes = std::move(outcomes);
    ++checkpoint.updates;
    if (on_step) on_step(metrics);
  }
}

nlohmann::json to_json(const StepMetrics& m) {
  return {{"step", m.step},
          {"mean_reward", m.mean_reward},
          {"value_loss", m.ppo.value_loss},
          {"kl", m.ppo.kl},
          {"clip_fraction", m.ppo.clip_fraction},
          {"loss", m.ppo.loss}};
}

}  // namespace xrs
