#include "xrs/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <limits>
#include <set>

#include "xrs/errors.hpp"
#include "xrs/io.hpp"
#include "xrs/parallel.hpp"
#include "xrs/rng.hpp"

#ifndef XRS_VERSION
#define XRS_VERSION "0.0.0"
#endif

namespace xrs {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Independent random streams derived from the experiment seed.
enum Stream : std::uint64_t {
  kSplitStream = 1,
  kBaselineStream = 2,
  kBoStream = 3,
  kTrialStream = 4,
  kFinalStream = 5,
  kGpStream = 6,
};

void check_keys(const json& obj, const std::set<std::string>& allowed,
                const std::string& where) {
  if (!obj.is_object()) throw UsageError(where + " must be an object");
  for (const auto& [key, value] : obj.items()) {
    if (!allowed.count(key)) {
      throw UsageError("unknown key '" + key + "' in " + where);
    }
  }
}

fs::path resolve_input(const fs::path& base, const std::string& p) {
  fs::path path(p);
  if (path.is_relative()) path = base / path;
  if (!fs::exists(path)) throw UsageError("input file not found: " + path.string());
  return path;
}

std::vector<std::vector<TokenId>> read_prompt_file(const fs::path& path) {
  std::vector<std::vector<TokenId>> prompts;
  const std::string text = read_file(path);
  std::size_t line_no = 0;
  for (auto line : split(text, '\n')) {
    ++line_no;
    line = trim(line);
    if (line.empty() || line.front() == '#') continue;
    prompts.push_back(parse_token_ids(line, line_no));
  }
  return prompts;
}

std::string utc_now() {
  const std::time_t t =
      std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string trial_id(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "trial-%04d", index);
  return buf;
}

std::vector<std::size_t> validation_subset(const ExperimentConfig& config,
                                           const DatasetSplit& split,
                                           std::uint64_t seed) {
  const std::size_t want = config.validation_per_eval > 0
                               ? static_cast<std::size_t>(config.validation_per_eval)
                               : split.validation.size();
  return subsample(split.validation, std::min(want, split.validation.size()), seed);
}

json budgets_to_json(const std::vector<SourceBudget>& budgets) {
  auto out = json::array();
  for (const auto& b : budgets) {
    out.push_back({{"method", to_string(b.method)},
                   {"declared", b.declared},
                   {"used", b.used},
                   {"sequences", b.sequences}});
  }
  return out;
}

void accumulate_budgets(std::vector<SourceBudget>& budgets,
                        const std::vector<ShapedOutcome>& outcomes) {
  for (const auto& o : outcomes) {
    for (std::size_t k = 0; k < o.attributions.size(); ++k) {
      budgets[k].declared += o.attributions[k].budget_declared;
      budgets[k].used += o.attributions[k].budget_used;
      budgets[k].sequences += 1;
    }
  }
}

json audit_line(const StepMetrics& m, std::size_t i) {
  const auto& o = m.outcomes[i];
  auto budgets = json::array();
  for (const auto& a : o.attributions) {
    budgets.push_back({{"method", to_string(a.method)},
                       {"declared", a.budget_declared},
                       {"used", a.budget_used}});
  }
  return {{"step", m.step},
          {"index", i},
          {"sequence", to_json(m.sequences[i])},
          {"scalar", o.scalar},
          {"per_token", o.per_token},
          {"source_trace", o.source_trace},
          {"budgets", budgets}};
}

PolicyCheckpoint fresh_checkpoint(const TabularPolicy& reference) {
  PolicyCheckpoint c;
  c.params = reference;
  return c;
}

struct TrainingRun {
  PolicyCheckpoint checkpoint;
  std::vector<SourceBudget> budgets;
  std::uint64_t draws = 0;
};

// Trains `run.checkpoint` with weights `w`; streams step metrics and shaping
// audits when `metrics` is nonempty.
void train_with_weights(const ExperimentConfig& config, const Scorer& scorer,
                        const TabularPolicy& reference, const ShapeWeights& w,
                        const std::vector<std::size_t>& prompts,
                        const TrainConfig& tc, const fs::path& metrics,
                        const fs::path& audit, const json& tag,
                        std::size_t threads, TrainingRun& run) {
  run.budgets.assign(config.sources.size(), SourceBudget{});
  for (std::size_t k = 0; k < config.sources.size(); ++k) {
    run.budgets[k].method = config.sources[k];
  }
  const std::uint64_t shaping_seed = derive_seed(tc.seed, 0x5eed);
  auto shaping = [&](const Trajectory& tr) {
    return shape_trajectory(config, scorer, w, tr.sequence,
                            derive_seed(shaping_seed, sequence_fingerprint(tr.sequence)));
  };
  auto on_step = [&](const StepMetrics& m) {
    accumulate_budgets(run.budgets, m.outcomes);
    run.draws += m.sequences.size();
    if (!metrics.empty()) {
      json line = to_json(m);
      for (const auto& [k, v] : tag.items()) line[k] = v;
      append_json_line(metrics, line);
    }
    if (!audit.empty()) {
      for (std::size_t i = 0; i < m.outcomes.size(); ++i) {
        append_json_line(audit, audit_line(m, i));
      }
    }
  };
  train_policy(run.checkpoint, reference, config.mdp, prompts, shaping, tc,
               on_step, threads);
}

TrainConfig inner_config(const ExperimentConfig& config, std::uint64_t seed,
                         int epochs) {
  TrainConfig tc = config.train;
  tc.seed = seed;
  tc.beta = config.mdp.beta;
  tc.epochs = epochs;
  return tc;
}

}  // namespace

std::size_t configured_threads() {
  const char* env = std::getenv("XRS_THREADS");
  if (!env || !*env) return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (*end != '\0' || v < 1) {
    throw UsageError(std::string("XRS_THREADS must be a positive integer, got '") +
                     env + "'");
  }
  return static_cast<std::size_t>(v);
}

fs::path resolve_run_dir(const fs::path& run_dir) {
  if (run_dir.is_absolute()) return run_dir;
  const char* root = std::getenv("XRS_RUN_ROOT");
  if (root && *root) return fs::path(root) / run_dir;
  return run_dir;
}

ExperimentConfig ExperimentConfig::parse(const std::string& text,
                                         const fs::path& base_dir) {
  ExperimentConfig c;
  c.base_dir = base_dir;
  c.source_text = text;
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw UsageError(std::string("config is not valid JSON: ") + e.what());
  }
  try {
    check_keys(j,
               {"mdp", "reward_model", "attribution", "bo", "train", "subsample",
                "final_epochs", "seed", "run_dir"},
               "config");
    if (!j.contains("mdp")) throw UsageError("config needs an 'mdp' section");
    if (!j.contains("reward_model")) {
      throw UsageError("config needs a 'reward_model' section");
    }

    const json& m = j.at("mdp");
    check_keys(m,
               {"vocab_size", "horizon", "eos_token", "beta", "state_cap", "prompts",
                "prompt_file", "generate_prompts"},
               "mdp");
    c.mdp.vocab_size = m.at("vocab_size").get<int>();
    c.mdp.horizon = m.at("horizon").get<int>();
    c.mdp.eos_token = m.value("eos_token", 0);
    c.mdp.beta = m.value("beta", c.mdp.beta);
    c.mdp.state_cap = m.value("state_cap", c.mdp.state_cap);
    const int prompt_sources = m.contains("prompts") + m.contains("prompt_file") +
                               m.contains("generate_prompts");
    if (prompt_sources != 1) {
      throw UsageError(
          "mdp needs exactly one of 'prompts', 'prompt_file', 'generate_prompts'");
    }
    if (m.contains("prompts")) {
      c.mdp.prompts = m.at("prompts").get<std::vector<std::vector<TokenId>>>();
    } else if (m.contains("prompt_file")) {
      c.mdp.prompts = read_prompt_file(
          resolve_input(base_dir, m.at("prompt_file").get<std::string>()));
    } else {
      const json& g = m.at("generate_prompts");
      check_keys(g, {"count", "length", "seed"}, "mdp.generate_prompts");
      const int count = g.at("count").get<int>();
      const int length = g.value("length", 1);
      if (count < 1 || length < 0) {
        throw UsageError("generate_prompts needs count >= 1 and length >= 0");
      }
      if (c.mdp.vocab_size < 2) {
        throw UsageError("generate_prompts needs vocab_size >= 2");
      }
      Rng rng(g.value("seed", std::uint64_t{0}));
      for (int i = 0; i < count; ++i) {
        std::vector<TokenId> p(length);
        for (auto& t : p) {
          // Any non-EOS token.
          auto v = static_cast<TokenId>(rng.index(c.mdp.vocab_size - 1));
          t = v >= c.mdp.eos_token ? v + 1 : v;
        }
        c.mdp.prompts.push_back(std::move(p));
      }
    }

    c.reward_model = j.at("reward_model");
    check_keys(c.reward_model,
               {"kind", "patterns", "weights", "model_file", "preferences",
                "learning_rate", "iterations", "l2"},
               "reward_model");

    const json a = j.value("attribution", json::object());
    check_keys(a,
               {"sources", "exact_cap", "kernel_shap_budget", "lime_budget",
                "lime_width", "regularization", "external_scores"},
               "attribution");
    for (const auto& s : a.value("sources", json::array({"kernel-shap"}))) {
      c.sources.push_back(attribution_method_from_string(s.get<std::string>()));
    }
    c.attribution.mask_token = c.mdp.mask_token();
    c.attribution.exact_cap = a.value("exact_cap", c.attribution.exact_cap);
    c.attribution.kernel_shap_budget =
        a.value("kernel_shap_budget", c.attribution.kernel_shap_budget);
    c.attribution.lime_budget = a.value("lime_budget", c.attribution.lime_budget);
    if (a.contains("lime_width") && !a.at("lime_width").is_null()) {
      c.attribution.lime_width = a.at("lime_width").get<double>();
    }
    c.attribution.regularization =
        a.value("regularization", c.attribution.regularization);
    if (a.contains("external_scores")) {
      c.external_scores =
          resolve_input(base_dir, a.at("external_scores").get<std::string>());
    }

    const json b = j.value("bo", json::object());
    check_keys(b,
               {"trials", "sobol_init", "kernel", "gp_restarts", "candidate_count",
                "acquisition_restarts"},
               "bo");
    c.bo.trials = b.value("trials", c.bo.trials);
    c.bo.sobol_init = b.value("sobol_init", c.bo.sobol_init);
    if (b.contains("kernel")) c.bo.kernel = kernel_from_string(b.at("kernel"));
    c.bo.gp_restarts = b.value("gp_restarts", c.bo.gp_restarts);
    c.bo.acquisition.candidate_count =
        b.value("candidate_count", c.bo.acquisition.candidate_count);
    c.bo.acquisition.restarts =
        b.value("acquisition_restarts", c.bo.acquisition.restarts);

    const json t = j.value("train", json::object());
    check_keys(t,
               {"epochs", "batch_size", "ppo_epochs", "minibatch_size",
                "learning_rate", "clip_epsilon", "gae_lambda", "value_coef",
                "normalize_advantages"},
               "train");
    c.train = TrainConfig::from_json(t);

    const json s = j.value("subsample", json::object());
    check_keys(s, {"train_per_trial", "validation_per_eval", "validation_samples"},
               "subsample");
    c.train_per_trial = s.value("train_per_trial", c.train_per_trial);
    c.validation_per_eval = s.value("validation_per_eval", c.validation_per_eval);
    c.validation_samples = s.value("validation_samples", c.validation_samples);

    c.final_epochs = j.value("final_epochs", c.final_epochs);
    c.seed = j.value("seed", c.seed);
    if (j.contains("run_dir")) c.run_dir = j.at("run_dir").get<std::string>();
  } catch (const json::exception& e) {
    throw UsageError(std::string("malformed config: ") + e.what());
  }
  c.train.beta = c.mdp.beta;
  c.train.seed = c.seed;
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  if (!fs::exists(path)) throw UsageError("config not found: " + path.string());
  const fs::path base = path.has_parent_path() ? path.parent_path() : fs::path(".");
  return parse(read_file(path), base);
}

int ExperimentConfig::effective_train_per_trial() const {
  return train_per_trial > 0 ? train_per_trial : train.epochs * train.batch_size;
}

void ExperimentConfig::validate(ConfigUse use) const {
  mdp.validate();
  for (std::size_t i = 0; i < mdp.prompts.size(); ++i) {
    for (TokenId t : mdp.prompts[i]) {
      if (t < 0 || t >= mdp.vocab_size) {
        throw UsageError("prompt " + std::to_string(i) + " has token " +
                         std::to_string(t) + " outside the vocabulary");
      }
    }
  }
  if (sources.empty()) throw UsageError("attribution sources must be nonempty");
  std::set<AttributionMethod> seen(sources.begin(), sources.end());
  if (seen.size() != sources.size()) {
    throw UsageError("attribution sources must be distinct");
  }
  const std::string kind = reward_model.value("kind", std::string());
  if (kind.empty() && !reward_model.contains("model_file")) {
    throw UsageError("reward_model needs a 'kind' or a 'model_file'");
  }
  if (!kind.empty()) reward_model_kind_from_string(kind);
  for (AttributionMethod m : sources) {
    if (m == AttributionMethod::kExactShapley && mdp.horizon > attribution.exact_cap) {
      throw UsageError("exact-shapley needs horizon <= exact_cap (" +
                       std::to_string(attribution.exact_cap) +
                       "); use kernel-shap for longer completions");
    }
    if (m == AttributionMethod::kSaliency && !kind.empty() &&
        reward_model_kind_from_string(kind) == RewardModelKind::kSyntheticPattern) {
      throw UsageError("saliency needs a differentiable reward model");
    }
    if (m == AttributionMethod::kExternal) {
      if (use == ConfigUse::kTraining) {
        throw UsageError(
            "external scores attach to fixed sequence files; they cannot shape "
            "fresh rollouts");
      }
      if (!external_scores) {
        throw UsageError("source 'external' needs attribution.external_scores");
      }
    }
  }
  if (attribution.regularization < 0.0) {
    throw UsageError("attribution regularization must be >= 0");
  }
  if (attribution.lime_width && !(*attribution.lime_width > 0.0)) {
    throw UsageError("lime_width must be positive");
  }
  if (use == ConfigUse::kAttribution) return;

  train.validate();
  if (mdp.prompts.size() < 10) {
    throw UsageError("the 90/10 split needs at least 10 prompts, got " +
                     std::to_string(mdp.prompts.size()));
  }
  if (train_per_trial < 0 || validation_per_eval < 0 || final_epochs < 0) {
    throw UsageError("subsample sizes and final_epochs must be >= 0");
  }
  if (validation_samples < 1) throw UsageError("validation_samples must be >= 1");
  if (use == ConfigUse::kTraining) return;

  if (bo.sobol_init < 1) throw UsageError("bo.sobol_init must be >= 1");
  if (bo.trials < bo.sobol_init) throw UsageError("bo.trials must be >= bo.sobol_init");
  if (bo.gp_restarts < 1) throw UsageError("bo.gp_restarts must be >= 1");
  bo.acquisition.validate();
  // Total prompt draws across trials and the final run stay within two
  // passes over the training split.
  const std::uint64_t train_size = mdp.prompts.size() * 9 / 10;
  const std::uint64_t bs = static_cast<std::uint64_t>(train.batch_size);
  const std::uint64_t final_draws =
      final_epochs > 0 ? static_cast<std::uint64_t>(final_epochs) * bs
                       : (train_size + bs - 1) / bs * bs;
  const std::uint64_t draws =
      static_cast<std::uint64_t>(bo.trials) * static_cast<std::uint64_t>(train.epochs) * bs +
      final_draws;
  if (draws > 2 * train_size) {
    throw UsageError("the run would draw " + std::to_string(draws) +
                     " training prompts, more than two passes over the " +
                     std::to_string(train_size) + "-prompt training split");
  }
  if (StateSpace::count_states(mdp) > static_cast<double>(mdp.state_cap) * 1e3) {
    // Tabular storage is lazy, so only absurd sizes are rejected.
    throw CapacityError("state space is too large for a tabular policy");
  }
}

std::string ExperimentConfig::hash() const { return sha256_hex(source_text); }

json ExperimentConfig::to_json() const {
  json sources_json = json::array();
  for (auto m : sources) sources_json.push_back(to_string(m));
  json attribution_json = {{"sources", sources_json},
                           {"exact_cap", attribution.exact_cap},
                           {"kernel_shap_budget", attribution.kernel_shap_budget},
                           {"lime_budget", attribution.lime_budget},
                           {"regularization", attribution.regularization}};
  attribution_json["lime_width"] =
      attribution.lime_width ? json(*attribution.lime_width) : json(nullptr);
  json train_json = train.to_json();
  train_json.erase("seed");
  train_json.erase("beta");
  return {{"mdp",
           {{"vocab_size", mdp.vocab_size},
            {"horizon", mdp.horizon},
            {"eos_token", mdp.eos_token},
            {"beta", mdp.beta},
            {"num_prompts", mdp.prompts.size()}}},
          {"reward_model", reward_model},
          {"attribution", attribution_json},
          {"bo",
           {{"trials", bo.trials},
            {"sobol_init", bo.sobol_init},
            {"kernel", to_string(bo.kernel)},
            {"gp_restarts", bo.gp_restarts},
            {"candidate_count", bo.acquisition.candidate_count},
            {"acquisition_restarts", bo.acquisition.restarts},
            {"acquisition", "log-ei, incumbent = max posterior mean at observed inputs"}}},
          {"train", train_json},
          {"subsample",
           {{"train_per_trial", effective_train_per_trial()},
            {"validation_per_eval", validation_per_eval},
            {"validation_samples", validation_samples}}},
          {"final_epochs", final_epochs},
          {"seed", seed}};
}

RewardModel build_reward_model(const ExperimentConfig& config) {
  const json& spec = config.reward_model;
  const int vocab = config.mdp.vocab_size;
  try {
    if (spec.contains("model_file")) {
      RewardModel model = RewardModel::load(
          resolve_input(config.base_dir, spec.at("model_file").get<std::string>()));
      if (model.vocab_size() != vocab) {
        throw UsageError("reward model vocabulary does not match the MDP");
      }
      return model;
    }
    switch (reward_model_kind_from_string(spec.at("kind").get<std::string>())) {
      case RewardModelKind::kSyntheticPattern: {
        std::vector<Pattern> patterns;
        for (const auto& p : spec.at("patterns")) {
          patterns.push_back({p.at("tokens").get<std::vector<TokenId>>(),
                              p.at("value").get<double>()});
        }
        return RewardModel::synthetic_pattern(vocab, std::move(patterns));
      }
      case RewardModelKind::kLinearBag:
        return RewardModel::linear_bag(vocab,
                                       spec.at("weights").get<std::vector<double>>());
      case RewardModelKind::kBradleyTerryLinear: {
        if (spec.contains("weights")) {
          return RewardModel::bradley_terry(
              vocab, spec.at("weights").get<std::vector<double>>());
        }
        BradleyTerryConfig bt;
        bt.vocab_size = vocab;
        bt.horizon = config.mdp.horizon;
        bt.learning_rate = spec.value("learning_rate", bt.learning_rate);
        bt.iterations = spec.value("iterations", bt.iterations);
        bt.l2 = spec.value("l2", bt.l2);
        const auto pairs = read_preference_pairs(resolve_input(
            config.base_dir, spec.at("preferences").get<std::string>()));
        return train_bradley_terry(pairs, bt).model;
      }
    }
  } catch (const json::exception& e) {
    throw UsageError(std::string("malformed reward_model: ") + e.what());
  }
  throw UsageError("unsupported reward model");
}

DatasetSplit split_dataset(std::size_t num_prompts, std::uint64_t seed) {
  if (num_prompts < 10) {
    throw UsageError("split_dataset needs at least 10 prompts, got " +
                     std::to_string(num_prompts));
  }
  std::vector<std::size_t> order(num_prompts);
  for (std::size_t i = 0; i < num_prompts; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  const std::size_t train_count = num_prompts * 9 / 10;
  DatasetSplit split;
  split.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(train_count));
  split.validation.assign(order.begin() + static_cast<std::ptrdiff_t>(train_count),
                          order.end());
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.validation.begin(), split.validation.end());
  return split;
}

std::vector<std::size_t> subsample(const std::vector<std::size_t>& pool,
                                   std::size_t count, std::uint64_t seed) {
  if (count > pool.size()) {
    throw UsageError("cannot draw " + std::to_string(count) + " of " +
                     std::to_string(pool.size()) + " items without replacement");
  }
  std::vector<std::size_t> items = pool;
  Rng rng(seed);
  // Partial Fisher-Yates: the first `count` slots are the draw.
  for (std::size_t i = 0; i < count; ++i) {
    std::swap(items[i], items[i + rng.index(items.size() - i)]);
  }
  items.resize(count);
  return items;
}

json TrialRecord::to_json(bool with_timing) const {
  json j = {{"index", index},
            {"weights", weights},
            {"validation_reward",
             validation_reward ? json(*validation_reward) : json(nullptr)},
            {"validation_stderr", validation_stderr},
            {"utility", utility},
            {"failed", failed},
            {"failure", failure},
            {"trained_checkpoint", trained_checkpoint},
            {"checkpoint_id", checkpoint_id},
            {"budgets", budgets_to_json(budgets)},
            {"scorer_evals", scorer_evals},
            {"prompt_draws", prompt_draws}};
  if (with_timing) j["wall_clock_seconds"] = wall_clock_seconds;
  return j;
}

TrialRecord TrialRecord::from_json(const json& j) {
  TrialRecord r;
  r.index = j.at("index").get<int>();
  r.weights = j.at("weights").get<std::vector<double>>();
  if (!j.at("validation_reward").is_null()) {
    r.validation_reward = j.at("validation_reward").get<double>();
  }
  r.validation_stderr = j.value("validation_stderr", 0.0);
  r.utility = j.at("utility").get<double>();
  r.failed = j.value("failed", false);
  r.failure = j.value("failure", std::string());
  r.trained_checkpoint = j.value("trained_checkpoint", std::string());
  r.checkpoint_id = j.value("checkpoint_id", std::string());
  for (const auto& b : j.value("budgets", json::array())) {
    r.budgets.push_back({attribution_method_from_string(b.at("method")),
                         b.at("declared").get<std::uint64_t>(),
                         b.at("used").get<std::uint64_t>(),
                         b.value("sequences", std::uint64_t{0})});
  }
  r.scorer_evals = j.value("scorer_evals", std::uint64_t{0});
  r.prompt_draws = j.value("prompt_draws", std::uint64_t{0});
  r.wall_clock_seconds = j.value("wall_clock_seconds", 0.0);
  return r;
}

ShapedOutcome shape_trajectory(const ExperimentConfig& config,
                               const Scorer& scorer, const ShapeWeights& weights,
                               const TokenSequence& sequence, std::uint64_t seed) {
  ShapedOutcome out;
  out.scalar = scorer.score(sequence);
  for (std::size_t k = 0; k < config.sources.size(); ++k) {
    out.attributions.push_back(attribute(config.sources[k], scorer, sequence,
                                         config.attribution, derive_seed(seed, k)));
  }
  DenseReward dense = shape_rewards(out.attributions, out.scalar, weights);
  out.per_token = std::move(dense.per_token);
  out.source_trace = std::move(dense.source_trace);
  return out;
}

TrialRecord run_trial(const TrialContext& ctx, int index,
                      const ShapeWeights& weights,
                      const std::optional<PolicyCheckpoint>& incumbent,
                      std::uint64_t trial_seed, PolicyCheckpoint* trained) {
  const auto started = std::chrono::steady_clock::now();
  const ExperimentConfig& config = ctx.config;
  if (weights.size() != config.num_weights()) {
    throw UsageError("expected " + std::to_string(config.num_weights()) +
                     " shaping weights, got " + std::to_string(weights.size()));
  }
  TrialRecord rec;
  rec.index = index;
  rec.weights = weights.values();
  const std::uint64_t evals_before = ctx.scorer.eval_count();

  const std::size_t want = static_cast<std::size_t>(config.effective_train_per_trial());
  const auto prompts = subsample(ctx.split.train, std::min(want, ctx.split.train.size()),
                                 derive_seed(trial_seed, 1));
  TrainingRun run;
  run.checkpoint = incumbent ? *incumbent : fresh_checkpoint(ctx.reference);
  const TrainConfig tc = inner_config(config, derive_seed(trial_seed, 2), config.train.epochs);

  fs::path metrics, audit;
  if (!ctx.run_dir.empty()) {
    metrics = ctx.run_dir / "metrics" / (trial_id(index) + ".jsonl");
    audit = ctx.run_dir / "metrics" / (trial_id(index) + "-shaping.jsonl");
  }
  try {
    train_with_weights(config, ctx.scorer, ctx.reference, weights, prompts, tc, metrics,
                       audit, {{"trial", index}}, ctx.threads, run);
  } catch (const NumericError& e) {
    rec.failed = true;
    rec.failure = e.what();
  }
  rec.budgets = run.budgets;
  rec.prompt_draws = run.draws;

  if (!rec.failed) {
    const auto val = validation_subset(config, ctx.split, derive_seed(trial_seed, 3));
    const EvalResult ev =
        evaluate_policy(run.checkpoint.params, config.mdp, val, ctx.scorer,
                        static_cast<std::size_t>(config.validation_samples),
                        derive_seed(trial_seed, 4));
    rec.validation_reward = ev.mean;
    rec.validation_stderr = ev.standard_error;
    rec.utility = ev.mean;
    run.checkpoint.trial_index = index;
    run.checkpoint.validation_reward = ev.mean;
    rec.trained_checkpoint = trial_id(index);
    if (!ctx.run_dir.empty()) {
      run.checkpoint.save(ctx.run_dir / "checkpoints" / (rec.trained_checkpoint + ".json"));
    }
    if (trained) *trained = run.checkpoint;
  }
  rec.scorer_evals = ctx.scorer.eval_count() - evals_before;
  rec.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return rec;
}

std::uint64_t RunManifest::prompt_draws() const {
  std::uint64_t total = 0;
  for (const auto& t : trials) total += t.prompt_draws;
  if (final_result) total += final_result->prompt_draws;
  return total;
}

bool RunManifest::within_data_pass_bound() const {
  return prompt_draws() <= 2 * train_size;
}

json RunManifest::to_json(bool with_timing) const {
  json trial_list = json::array();
  for (const auto& t : trials) trial_list.push_back(t.to_json(with_timing));
  json j = {{"format", "xrs-run-manifest"},
            {"version", 1},
            {"complete", complete},
            {"config_hash", config_hash},
            {"code_version", code_version},
            {"config", config},
            {"baseline_validation_reward", baseline_validation_reward},
            {"trials", trial_list},
            {"best_weights", best_weights},
            {"incumbent_checkpoint", incumbent_checkpoint},
            {"accounting",
             {{"train_size", train_size},
              {"validation_size", validation_size},
              {"prompt_draws", prompt_draws()},
              {"within_data_pass_bound", within_data_pass_bound()}}},
            {"error", error}};
  if (final_result) {
    j["final"] = {{"weights", final_result->weights},
                  {"validation_reward", final_result->validation_reward},
                  {"validation_stderr", final_result->validation_stderr},
                  {"steps", final_result->steps},
                  {"prompt_draws", final_result->prompt_draws},
                  {"checkpoint", final_result->checkpoint}};
  } else {
    j["final"] = nullptr;
  }
  if (with_timing) j["timing"] = {{"started_at", started_at}, {"finished_at", finished_at}};
  return j;
}

RunManifest RunManifest::from_json(const json& j) {
  try {
    RunManifest m;
    m.complete = j.at("complete").get<bool>();
    m.config_hash = j.at("config_hash").get<std::string>();
    m.code_version = j.value("code_version", std::string());
    m.config = j.value("config", json::object());
    m.baseline_validation_reward = j.value("baseline_validation_reward", 0.0);
    for (const auto& t : j.at("trials")) m.trials.push_back(TrialRecord::from_json(t));
    m.best_weights = j.value("best_weights", std::vector<double>{});
    m.incumbent_checkpoint = j.value("incumbent_checkpoint", std::string());
    const json acc = j.value("accounting", json::object());
    m.train_size = acc.value("train_size", std::uint64_t{0});
    m.validation_size = acc.value("validation_size", std::uint64_t{0});
    m.error = j.value("error", std::string());
    if (j.contains("final") && !j.at("final").is_null()) {
      const json& f = j.at("final");
      FinalResult r;
      r.weights = f.at("weights").get<std::vector<double>>();
      r.validation_reward = f.at("validation_reward").get<double>();
      r.validation_stderr = f.value("validation_stderr", 0.0);
      r.steps = f.value("steps", std::uint64_t{0});
      r.prompt_draws = f.value("prompt_draws", std::uint64_t{0});
      r.checkpoint = f.value("checkpoint", std::string());
      m.final_result = r;
    }
    if (j.contains("timing")) {
      m.started_at = j.at("timing").value("started_at", std::string());
      m.finished_at = j.at("timing").value("finished_at", std::string());
    }
    return m;
  } catch (const json::exception& e) {
    throw PersistenceError(std::string("malformed manifest: ") + e.what());
  }
}

namespace {

void prepare_run_dir(const fs::path& dir) {
  std::error_code ec;
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    throw UsageError("run directory is not empty: " + dir.string());
  }
  for (const char* sub : {"config", "checkpoints", "trials", "metrics"}) {
    fs::create_directories(dir / sub, ec);
    if (ec) {
      throw PersistenceError("cannot create " + (dir / sub).string() + ": " +
                             ec.message());
    }
  }
}

void write_manifest(const fs::path& dir, const RunManifest& m) {
  write_file_atomic(dir / "manifest.json", m.to_json().dump(2) + "\n");
}

FinalResult final_training(const ExperimentConfig& config, const Scorer& scorer,
                           const TabularPolicy& reference, const DatasetSplit& split,
                           const ShapeWeights& weights, std::uint64_t seed,
                           int epochs, const fs::path& out_dir,
                           const std::string& name, std::size_t threads) {
  const auto prompts = subsample(split.train, split.train.size(), derive_seed(seed, 1));
  TrainingRun run;
  run.checkpoint = fresh_checkpoint(reference);
  const TrainConfig tc = inner_config(config, derive_seed(seed, 2), epochs);
  fs::path metrics;
  if (!out_dir.empty()) metrics = out_dir / "metrics" / (name + ".jsonl");
  train_with_weights(config, scorer, reference, weights, prompts, tc, metrics, {},
                     {{"phase", name}}, threads, run);

  std::vector<std::size_t> val = split.validation;
  const std::size_t n = std::max<std::size_t>(
      static_cast<std::size_t>(config.validation_samples), val.size());
  const EvalResult ev = evaluate_policy(run.checkpoint.params, config.mdp, val, scorer,
                                        n, derive_seed(seed, 4));
  FinalResult r;
  r.weights = weights.values();
  r.validation_reward = ev.mean;
  r.validation_stderr = ev.standard_error;
  r.steps = run.checkpoint.updates;
  r.prompt_draws = run.draws;
  r.checkpoint = name;
  run.checkpoint.validation_reward = ev.mean;
  if (!out_dir.empty()) {
    run.checkpoint.save(out_dir / "checkpoints" / (name + ".json"));
  }
  return r;
}

}  // namespace

RunManifest run_bilevel(const ExperimentConfig& config) {
  config.validate(ConfigUse::kBilevel);
  if (config.run_dir.empty()) throw UsageError("config needs a run_dir");
  const fs::path dir = resolve_run_dir(config.run_dir);
  const std::size_t threads = configured_threads();
  prepare_run_dir(dir);

  RunManifest manifest;
  manifest.config_hash = config.hash();
  manifest.code_version = XRS_VERSION;
  manifest.config = config.to_json();
  manifest.started_at = utc_now();
  try {
    write_file_atomic(dir / "config" / "config.json", config.source_text);
    write_file_atomic(dir / "config" / "resolved.json", manifest.config.dump(2) + "\n");
    const RewardModel scorer = build_reward_model(config);
    scorer.save(dir / "config" / "reward_model.json");

    const DatasetSplit split =
        split_dataset(config.mdp.prompts.size(), derive_seed(config.seed, kSplitStream));
    manifest.train_size = split.train.size();
    manifest.validation_size = split.validation.size();
    const TabularPolicy reference(config.mdp.vocab_size);

    const std::uint64_t baseline_seed = derive_seed(config.seed, kBaselineStream);
    manifest.baseline_validation_reward =
        evaluate_policy(reference, config.mdp,
                        validation_subset(config, split, derive_seed(baseline_seed, 0)),
                        scorer, static_cast<std::size_t>(config.validation_samples),
                        derive_seed(baseline_seed, 1))
            .mean;
    write_manifest(dir, manifest);

    BoOptions bo;
    bo.sobol_init = static_cast<std::size_t>(config.bo.sobol_init);
    bo.gp.kernel = config.bo.kernel;
    bo.gp.restarts = config.bo.gp_restarts;
    bo.acquisition = config.bo.acquisition;

    const TrialContext ctx{config, scorer, reference, split, dir, threads};
    std::vector<Observation> history;
    std::optional<PolicyCheckpoint> incumbent;
    std::string incumbent_id = "initial";
    double best = -std::numeric_limits<double>::infinity();
    for (int k = 0; k < config.bo.trials; ++k) {
      const ShapeWeights w = suggest_next(history, config.num_weights(),
                                          derive_seed(config.seed, kBoStream), bo);
      std::optional<PolicyCheckpoint> resume;
      if (incumbent) {
        resume = PolicyCheckpoint::load(dir / "checkpoints" / (incumbent_id + ".json"));
      }
      TrialRecord rec = run_trial(ctx, k, w, resume,
                                  derive_seed(derive_seed(config.seed, kTrialStream), k));
      if (rec.failed) {
        double floor = manifest.baseline_validation_reward;
        if (!history.empty()) {
          floor = std::min_element(history.begin(), history.end(),
                                   [](const Observation& a, const Observation& b) {
                                     return a.utility < b.utility;
                                   })->utility;
        }
        rec.utility = floor;
      } else if (*rec.validation_reward > best) {
        best = *rec.validation_reward;
        incumbent_id = rec.trained_checkpoint;
        incumbent.emplace();
      }
      rec.checkpoint_id = incumbent_id;
      append_json_line(dir / "trials" / "trials.jsonl", rec.to_json());
      history.push_back({w, rec.utility});
      manifest.trials.push_back(rec);
      manifest.incumbent_checkpoint = incumbent_id;
      write_manifest(dir, manifest);
    }

    GpConfig gp = bo.gp;
    gp.seed = derive_seed(config.seed, kGpStream);
    const ShapeWeights best_w = best_params(history, gp);
    manifest.best_weights = best_w.values();
    write_manifest(dir, manifest);

    const int final_epochs =
        config.final_epochs > 0
            ? config.final_epochs
            : static_cast<int>((split.train.size() + config.train.batch_size - 1) /
                               config.train.batch_size);
    manifest.final_result =
        final_training(config, scorer, reference, split, best_w,
                       derive_seed(config.seed, kFinalStream), final_epochs, dir,
                       "final", threads);
    manifest.complete = true;
    manifest.finished_at = utc_now();
    write_manifest(dir, manifest);
  } catch (const Error& e) {
    manifest.complete = false;
    manifest.error = std::string(e.kind()) + ": " + e.what();
    manifest.finished_at = utc_now();
    try {
      write_manifest(dir, manifest);
    } catch (const Error&) {
      // The original failure is the one worth reporting.
    }
    throw;
  }
  return manifest;
}

FinalResult train_fixed(const ExperimentConfig& config, const ShapeWeights& weights,
                        const fs::path& out_dir, const std::string& name) {
  config.validate(ConfigUse::kTraining);
  if (weights.size() != config.num_weights()) {
    throw UsageError("expected " + std::to_string(config.num_weights()) +
                     " shaping weights, got " + std::to_string(weights.size()));
  }
  std::error_code ec;
  for (const char* sub : {"metrics", "checkpoints"}) {
    fs::create_directories(out_dir / sub, ec);
    if (ec) throw PersistenceError("cannot create " + (out_dir / sub).string());
  }
  const fs::path metrics = out_dir / "metrics" / (name + ".jsonl");
  if (fs::exists(metrics)) {
    throw UsageError("metrics file already exists: " + metrics.string());
  }
  const RewardModel scorer = build_reward_model(config);
  const DatasetSplit split =
      split_dataset(config.mdp.prompts.size(), derive_seed(config.seed, kSplitStream));
  const TabularPolicy reference(config.mdp.vocab_size);
  return final_training(config, scorer, reference, split, weights,
                        derive_seed(config.seed, kFinalStream), config.train.epochs,
                        out_dir, name, configured_threads());
}

RunSummary summarize_run(const fs::path& run_dir) {
  if (!fs::is_directory(run_dir)) {
    throw UsageError("not a run directory: " + run_dir.string());
  }
  RunSummary s;
  const fs::path manifest_path = run_dir / "manifest.json";
  if (fs::exists(manifest_path)) {
    try {
      s.manifest = RunManifest::from_json(json::parse(read_file(manifest_path)));
      s.has_manifest = true;
      s.complete = s.manifest->complete;
    } catch (const json::exception&) {
      s.has_manifest = false;
    } catch (const PersistenceError&) {
      s.has_manifest = false;
    }
  }
  const fs::path trials = run_dir / "trials" / "trials.jsonl";
  if (fs::exists(trials)) {
    for (const auto& j : read_json_lines(trials)) {
      s.trials.push_back(TrialRecord::from_json(j));
    }
  } else if (s.manifest) {
    s.trials = s.manifest->trials;
  }
  return s;
}

}  // namespace xrs
