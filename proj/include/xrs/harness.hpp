#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "xrs/attribution.hpp"
#include "xrs/bayes_opt.hpp"
#include "xrs/mdp.hpp"
#include "xrs/policy.hpp"
#include "xrs/reward_model.hpp"
#include "xrs/shaping.hpp"

namespace xrs {

// What a config will be used for; some sources only make sense in some modes.
// kBilevel adds the optimizer settings and the data-pass bound to kTraining.
enum class ConfigUse { kAttribution, kTraining, kBilevel };

struct BoSettings {
  int trials = 25;
  int sobol_init = 5;
  KernelKind kernel = KernelKind::kMatern52;
  int gp_restarts = 8;
  AcquisitionSpec acquisition;
};

// A bilevel experiment. See README for the JSON schema.
struct ExperimentConfig {
  MdpSpec mdp;
  nlohmann::json reward_model;  // spec as written; see build_reward_model
  std::vector<AttributionMethod> sources;
  AttributionSettings attribution;
  std::optional<std::filesystem::path> external_scores;
  BoSettings bo;
  TrainConfig train;
  int train_per_trial = 0;      // 0: epochs * batch_size
  int validation_per_eval = 0;  // 0: whole validation split
  int validation_samples = 64;
  int final_epochs = 0;         // 0: one pass over the training split
  std::uint64_t seed = 0;
  std::filesystem::path run_dir;

  std::filesystem::path base_dir;  // inputs resolve against this
  std::string source_text;         // bytes the config was parsed from

  // Parses and validates. Unknown keys and bad values raise UsageError;
  // missing input files raise UsageError naming the path.
  static ExperimentConfig parse(const std::string& text,
                                const std::filesystem::path& base_dir);
  static ExperimentConfig load(const std::filesystem::path& path);

  void validate(ConfigUse use) const;
  std::string hash() const;  // SHA-256 of source_text
  std::size_t num_weights() const { return sources.size() + 1; }
  int effective_train_per_trial() const;
  nlohmann::json to_json() const;  // normalized, defaults filled in
};

// Builds the scorer described by config.reward_model, training a
// Bradley-Terry model from a preference file when asked to.
RewardModel build_reward_model(const ExperimentConfig& config);

struct DatasetSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
};

// Seeded 90/10 split of prompt indices; both halves sorted.
DatasetSplit split_dataset(std::size_t num_prompts, std::uint64_t seed);

// Seeded subset of `pool` without replacement, in draw order.
std::vector<std::size_t> subsample(const std::vector<std::size_t>& pool,
                                   std::size_t count, std::uint64_t seed);

struct SourceBudget {
  AttributionMethod method = AttributionMethod::kExactShapley;
  std::uint64_t declared = 0;
  std::uint64_t used = 0;
  std::uint64_t sequences = 0;
};

struct TrialRecord {
  int index = 0;
  std::vector<double> weights;
  std::optional<double> validation_reward;  // unset when failed
  double validation_stderr = 0.0;
  double utility = 0.0;  // what the optimizer saw
  bool failed = false;
  std::string failure;
  std::string trained_checkpoint;  // this trial's checkpoint id
  std::string checkpoint_id;       // incumbent after this trial
  std::vector<SourceBudget> budgets;
  std::uint64_t scorer_evals = 0;
  std::uint64_t prompt_draws = 0;
  double wall_clock_seconds = 0.0;

  // `with_timing` false drops the wall clock so records compare across runs.
  nlohmann::json to_json(bool with_timing = true) const;
  static TrialRecord from_json(const nlohmann::json& j);
};

// Everything a trial needs besides its own arguments.
struct TrialContext {
  const ExperimentConfig& config;
  const RewardModel& scorer;
  const TabularPolicy& reference;
  const DatasetSplit& split;
  std::filesystem::path run_dir;  // empty: nothing is persisted
  std::size_t threads = 1;
};

// Scalar reward, attributions and dense shaping for one trajectory.
ShapedOutcome shape_trajectory(const ExperimentConfig& config,
                               const Scorer& scorer, const ShapeWeights& weights,
                               const TokenSequence& sequence, std::uint64_t seed);

// Subsamples training prompts, resumes from `incumbent` (fresh policy when
// absent), trains with rewards shaped by `weights`, evaluates on a validation
// subsample, and persists the checkpoint. NumericError inside training marks
// the record failed instead of propagating.
TrialRecord run_trial(const TrialContext& ctx, int index,
                      const ShapeWeights& weights,
                      const std::optional<PolicyCheckpoint>& incumbent,
                      std::uint64_t trial_seed,
                      PolicyCheckpoint* trained = nullptr);

struct FinalResult {
  std::vector<double> weights;
  double validation_reward = 0.0;
  double validation_stderr = 0.0;
  std::uint64_t steps = 0;
  std::uint64_t prompt_draws = 0;
  std::string checkpoint;
};

struct RunManifest {
  bool complete = false;
  std::string config_hash;
  std::string code_version;
  nlohmann::json config;
  double baseline_validation_reward = 0.0;
  std::vector<TrialRecord> trials;
  std::vector<double> best_weights;
  std::string incumbent_checkpoint;
  std::optional<FinalResult> final_result;
  std::uint64_t train_size = 0;
  std::uint64_t validation_size = 0;
  std::string error;
  std::string started_at;
  std::string finished_at;

  std::uint64_t prompt_draws() const;
  bool within_data_pass_bound() const;  // draws <= 2 * train_size

  nlohmann::json to_json(bool with_timing = true) const;
  static RunManifest from_json(const nlohmann::json& j);
};

// Algorithm: BO over shaping weights around checkpoint-resumed inner training,
// then a fresh full training run with the best weights. Writes the run
// directory layout (config/, checkpoints/, trials/, metrics/, manifest.json).
RunManifest run_bilevel(const ExperimentConfig& config);

// Single inner run with fixed weights over the training split; writes
// metrics/<name>.jsonl and checkpoints/<name>.json under `out_dir`.
FinalResult train_fixed(const ExperimentConfig& config,
                        const ShapeWeights& weights,
                        const std::filesystem::path& out_dir,
                        const std::string& name);

// Reads a run directory, tolerating a missing or incomplete manifest by
// falling back to trials/trials.jsonl.
struct RunSummary {
  bool complete = false;
  bool has_manifest = false;
  std::vector<TrialRecord> trials;
  std::optional<RunManifest> manifest;
};
RunSummary summarize_run(const std::filesystem::path& run_dir);

// XRS_RUN_ROOT joined with `run_dir` when the latter is relative.
std::filesystem::path resolve_run_dir(const std::filesystem::path& run_dir);

}  // namespace xrs
