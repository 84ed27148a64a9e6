#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "xrs/mdp.hpp"

namespace xrs {

// A black-box sequence scorer with an evaluation counter. Every call to
// score() counts, whichever subclass does the work.
class Scorer {
 public:
  Scorer() = default;
  Scorer(const Scorer& other) : evals_(other.eval_count()) {}
  Scorer& operator=(const Scorer& other) {
    evals_.store(other.eval_count());
    return *this;
  }
  virtual ~Scorer() = default;

  // Requires a terminated sequence. Thread-safe.
  double score(const TokenSequence& seq) const;

  std::uint64_t eval_count() const { return evals_.load(); }

  virtual std::string kind_name() const = 0;

  virtual bool differentiable() const { return false; }

  // d score / d presence_i for each completion token, at full presence.
  virtual std::vector<double> presence_gradient(const TokenSequence& seq) const;

 protected:
  virtual double evaluate(const TokenSequence& seq) const = 0;

 private:
  mutable std::atomic<std::uint64_t> evals_{0};
};

// Wraps an arbitrary function; used for fixtures and constructed games.
class FunctionScorer : public Scorer {
 public:
  using Fn = std::function<double(const TokenSequence&)>;

  explicit FunctionScorer(Fn fn, std::string name = "function")
      : fn_(std::move(fn)), name_(std::move(name)) {}

  std::string kind_name() const override { return name_; }

 protected:
  double evaluate(const TokenSequence& seq) const override { return fn_(seq); }

 private:
  Fn fn_;
  std::string name_;
};

enum class RewardModelKind { kSyntheticPattern, kLinearBag, kBradleyTerryLinear };

std::string to_string(RewardModelKind kind);
RewardModelKind reward_model_kind_from_string(const std::string& name);

// Contiguous n-gram rewarded once per (possibly overlapping) occurrence.
struct Pattern {
  std::vector<TokenId> tokens;
  double value = 0.0;
};

// The reward models of the token-level MDP. Features only look at completion
// tokens; the reserved mask id contributes nothing and breaks n-grams.
class RewardModel : public Scorer {
 public:
  static RewardModel synthetic_pattern(int vocab_size,
                                       std::vector<Pattern> patterns);
  static RewardModel linear_bag(int vocab_size, std::vector<double> weights);
  // weights = [unigram counts (vocab) | bigram indicators (vocab * vocab)]
  static RewardModel bradley_terry(int vocab_size, std::vector<double> weights);

  RewardModelKind kind() const { return kind_; }
  int vocab_size() const { return vocab_size_; }
  const std::vector<double>& weights() const { return weights_; }
  const std::vector<Pattern>& patterns() const { return patterns_; }

  std::string kind_name() const override { return to_string(kind_); }
  bool differentiable() const override {
    return kind_ != RewardModelKind::kSyntheticPattern;
  }
  std::vector<double> presence_gradient(
      const TokenSequence& seq) const override;

  nlohmann::json to_json() const;
  static RewardModel from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static RewardModel load(const std::filesystem::path& path);

 protected:
  double evaluate(const TokenSequence& seq) const override;

 private:
  RewardModel(RewardModelKind kind, int vocab_size);
  void check_tokens(const TokenSequence& seq) const;

  RewardModelKind kind_;
  int vocab_size_;
  std::vector<double> weights_;
  std::vector<Pattern> patterns_;
};

// Bag-of-token counts followed by bigram presence indicators.
std::vector<double> bradley_terry_features(int vocab_size,
                                           std::span<const TokenId> completion);

struct PreferencePair {
  std::vector<TokenId> prompt;
  std::vector<TokenId> chosen;
  std::vector<TokenId> rejected;
};

struct BradleyTerryConfig {
  int vocab_size = 2;
  int horizon = 0;  // 0 disables the length check
  double learning_rate = 0.5;
  int iterations = 500;
  double l2 = 0.0;
};

struct BradleyTerryResult {
  RewardModel model;
  double mean_log_likelihood = 0.0;
};

// Gradient ascent on the mean log sigma(r(x, y_c) - r(x, y_r)).
BradleyTerryResult train_bradley_terry(const std::vector<PreferencePair>& pairs,
                                       const BradleyTerryConfig& config);

// One pair per line: `prompt ids | chosen ids | rejected ids`.
std::vector<PreferencePair> read_preference_pairs(
    const std::filesystem::path& path);
void write_preference_pairs(const std::filesystem::path& path,
                            const std::vector<PreferencePair>& pairs);

}  // namespace xrs
