#include "xrs/reward_model.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "xrs/errors.hpp"
#include "xrs/io.hpp"

namespace xrs {

namespace {

constexpr int kModelFormatVersion = 1;

double log_sigmoid(double x) {
  // log(1 / (1 + e^-x)) without overflow for large |x|.
  return x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

std::string join_ids(const std::vector<TokenId>& ids) {
  std::ostringstream out;
  for (std::size_t i = 0; i < ids.size(); ++i) out << (i ? " " : "") << ids[i];
  return out.str();
}

}  // namespace

double Scorer::score(const TokenSequence& seq) const {
  if (!seq.terminated) {
    throw UsageError("score requires a terminated sequence: " + to_string(seq));
  }
  evals_.fetch_add(1, std::memory_order_relaxed);
  return evaluate(seq);
}

std::vector<double> Scorer::presence_gradient(const TokenSequence&) const {
  throw UnsupportedMethodError("scorer '" + kind_name() +
                               "' is not differentiable");
}

std::string to_string(RewardModelKind kind) {
  switch (kind) {
    case RewardModelKind::kSyntheticPattern:
      return "synthetic-pattern";
    case RewardModelKind::kLinearBag:
      return "linear-bag-of-tokens";
    case RewardModelKind::kBradleyTerryLinear:
      return "bradley-terry-linear";
  }
  return "unknown";
}

RewardModelKind reward_model_kind_from_string(const std::string& name) {
  if (name == "synthetic-pattern") return RewardModelKind::kSyntheticPattern;
  if (name == "linear-bag-of-tokens" || name == "linear-bag") {
    return RewardModelKind::kLinearBag;
  }
  if (name == "bradley-terry-linear") return RewardModelKind::kBradleyTerryLinear;
  throw UsageError("unknown reward model kind '" + name + "'");
}

RewardModel::RewardModel(RewardModelKind kind, int vocab_size)
    : kind_(kind), vocab_size_(vocab_size) {
  if (vocab_size < 1) throw UsageError("vocab_size must be positive");
}

RewardModel RewardModel::synthetic_pattern(int vocab_size,
                                           std::vector<Pattern> patterns) {
  RewardModel m(RewardModelKind::kSyntheticPattern, vocab_size);
  for (const auto& p : patterns) {
    if (p.tokens.empty()) throw UsageError("empty pattern");
    for (TokenId t : p.tokens) {
      if (t < 0 || t >= vocab_size) {
        throw UsageError("pattern token " + std::to_string(t) +
                         " outside vocabulary");
      }
    }
    if (!std::isfinite(p.value)) throw UsageError("non-finite pattern value");
  }
  m.patterns_ = std::move(patterns);
  return m;
}

RewardModel RewardModel::linear_bag(int vocab_size,
                                    std::vector<double> weights) {
  RewardModel m(RewardModelKind::kLinearBag, vocab_size);
  if (static_cast<int>(weights.size()) != vocab_size) {
    throw UsageError("linear-bag model needs one weight per token");
  }
  m.weights_ = std::move(weights);
  return m;
}

RewardModel RewardModel::bradley_terry(int vocab_size,
                                       std::vector<double> weights) {
  RewardModel m(RewardModelKind::kBradleyTerryLinear, vocab_size);
  const std::size_t v = vocab_size;
  if (weights.size() != v + v * v) {
    throw UsageError("bradley-terry model needs vocab + vocab^2 weights");
  }
  m.weights_ = std::move(weights);
  return m;
}

void RewardModel::check_tokens(const TokenSequence& seq) const {
  for (TokenId t : seq.completion) {
    if (t < 0 || t > vocab_size_) {  // vocab_size_ itself is the mask id
      throw UsageError("token " + std::to_string(t) +
                       " outside scorer vocabulary");
    }
  }
}

std::vector<double> bradley_terry_features(int vocab_size,
                                           std::span<const TokenId> completion) {
  const std::size_t v = vocab_size;
  std::vector<double> f(v + v * v, 0.0);
  for (std::size_t i = 0; i < completion.size(); ++i) {
    const TokenId t = completion[i];
    if (t < 0 || t >= vocab_size) continue;
    f[t] += 1.0;
    if (i + 1 < completion.size()) {
      const TokenId u = completion[i + 1];
      if (u >= 0 && u < vocab_size) f[v + t * v + u] = 1.0;
    }
  }
  return f;
}

double RewardModel::evaluate(const TokenSequence& seq) const {
  check_tokens(seq);
  const auto& c = seq.completion;
  double total = 0.0;
  switch (kind_) {
    case RewardModelKind::kSyntheticPattern:
      for (const auto& p : patterns_) {
        const std::size_t n = p.tokens.size();
        for (std::size_t i = 0; i + n <= c.size(); ++i) {
          bool match = true;
          for (std::size_t k = 0; k < n && match; ++k) {
            match = c[i + k] == p.tokens[k];
          }
          if (match) total += p.value;
        }
      }
      break;
    case RewardModelKind::kLinearBag:
      for (TokenId t : c) {
        if (t < vocab_size_) total += weights_[t];
      }
      break;
    case RewardModelKind::kBradleyTerryLinear: {
      const auto f = bradley_terry_features(vocab_size_, c);
      for (std::size_t i = 0; i < f.size(); ++i) total += weights_[i] * f[i];
      break;
    }
  }
  return total;
}

std::vector<double> RewardModel::presence_gradient(
    const TokenSequence& seq) const {
  if (!differentiable()) return Scorer::presence_gradient(seq);
  check_tokens(seq);
  const auto& c = seq.completion;
  const std::size_t v = vocab_size_;
  std::vector<double> grad(c.size(), 0.0);
  for (std::size_t i = 0; i < c.size(); ++i) {
    if (c[i] < vocab_size_) grad[i] = weights_[c[i]];
  }
  if (kind_ == RewardModelKind::kBradleyTerryLinear) {
    // A bigram indicator relaxes to 1 - prod_k (1 - p_j p_{j+1}) over its
    // occurrences k; at full presence only a unique occurrence has slope.
    std::map<std::size_t, int> occurrences;
    for (std::size_t i = 0; i + 1 < c.size(); ++i) {
      if (c[i] < vocab_size_ && c[i + 1] < vocab_size_) {
        ++occurrences[c[i] * v + c[i + 1]];
      }
    }
    for (std::size_t i = 0; i + 1 < c.size(); ++i) {
      if (c[i] >= vocab_size_ || c[i + 1] >= vocab_size_) continue;
      const std::size_t b = c[i] * v + c[i + 1];
      if (occurrences[b] != 1) continue;
      grad[i] += weights_[v + b];
      grad[i + 1] += weights_[v + b];
    }
  }
  return grad;
}

nlohmann::json RewardModel::to_json() const {
  nlohmann::json j = {{"format", "xrs-reward-model"},
                      {"version", kModelFormatVersion},
                      {"kind", to_string(kind_)},
                      {"vocab_size", vocab_size_}};
  if (kind_ == RewardModelKind::kSyntheticPattern) {
    auto arr = nlohmann::json::array();
    for (const auto& p : patterns_) {
      arr.push_back({{"tokens", p.tokens}, {"value", p.value}});
    }
    j["patterns"] = arr;
  } else {
    j["weights"] = weights_;
  }
  return j;
}

RewardModel RewardModel::from_json(const nlohmann::json& j) {
  try {
    if (j.contains("version") && j.at("version").get<int>() != kModelFormatVersion) {
      throw UsageError("unsupported reward model version " +
                       j.at("version").dump());
    }
    const auto kind = reward_model_kind_from_string(j.at("kind").get<std::string>());
    const int vocab = j.at("vocab_size").get<int>();
    switch (kind) {
      case RewardModelKind::kSyntheticPattern: {
        std::vector<Pattern> patterns;
        for (const auto& p : j.at("patterns")) {
          patterns.push_back({p.at("tokens").get<std::vector<TokenId>>(),
                              p.at("value").get<double>()});
        }
        return synthetic_pattern(vocab, std::move(patterns));
      }
      case RewardModelKind::kLinearBag:
        return linear_bag(vocab, j.at("weights").get<std::vector<double>>());
      case RewardModelKind::kBradleyTerryLinear:
        return bradley_terry(vocab, j.at("weights").get<std::vector<double>>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("malformed reward model: ") + e.what());
  }
  throw UsageError("malformed reward model");
}

void RewardModel::save(const std::filesystem::path& path) const {
  write_file_atomic(path, to_json().dump(2) + "\n");
}

RewardModel RewardModel::load(const std::filesystem::path& path) {
  try {
    return from_json(nlohmann::json::parse(read_file(path)));
  } catch (const nlohmann::json::parse_error& e) {
    throw UsageError(path.string() + ": " + e.what());
  }
}

BradleyTerryResult train_bradley_terry(const std::vector<PreferencePair>& pairs,
                                       const BradleyTerryConfig& config) {
  if (pairs.empty()) throw UsageError("need at least one preference pair");
  if (config.iterations < 0 || !(config.learning_rate >= 0.0)) {
    throw UsageError("invalid training configuration");
  }
  const int v = config.vocab_size;
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    const auto& p = pairs[k];
    if (p.chosen == p.rejected) {
      throw UsageError("pair " + std::to_string(k) +
                       ": chosen and rejected are identical");
    }
    for (const auto* side : {&p.prompt, &p.chosen, &p.rejected}) {
      for (TokenId t : *side) {
        if (t < 0 || t >= v) {
          throw UsageError("pair " + std::to_string(k) + ": token " +
                           std::to_string(t) + " outside vocabulary");
        }
      }
    }
    if (config.horizon > 0 &&
        (static_cast<int>(p.chosen.size()) > config.horizon ||
         static_cast<int>(p.rejected.size()) > config.horizon)) {
      throw UsageError("pair " + std::to_string(k) + ": longer than horizon");
    }
  }

  // Feature differences are fixed; only their dot product with w changes.
  const std::size_t dim = static_cast<std::size_t>(v) * (v + 1);
  std::vector<std::vector<double>> diffs;
  diffs.reserve(pairs.size());
  for (const auto& p : pairs) {
    auto fc = bradley_terry_features(v, p.chosen);
    const auto fr = bradley_terry_features(v, p.rejected);
    for (std::size_t i = 0; i < dim; ++i) fc[i] -= fr[i];
    diffs.push_back(std::move(fc));
  }

  std::vector<double> w(dim, 0.0);
  std::vector<double> grad(dim);
  const double n = static_cast<double>(pairs.size());
  double mean_ll = 0.0;
  auto margin = [&](const std::vector<double>& d) {
    double m = 0.0;
    for (std::size_t i = 0; i < dim; ++i) m += w[i] * d[i];
    return m;
  };
  for (int it = 0; it <= config.iterations; ++it) {
    std::fill(grad.begin(), grad.end(), 0.0);
    double ll = 0.0;
    for (const auto& d : diffs) {
      const double m = margin(d);
      // log sigmoid(+inf) is 0, so an overflowing margin would not show in the loss.
      if (!std::isfinite(m)) {
        throw NumericError("non-finite Bradley-Terry margin at iteration " +
                           std::to_string(it));
      }
      ll += log_sigmoid(m);
      const double g = 1.0 - sigmoid(m);
      for (std::size_t i = 0; i < dim; ++i) grad[i] += g * d[i];
    }
    mean_ll = ll / n;
    if (!std::isfinite(mean_ll)) {
      throw NumericError("non-finite Bradley-Terry loss at iteration " +
                         std::to_string(it));
    }
    if (it == config.iterations) break;
    for (std::size_t i = 0; i < dim; ++i) {
      w[i] += config.learning_rate * (grad[i] / n - config.l2 * w[i]);
    }
  }
  return {RewardModel::bradley_terry(v, std::move(w)), mean_ll};
}

std::vector<PreferencePair> read_preference_pairs(
    const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open " + path.string());
  std::vector<PreferencePair> pairs;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    auto body = trim(line);
    if (body.empty() || body.front() == '#') continue;
    auto parts = split(body, '|');
    if (parts.size() != 3) {
      throw IngestionError("line " + std::to_string(line_no) +
                           ": expected 'prompt | chosen | rejected'");
    }
    pairs.push_back({parse_token_ids(parts[0], line_no),
                     parse_token_ids(parts[1], line_no),
                     parse_token_ids(parts[2], line_no)});
  }
  return pairs;
}

void write_preference_pairs(const std::filesystem::path& path,
                            const std::vector<PreferencePair>& pairs) {
  std::ostringstream out;
  for (const auto& p : pairs) {
    out << join_ids(p.prompt) << " | " << join_ids(p.chosen) << " | "
        << join_ids(p.rejected) << '\n';
  }
  write_file_atomic(path, out.str());
}

}  // namespace xrs
