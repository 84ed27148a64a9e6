#include "xrs/shaping.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "xrs/errors.hpp"

namespace xrs {

ShapeWeights::ShapeWeights(std::vector<double> weights)
    : weights_(std::move(weights)) {
  if (weights_.size() < 1) throw UsageError("shape weights are empty");
  double total = 0.0;
  for (double w : weights_) {
    if (!(w >= 0.0 && w <= 1.0)) {
      throw UsageError("shape weight outside [0, 1]: " + to_string(*this));
    }
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw UsageError("shape weights must sum to 1: " + to_string(*this));
  }
}

ShapeWeights ShapeWeights::sparse(std::size_t num_sources) {
  std::vector<double> w(num_sources + 1, 0.0);
  w.back() = 1.0;
  return ShapeWeights(std::move(w));
}

std::string to_string(const ShapeWeights& w) {
  std::ostringstream out;
  out.precision(6);
  out << '(';
  for (std::size_t i = 0; i < w.values().size(); ++i) {
    out << (i ? ", " : "") << w.values()[i];
  }
  out << ')';
  return out.str();
}

nlohmann::json DenseReward::to_json() const {
  return {{"per_token", per_token}, {"source_trace", source_trace}};
}

std::vector<double> normalize_scores(std::span<const double> phi) {
  if (phi.empty()) throw UsageError("cannot normalize an empty score vector");
  double hi = -std::numeric_limits<double>::infinity();
  for (double v : phi) {
    if (!std::isfinite(v)) throw NumericError("non-finite token score");
    hi = std::max(hi, v);
  }
  std::vector<double> out(phi.size());
  double total = 0.0;
  for (std::size_t i = 0; i < phi.size(); ++i) {
    out[i] = std::exp(phi[i] - hi);
    total += out[i];
  }
  for (double& v : out) v /= total;
  return out;
}

DenseReward shape_rewards(const std::vector<Attribution>& sources,
                          double scalar, const ShapeWeights& weights) {
  if (weights.size() != sources.size() + 1) {
    throw UsageError("expected " + std::to_string(sources.size() + 1) +
                     " weights, got " + std::to_string(weights.size()));
  }
  if (!std::isfinite(scalar)) throw NumericError("non-finite scalar reward");
  std::size_t m = 0;
  if (!sources.empty()) {
    m = sources.front().phi.size();
    for (const auto& s : sources) {
      if (s.phi.size() != m) {
        throw UsageError("attribution sources disagree on sequence length");
      }
    }
  }
  if (m == 0) throw UsageError("shaping needs at least one source and token");

  DenseReward out;
  out.per_token.assign(m, 0.0);
  for (std::size_t k = 0; k < sources.size(); ++k) {
    out.source_trace.push_back(normalize_scores(sources[k].phi));
    const auto& p = out.source_trace.back();
    for (std::size_t t = 0; t < m; ++t) {
      out.per_token[t] += weights[k] * p[t];
    }
  }
  for (double& r : out.per_token) r *= scalar;
  out.per_token.back() += weights.scalar_weight() * scalar;
  return out;
}

std::vector<double> potential_from_attribution(std::span<const double> phi,
                                               double weight) {
  std::vector<double> out(phi.size() + 1, 0.0);
  for (std::size_t i = 0; i < phi.size(); ++i) {
    if (!std::isfinite(phi[i])) throw NumericError("non-finite attribution");
    out[i + 1] = out[i] + weight * phi[i];
  }
  return out;
}

TokenReward add_potential_shaping(const MdpSpec& mdp, TokenReward base,
                                  StateFn potential) {
  auto phi = [potential](const TokenSequence& s) {
    return s.terminated ? 0.0 : potential(s);
  };
  TokenReward shaped;
  shaped.terminal = base.terminal;
  shaped.transition = [mdp, base = std::move(base), phi](const TokenSequence& s,
                                                         TokenId a) {
    return base.transition(s, a) + phi(step(mdp, s, a)) - phi(s);
  };
  return shaped;
}

InvarianceReport verify_policy_invariance(const MdpSpec& mdp,
                                          const TokenReward& base,
                                          const TokenReward& shaped,
                                          const StateFn& potential,
                                          const PolicyFn& ref_policy,
                                          double tolerance) {
  auto space = std::make_shared<const StateSpace>(mdp);
  const SoftSolution a = soft_value_iteration(space, mdp, base, ref_policy);
  const SoftSolution b = soft_value_iteration(space, mdp, shaped, ref_policy);

  InvarianceReport report;
  for (std::size_t i = 0; i < space->size(); ++i) {
    const TokenSequence& s = space->state(i);
    const double phi = s.terminated ? 0.0 : potential(s);
    const double gap = b.soft_values[i] - a.soft_values[i];
    report.value_gap_error = std::max(report.value_gap_error, std::abs(gap + phi));
    for (std::size_t k = 0; k < a.policy[i].size(); ++k) {
      report.policy_gap =
          std::max(report.policy_gap, std::abs(a.policy[i][k] - b.policy[i][k]));
    }
  }
  report.pass = report.policy_gap <= tolerance &&
                report.value_gap_error <= tolerance;
  return report;
}

}  // namespace xrs
