#pragma once

#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "xrs/attribution.hpp"
#include "xrs/mdp.hpp"

namespace xrs {

// A point on the probability simplex: one weight per attribution source,
// followed by the weight of the raw scalar reward channel.
class ShapeWeights {
 public:
  // Throws UsageError unless every entry is in [0, 1] and they sum to 1.
  explicit ShapeWeights(std::vector<double> weights);

  // All mass on the scalar channel: the sparse baseline.
  static ShapeWeights sparse(std::size_t num_sources);

  std::size_t size() const { return weights_.size(); }
  std::size_t num_sources() const { return weights_.size() - 1; }
  double operator[](std::size_t i) const { return weights_[i]; }
  double scalar_weight() const { return weights_.back(); }
  const std::vector<double>& values() const { return weights_; }

  bool operator==(const ShapeWeights&) const = default;

 private:
  std::vector<double> weights_;
};

std::string to_string(const ShapeWeights& w);

struct DenseReward {
  std::vector<double> per_token;
  std::vector<std::vector<double>> source_trace;  // softmax of each source

  nlohmann::json to_json() const;
};

// Numerically stable softmax. Throws NumericError on non-finite input.
std::vector<double> normalize_scores(std::span<const double> phi);

// per_token = scalar * sum_k w_k softmax(phi_k), plus w_scalar * scalar on
// the terminal token. Sums to `scalar` for every point on the simplex.
DenseReward shape_rewards(const std::vector<Attribution>& sources,
                          double scalar, const ShapeWeights& weights);

// Phi over prefixes: Phi[0] = 0, Phi[k] = weight * sum_{i<k} phi_i.
std::vector<double> potential_from_attribution(std::span<const double> phi,
                                               double weight);

struct InvarianceReport {
  double policy_gap = 0.0;       // max |pi_shaped - pi_base|
  double value_gap_error = 0.0;  // max |(V_shaped - V_base) + Phi(s)|
  bool pass = false;
};

inline constexpr double kInvarianceTolerance = 1e-8;

// Solves both rewards exactly and compares. `potential` must vanish at
// terminal states.
InvarianceReport verify_policy_invariance(const MdpSpec& mdp,
                                          const TokenReward& base,
                                          const TokenReward& shaped,
                                          const StateFn& potential,
                                          const PolicyFn& ref_policy,
                                          double tolerance = kInvarianceTolerance);

// base + Phi(s') - Phi(s), with Phi forced to zero on terminal states.
TokenReward add_potential_shaping(const MdpSpec& mdp, TokenReward base,
                                  StateFn potential);

}  // namespace xrs
