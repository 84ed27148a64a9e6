#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "xrs/attribution.hpp"
#include "xrs/mdp.hpp"
#include "xrs/shaping.hpp"

namespace xrs {

// A reward table over every coalition of a short token sequence.
//
//   {"tokens": ["I", "like", "apples"],
//    "coalitions": [{"mask": [0, 0, 0], "reward": 0.0}, ...],
//    "expected_phi": [0.32, 0.62, 1.17],
//    "tolerance": 0.005}
struct CoalitionTable {
  std::vector<std::string> tokens;
  std::map<MaskVector, double> rewards;
  std::vector<double> expected_phi;
  double tolerance = 0.005;
};

CoalitionTable load_coalition_table(const std::filesystem::path& path);

struct GoldenCheck {
  Attribution attribution;
  double max_error = 0.0;        // max |phi - expected|
  double efficiency_error = 0.0;  // |phi0 + sum(phi) - f(full)|
  bool pass = false;
};

// Exact Shapley values of the table game.
GoldenCheck check_coalition_table(const CoalitionTable& table);

// A small random KL-regularized MDP with random per-token credit. `shaped`
// adds the credit as a telescoping potential; `control` pays the same
// credit per token without telescoping.
struct InvarianceCase {
  MdpSpec mdp;
  TokenReward base;
  TokenReward shaped;
  TokenReward control;
  StateFn potential;
  PolicyFn reference;
};

InvarianceCase random_invariance_case(std::uint64_t seed);

struct InvarianceSuite {
  int cases = 0;
  int shaped_pass = 0;
  int control_fail = 0;
  double worst_policy_gap = 0.0;
  double worst_value_gap = 0.0;

  // All potential cases pass and at least 95% of the controls fail.
  bool pass() const { return shaped_pass == cases && control_fail * 100 >= 95 * cases; }
};

InvarianceSuite run_invariance_suite(int cases, std::uint64_t seed);

}  // namespace xrs
