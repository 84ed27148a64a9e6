#include "xrs/verify.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include <nlohmann/json.hpp>

#include "xrs/errors.hpp"
#include "xrs/io.hpp"
#include "xrs/reward_model.hpp"
#include "xrs/rng.hpp"

namespace xrs {

CoalitionTable load_coalition_table(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    throw UsageError("fixture not found: " + path.string());
  }
  CoalitionTable table;
  try {
    const auto j = nlohmann::json::parse(read_file(path));
    table.tokens = j.at("tokens").get<std::vector<std::string>>();
    const std::size_t m = table.tokens.size();
    for (const auto& c : j.at("coalitions")) {
      const auto mask = c.at("mask").get<std::vector<int>>();
      if (mask.size() != m) {
        throw IngestionError("coalition mask has " + std::to_string(mask.size()) +
                             " entries, expected " + std::to_string(m));
      }
      MaskVector z(m);
      for (std::size_t i = 0; i < m; ++i) {
        if (mask[i] != 0 && mask[i] != 1) throw IngestionError("mask entries must be 0 or 1");
        z[i] = static_cast<std::uint8_t>(mask[i]);
      }
      table.rewards[z] = c.at("reward").get<double>();
    }
    if (table.rewards.size() != (std::size_t{1} << m)) {
      throw IngestionError("fixture must list all " + std::to_string(1u << m) +
                           " coalitions");
    }
    table.expected_phi = j.value("expected_phi", std::vector<double>{});
    table.tolerance = j.value("tolerance", table.tolerance);
  } catch (const nlohmann::json::exception& e) {
    throw IngestionError("malformed fixture " + path.string() + ": " + e.what());
  }
  if (!table.expected_phi.empty() && table.expected_phi.size() != table.tokens.size()) {
    throw IngestionError("expected_phi length does not match tokens");
  }
  return table;
}

GoldenCheck check_coalition_table(const CoalitionTable& table) {
  const std::size_t m = table.tokens.size();
  const auto mask_token = static_cast<TokenId>(m);
  TokenSequence x;
  for (std::size_t i = 0; i < m; ++i) x.completion.push_back(static_cast<TokenId>(i));
  x.terminated = true;

  FunctionScorer f(
      [&](const TokenSequence& s) {
        MaskVector z(m);
        for (std::size_t i = 0; i < m; ++i) z[i] = s.completion[i] != mask_token;
        return table.rewards.at(z);
      },
      "coalition-table");

  GoldenCheck out;
  out.attribution = exact_shapley(f, x, mask_token, static_cast<int>(m));
  const double full = table.rewards.at(MaskVector(m, 1));
  double total = out.attribution.phi0;
  for (double p : out.attribution.phi) total += p;
  out.efficiency_error = std::abs(total - full);
  for (std::size_t i = 0; i < table.expected_phi.size(); ++i) {
    out.max_error = std::max(out.max_error,
                             std::abs(out.attribution.phi[i] - table.expected_phi[i]));
  }
  out.pass = out.max_error <= table.tolerance && out.efficiency_error <= 1e-9;
  return out;
}

InvarianceCase random_invariance_case(std::uint64_t seed) {
  Rng rng(seed);
  InvarianceCase c;
  c.mdp.vocab_size = 2 + static_cast<int>(rng.index(3));
  c.mdp.horizon = 1 + static_cast<int>(rng.index(5));
  c.mdp.eos_token = static_cast<TokenId>(rng.index(c.mdp.vocab_size));
  c.mdp.beta = rng.uniform(0.1, 2.0);
  const std::size_t num_prompts = 1 + rng.index(2);
  for (std::size_t p = 0; p < num_prompts; ++p) {
    c.mdp.prompts.push_back({static_cast<TokenId>(rng.index(c.mdp.vocab_size))});
  }

  // Credit per (position, token), scaled by a random source weight.
  const double weight = rng.uniform(0.1, 1.0);
  auto credit = std::make_shared<std::vector<std::vector<double>>>(
      c.mdp.horizon, std::vector<double>(c.mdp.vocab_size));
  for (auto& row : *credit) {
    for (auto& v : row) v = rng.uniform(-1.0, 1.0);
  }
  const std::uint64_t reward_seed = rng.next_u64();
  const std::uint64_t ref_seed = rng.next_u64();
  const int vocab = c.mdp.vocab_size;

  c.base.transition = [](const TokenSequence&, TokenId) { return 0.0; };
  c.base.terminal = [reward_seed](const TokenSequence& s) {
    Rng r(derive_seed(reward_seed, sequence_fingerprint(s)));
    return r.uniform(-1.0, 1.0);
  };
  c.potential = [credit, weight](const TokenSequence& s) {
    double phi = 0.0;
    for (std::size_t i = 0; i < s.completion.size(); ++i) {
      phi += (*credit)[i][s.completion[i]];
    }
    return weight * phi;
  };
  c.shaped = add_potential_shaping(c.mdp, c.base, c.potential);
  c.control.terminal = c.base.terminal;
  c.control.transition = [credit, weight](const TokenSequence& s, TokenId a) {
    return weight * (*credit)[s.completion.size()][a];
  };
  c.reference = [ref_seed, vocab](const TokenSequence& s) {
    Rng r(derive_seed(ref_seed, sequence_fingerprint(s)));
    std::vector<double> p(vocab);
    double total = 0.0;
    for (auto& v : p) {
      v = std::exp(r.uniform(-1.0, 1.0));
      total += v;
    }
    for (auto& v : p) v /= total;
    return p;
  };
  return c;
}

InvarianceSuite run_invariance_suite(int cases, std::uint64_t seed) {
  InvarianceSuite suite;
  suite.cases = cases;
  for (int k = 0; k < cases; ++k) {
    const InvarianceCase c = random_invariance_case(derive_seed(seed, k));
    const InvarianceReport shaped =
        verify_policy_invariance(c.mdp, c.base, c.shaped, c.potential, c.reference);
    const InvarianceReport control =
        verify_policy_invariance(c.mdp, c.base, c.control, c.potential, c.reference);
    suite.shaped_pass += shaped.pass;
    suite.control_fail += !control.pass;
    suite.worst_policy_gap = std::max(suite.worst_policy_gap, shaped.policy_gap);
    suite.worst_value_gap = std::max(suite.worst_value_gap, shaped.value_gap_error);
  }
  return suite;
}

}  // namespace xrs
