#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "test_util.hpp"
#include "xrs/errors.hpp"
#include "xrs/rng.hpp"
#include "xrs/shaping.hpp"
#include "xrs/verify.hpp"

using namespace xrs;

namespace {

Attribution source(std::vector<double> phi) {
  Attribution a;
  a.phi = std::move(phi);
  return a;
}

std::vector<double> softmax_oracle(const std::vector<double>& x) {
  std::vector<double> out(x.size());
  double total = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) total += out[i] = std::exp(x[i]);
  for (auto& v : out) v /= total;
  return out;
}

}  // namespace

TEST(ShapeWeights, Invariants) {
  EXPECT_NO_THROW(ShapeWeights({0.2, 0.3, 0.5}));
  EXPECT_THROW(ShapeWeights({0.2, 0.3, 0.6}), UsageError);
  EXPECT_THROW(ShapeWeights({-0.1, 1.1}), UsageError);
  EXPECT_THROW(ShapeWeights(std::vector<double>{}), UsageError);
  const auto s = ShapeWeights::sparse(2);
  EXPECT_EQ(s.values(), (std::vector<double>{0.0, 0.0, 1.0}));
  EXPECT_EQ(s.scalar_weight(), 1.0);
}

TEST(NormalizeScores, Uniform) {
  const auto p = normalize_scores(std::vector<double>{0.0, 0.0, 0.0});
  for (double v : p) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(NormalizeScores, LogTwoGap) {
  for (double c : {-700.0, -3.0, 0.0, 12.5, 800.0}) {
    const auto p = normalize_scores(std::vector<double>{c, c + std::log(2.0)});
    EXPECT_NEAR(p[0], 1.0 / 3.0, 1e-12) << c;
    EXPECT_NEAR(p[1], 2.0 / 3.0, 1e-12) << c;
  }
}

TEST(NormalizeScores, SingleToken) {
  EXPECT_EQ(normalize_scores(std::vector<double>{-4.2}), (std::vector<double>{1.0}));
}

TEST(NormalizeScores, MatchesDirectSoftmaxAndShiftInvariance) {
  Rng rng(1);
  for (int k = 0; k < 50; ++k) {
    std::vector<double> phi(1 + rng.index(8));
    for (auto& v : phi) v = rng.uniform(-5.0, 5.0);
    const auto p = normalize_scores(phi);
    const auto q = softmax_oracle(phi);
    double sum = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      EXPECT_NEAR(p[i], q[i], 1e-12);
      sum += p[i];
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
    auto shifted = phi;
    for (auto& v : shifted) v += 3.7;
    const auto ps = normalize_scores(shifted);
    for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(p[i], ps[i], 1e-12);
  }
}

TEST(NormalizeScores, NonFiniteIsNumericError) {
  EXPECT_THROW(normalize_scores(std::vector<double>{0.0, NAN}), NumericError);
  EXPECT_THROW(normalize_scores(std::vector<double>{INFINITY}), NumericError);
}

TEST(ShapeRewards, UniformBroadcast) {
  const auto d = shape_rewards({source({1.0, 1.0, 1.0, 1.0})}, 2.0, ShapeWeights({1.0, 0.0}));
  for (double v : d.per_token) EXPECT_NEAR(v, 0.5, 1e-15);
}

TEST(ShapeRewards, ScalarChannelIsSparseBaseline) {
  const auto d = shape_rewards({source({0.3, -2.0, 5.0})}, 1.7, ShapeWeights({0.0, 1.0}));
  EXPECT_EQ(d.per_token, (std::vector<double>{0.0, 0.0, 1.7}));
}

TEST(ShapeRewards, TwoSourceArithmetic) {
  const std::vector<double> a = {0.1, 0.9, -0.4}, b = {2.0, 0.0, 1.0};
  const auto d = shape_rewards({source(a), source(b)}, 2.0, ShapeWeights({0.5, 0.5, 0.0}));
  const auto p = softmax_oracle(a), q = softmax_oracle(b);
  double total = 0.0;
  for (int i = 0; i < 3; ++i) {
    EXPECT_NEAR(d.per_token[i], (p[i] + q[i]) * 1.0, 1e-14);
    total += d.per_token[i];
  }
  EXPECT_NEAR(total, 2.0, 1e-12);
  ASSERT_EQ(d.source_trace.size(), 2u);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(d.source_trace[1][i], q[i], 1e-14);
}

TEST(ShapeRewards, MismatchedInputsAreUsageErrors) {
  EXPECT_THROW(shape_rewards({source({1.0, 2.0}), source({1.0})}, 1.0,
                             ShapeWeights({0.3, 0.3, 0.4})),
               UsageError);
  EXPECT_THROW(shape_rewards({source({1.0, 2.0})}, 1.0, ShapeWeights({0.3, 0.3, 0.4})),
               UsageError);
}

TEST(ShapeRewards, ConservationOverRandomTriples) {
  Rng rng(2024);
  for (int k = 0; k < 2000; ++k) {
    const std::size_t m = 1 + rng.index(12);
    const std::size_t sources = 1 + rng.index(4);
    std::vector<Attribution> srcs;
    for (std::size_t s = 0; s < sources; ++s) {
      std::vector<double> phi(m);
      for (auto& v : phi) v = rng.normal(0.0, 3.0);
      srcs.push_back(source(phi));
    }
    std::vector<double> w(sources + 1);
    double total = 0.0;
    for (auto& v : w) total += v = -std::log(1.0 - rng.uniform());
    for (auto& v : w) v /= total;
    const double scalar = rng.normal(0.0, 10.0);
    const auto d = shape_rewards(srcs, scalar, ShapeWeights(w));
    const double sum = std::accumulate(d.per_token.begin(), d.per_token.end(), 0.0);
    EXPECT_LE(std::abs(sum - scalar), 1e-9 * std::max(1.0, std::abs(scalar)));
  }
}

TEST(PotentialFromAttribution, CumulativeSum) {
  const auto phi = potential_from_attribution(std::vector<double>{1.0, 2.0, 3.0}, 0.5);
  EXPECT_EQ(phi, (std::vector<double>{0.0, 0.5, 1.5, 3.0}));
  for (int i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(phi[i + 1] - phi[i], 0.5 * (i + 1));
}

TEST(PotentialFromAttribution, ZeroWeight) {
  for (double v : potential_from_attribution(std::vector<double>{4.0, -2.0}, 0.0)) {
    EXPECT_EQ(v, 0.0);
  }
}

TEST(PolicyInvariance, ZeroPotentialPassesWithZeroGaps) {
  MdpSpec m;
  m.vocab_size = 3;
  m.horizon = 3;
  m.beta = 0.5;
  m.prompts = {{1}};
  TokenReward base;
  base.transition = [](const TokenSequence&, TokenId a) { return 0.2 * a; };
  const StateFn zero = [](const TokenSequence&) { return 0.0; };
  const auto shaped = add_potential_shaping(m, base, zero);
  const auto r = verify_policy_invariance(m, base, shaped, zero, uniform_policy(3));
  EXPECT_TRUE(r.pass);
  EXPECT_EQ(r.policy_gap, 0.0);
  EXPECT_EQ(r.value_gap_error, 0.0);
}

TEST(PolicyInvariance, RandomPotentialsFromAttributions) {
  // vocab 3, horizon 4, potential built from per-sequence attributions.
  for (std::uint64_t s = 0; s < 100; ++s) {
    Rng rng(s);
    MdpSpec m;
    m.vocab_size = 3;
    m.horizon = 4;
    m.eos_token = 0;
    m.beta = rng.uniform(0.2, 2.0);
    m.prompts = {{2}};
    std::vector<double> phi(4);
    for (auto& v : phi) v = rng.uniform(-1.0, 1.0);
    const double w = rng.uniform();
    const auto table = potential_from_attribution(phi, w);
    const StateFn potential = [table](const TokenSequence& t) {
      return table[t.completion.size()];
    };
    const std::uint64_t rs = rng.next_u64();
    TokenReward base;
    base.transition = [](const TokenSequence&, TokenId) { return 0.0; };
    base.terminal = [rs](const TokenSequence& t) {
      double v = 0.0;
      for (TokenId a : t.completion) v = v * 1.3 + std::sin(static_cast<double>(rs % 1000) + a);
      return v;
    };
    const auto shaped = add_potential_shaping(m, base, potential);
    const auto r = verify_policy_invariance(m, base, shaped, potential, uniform_policy(3));
    EXPECT_TRUE(r.pass) << "seed " << s << " gap " << r.policy_gap << " " << r.value_gap_error;
  }
}

TEST(PolicyInvariance, NonPotentialPerturbationFails) {
  int failures = 0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    Rng rng(s);
    MdpSpec m;
    m.vocab_size = 3;
    m.horizon = 3;
    m.beta = 1.0;
    m.prompts = {{1}};
    TokenReward base;
    base.transition = [](const TokenSequence&, TokenId) { return 0.0; };
    base.terminal = [](const TokenSequence& t) { return 0.1 * t.completion.size(); };
    const double noise = rng.uniform(0.1, 1.0);
    const TokenId target = static_cast<TokenId>(rng.index(3));
    TokenReward bumped = base;
    bumped.transition = [noise, target](const TokenSequence& t, TokenId a) {
      return t.completion.empty() && a == target ? noise : 0.0;
    };
    const StateFn zero = [](const TokenSequence&) { return 0.0; };
    failures += !verify_policy_invariance(m, base, bumped, zero, uniform_policy(3)).pass;
  }
  EXPECT_GT(failures, 0);
  EXPECT_EQ(failures, 20);
}

TEST(InvarianceSuite, LibrarySuitePasses) {
  const auto suite = run_invariance_suite(30, 99);
  EXPECT_EQ(suite.shaped_pass, 30);
  EXPECT_GE(suite.control_fail, 29);
  EXPECT_TRUE(suite.pass());
}

TEST(DenseReward, SparseWeightsReproduceSparseAssemblyExactly) {
  // After the KL penalty, shaping with all weight on the scalar channel is
  // bit-identical to the sparse reward cases.
  Rng rng(5);
  for (int k = 0; k < 50; ++k) {
    const std::size_t m = 1 + rng.index(6);
    std::vector<double> phi(m), logp(m), ref(m);
    for (auto& v : phi) v = rng.normal();
    for (auto& v : logp) v = -rng.uniform(0.01, 3.0);
    for (auto& v : ref) v = -rng.uniform(0.01, 3.0);
    const double scalar = rng.normal(0.0, 2.0), beta = rng.uniform(0.0, 1.0);
    const auto d = shape_rewards({source(phi)}, scalar, ShapeWeights::sparse(1));
    EXPECT_EQ(assemble_dense_rewards(d.per_token, logp, ref, beta),
              assemble_token_rewards(logp, ref, scalar, beta));
  }
}
