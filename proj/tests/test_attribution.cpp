#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

#include <Eigen/Dense>
#include <gtest/gtest.h>

#include "test_util.hpp"
#include "xrs/attribution.hpp"
#include "xrs/errors.hpp"
#include "xrs/reward_model.hpp"
#include "xrs/rng.hpp"

using namespace xrs;
using xrs::testing::seq;
using xrs::testing::TempDir;

namespace {

constexpr TokenId kMask = 9;

// Bits of the completion that are not masked, position 0 first.
std::uint32_t present_bits(const TokenSequence& s) {
  std::uint32_t bits = 0;
  for (std::size_t i = 0; i < s.completion.size(); ++i) {
    if (s.completion[i] != kMask) bits |= 1u << i;
  }
  return bits;
}

// Game given by an explicit value per coalition bitmask.
FunctionScorer table_scorer(std::vector<double> table) {
  return FunctionScorer([table = std::move(table)](const TokenSequence& s) {
    return table.at(present_bits(s));
  });
}

std::vector<double> random_table(int m, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> t(std::size_t{1} << m);
  for (auto& v : t) v = rng.uniform(-2.0, 2.0);
  return t;
}

TokenSequence tokens(int m) {
  TokenSequence s;
  for (int i = 0; i < m; ++i) s.completion.push_back(static_cast<TokenId>(1 + i % 8));
  s.terminated = true;
  return s;
}

// Shapley values by averaging marginal contributions over every ordering.
std::vector<double> permutation_shapley(const std::vector<double>& table, int m) {
  std::vector<int> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> phi(m, 0.0);
  double count = 0.0;
  do {
    std::uint32_t bits = 0;
    for (int i : order) {
      const double before = table[bits];
      bits |= 1u << i;
      phi[i] += table[bits] - before;
    }
    count += 1.0;
  } while (std::next_permutation(order.begin(), order.end()));
  for (auto& p : phi) p /= count;
  return phi;
}

// Table game from the paper's worked example; bit 0 is "I".
std::vector<double> golden_table() {
  std::vector<double> t(8);
  t[0b000] = 0.0;
  t[0b001] = 0.3;
  t[0b010] = 0.5;
  t[0b100] = 1.2;
  t[0b011] = 0.9;
  t[0b101] = 1.3;
  t[0b110] = 1.7;
  t[0b111] = 2.1;
  return t;
}

}  // namespace

TEST(Reconstruct, AllOnesIsIdentity) {
  const auto x = seq({4}, {1, 2, 3});
  EXPECT_EQ(reconstruct(x, {1, 1, 1}, kMask), x);
}

TEST(Reconstruct, AllZerosMasksEveryCompletionToken) {
  const auto x = seq({4}, {1, 2, 3});
  const auto r = reconstruct(x, {0, 0, 0}, kMask);
  EXPECT_EQ(r.completion, (std::vector<TokenId>{kMask, kMask, kMask}));
  EXPECT_EQ(r.prompt, x.prompt);
  EXPECT_TRUE(r.terminated);
}

TEST(Reconstruct, MiddleMasked) {
  const auto r = reconstruct(seq({}, {1, 2, 3}), {1, 0, 1}, kMask);
  EXPECT_EQ(r.completion, (std::vector<TokenId>{1, kMask, 3}));
}

TEST(Reconstruct, LengthMismatchIsUsageError) {
  EXPECT_THROW(reconstruct(seq({}, {1, 2, 3}), {1, 0}, kMask), UsageError);
}

TEST(ShapleyWeights, CoalitionWeightFormula) {
  EXPECT_NEAR(shapley_coalition_weight(0, 3), 2.0 / 6.0, 1e-15);
  EXPECT_NEAR(shapley_coalition_weight(1, 3), 1.0 / 6.0, 1e-15);
  EXPECT_NEAR(shapley_coalition_weight(2, 3), 2.0 / 6.0, 1e-15);
  // Sum over coalitions excluding one player is 1.
  for (int m = 1; m <= 10; ++m) {
    double total = 0.0;
    double choose = 1.0;
    for (int s = 0; s < m; ++s) {
      total += choose * shapley_coalition_weight(s, m);
      choose = choose * (m - 1 - s) / (s + 1);
    }
    EXPECT_NEAR(total, 1.0, 1e-12) << m;
  }
}

TEST(ExactShapley, GoldenTable) {
  const auto table = golden_table();
  const auto f = table_scorer(table);
  const auto a = exact_shapley(f, tokens(3), kMask);
  const auto oracle = permutation_shapley(table, 3);
  const std::vector<double> paper = {0.32, 0.62, 1.17};
  for (int i = 0; i < 3; ++i) {
    EXPECT_NEAR(a.phi[i], oracle[i], 1e-12);
    EXPECT_NEAR(a.phi[i], paper[i], 0.005);
  }
  EXPECT_NEAR(a.phi0, 0.0, 1e-15);
  EXPECT_NEAR(a.phi0 + a.phi[0] + a.phi[1] + a.phi[2], 2.1, 1e-9);
  EXPECT_EQ(a.budget_used, 8u);
}

TEST(ExactShapley, ConstantScorerIsDummy) {
  FunctionScorer f([](const TokenSequence&) { return 1.75; });
  const auto a = exact_shapley(f, tokens(5), kMask);
  EXPECT_DOUBLE_EQ(a.phi0, 1.75);
  for (double p : a.phi) EXPECT_NEAR(p, 0.0, 1e-12);
}

TEST(ExactShapley, AdditiveScorerRecoversTokenValues) {
  const std::vector<double> v = {0.5, -1.25, 2.0, 0.0, 3.5};
  FunctionScorer f([&](const TokenSequence& s) {
    double total = 0.0;
    for (std::size_t i = 0; i < s.completion.size(); ++i) {
      if (s.completion[i] != kMask) total += v[i];
    }
    return total;
  });
  const auto a = exact_shapley(f, tokens(5), kMask);
  for (int i = 0; i < 5; ++i) EXPECT_NEAR(a.phi[i], v[i], 1e-12);
}

TEST(ExactShapley, EfficiencyAndOracleOnRandomGames) {
  for (int m = 1; m <= 12; ++m) {
    const auto table = random_table(m, 100 + m);
    const auto f = table_scorer(table);
    const auto a = exact_shapley(f, tokens(m), kMask);
    double total = a.phi0;
    for (double p : a.phi) total += p;
    EXPECT_NEAR(total, table.back(), 1e-9) << m;
    EXPECT_EQ(a.budget_used, std::uint64_t{1} << m);
    if (m <= 7) {
      const auto oracle = permutation_shapley(table, m);
      for (int i = 0; i < m; ++i) EXPECT_NEAR(a.phi[i], oracle[i], 1e-10);
    }
  }
}

TEST(ExactShapley, SymmetricPlayersGetEqualCredit) {
  // Tokens 1 and 3 are interchangeable in every coalition.
  FunctionScorer f([](const TokenSequence& s) {
    const auto b = present_bits(s);
    const int sym = ((b >> 1) & 1) + ((b >> 3) & 1);
    return 0.7 * sym + 1.3 * sym * (b & 1) - 0.4 * ((b >> 2) & 1) * sym;
  });
  const auto a = exact_shapley(f, tokens(4), kMask);
  EXPECT_NEAR(a.phi[1], a.phi[3], 1e-9);
}

TEST(ExactShapley, CounterGrowsByExactly2ToTheM) {
  const auto f = table_scorer(random_table(9, 5));
  const auto before = f.eval_count();
  exact_shapley(f, tokens(9), kMask);
  EXPECT_EQ(f.eval_count() - before, 512u);
}

TEST(ExactShapley, OverCapIsCapacityError) {
  FunctionScorer f([](const TokenSequence&) { return 0.0; });
  try {
    exact_shapley(f, tokens(6), kMask, 5);
    FAIL() << "expected CapacityError";
  } catch (const CapacityError& e) {
    EXPECT_NE(std::string(e.what()).find("kernel"), std::string::npos);
  }
}

TEST(KernelShap, FullEnumerationMatchesExact) {
  for (int m = 2; m <= 8; ++m) {
    const auto table = random_table(m, 7 * m);
    const auto f = table_scorer(table);
    const auto k = kernel_shap(f, tokens(m), kMask, std::uint64_t{1} << m, 0.0, 1);
    const auto oracle = permutation_shapley(table, std::min(m, 7));
    const auto exact = exact_shapley(f, tokens(m), kMask);
    for (int i = 0; i < m; ++i) {
      EXPECT_NEAR(k.phi[i], exact.phi[i], 1e-6);
      if (m <= 7) EXPECT_NEAR(k.phi[i], oracle[i], 1e-6);
    }
    EXPECT_NEAR(k.phi0, table[0], 1e-9);
  }
}

TEST(KernelShap, GoldenTableFullEnumeration) {
  const auto f = table_scorer(golden_table());
  const auto k = kernel_shap(f, tokens(3), kMask, 8, 0.0, 0);
  EXPECT_NEAR(k.phi[0], 0.95 / 3.0, 1e-6);
  EXPECT_NEAR(k.phi[1], 1.85 / 3.0, 1e-6);
  EXPECT_NEAR(k.phi[2], 3.5 / 3.0, 1e-6);
}

TEST(KernelShap, ConstantScorerGivesZero) {
  FunctionScorer f([](const TokenSequence&) { return -3.0; });
  for (std::uint64_t budget : {8ull, 20ull, 64ull}) {
    const auto k = kernel_shap(f, tokens(6), kMask, budget, 1e-6, 3);
    for (double p : k.phi) EXPECT_NEAR(p, 0.0, 1e-9);
  }
}

TEST(KernelShap, BudgetBelowMPlus2IsUsageError) {
  FunctionScorer f([](const TokenSequence&) { return 0.0; });
  EXPECT_THROW(kernel_shap(f, tokens(5), kMask, 6, 0.0, 0), UsageError);
}

TEST(KernelShap, SampledRespectsBudgetAndEfficiency) {
  const auto table = random_table(10, 77);
  const auto f = table_scorer(table);
  const auto before = f.eval_count();
  const auto k = kernel_shap(f, tokens(10), kMask, 202, 1e-6, 9);
  EXPECT_LE(f.eval_count() - before, 202u);
  EXPECT_LE(k.budget_used, 202u);
  EXPECT_EQ(k.budget_used, f.eval_count() - before);
  double total = k.phi0;
  for (double p : k.phi) total += p;
  EXPECT_NEAR(total, table.back(), 1e-6);
  ASSERT_TRUE(k.residual.has_value());
}

TEST(KernelShap, SeedDeterminism) {
  const auto f = table_scorer(random_table(9, 1));
  const auto a = kernel_shap(f, tokens(9), kMask, 100, 1e-6, 42);
  const auto b = kernel_shap(f, tokens(9), kMask, 100, 1e-6, 42);
  EXPECT_EQ(a.phi, b.phi);
}

TEST(Lime, ConstantScorerGivesZero) {
  FunctionScorer f([](const TokenSequence&) { return 4.0; });
  const auto a = lime(f, tokens(6), kMask, 40, AttributionKernel::lime_default(6), 1e-6, 2);
  for (double p : a.phi) EXPECT_NEAR(p, 0.0, 1e-9);
}

TEST(Lime, AdditiveScorerSignsRecovered) {
  const std::vector<double> v = {0.8, -0.6, 0.3, -1.1, 0.05, 2.0};
  FunctionScorer f([&](const TokenSequence& s) {
    double total = 0.0;
    for (std::size_t i = 0; i < s.completion.size(); ++i) {
      if (s.completion[i] != kMask) total += v[i];
    }
    return total;
  });
  const auto a = lime(f, tokens(6), kMask, 64, AttributionKernel::lime_default(6), 1e-6, 2);
  for (int i = 0; i < 6; ++i) EXPECT_EQ(std::signbit(a.phi[i]), std::signbit(v[i])) << i;
}

TEST(Lime, WideKernelFullEnumerationIsOrdinaryLeastSquares) {
  const int m = 5;
  const auto table = random_table(m, 31);
  const auto f = table_scorer(table);
  AttributionKernel kernel;
  kernel.kind = AttributionKernel::Kind::kLimeExponential;
  kernel.width = 1e8;
  const auto a = lime(f, tokens(m), kMask, std::uint64_t{1} << m, kernel, 0.0, 0);

  // Unweighted least squares with intercept over all masks.
  const int n = 1 << m;
  Eigen::MatrixXd x(n, m + 1);
  Eigen::VectorXd y(n);
  for (int b = 0; b < n; ++b) {
    x(b, 0) = 1.0;
    for (int i = 0; i < m; ++i) x(b, i + 1) = (b >> i) & 1;
    y(b) = table[b];
  }
  const Eigen::VectorXd beta = x.colPivHouseholderQr().solve(y);
  EXPECT_NEAR(a.phi0, beta(0), 1e-8);
  for (int i = 0; i < m; ++i) EXPECT_NEAR(a.phi[i], beta(i + 1), 1e-8);
}

TEST(Lime, RequiresLimeKernel) {
  FunctionScorer f([](const TokenSequence&) { return 0.0; });
  AttributionKernel k;
  EXPECT_THROW(lime(f, tokens(3), kMask, 8, k, 0.0, 0), UsageError);
}

TEST(QuadraticShapley, SingleTokenIsExact) {
  FunctionScorer f([](const TokenSequence& s) { return s.completion[0] == kMask ? 0.25 : 1.5; });
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto a = quadratic_shapley(f, tokens(1), kMask, seed);
    EXPECT_NEAR(a.phi[0], 1.25, 1e-12);
  }
}

TEST(QuadraticShapley, GoldenTableMeanOverSeeds) {
  const auto f = table_scorer(golden_table());
  std::vector<double> mean(3, 0.0);
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto a = quadratic_shapley(f, tokens(3), kMask, seed);
    for (int i = 0; i < 3; ++i) mean[i] += a.phi[i] / 200.0;
  }
  EXPECT_NEAR(mean[0], 0.32, 0.05);
  EXPECT_NEAR(mean[1], 0.62, 0.05);
  EXPECT_NEAR(mean[2], 1.17, 0.05);
}

TEST(QuadraticShapley, BudgetAtMostMSquaredPlusOne) {
  const auto f = table_scorer(random_table(10, 4));
  const auto before = f.eval_count();
  const auto a = quadratic_shapley(f, tokens(10), kMask, 0);
  EXPECT_LE(f.eval_count() - before, 101u);
  EXPECT_EQ(a.budget_declared, 101u);
  EXPECT_EQ(a.budget_used, f.eval_count() - before);
}

TEST(QuadraticShapley, MonteCarloConvergesAtRootNRate) {
  const int m = 5;
  const auto table = random_table(m, 12);
  const auto f = table_scorer(table);
  const auto exact = permutation_shapley(table, m);
  auto stats = [&](int n, std::uint64_t offset) {
    std::vector<double> sum(m, 0.0), sq(m, 0.0);
    for (int s = 0; s < n; ++s) {
      const auto a = quadratic_shapley(f, tokens(m), kMask, offset + s);
      for (int i = 0; i < m; ++i) {
        sum[i] += a.phi[i];
        sq[i] += a.phi[i] * a.phi[i];
      }
    }
    std::vector<std::pair<double, double>> out;  // mean, standard error
    for (int i = 0; i < m; ++i) {
      const double mu = sum[i] / n;
      const double var = (sq[i] - n * mu * mu) / (n - 1);
      out.push_back({mu, std::sqrt(var / n)});
    }
    return out;
  };
  const auto small = stats(50, 1000);
  const auto large = stats(500, 5000);
  for (int i = 0; i < m; ++i) {
    EXPECT_LE(std::abs(large[i].first - exact[i]), 4.0 * large[i].second + 1e-12) << i;
    if (small[i].second > 1e-9) {
      const double ratio = small[i].second / large[i].second;
      EXPECT_GT(ratio, std::sqrt(10.0) / 1.5) << i;
      EXPECT_LT(ratio, std::sqrt(10.0) * 1.5) << i;
    }
  }
}

TEST(Saliency, LinearBagIsAbsoluteWeight) {
  const auto m = RewardModel::linear_bag(5, {0.0, -1.5, 2.0, 0.25, -0.75});
  const auto a = saliency_credit(m, seq({1}, {1, 4, 2, 0}));
  EXPECT_EQ(a.phi, (std::vector<double>{1.5, 0.75, 2.0, 0.0}));
  EXPECT_EQ(a.method, AttributionMethod::kSaliency);
}

TEST(Saliency, ZeroModelIsZero) {
  const auto m = RewardModel::linear_bag(4, std::vector<double>(4, 0.0));
  const auto a = saliency_credit(m, seq({}, {1, 2, 3}));
  for (double p : a.phi) EXPECT_EQ(p, 0.0);
}

TEST(Saliency, PatternScorerIsUnsupported) {
  const auto m = RewardModel::synthetic_pattern(4, {{{1}, 1.0}});
  EXPECT_THROW(saliency_credit(m, seq({}, {1, 2})), UnsupportedMethodError);
}

TEST(ExternalScores, ReadsRow) {
  TempDir dir;
  std::ofstream(dir / "s.txt") << "0.5 -1 2.25\n";
  const auto a = load_external_scores(dir / "s.txt", seq({}, {1, 2, 3}));
  EXPECT_EQ(a.phi, (std::vector<double>{0.5, -1.0, 2.25}));
  EXPECT_EQ(a.method, AttributionMethod::kExternal);
  EXPECT_FALSE(a.residual.has_value());
}

TEST(ExternalScores, NanIsIngestionError) {
  TempDir dir;
  std::ofstream(dir / "s.txt") << "0.5 nan 2\n";
  EXPECT_THROW(load_external_scores(dir / "s.txt", seq({}, {1, 2, 3})), IngestionError);
}

TEST(ExternalScores, ShortRowNamesExpectedLength) {
  TempDir dir;
  std::ofstream(dir / "s.txt") << "1 2\n";
  try {
    load_external_scores(dir / "s.txt", seq({}, {1, 2, 3}));
    FAIL() << "expected IngestionError";
  } catch (const IngestionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("expected 3"), std::string::npos) << msg;
    EXPECT_NE(msg.find("line 1"), std::string::npos) << msg;
  }
}

TEST(Attribute, EveryMethodStaysWithinDeclaredBudget) {
  const auto model = RewardModel::linear_bag(10, {0.1, -0.2, 0.3, 0.4, -0.5, 0.6, 0.7, -0.8, 0.9, 1.0});
  AttributionSettings settings;
  settings.mask_token = 10;
  for (int m = 1; m <= 9; ++m) {
    const auto x = tokens(m);
    for (auto method : {AttributionMethod::kExactShapley, AttributionMethod::kKernelShap,
                        AttributionMethod::kLime, AttributionMethod::kQuadraticSample}) {
      const auto before = model.eval_count();
      const auto a = attribute(method, model, x, settings, 17);
      const auto used = model.eval_count() - before;
      EXPECT_LE(used, a.budget_declared) << to_string(method) << " M=" << m;
      EXPECT_EQ(used, a.budget_used) << to_string(method) << " M=" << m;
      if (method == AttributionMethod::kExactShapley) {
        EXPECT_EQ(used, std::uint64_t{1} << m);
      }
      if (method == AttributionMethod::kQuadraticSample) {
        EXPECT_LE(used, static_cast<std::uint64_t>(m * m + 1));
      }
    }
  }
}

TEST(Attribute, ExternalIsRejected) {
  const auto model = RewardModel::linear_bag(3, {0.0, 1.0, 2.0});
  AttributionSettings settings;
  settings.mask_token = 3;
  EXPECT_THROW(attribute(AttributionMethod::kExternal, model, seq({}, {1}), settings, 0),
               UsageError);
}

TEST(Attribute, MethodNamesRoundTrip) {
  for (auto method : {AttributionMethod::kExactShapley, AttributionMethod::kKernelShap,
                      AttributionMethod::kLime, AttributionMethod::kQuadraticSample,
                      AttributionMethod::kSaliency, AttributionMethod::kExternal}) {
    EXPECT_EQ(attribution_method_from_string(to_string(method)), method);
  }
  EXPECT_THROW(attribution_method_from_string("attention"), UsageError);
}

TEST(Attribution, JsonRoundTrip) {
  const auto f = table_scorer(golden_table());
  const auto a = kernel_shap(f, tokens(3), kMask, 8, 1e-6, 0);
  const auto b = Attribution::from_json(a.to_json());
  EXPECT_EQ(a.phi, b.phi);
  EXPECT_EQ(a.phi0, b.phi0);
  EXPECT_EQ(a.budget_used, b.budget_used);
  EXPECT_EQ(a.method, b.method);
}
