#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "xrs/mdp.hpp"
#include "xrs/reward_model.hpp"

namespace xrs {

enum class AttributionMethod {
  kExactShapley,
  kKernelShap,
  kLime,
  kQuadraticSample,
  kSaliency,
  kExternal,
};

std::string to_string(AttributionMethod method);
AttributionMethod attribution_method_from_string(const std::string& name);

// Additive surrogate g(z) = phi0 + sum_i phi_i z_i over the completion tokens.
struct Attribution {
  double phi0 = 0.0;
  std::vector<double> phi;
  AttributionMethod method = AttributionMethod::kExactShapley;
  std::uint64_t budget_declared = 0;
  std::uint64_t budget_used = 0;
  // |phi0 + sum(phi) - f(x)|; unset for methods that never evaluate f(x).
  std::optional<double> residual;
  double regularization = 0.0;

  nlohmann::json to_json() const;
  static Attribution from_json(const nlohmann::json& j);
};

// One entry per completion token; 1 keeps the token, 0 masks it.
using MaskVector = std::vector<std::uint8_t>;

// Replaces masked completion positions with `mask_token`; the prompt and the
// terminated flag carry over unchanged.
TokenSequence reconstruct(const TokenSequence& x, const MaskVector& z,
                          TokenId mask_token);

struct AttributionKernel {
  enum class Kind { kShapley, kLimeExponential };
  Kind kind = Kind::kShapley;
  double width = 1.0;  // LIME only

  static AttributionKernel lime_default(std::size_t num_tokens);
};

// |s|! (M - |s| - 1)! / M!: weight of a coalition of size |s| in the Shapley
// sum for one player.
double shapley_coalition_weight(int size, int num_tokens);

// (M - 1) / (C(M, |z|) |z| (M - |z|)): weight of a coalition in the
// least-squares problem whose solution is the Shapley value. Infinite for the
// empty and full coalitions, which are imposed as constraints instead.
double shapley_kernel_weight(int size, int num_tokens);

// exp(-d^2 / width^2), d = fraction of masked tokens.
double lime_kernel_weight(int size, int num_tokens, double width);

inline constexpr int kDefaultExactCap = 14;

// All 2^M coalitions; budget_used = 2^M.
Attribution exact_shapley(const Scorer& f, const TokenSequence& x,
                          TokenId mask_token, int max_tokens = kDefaultExactCap);

// Weighted least squares with the Shapley kernel, subject to
// phi0 = f(empty) and phi0 + sum(phi) = f(full). Enumerates every coalition
// when budget >= 2^M, otherwise samples coalitions by kernel mass.
Attribution kernel_shap(const Scorer& f, const TokenSequence& x,
                        TokenId mask_token, std::uint64_t budget,
                        double regularization, std::uint64_t seed);

// Weighted ridge regression over uniformly sampled masks (all masks when
// budget >= 2^M) with an exponential Hamming-distance kernel. The fitted
// intercept is reported as phi0.
Attribution lime(const Scorer& f, const TokenSequence& x, TokenId mask_token,
                 std::uint64_t budget, const AttributionKernel& kernel,
                 double regularization, std::uint64_t seed);

// Permutation-sampling Shapley estimate from exactly M random orderings,
// M(M - 1) + 2 scorer calls (declared budget M^2 + 1).
Attribution quadratic_shapley(const Scorer& f, const TokenSequence& x,
                              TokenId mask_token, std::uint64_t seed);

// |d score / d presence| per token for differentiable scorers.
Attribution saliency_credit(const Scorer& f, const TokenSequence& x);

// Line-delimited per-token scores, one line per sequence.
std::vector<Attribution> load_external_scores(
    const std::filesystem::path& path, const std::vector<TokenSequence>& xs);
Attribution load_external_scores(const std::filesystem::path& path,
                                 const TokenSequence& x,
                                 std::size_t record_index = 0);

// Method-independent settings for `attribute`.
struct AttributionSettings {
  TokenId mask_token = 0;
  int exact_cap = kDefaultExactCap;
  std::uint64_t kernel_shap_budget = 0;  // 0: automatic
  std::uint64_t lime_budget = 0;         // 0: automatic
  std::optional<double> lime_width;      // default 0.75 sqrt(M)
  double regularization = 1e-6;
};

// min(2^M, max(M + 2, 2 M^2 + 2)).
std::uint64_t automatic_budget(std::size_t num_tokens);

// Dispatches to the methods above. kExternal is rejected here because it
// needs a record file; use load_external_scores.
Attribution attribute(AttributionMethod method, const Scorer& f,
                      const TokenSequence& x,
                      const AttributionSettings& settings, std::uint64_t seed);

}  // namespace xrs
