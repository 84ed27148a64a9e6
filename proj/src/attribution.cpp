#include "xrs/attribution.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>

#include "xrs/errors.hpp"
#include "xrs/io.hpp"
#include "xrs/rng.hpp"

namespace xrs {

namespace {

double binomial(int n, int k) {
  if (k < 0 || k > n) return 0.0;
  k = std::min(k, n - k);
  double c = 1.0;
  for (int i = 1; i <= k; ++i) c = c * (n - k + i) / i;
  return c;
}

std::size_t popcount(const MaskVector& z) {
  return static_cast<std::size_t>(std::count(z.begin(), z.end(), 1));
}

MaskVector mask_from_bits(std::uint64_t bits, std::size_t m) {
  MaskVector z(m);
  for (std::size_t i = 0; i < m; ++i) z[i] = (bits >> i) & 1U;
  return z;
}

double value_of(const Scorer& f, const TokenSequence& x, const MaskVector& z,
                TokenId mask_token) {
  return f.score(reconstruct(x, z, mask_token));
}

void require_tokens(const TokenSequence& x) {
  if (x.completion.empty()) {
    throw UsageError("attribution needs at least one completion token");
  }
}

void require_budget(std::uint64_t budget, std::size_t m) {
  if (budget < m + 2) {
    throw UsageError("budget " + std::to_string(budget) + " below M + 2 = " +
                     std::to_string(m + 2));
  }
}

// True when every coalition fits in the budget.
bool enumerable(std::uint64_t budget, std::size_t m) {
  return m < 63 && budget >= (std::uint64_t{1} << m);
}

struct Design {
  std::vector<MaskVector> masks;
  std::vector<double> weights;
  std::vector<double> values;
};

// Distinct draws with multiplicities as weights; stops at `target` distinct
// coalitions or after a bounded number of draws.
template <typename Draw>
std::map<MaskVector, double> draw_distinct(std::uint64_t target, Draw draw) {
  std::map<MaskVector, double> counts;
  const std::uint64_t max_draws = 50 * target + 100;
  for (std::uint64_t d = 0; d < max_draws && counts.size() < target; ++d) {
    counts[draw()] += 1.0;
  }
  return counts;
}

void fail_singular(const char* method) {
  throw NumericError(std::string(method) +
                     ": singular design matrix; increase the budget or the "
                     "regularization");
}

}  // namespace

std::string to_string(AttributionMethod method) {
  switch (method) {
    case AttributionMethod::kExactShapley: return "exact-shapley";
    case AttributionMethod::kKernelShap: return "kernel-shap";
    case AttributionMethod::kLime: return "lime";
    case AttributionMethod::kQuadraticSample: return "quadratic-sample";
    case AttributionMethod::kSaliency: return "saliency";
    case AttributionMethod::kExternal: return "external";
  }
  return "unknown";
}

AttributionMethod attribution_method_from_string(const std::string& name) {
  for (auto m : {AttributionMethod::kExactShapley, AttributionMethod::kKernelShap,
                 AttributionMethod::kLime, AttributionMethod::kQuadraticSample,
                 AttributionMethod::kSaliency, AttributionMethod::kExternal}) {
    if (to_string(m) == name) return m;
  }
  throw UsageError("unknown attribution method '" + name + "'");
}

nlohmann::json Attribution::to_json() const {
  nlohmann::json j = {{"method", to_string(method)},
                      {"phi0", phi0},
                      {"phi", phi},
                      {"budget_declared", budget_declared},
                      {"budget_used", budget_used},
                      {"regularization", regularization}};
  j["residual"] = residual ? nlohmann::json(*residual) : nlohmann::json(nullptr);
  return j;
}

Attribution Attribution::from_json(const nlohmann::json& j) {
  Attribution a;
  a.method = attribution_method_from_string(j.at("method").get<std::string>());
  a.phi0 = j.at("phi0").get<double>();
  a.phi = j.at("phi").get<std::vector<double>>();
  a.budget_declared = j.value("budget_declared", std::uint64_t{0});
  a.budget_used = j.value("budget_used", std::uint64_t{0});
  a.regularization = j.value("regularization", 0.0);
  if (j.contains("residual") && !j.at("residual").is_null()) {
    a.residual = j.at("residual").get<double>();
  }
  return a;
}

TokenSequence reconstruct(const TokenSequence& x, const MaskVector& z,
                          TokenId mask_token) {
  if (z.size() != x.completion.size()) {
    throw UsageError("mask length " + std::to_string(z.size()) +
                     " does not match completion length " +
                     std::to_string(x.completion.size()));
  }
  TokenSequence out = x;
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (!z[i]) out.completion[i] = mask_token;
  }
  return out;
}

AttributionKernel AttributionKernel::lime_default(std::size_t num_tokens) {
  return {Kind::kLimeExponential, 0.75 * std::sqrt(static_cast<double>(num_tokens))};
}

double shapley_coalition_weight(int size, int num_tokens) {
  if (size < 0 || size >= num_tokens) return 0.0;
  return 1.0 / (num_tokens * binomial(num_tokens - 1, size));
}

double shapley_kernel_weight(int size, int num_tokens) {
  if (size <= 0 || size >= num_tokens) {
    return std::numeric_limits<double>::infinity();
  }
  return (num_tokens - 1.0) /
         (binomial(num_tokens, size) * size * (num_tokens - size));
}

double lime_kernel_weight(int size, int num_tokens, double width) {
  const double d = static_cast<double>(num_tokens - size) / num_tokens;
  return std::exp(-(d * d) / (width * width));
}

Attribution exact_shapley(const Scorer& f, const TokenSequence& x,
                          TokenId mask_token, int max_tokens) {
  require_tokens(x);
  const std::size_t m = x.completion.size();
  if (static_cast<int>(m) > max_tokens) {
    throw CapacityError("exact Shapley needs 2^" + std::to_string(m) +
                        " evaluations, above the cap of 2^" +
                        std::to_string(max_tokens) + "; use kernel-shap");
  }
  const std::uint64_t n = std::uint64_t{1} << m;
  std::vector<double> v(n);
  for (std::uint64_t bits = 0; bits < n; ++bits) {
    v[bits] = value_of(f, x, mask_from_bits(bits, m), mask_token);
  }
  std::vector<double> weight(m);
  for (std::size_t s = 0; s < m; ++s) {
    weight[s] = shapley_coalition_weight(static_cast<int>(s), static_cast<int>(m));
  }

  Attribution out;
  out.method = AttributionMethod::kExactShapley;
  out.phi0 = v[0];
  out.phi.assign(m, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const std::uint64_t bit = std::uint64_t{1} << i;
    for (std::uint64_t s = 0; s < n; ++s) {
      if (s & bit) continue;
      out.phi[i] += weight[std::popcount(s)] * (v[s | bit] - v[s]);
    }
  }
  out.budget_declared = n;
  out.budget_used = n;
  out.residual = 0.0;
  return out;
}

Attribution kernel_shap(const Scorer& f, const TokenSequence& x,
                        TokenId mask_token, std::uint64_t budget,
                        double regularization, std::uint64_t seed) {
  require_tokens(x);
  const std::size_t m = x.completion.size();
  require_budget(budget, m);
  if (!(regularization >= 0.0)) throw UsageError("regularization must be >= 0");

  const double v_empty = value_of(f, x, MaskVector(m, 0), mask_token);
  const double v_full = value_of(f, x, MaskVector(m, 1), mask_token);
  std::uint64_t used = 2;

  Design design;
  if (enumerable(budget, m)) {
    const std::uint64_t n = std::uint64_t{1} << m;
    for (std::uint64_t bits = 1; bits + 1 < n; ++bits) {
      design.masks.push_back(mask_from_bits(bits, m));
      design.weights.push_back(
          shapley_kernel_weight(std::popcount(bits), static_cast<int>(m)));
    }
  } else {
    // Coalition size s drawn with probability ∝ (M-1) / (s (M-s)), then a
    // uniform subset of that size; weights are the draw multiplicities.
    std::vector<double> size_mass(m, 0.0);
    for (std::size_t s = 1; s < m; ++s) {
      size_mass[s] = (m - 1.0) / (static_cast<double>(s) * (m - s));
    }
    Rng rng(seed);
    std::vector<std::size_t> order(m);
    auto counts = draw_distinct(budget - 2, [&] {
      const std::size_t s = rng.categorical(size_mass);
      std::iota(order.begin(), order.end(), 0);
      for (std::size_t k = 0; k < s; ++k) {
        std::swap(order[k], order[k + rng.index(m - k)]);
      }
      MaskVector z(m, 0);
      for (std::size_t k = 0; k < s; ++k) z[order[k]] = 1;
      return z;
    });
    for (auto& [z, c] : counts) {
      design.masks.push_back(z);
      design.weights.push_back(c);
    }
  }
  for (const auto& z : design.masks) {
    design.values.push_back(value_of(f, x, z, mask_token));
  }
  used += design.masks.size();

  // KKT system of min sum w (y - z.phi)^2 + lambda |phi|^2 s.t. 1.phi = delta.
  const Eigen::Index dim = static_cast<Eigen::Index>(m);
  Eigen::MatrixXd kkt = Eigen::MatrixXd::Zero(dim + 1, dim + 1);
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(dim + 1);
  for (std::size_t r = 0; r < design.masks.size(); ++r) {
    const auto& z = design.masks[r];
    const double w = design.weights[r];
    const double y = design.values[r] - v_empty;
    for (Eigen::Index i = 0; i < dim; ++i) {
      if (!z[i]) continue;
      rhs(i) += w * y;
      for (Eigen::Index j = 0; j < dim; ++j) {
        if (z[j]) kkt(i, j) += w;
      }
    }
  }
  for (Eigen::Index i = 0; i < dim; ++i) {
    kkt(i, i) += regularization;
    kkt(i, dim) = 1.0;
    kkt(dim, i) = 1.0;
  }
  rhs(dim) = v_full - v_empty;

  Eigen::FullPivLU<Eigen::MatrixXd> lu(kkt);
  lu.setThreshold(1e-12);
  if (!lu.isInvertible()) fail_singular("kernel-shap");
  const Eigen::VectorXd sol = lu.solve(rhs);
  if (!sol.allFinite()) fail_singular("kernel-shap");

  Attribution out;
  out.method = AttributionMethod::kKernelShap;
  out.phi0 = v_empty;
  out.phi.assign(sol.data(), sol.data() + dim);
  out.budget_declared = budget;
  out.budget_used = used;
  out.regularization = regularization;
  out.residual = std::abs(
      v_empty + std::accumulate(out.phi.begin(), out.phi.end(), 0.0) - v_full);
  return out;
}

Attribution lime(const Scorer& f, const TokenSequence& x, TokenId mask_token,
                 std::uint64_t budget, const AttributionKernel& kernel,
                 double regularization, std::uint64_t seed) {
  require_tokens(x);
  const std::size_t m = x.completion.size();
  if (kernel.kind != AttributionKernel::Kind::kLimeExponential) {
    throw UsageError("lime requires the lime-exponential kernel");
  }
  if (!(kernel.width > 0.0)) throw UsageError("kernel width must be positive");
  require_budget(budget, m);
  if (!(regularization >= 0.0)) throw UsageError("regularization must be >= 0");

  Design design;
  if (enumerable(budget, m)) {
    const std::uint64_t n = std::uint64_t{1} << m;
    for (std::uint64_t bits = 0; bits < n; ++bits) {
      design.masks.push_back(mask_from_bits(bits, m));
      design.weights.push_back(1.0);
    }
  } else {
    // The unperturbed input is always the first sample.
    std::map<MaskVector, double> counts;
    counts[MaskVector(m, 1)] = 1.0;
    Rng rng(seed);
    auto sampled = draw_distinct(budget - 1, [&] {
      MaskVector z(m);
      for (auto& bit : z) bit = rng.bernoulli(0.5) ? 1 : 0;
      return z;
    });
    for (auto& [z, c] : sampled) counts[z] += c;
    for (auto& [z, c] : counts) {
      design.masks.push_back(z);
      design.weights.push_back(c);
    }
  }
  double v_full = std::numeric_limits<double>::quiet_NaN();
  for (std::size_t r = 0; r < design.masks.size(); ++r) {
    const auto& z = design.masks[r];
    design.values.push_back(value_of(f, x, z, mask_token));
    const int size = static_cast<int>(popcount(z));
    design.weights[r] *= lime_kernel_weight(size, static_cast<int>(m), kernel.width);
    if (size == static_cast<int>(m)) v_full = design.values.back();
  }

  // Column 0 is the unpenalized intercept.
  const Eigen::Index dim = static_cast<Eigen::Index>(m) + 1;
  Eigen::MatrixXd normal = Eigen::MatrixXd::Zero(dim, dim);
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(dim);
  Eigen::VectorXd row(dim);
  for (std::size_t r = 0; r < design.masks.size(); ++r) {
    row(0) = 1.0;
    for (std::size_t i = 0; i < m; ++i) row(i + 1) = design.masks[r][i];
    normal.noalias() += design.weights[r] * row * row.transpose();
    rhs.noalias() += design.weights[r] * design.values[r] * row;
  }
  for (Eigen::Index i = 1; i < dim; ++i) normal(i, i) += regularization;

  Eigen::FullPivLU<Eigen::MatrixXd> lu(normal);
  lu.setThreshold(1e-12);
  if (!lu.isInvertible()) fail_singular("lime");
  const Eigen::VectorXd sol = lu.solve(rhs);
  if (!sol.allFinite()) fail_singular("lime");

  Attribution out;
  out.method = AttributionMethod::kLime;
  out.phi0 = sol(0);
  out.phi.assign(sol.data() + 1, sol.data() + dim);
  out.budget_declared = budget;
  out.budget_used = design.masks.size();
  out.regularization = regularization;
  out.residual = std::abs(
      out.phi0 + std::accumulate(out.phi.begin(), out.phi.end(), 0.0) - v_full);
  return out;
}

Attribution quadratic_shapley(const Scorer& f, const TokenSequence& x,
                              TokenId mask_token, std::uint64_t seed) {
  require_tokens(x);
  const std::size_t m = x.completion.size();
  const double v_empty = value_of(f, x, MaskVector(m, 0), mask_token);
  const double v_full = value_of(f, x, MaskVector(m, 1), mask_token);
  std::uint64_t used = 2;

  Rng rng(seed);
  std::vector<std::size_t> order(m);
  std::vector<double> phi(m, 0.0);
  for (std::size_t p = 0; p < m; ++p) {
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    MaskVector z(m, 0);
    double prev = v_empty;
    for (std::size_t k = 0; k < m; ++k) {
      z[order[k]] = 1;
      double cur = v_full;
      if (k + 1 < m) {
        cur = value_of(f, x, z, mask_token);
        ++used;
      }
      phi[order[k]] += cur - prev;
      prev = cur;
    }
  }
  for (double& p : phi) p /= static_cast<double>(m);

  Attribution out;
  out.method = AttributionMethod::kQuadraticSample;
  out.phi0 = v_empty;
  out.phi = std::move(phi);
  out.budget_declared = static_cast<std::uint64_t>(m) * m + 1;
  out.budget_used = used;
  out.residual = std::abs(
      v_empty + std::accumulate(out.phi.begin(), out.phi.end(), 0.0) - v_full);
  return out;
}

Attribution saliency_credit(const Scorer& f, const TokenSequence& x) {
  if (!f.differentiable()) {
    throw UnsupportedMethodError("saliency needs a differentiable scorer; '" +
                                 f.kind_name() + "' is not");
  }
  Attribution out;
  out.method = AttributionMethod::kSaliency;
  out.phi = f.presence_gradient(x);
  for (double& g : out.phi) g = std::abs(g);
  return out;
}

std::vector<Attribution> load_external_scores(
    const std::filesystem::path& path, const std::vector<TokenSequence>& xs) {
  std::ifstream in(path);
  if (!in) throw IngestionError("cannot open " + path.string());
  std::vector<Attribution> out;
  std::string line;
  std::size_t line_no = 0;
  while (out.size() < xs.size() && std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto& x = xs[out.size()];
    Attribution a;
    a.method = AttributionMethod::kExternal;
    a.phi = parse_reals(line, line_no);
    if (a.phi.size() != x.completion.size()) {
      throw IngestionError("line " + std::to_string(line_no) + ": expected " +
                           std::to_string(x.completion.size()) +
                           " scores, got " + std::to_string(a.phi.size()));
    }
    out.push_back(std::move(a));
  }
  if (out.size() < xs.size()) {
    throw IngestionError(path.string() + ": expected " +
                         std::to_string(xs.size()) + " records, found " +
                         std::to_string(out.size()));
  }
  return out;
}

Attribution load_external_scores(const std::filesystem::path& path,
                                 const TokenSequence& x,
                                 std::size_t record_index) {
  std::ifstream in(path);
  if (!in) throw IngestionError("cannot open " + path.string());
  std::string line;
  std::size_t line_no = 0;
  std::size_t record = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    if (record++ != record_index) continue;
    Attribution a;
    a.method = AttributionMethod::kExternal;
    a.phi = parse_reals(line, line_no);
    if (a.phi.size() != x.completion.size()) {
      throw IngestionError("line " + std::to_string(line_no) + ": expected " +
                           std::to_string(x.completion.size()) +
                           " scores, got " + std::to_string(a.phi.size()));
    }
    return a;
  }
  throw IngestionError(path.string() + ": no record " +
                       std::to_string(record_index));
}

std::uint64_t automatic_budget(std::size_t num_tokens) {
  const std::uint64_t m = num_tokens;
  std::uint64_t budget = 2 * m * m + 2;
  if (m < 63) budget = std::min(budget, std::uint64_t{1} << m);
  return std::max(budget, m + 2);
}

Attribution attribute(AttributionMethod method, const Scorer& f,
                      const TokenSequence& x,
                      const AttributionSettings& settings, std::uint64_t seed) {
  const std::size_t m = x.completion.size();
  switch (method) {
    case AttributionMethod::kExactShapley:
      return exact_shapley(f, x, settings.mask_token, settings.exact_cap);
    case AttributionMethod::kKernelShap: {
      const auto budget = settings.kernel_shap_budget
                              ? settings.kernel_shap_budget
                              : automatic_budget(m);
      return kernel_shap(f, x, settings.mask_token, budget,
                         settings.regularization, seed);
    }
    case AttributionMethod::kLime: {
      const auto budget =
          settings.lime_budget ? settings.lime_budget : automatic_budget(m);
      auto kernel = AttributionKernel::lime_default(m);
      if (settings.lime_width) kernel.width = *settings.lime_width;
      return lime(f, x, settings.mask_token, budget, kernel,
                  settings.regularization, seed);
    }
    case AttributionMethod::kQuadraticSample:
      return quadratic_shapley(f, x, settings.mask_token, seed);
    case AttributionMethod::kSaliency:
      return saliency_credit(f, x);
    case AttributionMethod::kExternal:
      throw UsageError(
          "external scores are read from a record file, not computed");
  }
  throw UsageError("unknown attribution method");
}

}  // namespace xrs
