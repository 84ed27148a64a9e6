#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "xrs/shaping.hpp"

namespace xrs {

// Sorted-gaps map between the (d-1)-simplex and the ordered region of the
// unit cube. Coordinates are the cumulative sums w_0, w_0 + w_1, ...
std::vector<double> simplex_to_coords(const ShapeWeights& w);
ShapeWeights coords_to_simplex(std::vector<double> u);  // sorts `u` first

// Raw scrambled Sobol points in [0, 1)^dim; point i is the same for every n.
std::vector<std::vector<double>> sobol_cube(std::size_t n, std::size_t dim,
                                            std::uint64_t seed);
std::vector<ShapeWeights> sobol_simplex(std::size_t n, std::size_t d,
                                        std::uint64_t seed);

struct Observation {
  ShapeWeights weights;
  double utility = 0.0;
};

enum class KernelKind { kSquaredExponential, kMatern52 };
std::string to_string(KernelKind k);
KernelKind kernel_from_string(const std::string& name);

// Hyperparameters in the utility's own units.
struct GpHyper {
  KernelKind kernel = KernelKind::kMatern52;
  std::vector<double> lengthscales;
  double signal_variance = 1.0;
  double noise_variance = 1e-4;
  double mean = 0.0;

  nlohmann::json to_json() const;
};

struct GpConfig {
  KernelKind kernel = KernelKind::kMatern52;
  std::optional<double> noise_variance;  // fixed when set, fitted otherwise
  int restarts = 8;
  std::uint64_t seed = 0;
};

struct Prediction {
  double mean = 0.0;
  double variance = 0.0;  // latent, excludes observation noise
};

class GpState {
 public:
  // Conditions on fixed hyperparameters. Adds diagonal jitter until the
  // Cholesky factorization succeeds; ConditioningError if it never does.
  GpState(std::vector<Observation> observations, GpHyper hyper);

  Prediction predict(const std::vector<double>& coords) const;
  Prediction predict(const ShapeWeights& w) const;

  const GpHyper& hyper() const { return hyper_; }
  const std::vector<Observation>& observations() const { return observations_; }
  double log_marginal_likelihood() const { return lml_; }
  double jitter() const { return jitter_; }
  std::size_t dims() const { return static_cast<std::size_t>(inputs_.cols()); }

 private:
  double kernel(const Eigen::RowVectorXd& a, const Eigen::RowVectorXd& b) const;

  std::vector<Observation> observations_;
  GpHyper hyper_;
  Eigen::MatrixXd inputs_;
  Eigen::LLT<Eigen::MatrixXd> chol_;
  Eigen::VectorXd alpha_;
  double lml_ = 0.0;
  double jitter_ = 0.0;
};

// Fits hyperparameters by maximizing the log marginal likelihood from a
// seeded set of starting points. Needs >= 2 observations; ConditioningError
// when every input is identical.
GpState fit_gp(const std::vector<Observation>& observations,
               const GpConfig& config = GpConfig{});

// log(phi(z) + z Phi(z)), accurate far into the lower tail.
double log_h(double z);

struct AcquisitionSpec {
  int candidate_count = 512;
  int restarts = 4;  // candidates refined locally

  void validate() const;
};

struct Acquisition {
  ShapeWeights weights;
  double log_ei = 0.0;
  double incumbent = 0.0;
};

// Log expected improvement over the best posterior mean at observed inputs.
double log_expected_improvement(const GpState& gp,
                                const std::vector<double>& coords,
                                double incumbent);
double incumbent_mean(const GpState& gp);

Acquisition acquire(const GpState& gp, const AcquisitionSpec& spec,
                    std::uint64_t seed);

struct BoOptions {
  std::size_t sobol_init = 5;
  GpConfig gp;
  AcquisitionSpec acquisition;
};

// Sobol point `history.size()` during initialization, then GP + log-EI.
ShapeWeights suggest_next(const std::vector<Observation>& history,
                          std::size_t d, std::uint64_t seed,
                          const BoOptions& options = BoOptions{});

// Observed weights with the highest posterior mean (the best observation
// when fewer than two exist).
ShapeWeights best_params(const std::vector<Observation>& history,
                         const GpConfig& config = GpConfig{});

}  // namespace xrs
