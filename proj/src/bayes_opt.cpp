#include "xrs/bayes_opt.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include <boost/random/sobol.hpp>
#include <ceres/ceres.h>

#include "xrs/errors.hpp"
#include "xrs/rng.hpp"

namespace xrs {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

struct Bounds {
  double lo, hi;
};
// Bounds in standardized utility units; inputs live in [0, 1].
constexpr Bounds kLengthscale{-2.996, 0.0};  // log 0.05 .. log 1
constexpr Bounds kSignal{-2.996, 2.996};       // log 0.05 .. log 20
constexpr Bounds kNoise{-6.908, 0.693};       // log 1e-3 .. log 2

double matern52(double r) {
  const double s = std::sqrt(5.0) * r;
  return (1.0 + s + s * s / 3.0) * std::exp(-s);
}

Eigen::MatrixXd coords_matrix(const std::vector<Observation>& obs) {
  const std::size_t q = obs.front().weights.size() - 1;
  Eigen::MatrixXd x(obs.size(), q);
  for (std::size_t i = 0; i < obs.size(); ++i) {
    if (obs[i].weights.size() != q + 1) {
      throw UsageError("observations disagree on simplex dimension");
    }
    if (!std::isfinite(obs[i].utility)) {
      throw NumericError("non-finite utility in observation " + std::to_string(i));
    }
    const auto c = simplex_to_coords(obs[i].weights);
    for (std::size_t k = 0; k < q; ++k) x(i, k) = c[k];
  }
  return x;
}

// Negative log marginal likelihood of standardized targets, with analytic
// gradient in log-hyperparameters and a soft box penalty.
class NegativeLml : public ceres::FirstOrderFunction {
 public:
  NegativeLml(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
              KernelKind kernel, std::optional<double> fixed_noise)
      : x_(x), y_(y), kernel_(kernel), fixed_noise_(fixed_noise) {}

  int NumParameters() const override {
    return static_cast<int>(x_.cols()) + 1 + (fixed_noise_ ? 0 : 1);
  }

  bool Evaluate(const double* p, double* cost, double* gradient) const override {
    const Eigen::Index n = x_.rows(), q = x_.cols();
    Eigen::VectorXd ell(q);
    for (Eigen::Index k = 0; k < q; ++k) ell[k] = std::exp(p[k]);
    const double signal = std::exp(p[q]);
    const double noise = fixed_noise_ ? *fixed_noise_ : std::exp(p[q + 1]);

    Eigen::MatrixXd corr(n, n);
    std::vector<Eigen::MatrixXd> dell(q, Eigen::MatrixXd::Zero(n, n));
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j <= i; ++j) {
        Eigen::VectorXd sq(q);
        for (Eigen::Index k = 0; k < q; ++k) {
          const double d = (x_(i, k) - x_(j, k)) / ell[k];
          sq[k] = d * d;
        }
        const double r2 = sq.sum();
        double c, shared;
        if (kernel_ == KernelKind::kMatern52) {
          const double s = std::sqrt(5.0 * r2);
          c = (1.0 + s + s * s / 3.0) * std::exp(-s);
          shared = (5.0 / 3.0) * (1.0 + s) * std::exp(-s);
        } else {
          c = std::exp(-0.5 * r2);
          shared = c;
        }
        corr(i, j) = corr(j, i) = c;
        for (Eigen::Index k = 0; k < q; ++k) {
          dell[k](i, j) = dell[k](j, i) = signal * shared * sq[k];
        }
      }
    }
    Eigen::MatrixXd kmat = signal * corr;
    kmat.diagonal().array() += noise + 1e-10;
    Eigen::LLT<Eigen::MatrixXd> llt(kmat);
    if (llt.info() != Eigen::Success) return false;
    const Eigen::VectorXd alpha = llt.solve(y_);
    double log_det = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      log_det += 2.0 * std::log(llt.matrixL()(i, i));
    }
    const double lml = -0.5 * y_.dot(alpha) - 0.5 * log_det -
                       0.5 * n * std::log(2.0 * std::numbers::pi);

    double penalty = 0.0;
    std::vector<double> pen_grad(NumParameters(), 0.0);
    for (int k = 0; k < NumParameters(); ++k) {
      const Bounds b = k < q ? kLengthscale : (k == q ? kSignal : kNoise);
      if (p[k] > b.hi) {
        penalty += 10.0 * (p[k] - b.hi) * (p[k] - b.hi);
        pen_grad[k] = 20.0 * (p[k] - b.hi);
      } else if (p[k] < b.lo) {
        penalty += 10.0 * (b.lo - p[k]) * (b.lo - p[k]);
        pen_grad[k] = -20.0 * (b.lo - p[k]);
      }
    }
    *cost = -lml + penalty;
    if (!std::isfinite(*cost)) return false;
    if (gradient) {
      const Eigen::MatrixXd w =
          alpha * alpha.transpose() - llt.solve(Eigen::MatrixXd::Identity(n, n));
      for (Eigen::Index k = 0; k < q; ++k) {
        gradient[k] = -0.5 * (w.cwiseProduct(dell[k])).sum() + pen_grad[k];
      }
      gradient[q] = -0.5 * (w.cwiseProduct(signal * corr)).sum() + pen_grad[q];
      if (!fixed_noise_) {
        gradient[q + 1] = -0.5 * noise * w.trace() + pen_grad[q + 1];
      }
    }
    return true;
  }

 private:
  Eigen::MatrixXd x_;
  Eigen::VectorXd y_;
  KernelKind kernel_;
  std::optional<double> fixed_noise_;
};

double clamp_to(double v, Bounds b) { return std::clamp(v, b.lo, b.hi); }

double sigmoid(double t) { return 1.0 / (1.0 + std::exp(-t)); }

// -log EI in logit coordinates, with a central-difference gradient.
class NegativeLogEi : public ceres::FirstOrderFunction {
 public:
  NegativeLogEi(const GpState& gp, double incumbent)
      : gp_(gp), incumbent_(incumbent) {}

  int NumParameters() const override { return static_cast<int>(gp_.dims()); }

  bool Evaluate(const double* t, double* cost, double* gradient) const override {
    const int q = NumParameters();
    std::vector<double> base(t, t + q);
    *cost = value(base);
    if (!std::isfinite(*cost)) return false;
    if (gradient) {
      constexpr double h = 1e-5;
      for (int k = 0; k < q; ++k) {
        auto up = base, down = base;
        up[k] += h;
        down[k] -= h;
        const double fu = value(up), fd = value(down);
        if (!std::isfinite(fu) || !std::isfinite(fd)) return false;
        gradient[k] = (fu - fd) / (2.0 * h);
      }
    }
    return true;
  }

  double value(const std::vector<double>& t) const {
    std::vector<double> u(t.size());
    for (std::size_t k = 0; k < t.size(); ++k) u[k] = sigmoid(t[k]);
    std::sort(u.begin(), u.end());
    return -log_expected_improvement(gp_, u, incumbent_);
  }

 private:
  const GpState& gp_;
  double incumbent_;
};

}  // namespace

std::vector<double> simplex_to_coords(const ShapeWeights& w) {
  std::vector<double> c(w.size() - 1);
  double acc = 0.0;
  for (std::size_t k = 0; k + 1 < w.size(); ++k) {
    acc += w[k];
    c[k] = std::min(acc, 1.0);
  }
  return c;
}

ShapeWeights coords_to_simplex(std::vector<double> u) {
  for (double& v : u) {
    if (!std::isfinite(v)) throw NumericError("non-finite simplex coordinate");
    v = std::clamp(v, 0.0, 1.0);
  }
  std::sort(u.begin(), u.end());
  std::vector<double> w(u.size() + 1);
  double prev = 0.0;
  for (std::size_t k = 0; k < u.size(); ++k) {
    w[k] = u[k] - prev;
    prev = u[k];
  }
  w.back() = 1.0 - prev;
  return ShapeWeights(std::move(w));
}

std::vector<std::vector<double>> sobol_cube(std::size_t n, std::size_t dim,
                                            std::uint64_t seed) {
  if (dim < 1) throw UsageError("sobol dimension must be >= 1");
  boost::random::sobol engine(dim);
  // Digital shift: XOR every coordinate with a seeded mask. Preserves the
  // net structure while decorrelating seeds.
  Rng rng(seed);
  std::vector<std::uint64_t> mask(dim);
  for (auto& m : mask) m = rng.next_u64();
  std::vector<std::vector<double>> out(n, std::vector<double>(dim));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < dim; ++k) {
      const std::uint64_t x = static_cast<std::uint64_t>(engine()) ^ mask[k];
      out[i][k] = static_cast<double>(x >> 11) * 0x1.0p-53;
    }
  }
  return out;
}

std::vector<ShapeWeights> sobol_simplex(std::size_t n, std::size_t d,
                                        std::uint64_t seed) {
  if (n < 1) throw UsageError("sobol_simplex needs n >= 1");
  if (d < 2) throw UsageError("sobol_simplex needs d >= 2");
  std::vector<ShapeWeights> out;
  out.reserve(n);
  for (auto& u : sobol_cube(n, d - 1, seed)) out.push_back(coords_to_simplex(u));
  return out;
}

std::string to_string(KernelKind k) {
  return k == KernelKind::kMatern52 ? "matern-5/2" : "squared-exponential";
}

KernelKind kernel_from_string(const std::string& name) {
  if (name == "matern-5/2" || name == "matern52") return KernelKind::kMatern52;
  if (name == "squared-exponential" || name == "se") {
    return KernelKind::kSquaredExponential;
  }
  throw UsageError("unknown kernel: " + name);
}

nlohmann::json GpHyper::to_json() const {
  return {{"kernel", to_string(kernel)},
          {"lengthscales", lengthscales},
          {"signal_variance", signal_variance},
          {"noise_variance", noise_variance},
          {"mean", mean}};
}

GpState::GpState(std::vector<Observation> observations, GpHyper hyper)
    : observations_(std::move(observations)), hyper_(std::move(hyper)) {
  if (observations_.empty()) throw UsageError("GP needs at least one observation");
  inputs_ = coords_matrix(observations_);
  const Eigen::Index n = inputs_.rows();
  if (hyper_.lengthscales.size() != static_cast<std::size_t>(inputs_.cols())) {
    throw UsageError("GP lengthscale count does not match input dimension");
  }
  if (!(hyper_.signal_variance > 0.0) || !(hyper_.noise_variance >= 0.0)) {
    throw UsageError("GP variances must be positive");
  }
  for (double l : hyper_.lengthscales) {
    if (!(l > 0.0) || !std::isfinite(l)) {
      throw UsageError("GP lengthscales must be positive and finite");
    }
  }

  Eigen::MatrixXd kmat(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j <= i; ++j) {
      kmat(i, j) = kmat(j, i) = kernel(inputs_.row(i), inputs_.row(j));
    }
  }
  kmat.diagonal().array() += hyper_.noise_variance;
  const double base = 1e-12 * hyper_.signal_variance;
  for (jitter_ = 0.0;; jitter_ = jitter_ == 0.0 ? base : jitter_ * 10.0) {
    if (jitter_ > 1e-2 * hyper_.signal_variance) {
      throw ConditioningError("GP kernel matrix is not positive definite");
    }
    Eigen::MatrixXd attempt = kmat;
    attempt.diagonal().array() += jitter_;
    chol_.compute(attempt);
    if (chol_.info() == Eigen::Success) break;
  }

  Eigen::VectorXd resid(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    resid[i] = observations_[i].utility - hyper_.mean;
  }
  alpha_ = chol_.solve(resid);
  double log_det = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    log_det += 2.0 * std::log(chol_.matrixL()(i, i));
  }
  lml_ = -0.5 * resid.dot(alpha_) - 0.5 * log_det -
         0.5 * n * std::log(2.0 * std::numbers::pi);
}

double GpState::kernel(const Eigen::RowVectorXd& a,
                       const Eigen::RowVectorXd& b) const {
  double r2 = 0.0;
  for (Eigen::Index k = 0; k < a.size(); ++k) {
    const double d = (a[k] - b[k]) / hyper_.lengthscales[k];
    r2 += d * d;
  }
  const double c = hyper_.kernel == KernelKind::kMatern52
                       ? matern52(std::sqrt(r2))
                       : std::exp(-0.5 * r2);
  return hyper_.signal_variance * c;
}

Prediction GpState::predict(const std::vector<double>& coords) const {
  if (coords.size() != dims()) throw UsageError("GP query has wrong dimension");
  Eigen::RowVectorXd x(coords.size());
  for (std::size_t k = 0; k < coords.size(); ++k) x[k] = coords[k];
  Eigen::VectorXd kstar(inputs_.rows());
  for (Eigen::Index i = 0; i < inputs_.rows(); ++i) {
    kstar[i] = kernel(x, inputs_.row(i));
  }
  Prediction p;
  p.mean = hyper_.mean + kstar.dot(alpha_);
  const Eigen::VectorXd v = chol_.matrixL().solve(kstar);
  p.variance = std::max(0.0, hyper_.signal_variance - v.squaredNorm());
  return p;
}

Prediction GpState::predict(const ShapeWeights& w) const {
  return predict(simplex_to_coords(w));
}

GpState fit_gp(const std::vector<Observation>& observations,
               const GpConfig& config) {
  if (observations.size() < 2) throw UsageError("fit_gp needs >= 2 observations");
  const Eigen::MatrixXd x = coords_matrix(observations);
  bool distinct = false;
  for (Eigen::Index i = 1; i < x.rows() && !distinct; ++i) {
    distinct = (x.row(i) - x.row(0)).cwiseAbs().maxCoeff() > 0.0;
  }
  if (!distinct) throw ConditioningError("all observed inputs are identical");
  if (config.restarts < 1) throw UsageError("fit_gp needs restarts >= 1");
  if (config.noise_variance && !(*config.noise_variance >= 0.0)) {
    throw UsageError("noise_variance must be >= 0");
  }

  const Eigen::Index n = x.rows(), q = x.cols();
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) y[i] = observations[i].utility;
  const double mean = y.mean();
  const double sd = std::sqrt((y.array() - mean).square().sum() / n);
  const double scale = sd > 1e-300 ? sd : 1.0;
  const Eigen::VectorXd ys = (y.array() - mean) / scale;
  std::optional<double> fixed;
  if (config.noise_variance) fixed = *config.noise_variance / (scale * scale);

  NegativeLml objective_impl(x, ys, config.kernel, fixed);
  const int np = objective_impl.NumParameters();
  ceres::GradientProblem problem(
      new NegativeLml(x, ys, config.kernel, fixed));
  ceres::GradientProblemSolver::Options options;
  options.logging_type = ceres::SILENT;
  options.line_search_interpolation_type = ceres::BISECTION;
  options.max_num_iterations = 100;

  Rng rng(config.seed);
  std::vector<double> best;
  double best_cost = std::numeric_limits<double>::infinity();
  for (int r = 0; r < config.restarts; ++r) {
    std::vector<double> p(np);
    for (Eigen::Index k = 0; k < q; ++k) {
      p[k] = r == 0 ? std::log(0.3) : rng.uniform(kLengthscale.lo, kLengthscale.hi);
    }
    p[q] = r == 0 ? 0.0 : rng.uniform(kSignal.lo, kSignal.hi);
    if (!fixed) p[q + 1] = r == 0 ? std::log(1e-2) : rng.uniform(kNoise.lo, kNoise.hi);

    double cost;
    if (!objective_impl.Evaluate(p.data(), &cost, nullptr)) continue;
    ceres::GradientProblemSolver::Summary summary;
    ceres::Solve(options, problem, p.data(), &summary);
    if (objective_impl.Evaluate(p.data(), &cost, nullptr) && cost < best_cost) {
      best_cost = cost;
      best = p;
    }
  }
  if (best.empty()) throw ConditioningError("GP likelihood is undefined at every start");

  GpHyper hyper;
  hyper.kernel = config.kernel;
  for (Eigen::Index k = 0; k < q; ++k) {
    hyper.lengthscales.push_back(std::exp(clamp_to(best[k], kLengthscale)));
  }
  hyper.signal_variance = std::exp(clamp_to(best[q], kSignal)) * scale * scale;
  hyper.noise_variance = fixed ? *config.noise_variance
                               : std::exp(clamp_to(best[q + 1], kNoise)) * scale * scale;
  hyper.mean = mean;
  return GpState(observations, hyper);
}

double log_h(double z) {
  if (z > -8.0) {
    const double pdf = std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
    const double cdf = 0.5 * std::erfc(-z / std::sqrt(2.0));
    return std::log(pdf + z * cdf);
  }
  // Asymptotic expansion of the Mills ratio for the far lower tail.
  const double z2 = z * z;
  const double series =
      1.0 - 3.0 / z2 + 15.0 / (z2 * z2) - 105.0 / (z2 * z2 * z2) +
      945.0 / (z2 * z2 * z2 * z2);
  return -0.5 * z2 - 0.5 * std::log(2.0 * std::numbers::pi) - 2.0 * std::log(-z) +
         std::log(series);
}

double log_expected_improvement(const GpState& gp,
                                const std::vector<double>& coords,
                                double incumbent) {
  const Prediction p = gp.predict(coords);
  const double sigma = std::sqrt(p.variance);
  if (sigma <= 1e-12 * std::sqrt(gp.hyper().signal_variance)) {
    const double gain = p.mean - incumbent;
    return gain > 0.0 ? std::log(gain) : kNegInf;
  }
  return std::log(sigma) + log_h((p.mean - incumbent) / sigma);
}

double incumbent_mean(const GpState& gp) {
  double best = kNegInf;
  for (const auto& o : gp.observations()) best = std::max(best, gp.predict(o.weights).mean);
  return best;
}

void AcquisitionSpec::validate() const {
  if (candidate_count < 1) throw UsageError("candidate_count must be >= 1");
  if (restarts < 0) throw UsageError("acquisition restarts must be >= 0");
}

Acquisition acquire(const GpState& gp, const AcquisitionSpec& spec,
                    std::uint64_t seed) {
  spec.validate();
  const std::size_t q = gp.dims();
  const double incumbent = incumbent_mean(gp);
  Rng rng(seed);

  struct Candidate {
    std::vector<double> u;
    double value;
  };
  std::vector<Candidate> candidates(spec.candidate_count);
  for (auto& c : candidates) {
    c.u.resize(q);
    for (double& v : c.u) v = rng.uniform();
    std::sort(c.u.begin(), c.u.end());
    c.value = log_expected_improvement(gp, c.u, incumbent);
  }
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const Candidate& a, const Candidate& b) { return a.value > b.value; });

  Candidate best = candidates.front();
  const NegativeLogEi local(gp, incumbent);
  ceres::GradientProblem problem(new NegativeLogEi(gp, incumbent));
  ceres::GradientProblemSolver::Options options;
  options.logging_type = ceres::SILENT;
  options.line_search_interpolation_type = ceres::BISECTION;
  options.max_num_iterations = 30;
  const std::size_t refine =
      std::min<std::size_t>(static_cast<std::size_t>(spec.restarts), candidates.size());
  for (std::size_t r = 0; r < refine; ++r) {
    if (!std::isfinite(candidates[r].value)) break;
    std::vector<double> t(q);
    for (std::size_t k = 0; k < q; ++k) {
      const double u = std::clamp(candidates[r].u[k], 1e-9, 1.0 - 1e-9);
      t[k] = std::log(u / (1.0 - u));
    }
    ceres::GradientProblemSolver::Summary summary;
    ceres::Solve(options, problem, t.data(), &summary);
    const double value = -local.value(t);
    if (value > best.value) {
      std::vector<double> u(q);
      for (std::size_t k = 0; k < q; ++k) u[k] = sigmoid(t[k]);
      std::sort(u.begin(), u.end());
      best = {u, value};
    }
  }
  return Acquisition{coords_to_simplex(best.u), best.value, incumbent};
}

ShapeWeights suggest_next(const std::vector<Observation>& history, std::size_t d,
                          std::uint64_t seed, const BoOptions& options) {
  if (d < 2) throw UsageError("suggest_next needs d >= 2");
  for (const auto& o : history) {
    if (o.weights.size() != d) throw UsageError("trial weights have wrong dimension");
  }
  const std::size_t n = history.size();
  if (n < options.sobol_init || n < 2) return sobol_simplex(n + 1, d, seed)[n];
  GpConfig gp_config = options.gp;
  gp_config.seed = derive_seed(seed, 2 * n);
  const GpState gp = fit_gp(history, gp_config);
  return acquire(gp, options.acquisition, derive_seed(seed, 2 * n + 1)).weights;
}

ShapeWeights best_params(const std::vector<Observation>& history,
                         const GpConfig& config) {
  if (history.empty()) throw UsageError("best_params needs at least one trial");
  auto best_observed = std::max_element(
      history.begin(), history.end(),
      [](const Observation& a, const Observation& b) { return a.utility < b.utility; });
  if (history.size() < 2) return best_observed->weights;
  std::optional<GpState> gp;
  try {
    gp.emplace(fit_gp(history, config));
  } catch (const ConditioningError&) {
    return best_observed->weights;
  }
  std::size_t arg = 0;
  double top = kNegInf;
  for (std::size_t i = 0; i < history.size(); ++i) {
    const double m = gp->predict(history[i].weights).mean;
    if (m > top) {
      top = m;
      arg = i;
    }
  }
  return history[arg].weights;
}

}  // namespace xrs
