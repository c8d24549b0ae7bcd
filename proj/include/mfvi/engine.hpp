#pragma once

// Generic mean-field machinery: the factor collection, the coordinate ascent
// driver, ELBO bookkeeping and the bivariate-Gaussian mean-field diagnostic.

#include <Eigen/Core>

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mfvi/expfam.hpp"

namespace mfvi {

/// q(z) = prod_j q_j(z_j), one labelled factor per latent variable or block.
struct MeanFieldState {
  std::vector<std::string> labels;
  std::vector<ExpFamParam> factors;

  void add(std::string label, ExpFamParam factor);
  [[nodiscard]] std::size_t size() const noexcept { return factors.size(); }
  [[nodiscard]] std::size_t index_of(std::string_view label) const;
  [[nodiscard]] const ExpFamParam &at(std::string_view label) const;

  bool operator==(const MeanFieldState &) const = default;
};

enum class InitStrategy { Prior, DataCalibrated };

[[nodiscard]] InitStrategy parse_init_strategy(std::string_view name);
[[nodiscard]] std::string_view init_strategy_name(InitStrategy strategy);

struct FitConfig {
  std::size_t max_iters{1000};
  double tol{1e-8}; // relative ELBO change |dE| / (1 + |E|)
  std::uint64_t seed{0};
  double heldout_fraction{0.0};
  std::size_t elbo_every{1};

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

struct ElboPoint {
  std::size_t iteration;
  double elbo;
  double elapsed_ms;
};

struct HeldoutPoint {
  std::size_t iteration;
  double log_predictive;
};

struct FitReport {
  MeanFieldState final_state;
  std::vector<ElboPoint> elbo_trace;
  std::vector<HeldoutPoint> heldout_trace;
  bool converged{false};
  std::size_t iterations_run{0};
  std::map<std::string, double> metadata;

  [[nodiscard]] double final_elbo() const;
};

/// A model bound to its (training) data. Implementations keep their current
/// variational parameters and expose them as a MeanFieldState.
class VariationalModel {
public:
  virtual ~VariationalModel() = default;

  virtual void initialize(InitStrategy strategy, std::uint64_t seed) = 0;
  /// One full CAVI pass; every factor set to its coordinate optimum, in
  /// declaration order (local factors first).
  virtual void sweep() = 0;
  [[nodiscard]] virtual double elbo() const = 0;
  [[nodiscard]] virtual MeanFieldState state() const = 0;
  virtual void set_state(const MeanFieldState &state) = 0;

  /// Average held-out log predictive, when held-out data was attached.
  [[nodiscard]] virtual std::optional<double> heldout_log_predictive() const {
    return std::nullopt;
  }
  [[nodiscard]] virtual std::map<std::string, double> metadata() const {
    return {};
  }
};

[[nodiscard]] MeanFieldState init_state(VariationalModel &model,
                                        InitStrategy strategy,
                                        std::uint64_t seed);

/// Loads `state` into the model and evaluates its ELBO.
[[nodiscard]] double compute_elbo(VariationalModel &model,
                                  const MeanFieldState &state);

/// Allowed per-step ELBO decrease before it counts as a broken update.
[[nodiscard]] constexpr double elbo_slack(double previous) {
  return 1e-8 * (1.0 + (previous < 0 ? -previous : previous));
}

[[nodiscard]] double relative_change(double previous, double current);

using SweepObserver =
    std::function<void(std::size_t iteration, const VariationalModel &)>;

/// Coordinate ascent until the relative ELBO change drops below tol or
/// max_iters sweeps have run. Iteration 0 of the trace is the initial state.
/// Throws ConsistencyError if the ELBO decreases beyond elbo_slack and
/// NumericError on a non-finite ELBO.
[[nodiscard]] FitReport cavi_fit(VariationalModel &model,
                                 const FitConfig &config,
                                 const MeanFieldState &init,
                                 const SweepObserver &observer = {});

/// Result of perturbing each canonical parameter of each factor by +-step.
struct PerturbationResult {
  double max_gain{-std::numeric_limits<double>::infinity()};
  std::string worst_label;
  std::size_t worst_param{0};
  std::size_t directions{0};
};

/// Local-optimum probe: the largest ELBO increase obtained by a single-factor
/// perturbation of `at`. Categorical factors move mass between entries; SPD
/// blocks are perturbed symmetrically. Invalid perturbations are skipped.
/// If `factors` is non-empty only those factor indices are probed.
[[nodiscard]] PerturbationResult
coordinate_perturbation_check(VariationalModel &model,
                              const MeanFieldState &at, double step,
                              const std::vector<std::size_t> &factors = {});

struct BivariateMeanField {
  std::array<double, 2> means;
  std::array<double, 2> variances;
};

/// Closed-form optimum of KL(q || N(mean, cov)) over factorized Gaussians:
/// factor means equal the target means, variances are 1 / precision_jj.
[[nodiscard]] BivariateMeanField
meanfield_gaussian_fixed_point(const std::array<double, 2> &mean,
                               const Eigen::Matrix2d &covariance);

/// The same optimum reached by plain coordinate ascent from `init_means`.
[[nodiscard]] BivariateMeanField
meanfield_gaussian_cavi(const std::array<double, 2> &mean,
                        const Eigen::Matrix2d &covariance,
                        const std::array<double, 2> &init_means,
                        std::size_t max_iters = 10000, double tol = 1e-15);

/// Points on the n_sigma contour ellipse of N(mean, covariance).
[[nodiscard]] std::vector<std::array<double, 2>>
gaussian_contour(const std::array<double, 2> &mean,
                 const Eigen::Matrix2d &covariance, double n_sigma,
                 std::size_t points);

/// CSV with header `iter,elbo,elapsed_ms,heldout_logpred`.
void write_trace_csv(const FitReport &report, std::ostream &out);

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> heldout;
};

/// Deterministic random split; heldout gets round(fraction * n) items and
/// train keeps at least one item when n > 0.
[[nodiscard]] Split heldout_split(std::size_t n, double fraction,
                                  std::uint64_t seed);

} // namespace mfvi
