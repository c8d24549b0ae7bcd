#pragma once

// Bayesian mixture of unit-variance Gaussians with a uniform mixing prior:
//
//   mu_k ~ N(0, sigma2 I),  c_i ~ Cat(1/K, ..., 1/K),  x_i | c_i, mu ~ N(mu_c_i, I)
//
// with q(mu_kj) = N(m_kj, s2_kj) and q(c_i) = Cat(phi_i). With d = 1 this is
// the classic univariate model; d > 1 treats each coordinate independently,
// which is what the 2-D simulation study fits.
//
// The ELBO is the full objective: no constants are dropped.

#include <Eigen/Core>

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "mfvi/condconj.hpp"
#include "mfvi/engine.hpp"
#include "mfvi/expfam.hpp"

namespace mfvi::gmm {

/// Rows are observations.
using Data = Eigen::MatrixXd;

struct UniGmmConfig {
  std::size_t k{1};
  double sigma2{1.0};

  void validate() const;
};

struct UniGmmState {
  Eigen::MatrixXd m;   // K x d
  Eigen::MatrixXd s2;  // K x d
  Eigen::MatrixXd phi; // n x K, rows sum to one

  [[nodiscard]] std::size_t k() const noexcept {
    return static_cast<std::size_t>(m.rows());
  }
  [[nodiscard]] std::size_t dimension() const noexcept {
    return static_cast<std::size_t>(m.cols());
  }
};

/// phi_ik proportional to exp{E[mu_k] . x_i - E[mu_k^2] / 2}, normalized in
/// log space. Depends only on the component factors.
void update_assignments(UniGmmState &state, const Data &x);

/// m_k = sum_i phi_ik x_i / (1/sigma2 + sum_i phi_ik),
/// s2_k = 1 / (1/sigma2 + sum_i phi_ik).
void update_components(UniGmmState &state, const Data &x, double sigma2);

[[nodiscard]] double gmm_elbo(const UniGmmState &state, const Data &x,
                              double sigma2);

/// log[(1/K) sum_k N(x_new; m_k, I)].
[[nodiscard]] double predictive_log_density(const Eigen::MatrixXd &means,
                                            std::span<const double> x_new);

/// Mean of predictive_log_density over the rows of `heldout`.
[[nodiscard]] double heldout_log_predictive(const Eigen::MatrixXd &means,
                                            const Data &heldout);

class UniGmmModel final : public VariationalModel {
public:
  UniGmmModel(Data x, UniGmmConfig config,
              std::optional<Data> heldout = std::nullopt);

  void initialize(InitStrategy strategy, std::uint64_t seed) override;
  void sweep() override;
  [[nodiscard]] double elbo() const override;
  [[nodiscard]] MeanFieldState state() const override;
  void set_state(const MeanFieldState &state) override;
  [[nodiscard]] std::optional<double> heldout_log_predictive() const override;
  [[nodiscard]] std::map<std::string, double> metadata() const override;

  [[nodiscard]] const UniGmmState &params() const noexcept { return state_; }
  void set_params(UniGmmState state);
  [[nodiscard]] const Data &data() const noexcept { return x_; }
  [[nodiscard]] const UniGmmConfig &config() const noexcept { return config_; }

private:
  Data x_;
  UniGmmConfig config_;
  std::optional<Data> heldout_;
  UniGmmState state_;
};

/// The same model in global/local form. Global natural parameters are laid
/// out per (k, j) as [m/s2, -1/(2 s2)]; the statistic of point i under
/// phi_i is [phi_ik x_ij, -phi_ik / 2]. The count entry is unused (the local
/// log normalizer is zero) and the prior count is 0.
class UniGmmConjugate {
public:
  using Local = ExpFamParam;

  UniGmmConjugate(const Data &x, UniGmmConfig config,
                  const Data *heldout = nullptr);

  [[nodiscard]] std::size_t num_points() const noexcept {
    return static_cast<std::size_t>(x_->rows());
  }
  [[nodiscard]] ConjugateNatural prior() const;
  [[nodiscard]] Local local_step(const ConjugateNatural &lambda,
                                 std::size_t i) const;
  void accumulate_suff_stat(const Local &phi, std::size_t i, double weight,
                            std::span<double> acc) const;
  [[nodiscard]] std::vector<double>
  expected_global_stats(const ConjugateNatural &lambda) const;
  [[nodiscard]] double
  global_log_normalizer(const ConjugateNatural &lambda) const;
  [[nodiscard]] double local_elbo_term(const Local &phi, std::size_t i) const;
  /// -(K d / 2) log sigma2 - n log K - (n d / 2) log 2 pi - sum_i |x_i|^2 / 2.
  [[nodiscard]] double elbo_constant() const;
  [[nodiscard]] MeanFieldState
  global_factors(const ConjugateNatural &lambda) const;
  [[nodiscard]] std::optional<double>
  heldout_log_predictive(const ConjugateNatural &lambda) const;

  [[nodiscard]] ConjugateNatural to_natural(const Eigen::MatrixXd &m,
                                            const Eigen::MatrixXd &s2) const;
  /// (m, s2) recovered from natural coordinates.
  [[nodiscard]] std::pair<Eigen::MatrixXd, Eigen::MatrixXd>
  components(const ConjugateNatural &lambda) const;

private:
  const Data *x_;
  UniGmmConfig config_;
  const Data *heldout_;
  std::size_t dim_;
};

struct Simulation {
  Data data;                       // n x d
  Eigen::MatrixXd means;           // k x d
  std::vector<std::size_t> labels; // n
};

struct SimulationOptions {
  double mean_sd{5.0};
  double min_separation{0.0};
  /// The first k points get labels 0..k-1, so every component is populated.
  bool cover_all{false};
};

/// Means from N(0, mean_sd^2 I) (resampled until pairwise distances reach
/// min_separation), uniform labels, unit-covariance observations.
[[nodiscard]] Simulation simulate(std::size_t k, std::size_t n,
                                  std::uint64_t seed, std::size_t dimension,
                                  const SimulationOptions &options = {});

/// Fraction of points whose argmax responsibility matches the true label
/// under the best permutation of components (k <= 8).
[[nodiscard]] double aligned_accuracy(const Eigen::MatrixXd &phi,
                                      std::span<const std::size_t> labels);

} // namespace mfvi::gmm
