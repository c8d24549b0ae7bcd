#pragma once

// Diagonal-covariance Bayesian mixture of Gaussians:
//
//   pi ~ Dir(a0),  z_i ~ Cat(pi),
//   tau_kd ~ Gam(alpha0, beta0),  mu_kd | tau_kd ~ N(m0, (b0 tau_kd)^-1),
//   x_id | z_i = k ~ N(mu_kd, tau_kd^-1).
//
// Mean-field family: q(pi) Dirichlet, q(mu_kd, tau_kd) Normal-Gamma per
// (k, d), q(z_i) categorical. Each update is the expected natural parameter
// of the corresponding complete conditional.

#include <Eigen/Core>

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "mfvi/condconj.hpp"
#include "mfvi/engine.hpp"
#include "mfvi/gmm.hpp"

namespace mfvi::gmm {

struct DiagGmmConfig {
  std::size_t k{1};
  std::optional<double> a0; // unset means 1/K
  double m0{0.0};
  double b0{1.0};
  double alpha0{1.0};
  double beta0{1.0};

  [[nodiscard]] double dirichlet_prior() const {
    return a0 ? *a0 : 1.0 / static_cast<double>(k);
  }
  void validate() const;
};

struct DiagGmmState {
  Eigen::VectorXd conc;  // K Dirichlet concentrations
  Eigen::MatrixXd m;     // K x D
  Eigen::MatrixXd b;     // K x D
  Eigen::MatrixXd shape; // K x D
  Eigen::MatrixXd rate;  // K x D
  Eigen::MatrixXd resp;  // n x K
};

void update_responsibilities(DiagGmmState &state, const Data &x);
void update_mixing(DiagGmmState &state, const DiagGmmConfig &config);
void update_normal_gamma(DiagGmmState &state, const Data &x,
                         const DiagGmmConfig &config);

/// Responsibilities, then mixing weights, then Normal-Gamma factors.
void diag_gmm_sweep(DiagGmmState &state, const Data &x,
                    const DiagGmmConfig &config);

[[nodiscard]] double diag_gmm_elbo(const DiagGmmState &state, const Data &x,
                                   const DiagGmmConfig &config);

/// log p(x_new | q): a mixture of per-dimension Student-t densities weighted
/// by E[pi].
[[nodiscard]] double diag_gmm_predictive_log_density(const DiagGmmState &state,
                                                     std::span<const double> x);

[[nodiscard]] double diag_gmm_heldout_log_predictive(const DiagGmmState &state,
                                                     const Data &heldout);

class DiagGmmModel final : public VariationalModel {
public:
  DiagGmmModel(Data x, DiagGmmConfig config,
               std::optional<Data> heldout = std::nullopt);

  void initialize(InitStrategy strategy, std::uint64_t seed) override;
  void sweep() override;
  [[nodiscard]] double elbo() const override;
  [[nodiscard]] MeanFieldState state() const override;
  void set_state(const MeanFieldState &state) override;
  [[nodiscard]] std::optional<double> heldout_log_predictive() const override;
  /// Records the resolved hyperparameters a0, m0, b0, alpha0, beta0.
  [[nodiscard]] std::map<std::string, double> metadata() const override;

  [[nodiscard]] const DiagGmmState &params() const noexcept { return state_; }
  void set_params(DiagGmmState state);
  [[nodiscard]] const Data &data() const noexcept { return x_; }

private:
  Data x_;
  DiagGmmConfig config_;
  std::optional<Data> heldout_;
  DiagGmmState state_;
};

/// Global/local form. Natural layout: K Dirichlet entries (conc - 1), then
/// per (k, d) the Normal-Gamma coordinates (b m, b, 2 shape - 1,
/// 2 rate + b m^2) paired with (tau mu, -tau mu^2 / 2, log tau / 2, -tau / 2).
class DiagGmmConjugate {
public:
  using Local = ExpFamParam;

  DiagGmmConjugate(const Data &x, DiagGmmConfig config,
                   const Data *heldout = nullptr);

  [[nodiscard]] std::size_t num_points() const noexcept {
    return static_cast<std::size_t>(x_->rows());
  }
  [[nodiscard]] ConjugateNatural prior() const;
  [[nodiscard]] Local local_step(const ConjugateNatural &lambda,
                                 std::size_t i) const;
  void accumulate_suff_stat(const Local &resp, std::size_t i, double weight,
                            std::span<double> acc) const;
  [[nodiscard]] std::vector<double>
  expected_global_stats(const ConjugateNatural &lambda) const;
  [[nodiscard]] double
  global_log_normalizer(const ConjugateNatural &lambda) const;
  [[nodiscard]] double local_elbo_term(const Local &resp, std::size_t i) const;
  /// -log B(a0 1_K) - K D (lgamma(alpha0) - alpha0 log beta0 - log(b0) / 2)
  /// - (n D / 2) log 2 pi.
  [[nodiscard]] double elbo_constant() const;
  [[nodiscard]] MeanFieldState
  global_factors(const ConjugateNatural &lambda) const;
  [[nodiscard]] std::optional<double>
  heldout_log_predictive(const ConjugateNatural &lambda) const;

  [[nodiscard]] ConjugateNatural to_natural(const DiagGmmState &state) const;
  /// Global parameters of `lambda`; responsibilities are left empty.
  [[nodiscard]] DiagGmmState globals(const ConjugateNatural &lambda) const;

private:
  const Data *x_;
  DiagGmmConfig config_;
  const Data *heldout_;
  std::size_t dim_;
};

/// Synthetic colour-histogram vectors: `channels` blocks of `bins` entries,
/// each block a probability vector drawn around one of k cluster profiles.
[[nodiscard]] Simulation simulate_histograms(std::size_t k, std::size_t n,
                                             std::uint64_t seed,
                                             std::size_t bins = 192,
                                             std::size_t channels = 3);

} // namespace mfvi::gmm
