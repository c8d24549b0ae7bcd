#pragma once

// Bayesian linear regression with automatic relevance determination:
//
//   alpha_d ~ Gam(c0, d0),  tau ~ Gam(a0, b0),
//   beta | tau, alpha ~ N(0, (tau diag(alpha))^-1),  y_i ~ N(beta^T x_i, 1/tau).
//
// q(beta, tau) is a joint Normal-Gamma, q(alpha_d) independent Gammas.

#include <Eigen/Core>

#include <cstddef>
#include <cstdint>
#include <optional>

#include "mfvi/engine.hpp"

namespace mfvi::blr {

struct BlrArdConfig {
  double a0{1e-2};
  double b0{1e-4};
  double c0{1e-2};
  double d0{1e-4};

  void validate() const;
};

struct BlrArdState {
  Eigen::MatrixXd v_inv;     // D x D, SPD
  Eigen::VectorXd beta_star; // D
  double a_star{1.0};
  double b_star{1.0};
  // One shape per coordinate so that each q(alpha_d) is a self-contained
  // factor; after an update every entry equals c0 + 1/2.
  Eigen::VectorXd c_star;
  Eigen::VectorXd d_star;
};

struct BlrExpectations {
  Eigen::VectorXd e_alpha;     // c*_d / d*_d
  Eigen::VectorXd e_tau_beta2; // beta*_d^2 a*/b* + [V*]_dd
};

/// V*^-1 = E[diag alpha] + X^T X, beta* = V* X^T y, a* = a0 + n/2,
/// b* = b0 + (y^T y - beta*^T V*^-1 beta*) / 2.
/// Throws LinalgError if V*^-1 is not numerically SPD, NumericError if b* <= 0.
void update_coeff_precision(BlrArdState &state, const Eigen::MatrixXd &x,
                            const Eigen::VectorXd &y, const BlrArdConfig &config);

/// c*_d = c0 + 1/2, d*_d = d0 + E[tau beta_d^2] / 2.
void update_relevance(BlrArdState &state, const BlrArdConfig &config);

[[nodiscard]] BlrExpectations blr_expectations(const BlrArdState &state);

/// Diagonal of V* from a Cholesky factorization of V*^-1.
[[nodiscard]] Eigen::VectorXd v_star_diagonal(const Eigen::MatrixXd &v_inv);

/// Full ELBO. With `fixed_relevance` alpha is the known constant 1 and its
/// prior and entropy terms are absent.
[[nodiscard]] double blr_ard_elbo(const BlrArdState &state,
                                  const Eigen::MatrixXd &x,
                                  const Eigen::VectorXd &y,
                                  const BlrArdConfig &config,
                                  bool fixed_relevance = false);

/// Average log N(y; x^T beta*, (b*/a*)(1 + x^T V* x)) over the rows.
[[nodiscard]] double blr_heldout_log_predictive(const BlrArdState &state,
                                                const Eigen::MatrixXd &x,
                                                const Eigen::VectorXd &y);

class BlrArdModel final : public VariationalModel {
public:
  /// `fixed_relevance` pins E[alpha] = 1 and skips update_relevance, giving
  /// the ARD-free conjugate model.
  BlrArdModel(Eigen::MatrixXd x, Eigen::VectorXd y, BlrArdConfig config,
              bool fixed_relevance = false,
              std::optional<std::pair<Eigen::MatrixXd, Eigen::VectorXd>>
                  heldout = std::nullopt);

  void initialize(InitStrategy strategy, std::uint64_t seed) override;
  /// Coefficients and precision first, relevance second.
  void sweep() override;
  [[nodiscard]] double elbo() const override;
  /// "beta_tau" (MvNormalGamma) then "alpha[d]" (Gamma) unless relevance is
  /// fixed.
  [[nodiscard]] MeanFieldState state() const override;
  void set_state(const MeanFieldState &state) override;
  [[nodiscard]] std::optional<double> heldout_log_predictive() const override;
  [[nodiscard]] std::map<std::string, double> metadata() const override;

  [[nodiscard]] const BlrArdState &params() const noexcept { return state_; }
  void set_params(BlrArdState state);

private:
  Eigen::MatrixXd x_;
  Eigen::VectorXd y_;
  BlrArdConfig config_;
  bool fixed_relevance_;
  std::optional<std::pair<Eigen::MatrixXd, Eigen::VectorXd>> heldout_;
  BlrArdState state_;
};

[[nodiscard]] FitReport blr_ard_fit(const Eigen::MatrixXd &x,
                                    const Eigen::VectorXd &y,
                                    const BlrArdConfig &config,
                                    const FitConfig &fit,
                                    InitStrategy init = InitStrategy::Prior);

struct RegressionData {
  Eigen::MatrixXd x;
  Eigen::VectorXd y;
};

/// Standard normal inputs, y = x^T beta + N(0, noise_sd^2).
[[nodiscard]] RegressionData simulate_regression(std::size_t n,
                                                 const Eigen::VectorXd &beta,
                                                 double noise_sd,
                                                 std::uint64_t seed);

} // namespace mfvi::blr
