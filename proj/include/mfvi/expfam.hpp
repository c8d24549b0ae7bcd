#pragma once

// Exponential-family primitives shared by every model: special functions,
// per-family moments, entropies, cross-entropies and KL divergences.
//
// Parameters are stored in canonical form (mean/variance, shape/rate,
// concentrations, probabilities). Natural parameters are derived on demand.

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

namespace mfvi {

/// log(sum_i exp(values_i)), shifted by the maximum so it never overflows.
[[nodiscard]] double log_sum_exp(std::span<const double> values);

/// Normalizes log-weights in place into probabilities. Returns the
/// log-normalizer.
double normalize_log_weights(std::span<double> weights);

/// Psi(x) for x > 0. Upward recurrence to x >= 6, then the asymptotic series.
[[nodiscard]] double digamma(double x);

[[nodiscard]] double log_gamma(double x);

/// log B(conc) = sum_k log Gamma(conc_k) - log Gamma(sum_k conc_k).
[[nodiscard]] double log_multivariate_beta(std::span<const double> conc);

struct GaussianMoments {
  double e_mu;
  double e_mu2;
};

struct GammaMoments {
  double e_tau;
  double e_log_tau;
};

[[nodiscard]] GaussianMoments gaussian_moments(double m, double s2);
[[nodiscard]] GammaMoments gamma_moments(double a, double b);

/// E[log pi_k] under Dir(conc): Psi(conc_k) - Psi(sum_j conc_j).
[[nodiscard]] std::vector<double>
dirichlet_expected_log(std::span<const double> conc);
void dirichlet_expected_log(std::span<const double> conc, std::span<double> out);

[[nodiscard]] double gaussian_kl(double q_m, double q_s2, double p_m,
                                 double p_s2);
[[nodiscard]] double gamma_kl(double q_a, double q_b, double p_a, double p_b);
[[nodiscard]] double dirichlet_kl(std::span<const double> q,
                                  std::span<const double> p);

[[nodiscard]] double gaussian_entropy(double s2);
[[nodiscard]] double gamma_entropy(double a, double b);
[[nodiscard]] double dirichlet_entropy(std::span<const double> conc);
[[nodiscard]] double categorical_entropy(std::span<const double> probs);

// Cross-entropy style terms: E_q[log p(.)] for a fixed density p.

/// E_{N(q_m, q_s2)}[log N(x; p_m, p_s2)].
[[nodiscard]] double expected_log_gaussian_pdf(double q_m, double q_s2,
                                               double p_m, double p_s2);
/// E_q[log Gam(tau; shape, rate)] given the moments of q.
[[nodiscard]] double expected_log_gamma_pdf(double shape, double rate,
                                            const GammaMoments &q);
/// E_q[log Dir(pi; prior)] given E_q[log pi].
[[nodiscard]] double expected_log_dirichlet_pdf(std::span<const double> prior,
                                                std::span<const double> elog);

enum class Family {
  Gaussian,
  Gamma,
  Dirichlet,
  Categorical,
  NormalGamma,
  MvNormalGamma
};

[[nodiscard]] std::string_view family_name(Family family);

/// One exponential-family density in canonical parameterization.
///
/// Layouts of params():
///   Gaussian       [m, s2]
///   Gamma          [shape, rate]
///   Dirichlet      [conc_1, ..., conc_K]
///   Categorical    [p_1, ..., p_K]
///   NormalGamma    [m, b, shape, rate]   mu | tau ~ N(m, (b tau)^-1)
///   MvNormalGamma  [beta (D), Vinv (D*D, row-major), shape, rate]
///                  beta | tau ~ N(beta*, (tau Vinv)^-1)
class ExpFamParam {
public:
  static ExpFamParam gaussian(double m, double s2);
  static ExpFamParam gamma(double shape, double rate);
  static ExpFamParam dirichlet(std::span<const double> conc);
  static ExpFamParam categorical(std::span<const double> probs);
  static ExpFamParam categorical_from_log_weights(std::span<const double> w);
  static ExpFamParam normal_gamma(double m, double b, double shape,
                                  double rate);
  static ExpFamParam mv_normal_gamma(std::span<const double> beta,
                                     std::span<const double> v_inv,
                                     double shape, double rate);

  /// Validates and wraps a canonical parameter vector.
  static ExpFamParam from_params(Family family, std::vector<double> params);
  /// Inverse of natural(); dimension is inferred from the vector length.
  static ExpFamParam from_natural(Family family, std::span<const double> eta);

  [[nodiscard]] Family family() const noexcept { return family_; }
  [[nodiscard]] std::span<const double> params() const noexcept {
    return params_;
  }
  [[nodiscard]] std::size_t size() const noexcept { return params_.size(); }
  [[nodiscard]] double operator[](std::size_t i) const { return params_[i]; }

  /// Natural parameters. Gaussian (m/s2, -1/(2 s2)); Gamma (shape-1, -rate);
  /// Dirichlet conc-1; Categorical log p; NormalGamma and MvNormalGamma use
  /// the statistics (tau mu, tau mu mu^T, log tau / 2, -tau / 2) giving
  /// (Vinv m, Vinv, 2 shape - 2 + D, 2 rate + m^T Vinv m).
  [[nodiscard]] std::vector<double> natural() const;

  [[nodiscard]] double entropy() const;

  bool operator==(const ExpFamParam &) const = default;

private:
  ExpFamParam(Family family, std::vector<double> params)
      : family_(family), params_(std::move(params)) {}

  Family family_;
  std::vector<double> params_;
};

/// Dimension D of an MvNormalGamma parameter vector of the given length.
[[nodiscard]] std::size_t mv_normal_gamma_dim(std::size_t length);

} // namespace mfvi
