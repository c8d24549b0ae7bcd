#include "mfvi/expfam.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "mfvi/errors.hpp"

namespace mfvi {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

void require_positive(double v, const char *what) {
  if (!(v > 0.0) || !std::isfinite(v)) {
    throw DomainError(std::string(what) + " must be positive and finite");
  }
}

void require_finite(double v, const char *what) {
  if (!std::isfinite(v)) {
    throw DomainError(std::string(what) + " must be finite");
  }
}

double sum(std::span<const double> v) {
  return std::accumulate(v.begin(), v.end(), 0.0);
}

} // namespace

double log_sum_exp(std::span<const double> values) {
  if (values.empty()) {
    throw DomainError("log_sum_exp: empty input");
  }
  double hi = -std::numeric_limits<double>::infinity();
  for (double v : values) {
    if (std::isnan(v)) {
      throw DomainError("log_sum_exp: NaN input");
    }
    hi = std::max(hi, v);
  }
  if (std::isinf(hi)) {
    return hi;
  }
  double acc = 0.0;
  for (double v : values) {
    acc += std::exp(v - hi);
  }
  return hi + std::log(acc);
}

double normalize_log_weights(std::span<double> weights) {
  const double lse = log_sum_exp(weights);
  if (!std::isfinite(lse)) {
    throw DomainError("normalize_log_weights: non-finite normalizer");
  }
  double hi = weights[0];
  for (double w : weights) {
    hi = std::max(hi, w);
  }
  double total = 0.0;
  for (double &w : weights) {
    w = std::exp(w - hi);
    total += w;
  }
  for (double &w : weights) {
    w /= total;
  }
  return lse;
}

double digamma(double x) {
  if (!(x > 0.0) || !std::isfinite(x)) {
    throw DomainError("digamma: argument must be positive and finite");
  }
  // For small x the -1/x term dominates; it is kept apart (with its rounding
  // remainder) and subtracted last so the O(1) part keeps full precision.
  double lead = 0.0;
  double lead_err = 0.0;
  if (x < 6.0) {
    lead = 1.0 / x;
    lead_err = std::fma(-lead, x, 1.0) / x;
  }
  double shift = 0.0;
  if (x < 6.0) {
    x += 1.0;
    while (x < 6.0) {
      shift -= 1.0 / x;
      x += 1.0;
    }
  }
  // Bernoulli-number series in 1/x^2.
  const double inv2 = 1.0 / (x * x);
  const double series =
      inv2 *
      (1.0 / 12.0 -
       inv2 * (1.0 / 120.0 -
               inv2 * (1.0 / 252.0 -
                       inv2 * (1.0 / 240.0 -
                               inv2 * (1.0 / 132.0 -
                                       inv2 * (691.0 / 32760.0 -
                                               inv2 * (1.0 / 12.0)))))));
  return (std::log(x) - 0.5 / x - series + shift - lead_err) - lead;
}

double log_gamma(double x) {
  require_positive(x, "log_gamma argument");
  return std::lgamma(x);
}

double log_multivariate_beta(std::span<const double> conc) {
  double acc = 0.0;
  for (double c : conc) {
    acc += log_gamma(c);
  }
  return acc - log_gamma(sum(conc));
}

GaussianMoments gaussian_moments(double m, double s2) {
  require_finite(m, "gaussian mean");
  require_positive(s2, "gaussian variance");
  return {m, m * m + s2};
}

GammaMoments gamma_moments(double a, double b) {
  require_positive(a, "gamma shape");
  require_positive(b, "gamma rate");
  return {a / b, digamma(a) - std::log(b)};
}

void dirichlet_expected_log(std::span<const double> conc,
                            std::span<double> out) {
  if (conc.size() < 2) {
    throw DomainError("dirichlet_expected_log: need at least two components");
  }
  if (out.size() != conc.size()) {
    throw DomainError("dirichlet_expected_log: output size mismatch");
  }
  for (double c : conc) {
    require_positive(c, "dirichlet concentration");
  }
  const double psi_total = digamma(sum(conc));
  for (std::size_t k = 0; k < conc.size(); ++k) {
    out[k] = digamma(conc[k]) - psi_total;
  }
}

std::vector<double> dirichlet_expected_log(std::span<const double> conc) {
  std::vector<double> out(conc.size());
  dirichlet_expected_log(conc, out);
  return out;
}

double gaussian_kl(double q_m, double q_s2, double p_m, double p_s2) {
  require_finite(q_m, "gaussian mean");
  require_finite(p_m, "gaussian mean");
  require_positive(q_s2, "gaussian variance");
  require_positive(p_s2, "gaussian variance");
  const double diff = p_m - q_m;
  return 0.5 * (q_s2 / p_s2 + diff * diff / p_s2 - 1.0 + std::log(p_s2 / q_s2));
}

double gamma_kl(double q_a, double q_b, double p_a, double p_b) {
  const GammaMoments q = gamma_moments(q_a, q_b);
  return -gamma_entropy(q_a, q_b) - expected_log_gamma_pdf(p_a, p_b, q);
}

double dirichlet_kl(std::span<const double> q, std::span<const double> p) {
  if (q.size() != p.size()) {
    throw DomainError("dirichlet_kl: dimension mismatch");
  }
  const std::vector<double> elog = dirichlet_expected_log(q);
  return -dirichlet_entropy(q) - expected_log_dirichlet_pdf(p, elog);
}

double gaussian_entropy(double s2) {
  require_positive(s2, "gaussian variance");
  return 0.5 * (1.0 + kLog2Pi + std::log(s2));
}

double gamma_entropy(double a, double b) {
  require_positive(a, "gamma shape");
  require_positive(b, "gamma rate");
  return a - std::log(b) + std::lgamma(a) + (1.0 - a) * digamma(a);
}

double dirichlet_entropy(std::span<const double> conc) {
  const double total = sum(conc);
  const auto k = static_cast<double>(conc.size());
  double acc = log_multivariate_beta(conc) + (total - k) * digamma(total);
  for (double c : conc) {
    acc -= (c - 1.0) * digamma(c);
  }
  return acc;
}

double categorical_entropy(std::span<const double> probs) {
  double acc = 0.0;
  for (double p : probs) {
    if (p > 0.0) {
      acc -= p * std::log(p);
    }
  }
  return acc;
}

double expected_log_gaussian_pdf(double q_m, double q_s2, double p_m,
                                 double p_s2) {
  require_positive(p_s2, "gaussian variance");
  const double diff = q_m - p_m;
  return -0.5 * (kLog2Pi + std::log(p_s2)) - 0.5 * (q_s2 + diff * diff) / p_s2;
}

double expected_log_gamma_pdf(double shape, double rate, const GammaMoments &q) {
  require_positive(shape, "gamma shape");
  require_positive(rate, "gamma rate");
  return shape * std::log(rate) - std::lgamma(shape) +
         (shape - 1.0) * q.e_log_tau - rate * q.e_tau;
}

double expected_log_dirichlet_pdf(std::span<const double> prior,
                                  std::span<const double> elog) {
  if (prior.size() != elog.size()) {
    throw DomainError("expected_log_dirichlet_pdf: dimension mismatch");
  }
  double acc = -log_multivariate_beta(prior);
  for (std::size_t k = 0; k < prior.size(); ++k) {
    acc += (prior[k] - 1.0) * elog[k];
  }
  return acc;
}

std::string_view family_name(Family family) {
  switch (family) {
  case Family::Gaussian:
    return "gaussian";
  case Family::Gamma:
    return "gamma";
  case Family::Dirichlet:
    return "dirichlet";
  case Family::Categorical:
    return "categorical";
  case Family::NormalGamma:
    return "normal_gamma";
  case Family::MvNormalGamma:
    return "mv_normal_gamma";
  }
  return "unknown";
}

std::size_t mv_normal_gamma_dim(std::size_t length) {
  // length = D + D^2 + 2
  for (std::size_t d = 1; d * d + d + 2 <= length; ++d) {
    if (d * d + d + 2 == length) {
      return d;
    }
  }
  throw DomainError("mv_normal_gamma: invalid parameter length");
}

ExpFamParam ExpFamParam::gaussian(double m, double s2) {
  return from_params(Family::Gaussian, {m, s2});
}

ExpFamParam ExpFamParam::gamma(double shape, double rate) {
  return from_params(Family::Gamma, {shape, rate});
}

ExpFamParam ExpFamParam::dirichlet(std::span<const double> conc) {
  return from_params(Family::Dirichlet, {conc.begin(), conc.end()});
}

ExpFamParam ExpFamParam::categorical(std::span<const double> probs) {
  return from_params(Family::Categorical, {probs.begin(), probs.end()});
}

ExpFamParam
ExpFamParam::categorical_from_log_weights(std::span<const double> w) {
  std::vector<double> probs(w.begin(), w.end());
  normalize_log_weights(probs);
  return from_params(Family::Categorical, std::move(probs));
}

ExpFamParam ExpFamParam::normal_gamma(double m, double b, double shape,
                                      double rate) {
  return from_params(Family::NormalGamma, {m, b, shape, rate});
}

ExpFamParam ExpFamParam::mv_normal_gamma(std::span<const double> beta,
                                         std::span<const double> v_inv,
                                         double shape, double rate) {
  std::vector<double> p(beta.begin(), beta.end());
  p.insert(p.end(), v_inv.begin(), v_inv.end());
  p.push_back(shape);
  p.push_back(rate);
  return from_params(Family::MvNormalGamma, std::move(p));
}

ExpFamParam ExpFamParam::from_params(Family family, std::vector<double> p) {
  switch (family) {
  case Family::Gaussian:
    if (p.size() != 2) {
      throw DomainError("gaussian: expected [m, s2]");
    }
    require_finite(p[0], "gaussian mean");
    require_positive(p[1], "gaussian variance");
    break;
  case Family::Gamma:
    if (p.size() != 2) {
      throw DomainError("gamma: expected [shape, rate]");
    }
    require_positive(p[0], "gamma shape");
    require_positive(p[1], "gamma rate");
    break;
  case Family::Dirichlet:
    if (p.size() < 2) {
      throw DomainError("dirichlet: need at least two components");
    }
    for (double c : p) {
      require_positive(c, "dirichlet concentration");
    }
    break;
  case Family::Categorical: {
    if (p.empty()) {
      throw DomainError("categorical: empty probability vector");
    }
    for (double v : p) {
      if (!(v >= 0.0) || !std::isfinite(v)) {
        throw DomainError("categorical: probabilities must be nonnegative");
      }
    }
    if (std::abs(sum(p) - 1.0) > 1e-12) {
      throw DomainError("categorical: probabilities must sum to one");
    }
    break;
  }
  case Family::NormalGamma:
    if (p.size() != 4) {
      throw DomainError("normal_gamma: expected [m, b, shape, rate]");
    }
    require_finite(p[0], "normal_gamma mean");
    require_positive(p[1], "normal_gamma scale");
    require_positive(p[2], "normal_gamma shape");
    require_positive(p[3], "normal_gamma rate");
    break;
  case Family::MvNormalGamma: {
    const std::size_t d = mv_normal_gamma_dim(p.size());
    for (std::size_t i = 0; i < d; ++i) {
      require_finite(p[i], "mv_normal_gamma mean");
    }
    const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                         Eigen::RowMajor>>
        v_inv(p.data() + d, static_cast<Eigen::Index>(d),
              static_cast<Eigen::Index>(d));
    if (!v_inv.allFinite() ||
        (v_inv - v_inv.transpose()).cwiseAbs().maxCoeff() >
            1e-12 * (1.0 + v_inv.cwiseAbs().maxCoeff())) {
      throw DomainError("mv_normal_gamma: precision matrix must be symmetric");
    }
    if (Eigen::LLT<Eigen::MatrixXd>(v_inv).info() != Eigen::Success) {
      throw DomainError("mv_normal_gamma: precision matrix must be SPD");
    }
    require_positive(p[d + d * d], "mv_normal_gamma shape");
    require_positive(p[d + d * d + 1], "mv_normal_gamma rate");
    break;
  }
  }
  return ExpFamParam(family, std::move(p));
}

std::vector<double> ExpFamParam::natural() const {
  const auto &p = params_;
  switch (family_) {
  case Family::Gaussian:
    return {p[0] / p[1], -0.5 / p[1]};
  case Family::Gamma:
    return {p[0] - 1.0, -p[1]};
  case Family::Dirichlet: {
    std::vector<double> eta(p);
    for (double &e : eta) {
      e -= 1.0;
    }
    return eta;
  }
  case Family::Categorical: {
    std::vector<double> eta(p.size());
    std::transform(p.begin(), p.end(), eta.begin(),
                   [](double v) { return std::log(v); });
    return eta;
  }
  case Family::NormalGamma:
    return {p[1] * p[0], p[1], 2.0 * p[2] - 1.0, 2.0 * p[3] + p[1] * p[0] * p[0]};
  case Family::MvNormalGamma: {
    const std::size_t d = mv_normal_gamma_dim(p.size());
    const auto di = static_cast<Eigen::Index>(d);
    const Eigen::Map<const Eigen::VectorXd> beta(p.data(), di);
    const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                         Eigen::RowMajor>>
        v_inv(p.data() + d, di, di);
    const Eigen::VectorXd eta1 = v_inv * beta;
    std::vector<double> eta(eta1.data(), eta1.data() + d);
    eta.insert(eta.end(), p.begin() + static_cast<std::ptrdiff_t>(d),
               p.begin() + static_cast<std::ptrdiff_t>(d + d * d));
    eta.push_back(2.0 * p[d + d * d] - 2.0 + static_cast<double>(d));
    eta.push_back(2.0 * p[d + d * d + 1] + beta.dot(eta1));
    return eta;
  }
  }
  return {};
}

ExpFamParam ExpFamParam::from_natural(Family family,
                                      std::span<const double> eta) {
  switch (family) {
  case Family::Gaussian: {
    if (eta.size() != 2 || !(eta[1] < 0.0)) {
      throw DomainError("gaussian: invalid natural parameters");
    }
    const double s2 = -0.5 / eta[1];
    return gaussian(eta[0] * s2, s2);
  }
  case Family::Gamma:
    if (eta.size() != 2) {
      throw DomainError("gamma: invalid natural parameters");
    }
    return gamma(eta[0] + 1.0, -eta[1]);
  case Family::Dirichlet: {
    std::vector<double> conc(eta.begin(), eta.end());
    for (double &c : conc) {
      c += 1.0;
    }
    return from_params(family, std::move(conc));
  }
  case Family::Categorical:
    return categorical_from_log_weights(eta);
  case Family::NormalGamma: {
    if (eta.size() != 4 || !(eta[1] > 0.0)) {
      throw DomainError("normal_gamma: invalid natural parameters");
    }
    const double m = eta[0] / eta[1];
    return normal_gamma(m, eta[1], 0.5 * (eta[2] + 1.0),
                        0.5 * (eta[3] - eta[0] * m));
  }
  case Family::MvNormalGamma: {
    const std::size_t d = mv_normal_gamma_dim(eta.size());
    const auto di = static_cast<Eigen::Index>(d);
    const Eigen::Map<const Eigen::VectorXd> eta1(eta.data(), di);
    const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                         Eigen::RowMajor>>
        v_inv(eta.data() + d, di, di);
    const Eigen::LLT<Eigen::MatrixXd> llt(v_inv);
    if (llt.info() != Eigen::Success) {
      throw DomainError("mv_normal_gamma: natural precision is not SPD");
    }
    const Eigen::VectorXd beta = llt.solve(eta1);
    const double shape = 0.5 * (eta[d + d * d] + 2.0 - static_cast<double>(d));
    const double rate = 0.5 * (eta[d + d * d + 1] - beta.dot(eta1));
    return mv_normal_gamma({beta.data(), d},
                           eta.subspan(d, d * d), shape, rate);
  }
  }
  throw DomainError("from_natural: unknown family");
}

double ExpFamParam::entropy() const {
  const auto &p = params_;
  switch (family_) {
  case Family::Gaussian:
    return gaussian_entropy(p[1]);
  case Family::Gamma:
    return gamma_entropy(p[0], p[1]);
  case Family::Dirichlet:
    return dirichlet_entropy(p);
  case Family::Categorical:
    return categorical_entropy(p);
  case Family::NormalGamma: {
    const GammaMoments g = gamma_moments(p[2], p[3]);
    return gamma_entropy(p[2], p[3]) + 0.5 * (1.0 + kLog2Pi) -
           0.5 * std::log(p[1]) - 0.5 * g.e_log_tau;
  }
  case Family::MvNormalGamma: {
    const std::size_t d = mv_normal_gamma_dim(p.size());
    const auto di = static_cast<Eigen::Index>(d);
    const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                         Eigen::RowMajor>>
        v_inv(p.data() + d, di, di);
    const Eigen::LLT<Eigen::MatrixXd> llt(v_inv);
    const double log_det_v_inv =
        2.0 * llt.matrixLLT().diagonal().array().log().sum();
    const double shape = p[d + d * d];
    const double rate = p[d + d * d + 1];
    const GammaMoments g = gamma_moments(shape, rate);
    const auto dd = static_cast<double>(d);
    return gamma_entropy(shape, rate) + 0.5 * dd * (1.0 + kLog2Pi) -
           0.5 * log_det_v_inv - 0.5 * dd * g.e_log_tau;
  }
  }
  return 0.0;
}

} // namespace mfvi
