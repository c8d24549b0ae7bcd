#include "mfvi/blr_ard.hpp"

#include <Eigen/Cholesky>

#include <cmath>
#include <random>
#include <string>

#include "mfvi/errors.hpp"
#include "mfvi/expfam.hpp"

namespace mfvi::blr {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

using RowMajor =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::LLT<Eigen::MatrixXd> factorize(const Eigen::MatrixXd &v_inv) {
  Eigen::LLT<Eigen::MatrixXd> llt(v_inv);
  if (llt.info() != Eigen::Success || !llt.matrixLLT().allFinite() ||
      (llt.matrixLLT().diagonal().array() <= 0.0).any()) {
    throw LinalgError("V*^-1 is not numerically positive definite");
  }
  return llt;
}

double log_det(const Eigen::LLT<Eigen::MatrixXd> &llt) {
  return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

} // namespace

void BlrArdConfig::validate() const {
  const auto check = [](double v, const char *name) {
    if (!(v > 0.0) || !std::isfinite(v)) {
      throw ConfigError(name, "must be positive");
    }
  };
  check(a0, "a0");
  check(b0, "b0");
  check(c0, "c0");
  check(d0, "d0");
}

Eigen::VectorXd v_star_diagonal(const Eigen::MatrixXd &v_inv) {
  const auto llt = factorize(v_inv);
  // [V*]_dd = |L^-1 e_d|^2
  const Eigen::MatrixXd l_inv = llt.matrixL().solve(
      Eigen::MatrixXd::Identity(v_inv.rows(), v_inv.cols()));
  return l_inv.colwise().squaredNorm().transpose();
}

BlrExpectations blr_expectations(const BlrArdState &s) {
  BlrExpectations e;
  e.e_alpha = s.c_star.cwiseQuotient(s.d_star);
  e.e_tau_beta2 = s.beta_star.array().square() * (s.a_star / s.b_star) +
                  v_star_diagonal(s.v_inv).array();
  return e;
}

void update_coeff_precision(BlrArdState &s, const Eigen::MatrixXd &x,
                            const Eigen::VectorXd &y,
                            const BlrArdConfig &config) {
  if (x.rows() != y.size()) {
    throw DomainError("update_coeff_precision: x and y row counts differ");
  }
  if (x.cols() != s.c_star.size()) {
    throw DomainError("update_coeff_precision: dimension mismatch");
  }
  const Eigen::VectorXd e_alpha = s.c_star.cwiseQuotient(s.d_star);
  Eigen::MatrixXd v_inv = x.transpose() * x;
  v_inv.diagonal() += e_alpha;
  const auto llt = factorize(v_inv);
  const Eigen::VectorXd xty = x.transpose() * y;
  const Eigen::VectorXd beta = llt.solve(xty);
  const double b_star =
      config.b0 + 0.5 * (y.squaredNorm() - beta.dot(v_inv * beta));
  if (!(b_star > 0.0) || !std::isfinite(b_star)) {
    throw NumericError(0, "b* = " + std::to_string(b_star) + " is not positive");
  }
  s.v_inv = std::move(v_inv);
  s.beta_star = beta;
  s.a_star = config.a0 + 0.5 * static_cast<double>(x.rows());
  s.b_star = b_star;
}

void update_relevance(BlrArdState &s, const BlrArdConfig &config) {
  const Eigen::VectorXd e_tb2 = blr_expectations(s).e_tau_beta2;
  const Eigen::VectorXd d_star = (config.d0 + 0.5 * e_tb2.array()).matrix();
  if (!(d_star.array() > 0.0).all() || !d_star.allFinite()) {
    throw NumericError(0, "nonpositive relevance rate");
  }
  s.c_star = Eigen::VectorXd::Constant(d_star.size(), config.c0 + 0.5);
  s.d_star = d_star;
}

double blr_ard_elbo(const BlrArdState &s, const Eigen::MatrixXd &x,
                    const Eigen::VectorXd &y, const BlrArdConfig &config,
                    bool fixed_relevance) {
  const auto n = static_cast<double>(x.rows());
  const auto dims = static_cast<double>(x.cols());
  const auto llt = factorize(s.v_inv);
  const Eigen::MatrixXd l_inv =
      llt.matrixL().solve(Eigen::MatrixXd::Identity(x.cols(), x.cols()));
  const Eigen::VectorXd v_diag = l_inv.colwise().squaredNorm().transpose();
  const GammaMoments tau = gamma_moments(s.a_star, s.b_star);

  // E[log p(y | beta, tau)]; sum_i x_i^T V* x_i = |L^-1 X^T|_F^2.
  const double rss = (y - x * s.beta_star).squaredNorm();
  const double spread = (l_inv * x.transpose()).squaredNorm();
  double value = 0.5 * n * (tau.e_log_tau - kLog2Pi) -
                 0.5 * (tau.e_tau * rss + spread);

  // E[log p(beta | tau, alpha)] and the relevance factors.
  for (Eigen::Index d = 0; d < x.cols(); ++d) {
    const double e_tb2 =
        tau.e_tau * s.beta_star[d] * s.beta_star[d] + v_diag[d];
    double e_alpha = 1.0;
    double e_log_alpha = 0.0;
    if (!fixed_relevance) {
      const GammaMoments a = gamma_moments(s.c_star[d], s.d_star[d]);
      e_alpha = a.e_tau;
      e_log_alpha = a.e_log_tau;
      value += expected_log_gamma_pdf(config.c0, config.d0, a) +
               gamma_entropy(s.c_star[d], s.d_star[d]);
    }
    value += 0.5 * (e_log_alpha + tau.e_log_tau - kLog2Pi) - 0.5 * e_alpha * e_tb2;
  }

  value += expected_log_gamma_pdf(config.a0, config.b0, tau);
  // H[q(beta, tau)]
  value += gamma_entropy(s.a_star, s.b_star) + 0.5 * dims * (1.0 + kLog2Pi) -
           0.5 * log_det(llt) - 0.5 * dims * tau.e_log_tau;
  if (!std::isfinite(value)) {
    throw NumericError(0, "non-finite BLR-ARD ELBO");
  }
  return value;
}

double blr_heldout_log_predictive(const BlrArdState &s, const Eigen::MatrixXd &x,
                                  const Eigen::VectorXd &y) {
  if (x.rows() == 0) {
    throw DomainError("heldout_log_predictive: empty held-out set");
  }
  if (x.cols() != s.beta_star.size() || x.rows() != y.size()) {
    throw DomainError("heldout_log_predictive: dimension mismatch");
  }
  const auto llt = factorize(s.v_inv);
  const Eigen::MatrixXd z = llt.matrixL().solve(x.transpose());
  const double noise = s.b_star / s.a_star;
  double acc = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double var = noise * (1.0 + z.col(i).squaredNorm());
    const double diff = y[i] - x.row(i).dot(s.beta_star);
    acc += -0.5 * (kLog2Pi + std::log(var) + diff * diff / var);
  }
  return acc / static_cast<double>(x.rows());
}

BlrArdModel::BlrArdModel(
    Eigen::MatrixXd x, Eigen::VectorXd y, BlrArdConfig config,
    bool fixed_relevance,
    std::optional<std::pair<Eigen::MatrixXd, Eigen::VectorXd>> heldout)
    : x_(std::move(x)), y_(std::move(y)), config_(config),
      fixed_relevance_(fixed_relevance), heldout_(std::move(heldout)) {
  config_.validate();
  if (x_.cols() == 0) {
    throw DomainError("BlrArdModel: need at least one input column");
  }
  if (x_.rows() != y_.size()) {
    throw DomainError("BlrArdModel: x and y row counts differ");
  }
  if (!x_.allFinite() || !y_.allFinite()) {
    throw DomainError("BlrArdModel: non-finite data");
  }
  if (heldout_ && (heldout_->first.cols() != x_.cols() ||
                   heldout_->first.rows() != heldout_->second.size())) {
    throw DomainError("BlrArdModel: held-out dimension mismatch");
  }
  initialize(InitStrategy::Prior, 0);
}

void BlrArdModel::initialize(InitStrategy strategy, std::uint64_t seed) {
  const Eigen::Index dims = x_.cols();
  BlrArdState s;
  if (fixed_relevance_) {
    s.c_star = Eigen::VectorXd::Ones(dims);
    s.d_star = Eigen::VectorXd::Ones(dims);
  } else if (strategy == InitStrategy::Prior) {
    s.c_star = Eigen::VectorXd::Constant(dims, config_.c0);
    s.d_star = Eigen::VectorXd::Constant(dims, config_.d0);
  } else {
    // E[alpha_d] near one, jittered per coordinate.
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 0.1);
    s.c_star = Eigen::VectorXd::Constant(dims, config_.c0 + 0.5);
    s.d_star.resize(dims);
    for (Eigen::Index d = 0; d < dims; ++d) {
      s.d_star[d] = s.c_star[d] * std::exp(normal(rng));
    }
  }
  s.v_inv = Eigen::MatrixXd::Zero(dims, dims);
  s.v_inv.diagonal() = s.c_star.cwiseQuotient(s.d_star);
  s.beta_star = Eigen::VectorXd::Zero(dims);
  s.a_star = config_.a0;
  s.b_star = config_.b0;
  state_ = std::move(s);
}

void BlrArdModel::sweep() {
  update_coeff_precision(state_, x_, y_, config_);
  if (!fixed_relevance_) {
    update_relevance(state_, config_);
  }
}

double BlrArdModel::elbo() const {
  return blr_ard_elbo(state_, x_, y_, config_, fixed_relevance_);
}

MeanFieldState BlrArdModel::state() const {
  MeanFieldState out;
  const auto d = static_cast<std::size_t>(state_.beta_star.size());
  const RowMajor v_inv = state_.v_inv;
  out.add("beta_tau",
          ExpFamParam::mv_normal_gamma({state_.beta_star.data(), d},
                                       {v_inv.data(), d * d}, state_.a_star,
                                       state_.b_star));
  if (!fixed_relevance_) {
    for (std::size_t j = 0; j < d; ++j) {
      const auto ji = static_cast<Eigen::Index>(j);
      out.add("alpha[" + std::to_string(j) + "]",
              ExpFamParam::gamma(state_.c_star[ji], state_.d_star[ji]));
    }
  }
  return out;
}

void BlrArdModel::set_state(const MeanFieldState &state) {
  const auto d = static_cast<std::size_t>(x_.cols());
  const std::size_t expected = fixed_relevance_ ? 1 : 1 + d;
  if (state.size() != expected) {
    throw DomainError("BlrArdModel::set_state: wrong factor count");
  }
  const ExpFamParam &bt = state.factors[0];
  if (bt.family() != Family::MvNormalGamma ||
      mv_normal_gamma_dim(bt.size()) != d) {
    throw DomainError("BlrArdModel::set_state: expected D-dim Normal-Gamma");
  }
  const auto di = static_cast<Eigen::Index>(d);
  BlrArdState s = state_;
  const auto p = bt.params();
  s.beta_star = Eigen::Map<const Eigen::VectorXd>(p.data(), di);
  s.v_inv = Eigen::Map<const RowMajor>(p.data() + d, di, di);
  s.a_star = p[d + d * d];
  s.b_star = p[d + d * d + 1];
  if (!fixed_relevance_) {
    for (std::size_t j = 0; j < d; ++j) {
      const ExpFamParam &g = state.factors[1 + j];
      if (g.family() != Family::Gamma) {
        throw DomainError("BlrArdModel::set_state: expected Gamma factor");
      }
      s.c_star[static_cast<Eigen::Index>(j)] = g[0];
      s.d_star[static_cast<Eigen::Index>(j)] = g[1];
    }
  }
  state_ = std::move(s);
}

void BlrArdModel::set_params(BlrArdState state) {
  const Eigen::Index d = x_.cols();
  if (state.beta_star.size() != d || state.v_inv.rows() != d ||
      state.v_inv.cols() != d || state.c_star.size() != d ||
      state.d_star.size() != d) {
    throw DomainError("BlrArdModel::set_params: shape mismatch");
  }
  state_ = std::move(state);
}

std::optional<double> BlrArdModel::heldout_log_predictive() const {
  if (!heldout_ || heldout_->first.rows() == 0) {
    return std::nullopt;
  }
  return blr_heldout_log_predictive(state_, heldout_->first, heldout_->second);
}

std::map<std::string, double> BlrArdModel::metadata() const {
  return {{"a0", config_.a0},
          {"b0", config_.b0},
          {"c0", config_.c0},
          {"d0", config_.d0},
          {"dimension", static_cast<double>(x_.cols())},
          {"fixed_relevance", fixed_relevance_ ? 1.0 : 0.0}};
}

FitReport blr_ard_fit(const Eigen::MatrixXd &x, const Eigen::VectorXd &y,
                      const BlrArdConfig &config, const FitConfig &fit,
                      InitStrategy init) {
  BlrArdModel model(x, y, config);
  const MeanFieldState start = init_state(model, init, fit.seed);
  return cavi_fit(model, fit, start);
}

RegressionData simulate_regression(std::size_t n, const Eigen::VectorXd &beta,
                                   double noise_sd, std::uint64_t seed) {
  if (beta.size() == 0 || !(noise_sd >= 0.0)) {
    throw DomainError("simulate_regression: need D >= 1 and noise_sd >= 0");
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  RegressionData out;
  const auto ni = static_cast<Eigen::Index>(n);
  out.x.resize(ni, beta.size());
  out.y.resize(ni);
  for (Eigen::Index i = 0; i < ni; ++i) {
    for (Eigen::Index d = 0; d < beta.size(); ++d) {
      out.x(i, d) = normal(rng);
    }
    out.y[i] = out.x.row(i).dot(beta) + noise_sd * normal(rng);
  }
  return out;
}

} // namespace mfvi::blr
