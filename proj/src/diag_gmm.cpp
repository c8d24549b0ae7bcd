#include "mfvi/diag_gmm.hpp"

#include <cmath>
#include <numbers>
#include <random>
#include <string>

#include "mfvi/errors.hpp"

namespace mfvi::gmm {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

std::string ng_label(Eigen::Index k, Eigen::Index d) {
  return "mu_tau[" + std::to_string(k) + "," + std::to_string(d) + "]";
}

// Unnormalized log responsibilities of one observation.
void log_resp_row(const DiagGmmState &s, std::span<const double> elog_pi,
                  const Data &x, Eigen::Index i, std::span<double> out) {
  const Eigen::Index dims = s.m.cols();
  for (Eigen::Index k = 0; k < s.m.rows(); ++k) {
    double v = elog_pi[static_cast<std::size_t>(k)];
    for (Eigen::Index d = 0; d < dims; ++d) {
      const GammaMoments g = gamma_moments(s.shape(k, d), s.rate(k, d));
      const double diff = x(i, d) - s.m(k, d);
      v += 0.5 * g.e_log_tau - 0.5 * kLog2Pi -
           0.5 * (1.0 / s.b(k, d) + g.e_tau * diff * diff);
    }
    out[static_cast<std::size_t>(k)] = v;
  }
}

std::vector<double> elog_weights(const Eigen::VectorXd &conc) {
  if (conc.size() == 1) {
    return {0.0};
  }
  return dirichlet_expected_log({conc.data(), static_cast<std::size_t>(conc.size())});
}

} // namespace

void DiagGmmConfig::validate() const {
  if (k == 0) {
    throw ConfigError("k", "must be at least 1");
  }
  const auto positive = [](double v) { return v > 0.0 && std::isfinite(v); };
  if (!positive(dirichlet_prior())) {
    throw ConfigError("a0", "must be positive");
  }
  if (!std::isfinite(m0)) {
    throw ConfigError("m0", "must be finite");
  }
  if (!positive(b0)) {
    throw ConfigError("b0", "must be positive");
  }
  if (!positive(alpha0)) {
    throw ConfigError("alpha0", "must be positive");
  }
  if (!positive(beta0)) {
    throw ConfigError("beta0", "must be positive");
  }
}

void update_responsibilities(DiagGmmState &state, const Data &x) {
  const auto k = static_cast<std::size_t>(state.m.rows());
  if (x.cols() != state.m.cols()) {
    throw DomainError("update_responsibilities: dimension mismatch");
  }
  const std::vector<double> elog_pi = elog_weights(state.conc);
  state.resp.resize(x.rows(), static_cast<Eigen::Index>(k));
  std::vector<double> row(k);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    log_resp_row(state, elog_pi, x, i, row);
    normalize_log_weights(row);
    for (std::size_t c = 0; c < k; ++c) {
      state.resp(i, static_cast<Eigen::Index>(c)) = row[c];
    }
  }
}

void update_mixing(DiagGmmState &state, const DiagGmmConfig &config) {
  state.conc = (state.resp.colwise().sum().transpose().array() +
                config.dirichlet_prior())
                   .matrix();
}

void update_normal_gamma(DiagGmmState &state, const Data &x,
                         const DiagGmmConfig &config) {
  const Eigen::Index dims = x.cols();
  for (Eigen::Index k = 0; k < state.m.rows(); ++k) {
    const Eigen::VectorXd r = state.resp.col(k);
    const double nk = r.sum();
    for (Eigen::Index d = 0; d < dims; ++d) {
      double xbar = config.m0;
      double scatter = 0.0;
      if (nk > 0.0) {
        xbar = r.dot(x.col(d)) / nk;
        scatter = (r.array() * (x.col(d).array() - xbar).square()).sum();
      }
      const double b = config.b0 + nk;
      const double dev = xbar - config.m0;
      state.b(k, d) = b;
      state.m(k, d) = (config.b0 * config.m0 + nk * xbar) / b;
      state.shape(k, d) = config.alpha0 + 0.5 * nk;
      state.rate(k, d) =
          config.beta0 + 0.5 * (scatter + config.b0 * nk * dev * dev / b);
    }
  }
}

void diag_gmm_sweep(DiagGmmState &state, const Data &x,
                    const DiagGmmConfig &config) {
  update_responsibilities(state, x);
  update_mixing(state, config);
  update_normal_gamma(state, x, config);
  if (!state.m.allFinite() || !state.rate.allFinite() || !state.conc.allFinite()) {
    throw NumericError(0, "non-finite diagonal GMM parameters");
  }
}

double diag_gmm_elbo(const DiagGmmState &s, const Data &x,
                     const DiagGmmConfig &config) {
  const Eigen::Index kk = s.m.rows();
  const Eigen::Index dims = s.m.cols();
  const std::vector<double> elog_pi = elog_weights(s.conc);
  double value = 0.0;

  // Mixing weights: E[log p(pi)] + H[q(pi)] (both vanish for K = 1).
  if (kk > 1) {
    const std::vector<double> prior(static_cast<std::size_t>(kk),
                                    config.dirichlet_prior());
    const std::span<const double> conc(s.conc.data(), static_cast<std::size_t>(kk));
    value += expected_log_dirichlet_pdf(prior, elog_pi) + dirichlet_entropy(conc);
  }

  Eigen::MatrixXd e_tau(kk, dims);
  Eigen::MatrixXd e_log_tau(kk, dims);
  for (Eigen::Index k = 0; k < kk; ++k) {
    for (Eigen::Index d = 0; d < dims; ++d) {
      const GammaMoments g = gamma_moments(s.shape(k, d), s.rate(k, d));
      e_tau(k, d) = g.e_tau;
      e_log_tau(k, d) = g.e_log_tau;
      const double dev = s.m(k, d) - config.m0;
      // E[log p(mu, tau)]
      value += 0.5 * (std::log(config.b0) + g.e_log_tau - kLog2Pi) -
               0.5 * config.b0 * (1.0 / s.b(k, d) + g.e_tau * dev * dev) +
               expected_log_gamma_pdf(config.alpha0, config.beta0, g);
      // H[q(mu, tau)]
      value += gamma_entropy(s.shape(k, d), s.rate(k, d)) +
               0.5 * (1.0 + kLog2Pi) - 0.5 * std::log(s.b(k, d)) -
               0.5 * g.e_log_tau;
    }
  }

  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index k = 0; k < kk; ++k) {
      const double r = s.resp(i, k);
      if (r == 0.0) {
        continue;
      }
      double ell = elog_pi[static_cast<std::size_t>(k)] - std::log(r);
      for (Eigen::Index d = 0; d < dims; ++d) {
        const double diff = x(i, d) - s.m(k, d);
        ell += 0.5 * e_log_tau(k, d) - 0.5 * kLog2Pi -
               0.5 * (1.0 / s.b(k, d) + e_tau(k, d) * diff * diff);
      }
      value += r * ell;
    }
  }
  if (!std::isfinite(value)) {
    throw NumericError(0, "non-finite diagonal GMM ELBO");
  }
  return value;
}

double diag_gmm_predictive_log_density(const DiagGmmState &s,
                                       std::span<const double> x) {
  const Eigen::Index kk = s.m.rows();
  const Eigen::Index dims = s.m.cols();
  if (x.size() != static_cast<std::size_t>(dims)) {
    throw DomainError("diag_gmm_predictive_log_density: dimension mismatch");
  }
  const double total = s.conc.sum();
  std::vector<double> terms(static_cast<std::size_t>(kk));
  for (Eigen::Index k = 0; k < kk; ++k) {
    double v = std::log(s.conc[k] / total);
    for (Eigen::Index d = 0; d < dims; ++d) {
      const double nu = 2.0 * s.shape(k, d);
      const double prec =
          s.shape(k, d) * s.b(k, d) / ((1.0 + s.b(k, d)) * s.rate(k, d));
      const double diff = x[static_cast<std::size_t>(d)] - s.m(k, d);
      v += std::lgamma(0.5 * (nu + 1.0)) - std::lgamma(0.5 * nu) +
           0.5 * std::log(prec / (std::numbers::pi * nu)) -
           0.5 * (nu + 1.0) * std::log1p(prec * diff * diff / nu);
    }
    terms[static_cast<std::size_t>(k)] = v;
  }
  return log_sum_exp(terms);
}

double diag_gmm_heldout_log_predictive(const DiagGmmState &state,
                                       const Data &heldout) {
  if (heldout.rows() == 0) {
    throw DomainError("heldout_log_predictive: empty held-out set");
  }
  if (heldout.cols() != state.m.cols()) {
    throw DomainError("heldout_log_predictive: dimension mismatch");
  }
  std::vector<double> row(static_cast<std::size_t>(heldout.cols()));
  double acc = 0.0;
  for (Eigen::Index i = 0; i < heldout.rows(); ++i) {
    for (Eigen::Index d = 0; d < heldout.cols(); ++d) {
      row[static_cast<std::size_t>(d)] = heldout(i, d);
    }
    acc += diag_gmm_predictive_log_density(state, row);
  }
  return acc / static_cast<double>(heldout.rows());
}

DiagGmmModel::DiagGmmModel(Data x, DiagGmmConfig config,
                           std::optional<Data> heldout)
    : x_(std::move(x)), config_(config), heldout_(std::move(heldout)) {
  config_.validate();
  if (x_.cols() == 0) {
    throw DomainError("DiagGmmModel: data must have at least one column");
  }
  if (heldout_ && heldout_->cols() != x_.cols()) {
    throw DomainError("DiagGmmModel: held-out dimension mismatch");
  }
  initialize(InitStrategy::Prior, 0);
}

void DiagGmmModel::initialize(InitStrategy strategy, std::uint64_t seed) {
  const auto kk = static_cast<Eigen::Index>(config_.k);
  const Eigen::Index dims = x_.cols();
  const Eigen::Index n = x_.rows();
  DiagGmmState s;
  s.b = Eigen::MatrixXd::Constant(kk, dims, config_.b0);
  if (strategy == InitStrategy::Prior) {
    s.conc = Eigen::VectorXd::Constant(kk, config_.dirichlet_prior());
    s.m = Eigen::MatrixXd::Constant(kk, dims, config_.m0);
    s.shape = Eigen::MatrixXd::Constant(kk, dims, config_.alpha0);
    s.rate = Eigen::MatrixXd::Constant(kk, dims, config_.beta0);
    s.resp = Eigen::MatrixXd::Constant(n, kk, 1.0 / static_cast<double>(kk));
  } else {
    Eigen::VectorXd mean = Eigen::VectorXd::Constant(dims, config_.m0);
    Eigen::VectorXd var = Eigen::VectorXd::Ones(dims);
    if (n > 1) {
      mean = x_.colwise().mean().transpose();
      var = (x_.rowwise() - mean.transpose()).array().square().colwise().sum() /
            static_cast<double>(n - 1);
    }
    for (Eigen::Index d = 0; d < dims; ++d) {
      if (!(var[d] > 0.0)) {
        var[d] = 1.0;
      }
    }
    const double per_component =
        static_cast<double>(n) / static_cast<double>(config_.k);
    s.conc = Eigen::VectorXd::Constant(kk, config_.dirichlet_prior() + per_component);
    s.m.resize(kk, dims);
    s.shape = Eigen::MatrixXd::Constant(kk, dims, config_.alpha0 + 0.5 * per_component);
    s.rate.resize(kk, dims);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (Eigen::Index k = 0; k < kk; ++k) {
      for (Eigen::Index d = 0; d < dims; ++d) {
        s.m(k, d) = mean[d] + std::sqrt(var[d]) * normal(rng);
        s.rate(k, d) = s.shape(k, d) * var[d];
      }
    }
    update_responsibilities(s, x_);
  }
  state_ = std::move(s);
}

void DiagGmmModel::sweep() { diag_gmm_sweep(state_, x_, config_); }

double DiagGmmModel::elbo() const { return diag_gmm_elbo(state_, x_, config_); }

MeanFieldState DiagGmmModel::state() const {
  MeanFieldState out;
  const auto kk = static_cast<std::size_t>(state_.conc.size());
  if (kk > 1) {
    out.add("pi", ExpFamParam::dirichlet({state_.conc.data(), kk}));
  }
  for (Eigen::Index k = 0; k < state_.m.rows(); ++k) {
    for (Eigen::Index d = 0; d < state_.m.cols(); ++d) {
      out.add(ng_label(k, d),
              ExpFamParam::normal_gamma(state_.m(k, d), state_.b(k, d),
                                        state_.shape(k, d), state_.rate(k, d)));
    }
  }
  std::vector<double> row(kk);
  for (Eigen::Index i = 0; i < state_.resp.rows(); ++i) {
    for (std::size_t k = 0; k < kk; ++k) {
      row[k] = state_.resp(i, static_cast<Eigen::Index>(k));
    }
    out.add("z[" + std::to_string(i) + "]", ExpFamParam::categorical(row));
  }
  return out;
}

void DiagGmmModel::set_state(const MeanFieldState &state) {
  const auto kk = static_cast<Eigen::Index>(config_.k);
  const Eigen::Index dims = x_.cols();
  const Eigen::Index n = x_.rows();
  const std::size_t expected =
      (kk > 1 ? 1u : 0u) + static_cast<std::size_t>(kk * dims + n);
  if (state.size() != expected) {
    throw DomainError("DiagGmmModel::set_state: wrong factor count");
  }
  DiagGmmState s;
  std::size_t f = 0;
  if (kk > 1) {
    const ExpFamParam &pi = state.factors[f++];
    if (pi.family() != Family::Dirichlet || pi.size() != config_.k) {
      throw DomainError("DiagGmmModel::set_state: expected K-Dirichlet factor");
    }
    s.conc = Eigen::Map<const Eigen::VectorXd>(pi.params().data(), kk);
  } else {
    s.conc = Eigen::VectorXd::Constant(1, config_.dirichlet_prior() +
                                              static_cast<double>(n));
  }
  s.m.resize(kk, dims);
  s.b.resize(kk, dims);
  s.shape.resize(kk, dims);
  s.rate.resize(kk, dims);
  for (Eigen::Index k = 0; k < kk; ++k) {
    for (Eigen::Index d = 0; d < dims; ++d) {
      const ExpFamParam &p = state.factors[f++];
      if (p.family() != Family::NormalGamma) {
        throw DomainError("DiagGmmModel::set_state: expected Normal-Gamma factor");
      }
      s.m(k, d) = p[0];
      s.b(k, d) = p[1];
      s.shape(k, d) = p[2];
      s.rate(k, d) = p[3];
    }
  }
  s.resp.resize(n, kk);
  for (Eigen::Index i = 0; i < n; ++i) {
    const ExpFamParam &p = state.factors[f++];
    if (p.family() != Family::Categorical || p.size() != config_.k) {
      throw DomainError("DiagGmmModel::set_state: expected K-categorical factor");
    }
    for (Eigen::Index k = 0; k < kk; ++k) {
      s.resp(i, k) = p[static_cast<std::size_t>(k)];
    }
  }
  state_ = std::move(s);
}

void DiagGmmModel::set_params(DiagGmmState state) {
  const auto kk = static_cast<Eigen::Index>(config_.k);
  if (state.conc.size() != kk || state.m.rows() != kk ||
      state.m.cols() != x_.cols() || state.resp.rows() != x_.rows() ||
      state.resp.cols() != kk) {
    throw DomainError("DiagGmmModel::set_params: shape mismatch");
  }
  state_ = std::move(state);
}

std::optional<double> DiagGmmModel::heldout_log_predictive() const {
  if (!heldout_ || heldout_->rows() == 0) {
    return std::nullopt;
  }
  return diag_gmm_heldout_log_predictive(state_, *heldout_);
}

std::map<std::string, double> DiagGmmModel::metadata() const {
  return {{"k", static_cast<double>(config_.k)},
          {"a0", config_.dirichlet_prior()},
          {"m0", config_.m0},
          {"b0", config_.b0},
          {"alpha0", config_.alpha0},
          {"beta0", config_.beta0},
          {"dimension", static_cast<double>(x_.cols())}};
}

DiagGmmConjugate::DiagGmmConjugate(const Data &x, DiagGmmConfig config,
                                   const Data *heldout)
    : x_(&x), config_(config), heldout_(heldout),
      dim_(static_cast<std::size_t>(x.cols())) {
  config_.validate();
}

ConjugateNatural DiagGmmConjugate::prior() const {
  const std::size_t kk = config_.k;
  ConjugateNatural a;
  a.stat.assign(kk + 4 * kk * dim_, 0.0);
  for (std::size_t k = 0; k < kk; ++k) {
    a.stat[k] = config_.dirichlet_prior() - 1.0;
  }
  for (std::size_t b = 0; b < kk * dim_; ++b) {
    double *ng = a.stat.data() + kk + 4 * b;
    ng[0] = config_.b0 * config_.m0;
    ng[1] = config_.b0;
    ng[2] = 2.0 * config_.alpha0 - 1.0;
    ng[3] = 2.0 * config_.beta0 + config_.b0 * config_.m0 * config_.m0;
  }
  return a;
}

DiagGmmState DiagGmmConjugate::globals(const ConjugateNatural &lambda) const {
  const std::size_t kk = config_.k;
  if (lambda.stat.size() != kk + 4 * kk * dim_) {
    throw DomainError("DiagGmmConjugate: lambda has wrong dimension");
  }
  const auto ki = static_cast<Eigen::Index>(kk);
  const auto di = static_cast<Eigen::Index>(dim_);
  DiagGmmState s;
  s.conc.resize(ki);
  for (std::size_t k = 0; k < kk; ++k) {
    s.conc[static_cast<Eigen::Index>(k)] = lambda.stat[k] + 1.0;
  }
  s.m.resize(ki, di);
  s.b.resize(ki, di);
  s.shape.resize(ki, di);
  s.rate.resize(ki, di);
  for (Eigen::Index k = 0; k < ki; ++k) {
    for (Eigen::Index d = 0; d < di; ++d) {
      const double *ng =
          lambda.stat.data() + kk + 4 * static_cast<std::size_t>(k * di + d);
      s.b(k, d) = ng[1];
      s.m(k, d) = ng[0] / ng[1];
      s.shape(k, d) = 0.5 * (ng[2] + 1.0);
      s.rate(k, d) = 0.5 * (ng[3] - ng[0] * s.m(k, d));
    }
  }
  if ((s.conc.array() <= 0.0).any() || (s.b.array() <= 0.0).any() ||
      (s.shape.array() <= 0.0).any() || (s.rate.array() <= 0.0).any()) {
    throw DomainError("DiagGmmConjugate: lambda outside the natural domain");
  }
  return s;
}

ConjugateNatural DiagGmmConjugate::to_natural(const DiagGmmState &s) const {
  ConjugateNatural out = prior();
  const std::size_t kk = config_.k;
  for (std::size_t k = 0; k < kk; ++k) {
    out.stat[k] = s.conc[static_cast<Eigen::Index>(k)] - 1.0;
  }
  for (Eigen::Index k = 0; k < s.m.rows(); ++k) {
    for (Eigen::Index d = 0; d < s.m.cols(); ++d) {
      double *ng =
          out.stat.data() + kk + 4 * static_cast<std::size_t>(k * s.m.cols() + d);
      ng[0] = s.b(k, d) * s.m(k, d);
      ng[1] = s.b(k, d);
      ng[2] = 2.0 * s.shape(k, d) - 1.0;
      ng[3] = 2.0 * s.rate(k, d) + s.b(k, d) * s.m(k, d) * s.m(k, d);
    }
  }
  out.count = static_cast<double>(num_points());
  return out;
}

ExpFamParam DiagGmmConjugate::local_step(const ConjugateNatural &lambda,
                                         std::size_t i) const {
  const DiagGmmState s = globals(lambda);
  std::vector<double> row(config_.k);
  log_resp_row(s, elog_weights(s.conc), *x_, static_cast<Eigen::Index>(i), row);
  normalize_log_weights(row);
  return ExpFamParam::categorical(row);
}

void DiagGmmConjugate::accumulate_suff_stat(const ExpFamParam &resp,
                                            std::size_t i, double weight,
                                            std::span<double> acc) const {
  const std::size_t kk = config_.k;
  const auto ii = static_cast<Eigen::Index>(i);
  for (std::size_t k = 0; k < kk; ++k) {
    const double r = weight * resp[k];
    acc[k] += r;
    for (std::size_t d = 0; d < dim_; ++d) {
      const double x = (*x_)(ii, static_cast<Eigen::Index>(d));
      double *ng = acc.data() + kk + 4 * (k * dim_ + d);
      ng[0] += r * x;
      ng[1] += r;
      ng[2] += r;
      ng[3] += r * x * x;
    }
  }
}

std::vector<double>
DiagGmmConjugate::expected_global_stats(const ConjugateNatural &lambda) const {
  const DiagGmmState s = globals(lambda);
  const std::size_t kk = config_.k;
  std::vector<double> out(lambda.dimension(), 0.0);
  const std::vector<double> elog_pi = elog_weights(s.conc);
  for (std::size_t k = 0; k < kk; ++k) {
    out[k] = elog_pi[k];
  }
  for (Eigen::Index k = 0; k < s.m.rows(); ++k) {
    for (Eigen::Index d = 0; d < s.m.cols(); ++d) {
      const GammaMoments g = gamma_moments(s.shape(k, d), s.rate(k, d));
      double *e = out.data() + kk + 4 * static_cast<std::size_t>(k * s.m.cols() + d);
      e[0] = g.e_tau * s.m(k, d);
      e[1] = -0.5 * (1.0 / s.b(k, d) + g.e_tau * s.m(k, d) * s.m(k, d));
      e[2] = 0.5 * g.e_log_tau;
      e[3] = -0.5 * g.e_tau;
    }
  }
  return out;
}

double
DiagGmmConjugate::global_log_normalizer(const ConjugateNatural &lambda) const {
  const DiagGmmState s = globals(lambda);
  double value = 0.0;
  if (s.conc.size() > 1) {
    value += log_multivariate_beta(
        {s.conc.data(), static_cast<std::size_t>(s.conc.size())});
  } else {
    value += std::lgamma(s.conc[0]) - std::lgamma(s.conc[0]);
  }
  for (Eigen::Index k = 0; k < s.m.rows(); ++k) {
    for (Eigen::Index d = 0; d < s.m.cols(); ++d) {
      value += std::lgamma(s.shape(k, d)) -
               s.shape(k, d) * std::log(s.rate(k, d)) - 0.5 * std::log(s.b(k, d));
    }
  }
  return value;
}

double DiagGmmConjugate::local_elbo_term(const ExpFamParam &resp,
                                         std::size_t /*i*/) const {
  return resp.entropy();
}

double DiagGmmConjugate::elbo_constant() const {
  const auto kk = static_cast<double>(config_.k);
  const auto dims = static_cast<double>(dim_);
  const auto n = static_cast<double>(num_points());
  double value = 0.0;
  if (config_.k > 1) {
    const std::vector<double> prior(config_.k, config_.dirichlet_prior());
    value -= log_multivariate_beta(prior);
  }
  value -= kk * dims *
           (std::lgamma(config_.alpha0) - config_.alpha0 * std::log(config_.beta0) -
            0.5 * std::log(config_.b0));
  value -= 0.5 * n * dims * kLog2Pi;
  return value;
}

MeanFieldState
DiagGmmConjugate::global_factors(const ConjugateNatural &lambda) const {
  const DiagGmmState s = globals(lambda);
  MeanFieldState out;
  if (s.conc.size() > 1) {
    out.add("pi", ExpFamParam::dirichlet(
                      {s.conc.data(), static_cast<std::size_t>(s.conc.size())}));
  }
  for (Eigen::Index k = 0; k < s.m.rows(); ++k) {
    for (Eigen::Index d = 0; d < s.m.cols(); ++d) {
      out.add(ng_label(k, d), ExpFamParam::normal_gamma(s.m(k, d), s.b(k, d),
                                                        s.shape(k, d),
                                                        s.rate(k, d)));
    }
  }
  return out;
}

std::optional<double>
DiagGmmConjugate::heldout_log_predictive(const ConjugateNatural &lambda) const {
  if (heldout_ == nullptr || heldout_->rows() == 0) {
    return std::nullopt;
  }
  return diag_gmm_heldout_log_predictive(globals(lambda), *heldout_);
}

Simulation simulate_histograms(std::size_t k, std::size_t n, std::uint64_t seed,
                               std::size_t bins, std::size_t channels) {
  if (k == 0 || n == 0 || bins == 0 || channels == 0) {
    throw DomainError("simulate_histograms: sizes must be positive");
  }
  std::mt19937_64 rng(seed);
  const std::size_t dims = bins * channels;
  const auto draw_simplex = [&](std::span<const double> conc, std::span<double> out) {
    double total = 0.0;
    for (std::size_t j = 0; j < conc.size(); ++j) {
      out[j] = std::gamma_distribution<double>(conc[j], 1.0)(rng);
      total += out[j];
    }
    for (double &v : out) {
      v /= total;
    }
  };

  Simulation sim;
  sim.means.resize(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(dims));
  std::vector<double> flat(bins, 1.0);
  std::vector<double> block(bins);
  std::vector<std::vector<double>> profiles(k, std::vector<double>(dims));
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t ch = 0; ch < channels; ++ch) {
      draw_simplex(flat, block);
      std::copy(block.begin(), block.end(), profiles[c].begin() + static_cast<std::ptrdiff_t>(ch * bins));
    }
    for (std::size_t j = 0; j < dims; ++j) {
      sim.means(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(j)) = profiles[c][j];
    }
  }

  constexpr double kConcentration = 500.0;
  std::uniform_int_distribution<std::size_t> pick(0, k - 1);
  sim.labels.resize(n);
  sim.data.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dims));
  std::vector<double> conc(bins);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = pick(rng);
    sim.labels[i] = c;
    for (std::size_t ch = 0; ch < channels; ++ch) {
      for (std::size_t j = 0; j < bins; ++j) {
        conc[j] = std::max(kConcentration * profiles[c][ch * bins + j], 1e-3);
      }
      draw_simplex(conc, block);
      for (std::size_t j = 0; j < bins; ++j) {
        sim.data(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(ch * bins + j)) =
            block[j];
      }
    }
  }
  return sim;
}

} // namespace mfvi::gmm
