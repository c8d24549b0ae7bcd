#include "mfvi/gmm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

#include "mfvi/errors.hpp"

namespace mfvi::gmm {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

std::string mu_label(std::size_t k, std::size_t j, std::size_t d) {
  return d == 1 ? "mu[" + std::to_string(k) + "]"
                : "mu[" + std::to_string(k) + "," + std::to_string(j) + "]";
}

std::string c_label(std::size_t i) { return "c[" + std::to_string(i) + "]"; }

void assignment_row(const Eigen::MatrixXd &m, const Eigen::MatrixXd &s2,
                    const double *x, std::span<double> out) {
  const auto k = static_cast<std::size_t>(m.rows());
  const auto d = static_cast<std::size_t>(m.cols());
  for (std::size_t c = 0; c < k; ++c) {
    double logit = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const auto mom = gaussian_moments(m(c, j), s2(c, j));
      logit += mom.e_mu * x[j] - 0.5 * mom.e_mu2;
    }
    out[c] = logit;
  }
  normalize_log_weights(out);
}

} // namespace

void UniGmmConfig::validate() const {
  if (k == 0) {
    throw ConfigError("k", "must be at least 1");
  }
  if (!(sigma2 > 0.0) || !std::isfinite(sigma2)) {
    throw ConfigError("sigma2", "must be positive");
  }
}

void update_assignments(UniGmmState &state, const Data &x) {
  const auto n = static_cast<std::size_t>(x.rows());
  const std::size_t k = state.k();
  if (static_cast<std::size_t>(x.cols()) != state.dimension()) {
    throw DomainError("update_assignments: dimension mismatch");
  }
  state.phi.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(k));
  // Row-major scratch keeps each row contiguous.
  std::vector<double> row(k);
  const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>
      xr = x;
  for (std::size_t i = 0; i < n; ++i) {
    assignment_row(state.m, state.s2, xr.row(static_cast<Eigen::Index>(i)).data(),
                   row);
    for (std::size_t c = 0; c < k; ++c) {
      state.phi(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) =
          row[c];
    }
  }
}

void update_components(UniGmmState &state, const Data &x, double sigma2) {
  if (state.phi.rows() != x.rows()) {
    throw DomainError("update_components: responsibilities/data mismatch");
  }
  // Fixed-order sums over i.
  const Eigen::VectorXd counts = state.phi.colwise().sum().transpose();
  const Eigen::MatrixXd weighted = state.phi.transpose() * x; // K x d
  for (Eigen::Index c = 0; c < state.m.rows(); ++c) {
    const double precision = 1.0 / sigma2 + counts[c];
    for (Eigen::Index j = 0; j < state.m.cols(); ++j) {
      state.m(c, j) = weighted(c, j) / precision;
      state.s2(c, j) = 1.0 / precision;
    }
  }
}

double gmm_elbo(const UniGmmState &state, const Data &x, double sigma2) {
  const auto n = x.rows();
  const auto k = state.m.rows();
  const auto d = state.m.cols();
  double value = 0.0;
  for (Eigen::Index c = 0; c < k; ++c) {
    for (Eigen::Index j = 0; j < d; ++j) {
      // E[log p(mu_kj)] + H[q(mu_kj)]
      value += expected_log_gaussian_pdf(state.m(c, j), state.s2(c, j), 0.0,
                                         sigma2) +
               gaussian_entropy(state.s2(c, j));
    }
  }
  value -= static_cast<double>(n) * std::log(static_cast<double>(k));
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index c = 0; c < k; ++c) {
      const double p = state.phi(i, c);
      if (p == 0.0) {
        continue;
      }
      double ell = 0.0;
      for (Eigen::Index j = 0; j < d; ++j) {
        ell += expected_log_gaussian_pdf(state.m(c, j), state.s2(c, j), x(i, j),
                                         1.0);
      }
      value += p * (ell - std::log(p));
    }
  }
  if (!std::isfinite(value)) {
    throw NumericError(0, "non-finite GMM ELBO");
  }
  return value;
}

double predictive_log_density(const Eigen::MatrixXd &means,
                              std::span<const double> x_new) {
  const auto k = static_cast<std::size_t>(means.rows());
  const auto d = static_cast<std::size_t>(means.cols());
  if (x_new.size() != d) {
    throw DomainError("predictive_log_density: dimension mismatch");
  }
  std::vector<double> terms(k);
  for (std::size_t c = 0; c < k; ++c) {
    double sq = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double diff = x_new[j] - means(static_cast<Eigen::Index>(c),
                                           static_cast<Eigen::Index>(j));
      sq += diff * diff;
    }
    terms[c] = -0.5 * sq;
  }
  return log_sum_exp(terms) - std::log(static_cast<double>(k)) -
         0.5 * static_cast<double>(d) * kLog2Pi;
}

double heldout_log_predictive(const Eigen::MatrixXd &means,
                              const Data &heldout) {
  if (heldout.rows() == 0) {
    throw DomainError("heldout_log_predictive: empty held-out set");
  }
  if (heldout.cols() != means.cols()) {
    throw DomainError("heldout_log_predictive: dimension mismatch");
  }
  double acc = 0.0;
  std::vector<double> row(static_cast<std::size_t>(heldout.cols()));
  for (Eigen::Index i = 0; i < heldout.rows(); ++i) {
    for (Eigen::Index j = 0; j < heldout.cols(); ++j) {
      row[static_cast<std::size_t>(j)] = heldout(i, j);
    }
    acc += predictive_log_density(means, row);
  }
  return acc / static_cast<double>(heldout.rows());
}

UniGmmModel::UniGmmModel(Data x, UniGmmConfig config,
                         std::optional<Data> heldout)
    : x_(std::move(x)), config_(config), heldout_(std::move(heldout)) {
  config_.validate();
  if (x_.cols() == 0) {
    throw DomainError("UniGmmModel: data must have at least one column");
  }
  if (heldout_ && heldout_->cols() != x_.cols()) {
    throw DomainError("UniGmmModel: held-out dimension mismatch");
  }
  initialize(InitStrategy::Prior, 0);
}

void UniGmmModel::initialize(InitStrategy strategy, std::uint64_t seed) {
  const auto k = static_cast<Eigen::Index>(config_.k);
  const Eigen::Index d = x_.cols();
  const Eigen::Index n = x_.rows();
  UniGmmState s;
  if (strategy == InitStrategy::Prior) {
    s.m = Eigen::MatrixXd::Zero(k, d);
    s.s2 = Eigen::MatrixXd::Constant(k, d, config_.sigma2);
    s.phi = Eigen::MatrixXd::Constant(n, k, 1.0 / static_cast<double>(k));
  } else {
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(d);
    Eigen::VectorXd var = Eigen::VectorXd::Ones(d);
    if (n > 0) {
      mean = x_.colwise().mean().transpose();
      if (n > 1) {
        var = (x_.rowwise() - mean.transpose()).array().square().colwise().sum() /
              static_cast<double>(n - 1);
      }
      for (Eigen::Index j = 0; j < d; ++j) {
        if (!(var[j] > 0.0)) {
          var[j] = 1.0;
        }
      }
    }
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    s.m.resize(k, d);
    s.s2.resize(k, d);
    for (Eigen::Index c = 0; c < k; ++c) {
      for (Eigen::Index j = 0; j < d; ++j) {
        s.m(c, j) = mean[j] + std::sqrt(var[j]) * normal(rng);
        s.s2(c, j) = var[j];
      }
    }
    update_assignments(s, x_);
  }
  state_ = std::move(s);
}

void UniGmmModel::sweep() {
  update_assignments(state_, x_);
  update_components(state_, x_, config_.sigma2);
}

double UniGmmModel::elbo() const { return gmm_elbo(state_, x_, config_.sigma2); }

MeanFieldState UniGmmModel::state() const {
  MeanFieldState out;
  const std::size_t d = state_.dimension();
  for (Eigen::Index c = 0; c < state_.m.rows(); ++c) {
    for (Eigen::Index j = 0; j < state_.m.cols(); ++j) {
      out.add(mu_label(static_cast<std::size_t>(c), static_cast<std::size_t>(j), d),
              ExpFamParam::gaussian(state_.m(c, j), state_.s2(c, j)));
    }
  }
  std::vector<double> row(state_.k());
  for (Eigen::Index i = 0; i < state_.phi.rows(); ++i) {
    for (Eigen::Index c = 0; c < state_.phi.cols(); ++c) {
      row[static_cast<std::size_t>(c)] = state_.phi(i, c);
    }
    out.add(c_label(static_cast<std::size_t>(i)), ExpFamParam::categorical(row));
  }
  return out;
}

void UniGmmModel::set_state(const MeanFieldState &state) {
  const auto k = static_cast<Eigen::Index>(config_.k);
  const Eigen::Index d = x_.cols();
  const Eigen::Index n = x_.rows();
  if (state.size() != static_cast<std::size_t>(k * d + n)) {
    throw DomainError("UniGmmModel::set_state: wrong factor count");
  }
  UniGmmState s;
  s.m.resize(k, d);
  s.s2.resize(k, d);
  s.phi.resize(n, k);
  std::size_t f = 0;
  for (Eigen::Index c = 0; c < k; ++c) {
    for (Eigen::Index j = 0; j < d; ++j, ++f) {
      const ExpFamParam &p = state.factors[f];
      if (p.family() != Family::Gaussian) {
        throw DomainError("UniGmmModel::set_state: expected Gaussian factor");
      }
      s.m(c, j) = p[0];
      s.s2(c, j) = p[1];
    }
  }
  for (Eigen::Index i = 0; i < n; ++i, ++f) {
    const ExpFamParam &p = state.factors[f];
    if (p.family() != Family::Categorical || p.size() != config_.k) {
      throw DomainError("UniGmmModel::set_state: expected K-categorical factor");
    }
    for (Eigen::Index c = 0; c < k; ++c) {
      s.phi(i, c) = p[static_cast<std::size_t>(c)];
    }
  }
  state_ = std::move(s);
}

void UniGmmModel::set_params(UniGmmState state) {
  if (state.m.rows() != static_cast<Eigen::Index>(config_.k) ||
      state.m.cols() != x_.cols() || state.s2.rows() != state.m.rows() ||
      state.s2.cols() != state.m.cols() || state.phi.rows() != x_.rows() ||
      state.phi.cols() != state.m.rows()) {
    throw DomainError("UniGmmModel::set_params: shape mismatch");
  }
  if ((state.s2.array() <= 0.0).any()) {
    throw DomainError("UniGmmModel::set_params: variances must be positive");
  }
  state_ = std::move(state);
}

std::optional<double> UniGmmModel::heldout_log_predictive() const {
  if (!heldout_ || heldout_->rows() == 0) {
    return std::nullopt;
  }
  return gmm::heldout_log_predictive(state_.m, *heldout_);
}

std::map<std::string, double> UniGmmModel::metadata() const {
  return {{"k", static_cast<double>(config_.k)},
          {"sigma2", config_.sigma2},
          {"dimension", static_cast<double>(x_.cols())}};
}

UniGmmConjugate::UniGmmConjugate(const Data &x, UniGmmConfig config,
                                 const Data *heldout)
    : x_(&x), config_(config), heldout_(heldout),
      dim_(static_cast<std::size_t>(x.cols())) {
  config_.validate();
}

ConjugateNatural UniGmmConjugate::prior() const {
  ConjugateNatural a;
  a.stat.assign(2 * config_.k * dim_, 0.0);
  for (std::size_t b = 0; b < config_.k * dim_; ++b) {
    a.stat[2 * b + 1] = -0.5 / config_.sigma2;
  }
  a.count = 0.0;
  return a;
}

std::pair<Eigen::MatrixXd, Eigen::MatrixXd>
UniGmmConjugate::components(const ConjugateNatural &lambda) const {
  const auto k = static_cast<Eigen::Index>(config_.k);
  const auto d = static_cast<Eigen::Index>(dim_);
  if (lambda.stat.size() != 2 * config_.k * dim_) {
    throw DomainError("UniGmmConjugate: lambda has wrong dimension");
  }
  Eigen::MatrixXd m(k, d);
  Eigen::MatrixXd s2(k, d);
  for (Eigen::Index c = 0; c < k; ++c) {
    for (Eigen::Index j = 0; j < d; ++j) {
      const std::size_t b = 2 * static_cast<std::size_t>(c * d + j);
      if (!(lambda.stat[b + 1] < 0.0)) {
        throw DomainError("UniGmmConjugate: invalid precision coordinate");
      }
      s2(c, j) = -0.5 / lambda.stat[b + 1];
      m(c, j) = lambda.stat[b] * s2(c, j);
    }
  }
  return {std::move(m), std::move(s2)};
}

ConjugateNatural UniGmmConjugate::to_natural(const Eigen::MatrixXd &m,
                                             const Eigen::MatrixXd &s2) const {
  ConjugateNatural out;
  out.stat.resize(2 * config_.k * dim_);
  for (Eigen::Index c = 0; c < m.rows(); ++c) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      const std::size_t b = 2 * static_cast<std::size_t>(c * m.cols() + j);
      out.stat[b] = m(c, j) / s2(c, j);
      out.stat[b + 1] = -0.5 / s2(c, j);
    }
  }
  out.count = static_cast<double>(num_points());
  return out;
}

ExpFamParam UniGmmConjugate::local_step(const ConjugateNatural &lambda,
                                        std::size_t i) const {
  const auto [m, s2] = components(lambda);
  std::vector<double> row(config_.k);
  std::vector<double> xi(dim_);
  for (std::size_t j = 0; j < dim_; ++j) {
    xi[j] = (*x_)(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  }
  assignment_row(m, s2, xi.data(), row);
  return ExpFamParam::categorical(row);
}

void UniGmmConjugate::accumulate_suff_stat(const ExpFamParam &phi,
                                           std::size_t i, double weight,
                                           std::span<double> acc) const {
  for (std::size_t c = 0; c < config_.k; ++c) {
    const double w = weight * phi[c];
    for (std::size_t j = 0; j < dim_; ++j) {
      const std::size_t b = 2 * (c * dim_ + j);
      acc[b] += w * (*x_)(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      acc[b + 1] -= 0.5 * w;
    }
  }
}

std::vector<double>
UniGmmConjugate::expected_global_stats(const ConjugateNatural &lambda) const {
  const auto [m, s2] = components(lambda);
  std::vector<double> out(lambda.dimension(), 0.0);
  for (Eigen::Index c = 0; c < m.rows(); ++c) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      const std::size_t b = 2 * static_cast<std::size_t>(c * m.cols() + j);
      out[b] = m(c, j);
      out[b + 1] = m(c, j) * m(c, j) + s2(c, j);
    }
  }
  return out;
}

double
UniGmmConjugate::global_log_normalizer(const ConjugateNatural &lambda) const {
  const auto [m, s2] = components(lambda);
  return (m.array().square() / (2.0 * s2.array()) + 0.5 * s2.array().log()).sum();
}

double UniGmmConjugate::local_elbo_term(const ExpFamParam &phi,
                                        std::size_t /*i*/) const {
  return phi.entropy();
}

double UniGmmConjugate::elbo_constant() const {
  const auto n = static_cast<double>(num_points());
  const auto kd = static_cast<double>(config_.k * dim_);
  const auto d = static_cast<double>(dim_);
  return -0.5 * kd * std::log(config_.sigma2) -
         n * std::log(static_cast<double>(config_.k)) - 0.5 * n * d * kLog2Pi -
         0.5 * x_->squaredNorm();
}

MeanFieldState
UniGmmConjugate::global_factors(const ConjugateNatural &lambda) const {
  const auto [m, s2] = components(lambda);
  MeanFieldState out;
  for (Eigen::Index c = 0; c < m.rows(); ++c) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      out.add(mu_label(static_cast<std::size_t>(c), static_cast<std::size_t>(j), dim_),
              ExpFamParam::gaussian(m(c, j), s2(c, j)));
    }
  }
  return out;
}

std::optional<double>
UniGmmConjugate::heldout_log_predictive(const ConjugateNatural &lambda) const {
  if (heldout_ == nullptr || heldout_->rows() == 0) {
    return std::nullopt;
  }
  return gmm::heldout_log_predictive(components(lambda).first, *heldout_);
}

Simulation simulate(std::size_t k, std::size_t n, std::uint64_t seed,
                    std::size_t dimension, const SimulationOptions &options) {
  if (k == 0 || n == 0 || dimension == 0) {
    throw DomainError("simulate: k, n and dimension must be positive");
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const auto kk = static_cast<Eigen::Index>(k);
  const auto d = static_cast<Eigen::Index>(dimension);

  Simulation sim;
  sim.means.resize(kk, d);
  constexpr int kMaxAttempts = 100000;
  for (Eigen::Index c = 0; c < kk; ++c) {
    int attempts = 0;
    for (;;) {
      for (Eigen::Index j = 0; j < d; ++j) {
        sim.means(c, j) = options.mean_sd * normal(rng);
      }
      bool separated = true;
      for (Eigen::Index o = 0; o < c && separated; ++o) {
        separated = (sim.means.row(c) - sim.means.row(o)).norm() >=
                    options.min_separation;
      }
      if (separated) {
        break;
      }
      if (++attempts >= kMaxAttempts) {
        throw DomainError("simulate: cannot reach the requested separation");
      }
    }
  }

  std::uniform_int_distribution<std::size_t> pick(0, k - 1);
  sim.labels.resize(n);
  sim.data.resize(static_cast<Eigen::Index>(n), d);
  for (std::size_t i = 0; i < n; ++i) {
    sim.labels[i] = (options.cover_all && i < k) ? i : pick(rng);
    const auto ii = static_cast<Eigen::Index>(i);
    for (Eigen::Index j = 0; j < d; ++j) {
      sim.data(ii, j) =
          sim.means(static_cast<Eigen::Index>(sim.labels[i]), j) + normal(rng);
    }
  }
  return sim;
}

double aligned_accuracy(const Eigen::MatrixXd &phi,
                        std::span<const std::size_t> labels) {
  const auto n = static_cast<std::size_t>(phi.rows());
  const auto k = static_cast<std::size_t>(phi.cols());
  if (labels.size() != n || n == 0) {
    throw DomainError("aligned_accuracy: label count mismatch");
  }
  if (k > 8) {
    throw DomainError("aligned_accuracy: too many components to enumerate");
  }
  std::size_t true_k = k;
  for (std::size_t l : labels) {
    true_k = std::max(true_k, l + 1);
  }
  // confusion[fitted][true]
  std::vector<std::vector<std::size_t>> confusion(k,
                                                  std::vector<std::size_t>(true_k));
  for (std::size_t i = 0; i < n; ++i) {
    Eigen::Index best = 0;
    phi.row(static_cast<Eigen::Index>(i)).maxCoeff(&best);
    ++confusion[static_cast<std::size_t>(best)][labels[i]];
  }
  std::vector<std::size_t> perm(true_k);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::size_t best_hits = 0;
  do {
    std::size_t hits = 0;
    for (std::size_t c = 0; c < k; ++c) {
      hits += confusion[c][perm[c]];
    }
    best_hits = std::max(best_hits, hits);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return static_cast<double>(best_hits) / static_cast<double>(n);
}

} // namespace mfvi::gmm
