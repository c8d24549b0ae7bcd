#include "mfvi/lda.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <string>

#include "mfvi/errors.hpp"
#include "mfvi/expfam.hpp"

namespace mfvi::lda {

namespace {

// phi rows for one document given E[log theta_d] and a lookup of
// E[log beta_kw].
template <class ElogBeta>
Eigen::MatrixXd fill_phi(const Document &doc, const Eigen::VectorXd &elog_theta,
                         const ElogBeta &elog_beta) {
  const Eigen::Index k = elog_theta.size();
  Eigen::MatrixXd phi(static_cast<Eigen::Index>(doc.terms.size()), k);
  std::vector<double> row(static_cast<std::size_t>(k));
  for (std::size_t j = 0; j < doc.terms.size(); ++j) {
    const std::size_t w = doc.terms[j].term;
    for (Eigen::Index t = 0; t < k; ++t) {
      row[static_cast<std::size_t>(t)] = elog_theta[t] + elog_beta(t, w);
    }
    normalize_log_weights(row);
    for (Eigen::Index t = 0; t < k; ++t) {
      phi(static_cast<Eigen::Index>(j), t) = row[static_cast<std::size_t>(t)];
    }
  }
  return phi;
}

Eigen::VectorXd counts_of(const Document &doc) {
  Eigen::VectorXd c(static_cast<Eigen::Index>(doc.terms.size()));
  for (std::size_t j = 0; j < doc.terms.size(); ++j) {
    c[static_cast<Eigen::Index>(j)] = static_cast<double>(doc.terms[j].count);
  }
  return c;
}

template <class ElogBeta>
DocumentFit infer_impl(const Document &doc, const ElogBeta &elog_beta,
                       const LdaConfig &config, Eigen::VectorXd gamma) {
  const Eigen::VectorXd alpha = config.alpha_vector();
  const Eigen::VectorXd counts = counts_of(doc);
  DocumentFit fit;
  if (doc.terms.empty()) {
    fit.gamma = alpha;
    fit.phi.resize(0, alpha.size());
    return fit;
  }
  for (std::size_t it = 1; it <= config.inner_max; ++it) {
    fit.phi = fill_phi(doc, expected_log_proportions(gamma), elog_beta);
    Eigen::VectorXd next = alpha + fit.phi.transpose() * counts;
    const double change = (next - gamma).cwiseAbs().mean();
    gamma = std::move(next);
    fit.iterations = it;
    if (change < config.inner_tol) {
      break;
    }
  }
  fit.gamma = std::move(gamma);
  return fit;
}

// Lookup of E[log beta_kw] straight from lambda, for the terms a document uses.
struct SparseElogBeta {
  const double *lambda; // row-major K x V
  std::size_t vocab;
  Eigen::VectorXd psi_rowsum;

  double operator()(Eigen::Index k, std::size_t w) const {
    return digamma(lambda[static_cast<std::size_t>(k) * vocab + w]) -
           psi_rowsum[k];
  }
};

// sum over terms of count * sum_k phi_k (E[log theta_k] - log phi_k), plus the
// theta prior and entropy terms.
double document_local_term(const Document &doc, const DocumentFit &fit,
                           const Eigen::VectorXd &alpha) {
  const Eigen::VectorXd elog_theta = expected_log_proportions(fit.gamma);
  double value = 0.0;
  if (alpha.size() > 1) {
    value += expected_log_dirichlet_pdf(
                 {alpha.data(), static_cast<std::size_t>(alpha.size())},
                 {elog_theta.data(), static_cast<std::size_t>(elog_theta.size())}) +
             dirichlet_entropy(
                 {fit.gamma.data(), static_cast<std::size_t>(fit.gamma.size())});
  }
  for (std::size_t j = 0; j < doc.terms.size(); ++j) {
    const auto c = static_cast<double>(doc.terms[j].count);
    for (Eigen::Index k = 0; k < alpha.size(); ++k) {
      const double p = fit.phi(static_cast<Eigen::Index>(j), k);
      if (p > 0.0) {
        value += c * p * (elog_theta[k] - std::log(p));
      }
    }
  }
  return value;
}

double topic_terms(const Eigen::MatrixXd &lambda, const Eigen::MatrixXd &elog_beta,
                   double eta) {
  const auto v = static_cast<std::size_t>(lambda.cols());
  const std::vector<double> prior(v, eta);
  double value = 0.0;
  std::vector<double> row(v);
  std::vector<double> elog(v);
  for (Eigen::Index k = 0; k < lambda.rows(); ++k) {
    for (std::size_t w = 0; w < v; ++w) {
      row[w] = lambda(k, static_cast<Eigen::Index>(w));
      elog[w] = elog_beta(k, static_cast<Eigen::Index>(w));
    }
    value += expected_log_dirichlet_pdf(prior, elog) + dirichlet_entropy(row);
  }
  return value;
}

} // namespace

std::size_t Document::length() const {
  std::size_t n = 0;
  for (const TermCount &tc : terms) {
    n += tc.count;
  }
  return n;
}

std::size_t Corpus::total_tokens() const {
  std::size_t n = 0;
  for (const Document &d : docs) {
    n += d.length();
  }
  return n;
}

void Corpus::validate() const {
  if (vocab < 2) {
    throw DomainError("corpus: vocabulary must have at least two terms");
  }
  for (const Document &d : docs) {
    for (const TermCount &tc : d.terms) {
      if (tc.term >= vocab) {
        throw DomainError("corpus: term id " + std::to_string(tc.term) +
                          " outside the vocabulary");
      }
      if (tc.count == 0) {
        throw DomainError("corpus: zero count");
      }
    }
  }
}

Eigen::VectorXd LdaConfig::alpha_vector() const {
  if (alpha.empty()) {
    return Eigen::VectorXd::Constant(static_cast<Eigen::Index>(k),
                                     1.0 / static_cast<double>(k));
  }
  return Eigen::Map<const Eigen::VectorXd>(alpha.data(),
                                           static_cast<Eigen::Index>(alpha.size()));
}

void LdaConfig::validate() const {
  if (k == 0) {
    throw ConfigError("k", "must be at least 1");
  }
  if (!(eta > 0.0) || !std::isfinite(eta)) {
    throw ConfigError("eta", "must be positive");
  }
  if (!alpha.empty()) {
    if (alpha.size() != k && alpha.size() != 1) {
      throw ConfigError("alpha", "needs one value or K values");
    }
    for (double a : alpha) {
      if (!(a > 0.0) || !std::isfinite(a)) {
        throw ConfigError("alpha", "must be positive");
      }
    }
  }
  if (!(inner_tol > 0.0) || inner_max == 0) {
    throw ConfigError("inner_tol", "inner loop needs a positive tolerance and cap");
  }
}

Eigen::MatrixXd expected_log_topics(const Eigen::MatrixXd &lambda) {
  Eigen::MatrixXd out(lambda.rows(), lambda.cols());
  for (Eigen::Index k = 0; k < lambda.rows(); ++k) {
    const double psi_sum = digamma(lambda.row(k).sum());
    for (Eigen::Index v = 0; v < lambda.cols(); ++v) {
      out(k, v) = digamma(lambda(k, v)) - psi_sum;
    }
  }
  return out;
}

Eigen::VectorXd expected_log_proportions(const Eigen::VectorXd &conc) {
  if (conc.size() == 1) {
    return Eigen::VectorXd::Zero(1);
  }
  Eigen::VectorXd out(conc.size());
  dirichlet_expected_log({conc.data(), static_cast<std::size_t>(conc.size())},
                         {out.data(), static_cast<std::size_t>(out.size())});
  return out;
}

void update_phi(LdaState &state, const Corpus &corpus, std::size_t d) {
  const Eigen::VectorXd gamma = state.gamma.row(static_cast<Eigen::Index>(d));
  Eigen::VectorXd psi_rowsum(state.lambda.rows());
  for (Eigen::Index k = 0; k < state.lambda.rows(); ++k) {
    psi_rowsum[k] = digamma(state.lambda.row(k).sum());
  }
  const auto elog_beta = [&](Eigen::Index k, std::size_t w) {
    return digamma(state.lambda(k, static_cast<Eigen::Index>(w))) - psi_rowsum[k];
  };
  state.phi[d] = fill_phi(corpus.docs[d], expected_log_proportions(gamma), elog_beta);
}

void update_gamma(LdaState &state, const Corpus &corpus, std::size_t d,
                  const LdaConfig &config) {
  const Eigen::VectorXd counts = counts_of(corpus.docs[d]);
  state.gamma.row(static_cast<Eigen::Index>(d)) =
      (config.alpha_vector() + state.phi[d].transpose() * counts).transpose();
}

void update_lambda(LdaState &state, const Corpus &corpus,
                   const LdaConfig &config) {
  state.lambda.setConstant(config.eta);
  for (std::size_t d = 0; d < corpus.num_docs(); ++d) {
    const Document &doc = corpus.docs[d];
    for (std::size_t j = 0; j < doc.terms.size(); ++j) {
      const auto w = static_cast<Eigen::Index>(doc.terms[j].term);
      const auto c = static_cast<double>(doc.terms[j].count);
      state.lambda.col(w) +=
          c * state.phi[d].row(static_cast<Eigen::Index>(j)).transpose();
    }
  }
}

Eigen::VectorXd initial_gamma(const Document &doc, const LdaConfig &config) {
  return (config.alpha_vector().array() +
          static_cast<double>(doc.length()) / static_cast<double>(config.k))
      .matrix();
}

DocumentFit infer_document(const Document &doc, const Eigen::MatrixXd &elog_beta,
                           const LdaConfig &config, Eigen::VectorXd gamma_init) {
  const auto lookup = [&](Eigen::Index k, std::size_t w) {
    return elog_beta(k, static_cast<Eigen::Index>(w));
  };
  return infer_impl(doc, lookup, config, std::move(gamma_init));
}

double lda_elbo(const LdaState &state, const Corpus &corpus,
                const LdaConfig &config) {
  const Eigen::MatrixXd elog_beta = expected_log_topics(state.lambda);
  const Eigen::VectorXd alpha = config.alpha_vector();
  double value = topic_terms(state.lambda, elog_beta, config.eta);
  for (std::size_t d = 0; d < corpus.num_docs(); ++d) {
    const Document &doc = corpus.docs[d];
    DocumentFit fit{state.gamma.row(static_cast<Eigen::Index>(d)).transpose(),
                    state.phi[d], 0};
    value += document_local_term(doc, fit, alpha);
    for (std::size_t j = 0; j < doc.terms.size(); ++j) {
      const auto c = static_cast<double>(doc.terms[j].count);
      const auto w = static_cast<Eigen::Index>(doc.terms[j].term);
      value += c * state.phi[d].row(static_cast<Eigen::Index>(j)).dot(elog_beta.col(w));
    }
  }
  if (!std::isfinite(value)) {
    throw NumericError(0, "non-finite LDA ELBO");
  }
  return value;
}

double lda_heldout_log_predictive(const Eigen::MatrixXd &lambda,
                                  const Corpus &heldout,
                                  const LdaConfig &config) {
  const Eigen::MatrixXd elog_beta = expected_log_topics(lambda);
  const Eigen::MatrixXd beta_mean =
      lambda.array().colwise() / lambda.rowwise().sum().array();
  double acc = 0.0;
  std::size_t tokens = 0;
  for (const Document &doc : heldout.docs) {
    for (const TermCount &tc : doc.terms) {
      if (tc.term >= static_cast<std::size_t>(lambda.cols())) {
        throw DomainError("heldout_log_predictive: term outside the vocabulary");
      }
    }
    const DocumentFit fit =
        infer_document(doc, elog_beta, config, initial_gamma(doc, config));
    const Eigen::VectorXd theta = fit.gamma / fit.gamma.sum();
    for (const TermCount &tc : doc.terms) {
      const double p = theta.dot(beta_mean.col(static_cast<Eigen::Index>(tc.term)));
      acc += static_cast<double>(tc.count) * std::log(p);
      tokens += tc.count;
    }
  }
  if (tokens == 0) {
    throw DomainError("heldout_log_predictive: empty held-out set");
  }
  return acc / static_cast<double>(tokens);
}

Eigen::MatrixXd initial_lambda(const Corpus &corpus, const LdaConfig &config,
                               std::uint64_t seed) {
  const auto k = static_cast<Eigen::Index>(config.k);
  const auto v = static_cast<Eigen::Index>(corpus.vocab);
  const double scale = 0.01 * static_cast<double>(corpus.total_tokens()) /
                       static_cast<double>(k * v);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  Eigen::MatrixXd lambda(k, v);
  for (Eigen::Index r = 0; r < k; ++r) {
    for (Eigen::Index c = 0; c < v; ++c) {
      lambda(r, c) = config.eta + scale * unif(rng);
    }
  }
  return lambda;
}

LdaModel::LdaModel(Corpus corpus, LdaConfig config, std::optional<Corpus> heldout)
    : corpus_(std::move(corpus)), config_(std::move(config)),
      heldout_(std::move(heldout)) {
  config_.validate();
  corpus_.validate();
  if (corpus_.num_docs() == 0) {
    throw DomainError("LdaModel: empty corpus");
  }
  if (heldout_ && heldout_->vocab > corpus_.vocab) {
    throw DomainError("LdaModel: held-out vocabulary exceeds the training one");
  }
  initialize(InitStrategy::Prior, 0);
}

void LdaModel::initialize(InitStrategy strategy, std::uint64_t seed) {
  LdaState s;
  s.lambda = initial_lambda(corpus_, config_, seed);
  if (strategy == InitStrategy::DataCalibrated) {
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
    std::vector<std::size_t> order(corpus_.num_docs());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t k = 0; k < config_.k; ++k) {
      const Document &doc = corpus_.docs[order[k % order.size()]];
      for (const TermCount &tc : doc.terms) {
        s.lambda(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(tc.term)) +=
            static_cast<double>(tc.count);
      }
    }
  }
  const auto kk = static_cast<Eigen::Index>(config_.k);
  s.gamma.resize(static_cast<Eigen::Index>(corpus_.num_docs()), kk);
  s.phi.resize(corpus_.num_docs());
  for (std::size_t d = 0; d < corpus_.num_docs(); ++d) {
    s.gamma.row(static_cast<Eigen::Index>(d)) =
        initial_gamma(corpus_.docs[d], config_).transpose();
    s.phi[d] = Eigen::MatrixXd::Constant(
        static_cast<Eigen::Index>(corpus_.docs[d].terms.size()), kk,
        1.0 / static_cast<double>(config_.k));
  }
  state_ = std::move(s);
}

void LdaModel::sweep() {
  const Eigen::MatrixXd elog_beta = expected_log_topics(state_.lambda);
  for (std::size_t d = 0; d < corpus_.num_docs(); ++d) {
    const auto di = static_cast<Eigen::Index>(d);
    DocumentFit fit = infer_document(corpus_.docs[d], elog_beta, config_,
                                     state_.gamma.row(di).transpose());
    state_.gamma.row(di) = fit.gamma.transpose();
    if (fit.phi.rows() > 0) {
      state_.phi[d] = std::move(fit.phi);
    }
  }
  update_lambda(state_, corpus_, config_);
  if (!state_.lambda.allFinite() || !state_.gamma.allFinite()) {
    throw NumericError(0, "non-finite LDA parameters");
  }
}

double LdaModel::elbo() const { return lda_elbo(state_, corpus_, config_); }

MeanFieldState LdaModel::state() const {
  MeanFieldState out;
  const auto v = static_cast<std::size_t>(corpus_.vocab);
  std::vector<double> row(v);
  for (Eigen::Index k = 0; k < state_.lambda.rows(); ++k) {
    for (std::size_t w = 0; w < v; ++w) {
      row[w] = state_.lambda(k, static_cast<Eigen::Index>(w));
    }
    out.add("beta[" + std::to_string(k) + "]", ExpFamParam::dirichlet(row));
  }
  std::vector<double> krow(config_.k);
  for (std::size_t d = 0; d < corpus_.num_docs(); ++d) {
    const auto di = static_cast<Eigen::Index>(d);
    if (config_.k > 1) {
      for (std::size_t k = 0; k < config_.k; ++k) {
        krow[k] = state_.gamma(di, static_cast<Eigen::Index>(k));
      }
      out.add("theta[" + std::to_string(d) + "]", ExpFamParam::dirichlet(krow));
    }
    for (Eigen::Index j = 0; j < state_.phi[d].rows(); ++j) {
      for (std::size_t k = 0; k < config_.k; ++k) {
        krow[k] = state_.phi[d](j, static_cast<Eigen::Index>(k));
      }
      out.add("z[" + std::to_string(d) + "," + std::to_string(j) + "]",
              ExpFamParam::categorical(krow));
    }
  }
  return out;
}

void LdaModel::set_state(const MeanFieldState &state) {
  const auto kk = static_cast<Eigen::Index>(config_.k);
  LdaState s = state_;
  std::size_t f = 0;
  const auto next = [&](Family family, std::size_t size) -> const ExpFamParam & {
    if (f >= state.size()) {
      throw DomainError("LdaModel::set_state: too few factors");
    }
    const ExpFamParam &p = state.factors[f++];
    if (p.family() != family || p.size() != size) {
      throw DomainError("LdaModel::set_state: unexpected factor " +
                        state.labels[f - 1]);
    }
    return p;
  };
  for (Eigen::Index k = 0; k < kk; ++k) {
    const ExpFamParam &p = next(Family::Dirichlet, corpus_.vocab);
    for (std::size_t w = 0; w < corpus_.vocab; ++w) {
      s.lambda(k, static_cast<Eigen::Index>(w)) = p[w];
    }
  }
  for (std::size_t d = 0; d < corpus_.num_docs(); ++d) {
    const auto di = static_cast<Eigen::Index>(d);
    if (config_.k > 1) {
      const ExpFamParam &p = next(Family::Dirichlet, config_.k);
      for (Eigen::Index k = 0; k < kk; ++k) {
        s.gamma(di, k) = p[static_cast<std::size_t>(k)];
      }
    } else {
      s.gamma(di, 0) = config_.alpha_vector()[0] +
                       static_cast<double>(corpus_.docs[d].length());
    }
    for (Eigen::Index j = 0; j < s.phi[d].rows(); ++j) {
      const ExpFamParam &p = next(Family::Categorical, config_.k);
      for (Eigen::Index k = 0; k < kk; ++k) {
        s.phi[d](j, k) = p[static_cast<std::size_t>(k)];
      }
    }
  }
  if (f != state.size()) {
    throw DomainError("LdaModel::set_state: too many factors");
  }
  state_ = std::move(s);
}

void LdaModel::set_params(LdaState state) {
  if (state.lambda.rows() != static_cast<Eigen::Index>(config_.k) ||
      state.lambda.cols() != static_cast<Eigen::Index>(corpus_.vocab) ||
      state.gamma.rows() != static_cast<Eigen::Index>(corpus_.num_docs()) ||
      state.phi.size() != corpus_.num_docs()) {
    throw DomainError("LdaModel::set_params: shape mismatch");
  }
  state_ = std::move(state);
}

std::optional<double> LdaModel::heldout_log_predictive() const {
  if (!heldout_ || heldout_->total_tokens() == 0) {
    return std::nullopt;
  }
  return lda_heldout_log_predictive(state_.lambda, *heldout_, config_);
}

std::map<std::string, double> LdaModel::metadata() const {
  std::map<std::string, double> out{{"k", static_cast<double>(config_.k)},
                                    {"eta", config_.eta},
                                    {"vocab", static_cast<double>(corpus_.vocab)}};
  const Eigen::VectorXd alpha = config_.alpha_vector();
  for (Eigen::Index k = 0; k < alpha.size(); ++k) {
    out["alpha[" + std::to_string(k) + "]"] = alpha[k];
  }
  return out;
}

LdaConjugate::LdaConjugate(const Corpus &corpus, LdaConfig config,
                           const Corpus *heldout)
    : corpus_(&corpus), config_(std::move(config)), heldout_(heldout) {
  config_.validate();
  corpus_->validate();
}

ConjugateNatural LdaConjugate::prior() const {
  ConjugateNatural a;
  a.stat.assign(config_.k * corpus_->vocab, config_.eta - 1.0);
  return a;
}

Eigen::MatrixXd LdaConjugate::topics(const ConjugateNatural &lambda) const {
  const auto k = static_cast<Eigen::Index>(config_.k);
  const auto v = static_cast<Eigen::Index>(corpus_->vocab);
  if (lambda.stat.size() != static_cast<std::size_t>(k * v)) {
    throw DomainError("LdaConjugate: lambda has wrong dimension");
  }
  Eigen::MatrixXd out =
      Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                     Eigen::RowMajor>>(lambda.stat.data(), k, v);
  out.array() += 1.0;
  if ((out.array() <= 0.0).any()) {
    throw DomainError("LdaConjugate: lambda outside the natural domain");
  }
  return out;
}

ConjugateNatural LdaConjugate::to_natural(const Eigen::MatrixXd &lambda) const {
  ConjugateNatural out = prior();
  const auto v = static_cast<std::size_t>(corpus_->vocab);
  for (std::size_t k = 0; k < config_.k; ++k) {
    for (std::size_t w = 0; w < v; ++w) {
      out.stat[k * v + w] =
          lambda(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(w)) - 1.0;
    }
  }
  out.count = static_cast<double>(num_points());
  return out;
}

LdaConjugate::Local LdaConjugate::local_step(const ConjugateNatural &lambda,
                                             std::size_t d) const {
  const std::size_t v = corpus_->vocab;
  if (lambda.stat.size() != config_.k * v) {
    throw DomainError("LdaConjugate: lambda has wrong dimension");
  }
  // lambda_kv = stat + 1; digamma(lambda_kv) read through an offset view.
  std::vector<double> shifted(lambda.stat.size());
  std::transform(lambda.stat.begin(), lambda.stat.end(), shifted.begin(),
                 [](double s) { return s + 1.0; });
  SparseElogBeta elog{shifted.data(), v,
                      Eigen::VectorXd(static_cast<Eigen::Index>(config_.k))};
  for (std::size_t k = 0; k < config_.k; ++k) {
    const double total = std::accumulate(shifted.begin() + static_cast<std::ptrdiff_t>(k * v),
                                         shifted.begin() + static_cast<std::ptrdiff_t>((k + 1) * v),
                                         0.0);
    elog.psi_rowsum[static_cast<Eigen::Index>(k)] = digamma(total);
  }
  const Document &doc = corpus_->docs[d];
  return infer_impl(doc, elog, config_, initial_gamma(doc, config_));
}

void LdaConjugate::accumulate_suff_stat(const Local &local, std::size_t d,
                                        double weight,
                                        std::span<double> acc) const {
  const Document &doc = corpus_->docs[d];
  const std::size_t v = corpus_->vocab;
  for (std::size_t j = 0; j < doc.terms.size(); ++j) {
    const double c = weight * static_cast<double>(doc.terms[j].count);
    for (std::size_t k = 0; k < config_.k; ++k) {
      acc[k * v + doc.terms[j].term] +=
          c * local.phi(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(k));
    }
  }
}

std::vector<double>
LdaConjugate::expected_global_stats(const ConjugateNatural &lambda) const {
  const Eigen::MatrixXd elog = expected_log_topics(topics(lambda));
  std::vector<double> out(lambda.dimension(), 0.0);
  const std::size_t v = corpus_->vocab;
  for (std::size_t k = 0; k < config_.k; ++k) {
    for (std::size_t w = 0; w < v; ++w) {
      out[k * v + w] = elog(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(w));
    }
  }
  return out;
}

double LdaConjugate::global_log_normalizer(const ConjugateNatural &lambda) const {
  const Eigen::MatrixXd lam = topics(lambda);
  double value = 0.0;
  for (Eigen::Index k = 0; k < lam.rows(); ++k) {
    for (Eigen::Index w = 0; w < lam.cols(); ++w) {
      value += std::lgamma(lam(k, w));
    }
    value -= std::lgamma(lam.row(k).sum());
  }
  return value;
}

double LdaConjugate::local_elbo_term(const Local &local, std::size_t d) const {
  return document_local_term(corpus_->docs[d], local, config_.alpha_vector());
}

double LdaConjugate::elbo_constant() const {
  const auto v = static_cast<double>(corpus_->vocab);
  return -static_cast<double>(config_.k) *
         (v * std::lgamma(config_.eta) - std::lgamma(v * config_.eta));
}

MeanFieldState LdaConjugate::global_factors(const ConjugateNatural &lambda) const {
  const Eigen::MatrixXd lam = topics(lambda);
  MeanFieldState out;
  std::vector<double> row(corpus_->vocab);
  for (Eigen::Index k = 0; k < lam.rows(); ++k) {
    for (Eigen::Index w = 0; w < lam.cols(); ++w) {
      row[static_cast<std::size_t>(w)] = lam(k, w);
    }
    out.add("beta[" + std::to_string(k) + "]", ExpFamParam::dirichlet(row));
  }
  return out;
}

std::optional<double>
LdaConjugate::heldout_log_predictive(const ConjugateNatural &lambda) const {
  if (heldout_ == nullptr || heldout_->total_tokens() == 0) {
    return std::nullopt;
  }
  return lda_heldout_log_predictive(topics(lambda), *heldout_, config_);
}

LdaFit lda_cavi_fit(const Corpus &corpus, const LdaConfig &config,
                    const FitConfig &fit, InitStrategy init,
                    const std::optional<Corpus> &heldout) {
  LdaModel model(corpus, config, heldout);
  const MeanFieldState start = init_state(model, init, fit.seed);
  LdaFit out;
  out.report = cavi_fit(model, fit, start);
  out.state = model.params();
  return out;
}

LdaFit lda_svi_fit(const Corpus &corpus, const LdaConfig &config,
                   const StepSchedule &schedule, const FitConfig &fit,
                   std::size_t batch_size, const Corpus *heldout) {
  const LdaConjugate model(corpus, config, heldout);
  if (corpus.num_docs() == 0) {
    throw DomainError("lda_svi_fit: empty corpus");
  }
  auto result = svi_fit(model, schedule, fit,
                        model.to_natural(initial_lambda(corpus, config, fit.seed)),
                        SviOptions{batch_size});
  LdaFit out;
  out.report = std::move(result.report);
  out.state.lambda = model.topics(result.lambda);
  const auto kk = static_cast<Eigen::Index>(config.k);
  out.state.gamma.resize(static_cast<Eigen::Index>(corpus.num_docs()), kk);
  out.state.phi.resize(corpus.num_docs());
  for (std::size_t d = 0; d < corpus.num_docs(); ++d) {
    DocumentFit local = model.local_step(result.lambda, d);
    out.state.gamma.row(static_cast<Eigen::Index>(d)) = local.gamma.transpose();
    out.state.phi[d] = std::move(local.phi);
  }
  return out;
}

CorpusSimulation simulate_corpus(std::size_t k, std::size_t docs,
                                 std::size_t doc_length, std::size_t vocab,
                                 std::uint64_t seed, const CorpusOptions &options) {
  if (k == 0 || vocab < 2 || (options.disjoint && vocab < k)) {
    throw DomainError("simulate_corpus: need k >= 1 and enough vocabulary");
  }
  std::mt19937_64 rng(seed);
  const auto dirichlet = [&](std::size_t size, double conc) {
    std::vector<double> out(size);
    double total = 0.0;
    while (!(total > 0.0)) {
      total = 0.0;
      for (double &x : out) {
        x = std::gamma_distribution<double>(conc, 1.0)(rng);
        total += x;
      }
    }
    for (double &x : out) {
      x /= total;
    }
    return out;
  };

  CorpusSimulation sim;
  const auto ki = static_cast<Eigen::Index>(k);
  const auto vi = static_cast<Eigen::Index>(vocab);
  sim.topics = Eigen::MatrixXd::Zero(ki, vi);
  std::vector<std::discrete_distribution<std::size_t>> word_dist;
  for (std::size_t t = 0; t < k; ++t) {
    std::vector<double> row(vocab, 0.0);
    if (options.disjoint) {
      const std::size_t block = vocab / k;
      const std::size_t begin = t * block;
      const std::size_t end = t + 1 == k ? vocab : begin + block;
      for (std::size_t w = begin; w < end; ++w) {
        row[w] = 1.0 / static_cast<double>(end - begin);
      }
    } else {
      row = dirichlet(vocab, options.eta);
    }
    for (std::size_t w = 0; w < vocab; ++w) {
      sim.topics(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(w)) = row[w];
    }
    word_dist.emplace_back(row.begin(), row.end());
  }

  sim.corpus.vocab = vocab;
  sim.proportions.resize(static_cast<Eigen::Index>(docs), ki);
  for (std::size_t d = 0; d < docs; ++d) {
    const std::vector<double> theta =
        k == 1 ? std::vector<double>{1.0} : dirichlet(k, options.alpha);
    std::discrete_distribution<std::size_t> topic_dist(theta.begin(), theta.end());
    std::map<std::size_t, std::size_t> counts;
    for (std::size_t n = 0; n < doc_length; ++n) {
      ++counts[word_dist[topic_dist(rng)](rng)];
    }
    Document doc;
    for (const auto &[term, count] : counts) {
      doc.terms.push_back({term, count});
    }
    sim.corpus.docs.push_back(std::move(doc));
    for (std::size_t t = 0; t < k; ++t) {
      sim.proportions(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(t)) =
          theta[t];
    }
  }
  return sim;
}

double aligned_topic_mass(const Eigen::MatrixXd &lambda,
                          const Eigen::MatrixXd &true_topics) {
  const Eigen::Index k = lambda.rows();
  if (true_topics.rows() != k || true_topics.cols() != lambda.cols() || k > 8) {
    throw DomainError("aligned_topic_mass: shape mismatch or k > 8");
  }
  const Eigen::MatrixXd mean = lambda.array().colwise() / lambda.rowwise().sum().array();
  Eigen::MatrixXd mass(k, k); // fitted topic i on support of true topic j
  for (Eigen::Index i = 0; i < k; ++i) {
    for (Eigen::Index j = 0; j < k; ++j) {
      mass(i, j) = (true_topics.row(j).array() > 0.0).select(mean.row(i).array(), 0.0).sum();
    }
  }
  std::vector<Eigen::Index> perm(static_cast<std::size_t>(k));
  std::iota(perm.begin(), perm.end(), Eigen::Index{0});
  double best = 0.0;
  do {
    double worst = 1.0;
    for (Eigen::Index i = 0; i < k; ++i) {
      worst = std::min(worst, mass(i, perm[static_cast<std::size_t>(i)]));
    }
    best = std::max(best, worst);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

} // namespace mfvi::lda
