#pragma once

// Latent Dirichlet allocation:
//
//   beta_k ~ Dir(eta 1_V),  theta_d ~ Dir(alpha),
//   z_dn ~ Cat(theta_d),  w_dn | z_dn = k ~ Cat(beta_k).
//
// q(beta_k) = Dir(lambda_k), q(theta_d) = Dir(gamma_d), q(z_dn) = Cat(phi_dn).
// Documents are bags of words; phi is kept per distinct (document, term) pair
// and weighted by the term's count.

#include <Eigen/Core>

#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "mfvi/condconj.hpp"
#include "mfvi/engine.hpp"

namespace mfvi::lda {

struct TermCount {
  std::size_t term;
  std::size_t count;
};

struct Document {
  std::vector<TermCount> terms;

  [[nodiscard]] std::size_t length() const;
};

struct Corpus {
  std::size_t vocab{0};
  std::vector<Document> docs;

  [[nodiscard]] std::size_t num_docs() const noexcept { return docs.size(); }
  [[nodiscard]] std::size_t total_tokens() const;
  /// Term ids below vocab, counts at least one.
  void validate() const;
};

struct LdaConfig {
  std::size_t k{2};
  double eta{0.01};
  std::vector<double> alpha; // empty means 1/K for every topic
  double inner_tol{1e-4};    // mean |delta gamma_d|
  std::size_t inner_max{100};

  [[nodiscard]] Eigen::VectorXd alpha_vector() const;
  void validate() const;
};

struct LdaState {
  Eigen::MatrixXd lambda;           // K x V
  Eigen::MatrixXd gamma;            // D x K
  std::vector<Eigen::MatrixXd> phi; // per document: distinct terms x K
};

/// E[log beta_kv] for every topic and term.
[[nodiscard]] Eigen::MatrixXd expected_log_topics(const Eigen::MatrixXd &lambda);

/// E[log theta] of Dir(conc); zero when there is a single component.
[[nodiscard]] Eigen::VectorXd expected_log_proportions(const Eigen::VectorXd &conc);

/// phi_dn^k proportional to exp(Psi(gamma_dk) + Psi(lambda_kw) - Psi(sum_v lambda_kv)).
void update_phi(LdaState &state, const Corpus &corpus, std::size_t d);
/// gamma_d = alpha + sum_n count_n phi_dn.
void update_gamma(LdaState &state, const Corpus &corpus, std::size_t d,
                  const LdaConfig &config);
/// lambda_kv = eta + sum_d sum_n count_n phi_dn^k [w_dn = v].
void update_lambda(LdaState &state, const Corpus &corpus,
                   const LdaConfig &config);

struct DocumentFit {
  Eigen::VectorXd gamma;
  Eigen::MatrixXd phi;
  std::size_t iterations{0};
};

/// Alternates phi and gamma updates for one document at fixed topics until
/// the mean absolute change of gamma drops below inner_tol (capped at
/// inner_max rounds). Ends on a gamma update.
[[nodiscard]] DocumentFit infer_document(const Document &doc,
                                         const Eigen::MatrixXd &elog_beta,
                                         const LdaConfig &config,
                                         Eigen::VectorXd gamma_init);

/// Starting point gamma_d = alpha + N_d / K.
[[nodiscard]] Eigen::VectorXd initial_gamma(const Document &doc,
                                            const LdaConfig &config);

[[nodiscard]] double lda_elbo(const LdaState &state, const Corpus &corpus,
                              const LdaConfig &config);

/// Per-word log predictive of `heldout`: each document is folded in with the
/// topics frozen, then log sum_k E[theta_k] E[beta_kw] is averaged over tokens.
[[nodiscard]] double lda_heldout_log_predictive(const Eigen::MatrixXd &lambda,
                                                const Corpus &heldout,
                                                const LdaConfig &config);

/// lambda_kv = eta + u_kv 0.01 tokens / (K V), u_kv ~ U(0, 1).
[[nodiscard]] Eigen::MatrixXd initial_lambda(const Corpus &corpus,
                                             const LdaConfig &config,
                                             std::uint64_t seed);

class LdaModel final : public VariationalModel {
public:
  LdaModel(Corpus corpus, LdaConfig config,
           std::optional<Corpus> heldout = std::nullopt);

  /// Both strategies perturb lambda around eta (the symmetric point is a
  /// saddle); DataCalibrated also seeds each topic with a random document.
  void initialize(InitStrategy strategy, std::uint64_t seed) override;
  /// Per document: inner phi/gamma loop warm-started from the current gamma.
  /// Then lambda.
  void sweep() override;
  [[nodiscard]] double elbo() const override;
  /// "beta[k]" Dirichlet, "theta[d]" Dirichlet (K > 1), "z[d,j]" categorical
  /// per distinct term j of document d.
  [[nodiscard]] MeanFieldState state() const override;
  void set_state(const MeanFieldState &state) override;
  [[nodiscard]] std::optional<double> heldout_log_predictive() const override;
  [[nodiscard]] std::map<std::string, double> metadata() const override;

  [[nodiscard]] const LdaState &params() const noexcept { return state_; }
  void set_params(LdaState state);
  [[nodiscard]] const Corpus &corpus() const noexcept { return corpus_; }

private:
  Corpus corpus_;
  LdaConfig config_;
  std::optional<Corpus> heldout_;
  LdaState state_;
};

/// Global/local form for SVI. Natural layout: lambda_kv - 1, row-major K x V.
/// The local factor of document d is its (gamma_d, phi_d) pair.
class LdaConjugate {
public:
  using Local = DocumentFit;

  LdaConjugate(const Corpus &corpus, LdaConfig config,
               const Corpus *heldout = nullptr);

  [[nodiscard]] std::size_t num_points() const noexcept {
    return corpus_->num_docs();
  }
  [[nodiscard]] ConjugateNatural prior() const;
  /// Inner loop from the fresh start initial_gamma.
  [[nodiscard]] Local local_step(const ConjugateNatural &lambda,
                                 std::size_t d) const;
  void accumulate_suff_stat(const Local &local, std::size_t d, double weight,
                            std::span<double> acc) const;
  [[nodiscard]] std::vector<double>
  expected_global_stats(const ConjugateNatural &lambda) const;
  [[nodiscard]] double
  global_log_normalizer(const ConjugateNatural &lambda) const;
  [[nodiscard]] double local_elbo_term(const Local &local, std::size_t d) const;
  /// -K log B(eta 1_V).
  [[nodiscard]] double elbo_constant() const;
  [[nodiscard]] MeanFieldState
  global_factors(const ConjugateNatural &lambda) const;
  [[nodiscard]] std::optional<double>
  heldout_log_predictive(const ConjugateNatural &lambda) const;

  [[nodiscard]] ConjugateNatural to_natural(const Eigen::MatrixXd &lambda) const;
  [[nodiscard]] Eigen::MatrixXd topics(const ConjugateNatural &lambda) const;

private:
  const Corpus *corpus_;
  LdaConfig config_;
  const Corpus *heldout_;
};

struct LdaFit {
  FitReport report;
  LdaState state;
};

[[nodiscard]] LdaFit lda_cavi_fit(const Corpus &corpus, const LdaConfig &config,
                                  const FitConfig &fit,
                                  InitStrategy init = InitStrategy::Prior,
                                  const std::optional<Corpus> &heldout = std::nullopt);

/// Stochastic variational inference for LDA, starting from initial_lambda(corpus, config, fit.seed).
/// The returned state holds lambda and gamma/phi folded in at the final lambda.
[[nodiscard]] LdaFit lda_svi_fit(const Corpus &corpus, const LdaConfig &config,
                                 const StepSchedule &schedule,
                                 const FitConfig &fit, std::size_t batch_size = 1,
                                 const Corpus *heldout = nullptr);

struct CorpusSimulation {
  Corpus corpus;
  Eigen::MatrixXd topics;        // K x V, rows sum to one
  Eigen::MatrixXd proportions;   // D x K
};

struct CorpusOptions {
  double eta{0.1};
  double alpha{0.5};
  /// Topic k is uniform over its own block of V / K terms.
  bool disjoint{false};
};

[[nodiscard]] CorpusSimulation simulate_corpus(std::size_t k, std::size_t docs,
                                               std::size_t doc_length,
                                               std::size_t vocab,
                                               std::uint64_t seed,
                                               const CorpusOptions &options = {});

/// Under the best matching of fitted to true topics (k <= 8), the smallest
/// mass that a fitted topic E[beta] puts on the support of its true topic.
[[nodiscard]] double aligned_topic_mass(const Eigen::MatrixXd &lambda,
                                        const Eigen::MatrixXd &true_topics);

} // namespace mfvi::lda
