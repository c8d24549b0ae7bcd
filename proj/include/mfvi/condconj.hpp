#pragma once

// Conditionally conjugate global/local models and stochastic variational
// inference on their global parameter.
//
// A model is described by its conjugate prior alpha = [alpha1, alpha2] and
// the expected sufficient statistic E_phi[t(z_i, x_i)] of each local factor.
// Global parameters are handled in natural coordinates throughout:
// CAVI's global update is alpha + [sum_i E[t_i], n] and the natural gradient
// is that update minus the current lambda.
//
// ELBO convention (cond_conj_elbo): terms that do not depend on the
// variational parameters are dropped, namely the prior log normalizer a(alpha),
// E[log h(beta)] for a constant base measure and any data-only terms of
// log h(z_i, x_i). Each model reports the dropped amount via elbo_constant()
// so that cond_conj_elbo + elbo_constant equals the full ELBO.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mfvi/engine.hpp"
#include "mfvi/errors.hpp"
#include "mfvi/expfam.hpp"

namespace mfvi {

/// A point [stat, count] in the conjugate family's natural coordinates.
/// `count` pairs with -a(beta), the log normalizer of the local likelihood.
struct ConjugateNatural {
  std::vector<double> stat;
  double count{0.0};

  [[nodiscard]] std::size_t dimension() const noexcept {
    return stat.size() + 1;
  }
  bool operator==(const ConjugateNatural &) const = default;
};

template <class M>
concept ConditionallyConjugate =
    requires(const M &m, const ConjugateNatural &lambda, std::size_t i,
             const typename M::Local &local, std::span<double> acc,
             std::span<const typename M::Local> locals) {
      typename M::Local;
      { m.num_points() } -> std::convertible_to<std::size_t>;
      { m.prior() } -> std::convertible_to<ConjugateNatural>;
      /// phi_i = E_lambda[eta(beta, x_i)].
      { m.local_step(lambda, i) } -> std::same_as<typename M::Local>;
      /// acc += weight * E_phi[t(z_i, x_i)].
      m.accumulate_suff_stat(local, i, 1.0, acc);
      /// E_lambda[T(beta)] = [E beta, -E a(beta)], length stat.size() + 1.
      { m.expected_global_stats(lambda) } -> std::same_as<std::vector<double>>;
      /// a(lambda) of q(beta), excluding constant base-measure terms.
      { m.global_log_normalizer(lambda) } -> std::convertible_to<double>;
      /// E[log h(z_i, x_i)] - E[log q(z_i)] up to data-only constants.
      { m.local_elbo_term(local, i) } -> std::convertible_to<double>;
      { m.elbo_constant() } -> std::convertible_to<double>;
      { m.global_factors(lambda) } -> std::same_as<MeanFieldState>;
    };

template <class M> struct GlobalLocalState {
  ConjugateNatural lambda;
  std::vector<typename M::Local> phis;
};

struct StepSchedule {
  double kappa{0.7};
  double delay{1.0};
  double scale{1.0};

  /// Throws ConfigError unless kappa in (0.5, 1], delay >= 0, scale > 0.
  void validate() const {
    if (!(kappa > 0.5 && kappa <= 1.0)) {
      throw ConfigError("kappa", "must lie in (0.5, 1]");
    }
    if (!(delay >= 0.0) || !std::isfinite(delay)) {
      throw ConfigError("delay", "must be nonnegative");
    }
    if (!(scale > 0.0) || !std::isfinite(scale)) {
      throw ConfigError("scale", "must be positive");
    }
  }
};

/// epsilon_t = scale * (t + delay)^-kappa for t >= 1.
[[nodiscard]] inline double step_size(const StepSchedule &schedule,
                                      std::size_t t) {
  if (t == 0) {
    throw DomainError("step_size: t must be >= 1");
  }
  return schedule.scale *
         std::pow(static_cast<double>(t) + schedule.delay, -schedule.kappa);
}

template <ConditionallyConjugate M>
[[nodiscard]] typename M::Local local_step(const M &model,
                                           const ConjugateNatural &lambda,
                                           std::size_t i) {
  if (i >= model.num_points()) {
    throw DomainError("local_step: index out of range");
  }
  return model.local_step(lambda, i);
}

/// lambda = [alpha1 + sum_i E_phi_i[t(z_i, x_i)], alpha2 + n].
template <ConditionallyConjugate M>
[[nodiscard]] ConjugateNatural
global_step(const M &model, std::span<const typename M::Local> phis) {
  if (phis.size() != model.num_points()) {
    throw DomainError("global_step: need one local factor per data point");
  }
  ConjugateNatural out = model.prior();
  for (std::size_t i = 0; i < phis.size(); ++i) {
    model.accumulate_suff_stat(phis[i], i, 1.0, out.stat);
  }
  out.count += static_cast<double>(phis.size());
  return out;
}

/// g(lambda) = update - lambda, componentwise in natural coordinates.
[[nodiscard]] inline std::vector<double>
natural_gradient(const ConjugateNatural &lambda,
                 const ConjugateNatural &coordinate_update) {
  if (lambda.stat.size() != coordinate_update.stat.size()) {
    throw DomainError("natural_gradient: dimension mismatch");
  }
  std::vector<double> g(lambda.dimension());
  for (std::size_t j = 0; j < lambda.stat.size(); ++j) {
    g[j] = coordinate_update.stat[j] - lambda.stat[j];
  }
  g.back() = coordinate_update.count - lambda.count;
  return g;
}

/// The global update computed as though the points in `batch` were each
/// repeated n / |batch| times.
template <ConditionallyConjugate M>
[[nodiscard]] ConjugateNatural
replicated_update(const M &model, const ConjugateNatural &lambda,
                  std::span<const std::size_t> batch) {
  const std::size_t n = model.num_points();
  if (batch.empty()) {
    throw DomainError("replicated_update: empty batch");
  }
  const double scale =
      static_cast<double>(n) / static_cast<double>(batch.size());
  ConjugateNatural out = model.prior();
  for (std::size_t i : batch) {
    if (i >= n) {
      throw DomainError("replicated_update: index out of range");
    }
    const auto phi = model.local_step(lambda, i);
    model.accumulate_suff_stat(phi, i, scale, out.stat);
  }
  out.count += static_cast<double>(n);
  return out;
}

/// g_hat(lambda) = alpha + n [E_phi*_t[t(z_t, x_t)], 1] - lambda, with the
/// local factor of point t (0-based) optimized at lambda first.
template <ConditionallyConjugate M>
[[nodiscard]] std::vector<double>
noisy_natural_gradient(const M &model, const ConjugateNatural &lambda,
                       std::size_t t) {
  if (t >= model.num_points()) {
    throw DomainError("noisy_natural_gradient: index out of range");
  }
  const std::size_t batch[] = {t};
  return natural_gradient(lambda, replicated_update(model, lambda, batch));
}

template <ConditionallyConjugate M>
[[nodiscard]] std::vector<double>
minibatch_natural_gradient(const M &model, const ConjugateNatural &lambda,
                           std::span<const std::size_t> batch) {
  return natural_gradient(lambda, replicated_update(model, lambda, batch));
}

/// Full natural gradient with every local factor optimized at lambda.
template <ConditionallyConjugate M>
[[nodiscard]] std::vector<double>
full_natural_gradient(const M &model, const ConjugateNatural &lambda) {
  std::vector<typename M::Local> phis;
  phis.reserve(model.num_points());
  for (std::size_t i = 0; i < model.num_points(); ++i) {
    phis.push_back(model.local_step(lambda, i));
  }
  return natural_gradient(lambda, global_step<M>(model, phis));
}

/// ELBO of a global/local state, up to model.elbo_constant().
template <ConditionallyConjugate M>
[[nodiscard]] double cond_conj_elbo(const M &model,
                                    const ConjugateNatural &lambda,
                                    std::span<const typename M::Local> phis) {
  const ConjugateNatural expected = global_step<M>(model, phis);
  const std::vector<double> e_stats = model.expected_global_stats(lambda);
  if (e_stats.size() != lambda.dimension()) {
    throw DomainError("cond_conj_elbo: expected statistics have wrong length");
  }
  // (alpha + sum E[t], alpha2 + n) . E[T(beta)] - E[log q(beta)]
  double value = 0.0;
  for (std::size_t j = 0; j < lambda.stat.size(); ++j) {
    value += (expected.stat[j] - lambda.stat[j]) * e_stats[j];
  }
  value += (expected.count - lambda.count) * e_stats.back();
  value += model.global_log_normalizer(lambda);
  for (std::size_t i = 0; i < phis.size(); ++i) {
    value += model.local_elbo_term(phis[i], i);
  }
  if (!std::isfinite(value)) {
    throw NumericError(0, "non-finite conditionally conjugate ELBO");
  }
  return value;
}

template <ConditionallyConjugate M>
[[nodiscard]] double cond_conj_elbo(const M &model,
                                    const GlobalLocalState<M> &state) {
  return cond_conj_elbo<M>(model, state.lambda, state.phis);
}

/// Full ELBO at lambda with every local factor at its optimum.
template <ConditionallyConjugate M>
[[nodiscard]] double optimized_elbo(const M &model,
                                    const ConjugateNatural &lambda) {
  std::vector<typename M::Local> phis;
  phis.reserve(model.num_points());
  for (std::size_t i = 0; i < model.num_points(); ++i) {
    phis.push_back(model.local_step(lambda, i));
  }
  return cond_conj_elbo<M>(model, lambda, phis) + model.elbo_constant();
}

/// (1 - eps) lambda + eps update, in natural coordinates.
[[nodiscard]] inline ConjugateNatural blend(const ConjugateNatural &lambda,
                                            const ConjugateNatural &update,
                                            double eps) {
  ConjugateNatural out = lambda;
  for (std::size_t j = 0; j < out.stat.size(); ++j) {
    out.stat[j] = (1.0 - eps) * lambda.stat[j] + eps * update.stat[j];
  }
  out.count = (1.0 - eps) * lambda.count + eps * update.count;
  return out;
}

struct SviOptions {
  std::size_t batch_size{1};
};

template <class M> struct SviResult {
  FitReport report;
  ConjugateNatural lambda;
};

/// Stochastic variational inference. Per iteration: sample a minibatch
/// uniformly without replacement, optimize its local factors at lambda, form
/// the replicated update and blend. The full ELBO (including the model's
/// constant) is recorded every config.elbo_every iterations and at the end.
/// `converged` reports whether the last two recorded ELBOs differ by less than
/// config.tol in relative terms; the loop itself always runs max_iters.
template <ConditionallyConjugate M>
[[nodiscard]] SviResult<M>
svi_fit(const M &model, const std::function<double(std::size_t)> &steps,
        const FitConfig &config, ConjugateNatural lambda,
        const SviOptions &options = {}) {
  config.validate();
  const std::size_t n = model.num_points();
  if (n == 0) {
    throw DomainError("svi_fit: empty data");
  }
  if (options.batch_size == 0 || options.batch_size > n) {
    throw ConfigError("batch", "must lie in [1, n]");
  }
  if (lambda.stat.size() != model.prior().stat.size()) {
    throw DomainError("svi_fit: initial lambda has wrong dimension");
  }

  using clock = std::chrono::steady_clock;
  const auto start = clock::now();
  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> indices(n);
  std::iota(indices.begin(), indices.end(), std::size_t{0});
  std::vector<std::size_t> batch(options.batch_size);

  SviResult<M> result;
  auto &report = result.report;
  const auto record = [&](std::size_t it) {
    const double value = optimized_elbo(model, lambda);
    if (!std::isfinite(value)) {
      throw NumericError(it, "non-finite ELBO");
    }
    report.elbo_trace.push_back(
        {it, value,
         std::chrono::duration<double, std::milli>(clock::now() - start)
             .count()});
    if constexpr (requires { model.heldout_log_predictive(lambda); }) {
      if (const auto lp = model.heldout_log_predictive(lambda)) {
        report.heldout_trace.push_back({it, *lp});
      }
    }
  };

  record(0);
  for (std::size_t it = 1; it <= config.max_iters; ++it) {
    if (options.batch_size == n) {
      std::copy(indices.begin(), indices.end(), batch.begin());
    } else if (options.batch_size == 1) {
      batch[0] = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
    } else {
      // Partial Fisher-Yates: the first B entries form a uniform subset.
      for (std::size_t b = 0; b < options.batch_size; ++b) {
        const std::size_t j =
            std::uniform_int_distribution<std::size_t>(b, n - 1)(rng);
        std::swap(indices[b], indices[j]);
        batch[b] = indices[b];
      }
    }
    const ConjugateNatural update = replicated_update(model, lambda, batch);
    lambda = blend(lambda, update, steps(it));
    for (double v : lambda.stat) {
      if (!std::isfinite(v)) {
        throw NumericError(it, "non-finite global parameter");
      }
    }
    report.iterations_run = it;
    if (it % config.elbo_every == 0 || it == config.max_iters) {
      record(it);
    }
  }
  if (report.elbo_trace.size() >= 2) {
    const auto &tr = report.elbo_trace;
    report.converged =
        relative_change(tr[tr.size() - 2].elbo, tr.back().elbo) < config.tol;
  }
  report.final_state = model.global_factors(lambda);
  result.lambda = std::move(lambda);
  return result;
}

template <ConditionallyConjugate M>
[[nodiscard]] SviResult<M> svi_fit(const M &model, const StepSchedule &schedule,
                                   const FitConfig &config,
                                   ConjugateNatural lambda,
                                   const SviOptions &options = {}) {
  schedule.validate();
  return svi_fit<M>(
      model, [schedule](std::size_t t) { return step_size(schedule, t); },
      config, std::move(lambda), options);
}

} // namespace mfvi
