#include "mfvi/engine.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/LU>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <numeric>
#include <ostream>
#include <random>

#include "mfvi/errors.hpp"

namespace mfvi {

void MeanFieldState::add(std::string label, ExpFamParam factor) {
  labels.push_back(std::move(label));
  factors.push_back(std::move(factor));
}

std::size_t MeanFieldState::index_of(std::string_view label) const {
  const auto it = std::find(labels.begin(), labels.end(), label);
  if (it == labels.end()) {
    throw DomainError("MeanFieldState: no factor labelled '" +
                      std::string(label) + "'");
  }
  return static_cast<std::size_t>(it - labels.begin());
}

const ExpFamParam &MeanFieldState::at(std::string_view label) const {
  return factors[index_of(label)];
}

InitStrategy parse_init_strategy(std::string_view name) {
  if (name == "prior") {
    return InitStrategy::Prior;
  }
  if (name == "data_calibrated" || name == "data-calibrated") {
    return InitStrategy::DataCalibrated;
  }
  throw ConfigError("init", "unknown strategy '" + std::string(name) + "'");
}

std::string_view init_strategy_name(InitStrategy strategy) {
  return strategy == InitStrategy::Prior ? "prior" : "data_calibrated";
}

void FitConfig::validate() const {
  if (max_iters == 0) {
    throw ConfigError("max_iters", "must be a positive integer");
  }
  if (!(tol > 0.0)) {
    throw ConfigError("tol", "must be positive");
  }
  if (!(heldout_fraction >= 0.0 && heldout_fraction <= 0.5)) {
    throw ConfigError("heldout_fraction", "must lie in [0, 0.5]");
  }
  if (elbo_every == 0) {
    throw ConfigError("elbo_every", "must be a positive integer");
  }
}

double FitReport::final_elbo() const {
  if (elbo_trace.empty()) {
    throw DomainError("FitReport: empty ELBO trace");
  }
  return elbo_trace.back().elbo;
}

MeanFieldState init_state(VariationalModel &model, InitStrategy strategy,
                          std::uint64_t seed) {
  model.initialize(strategy, seed);
  return model.state();
}

double compute_elbo(VariationalModel &model, const MeanFieldState &state) {
  model.set_state(state);
  const double value = model.elbo();
  if (!std::isfinite(value)) {
    throw NumericError(0, "non-finite ELBO");
  }
  return value;
}

double relative_change(double previous, double current) {
  return std::abs(current - previous) / (1.0 + std::abs(current));
}

FitReport cavi_fit(VariationalModel &model, const FitConfig &config,
                   const MeanFieldState &init, const SweepObserver &observer) {
  config.validate();
  using clock = std::chrono::steady_clock;
  const auto start = clock::now();
  const auto elapsed_ms = [&] {
    return std::chrono::duration<double, std::milli>(clock::now() - start)
        .count();
  };

  FitReport report;
  model.set_state(init);

  const auto record = [&](std::size_t iteration) {
    const double value = model.elbo();
    if (!std::isfinite(value)) {
      throw NumericError(iteration, "non-finite ELBO");
    }
    if (!report.elbo_trace.empty()) {
      const double previous = report.elbo_trace.back().elbo;
      if (value < previous - elbo_slack(previous)) {
        throw ConsistencyError(iteration,
                               "ELBO decreased from " + std::to_string(previous) +
                                   " to " + std::to_string(value));
      }
    }
    report.elbo_trace.push_back({iteration, value, elapsed_ms()});
    if (const auto lp = model.heldout_log_predictive()) {
      report.heldout_trace.push_back({iteration, *lp});
    }
  };

  record(0);
  if (observer) {
    observer(0, model);
  }
  for (std::size_t it = 1; it <= config.max_iters; ++it) {
    try {
      model.sweep();
    } catch (const ConsistencyError &) {
      throw;
    } catch (const NumericError &e) {
      throw NumericError(it, e.message());
    }
    report.iterations_run = it;
    if (observer) {
      observer(it, model);
    }
    if (it % config.elbo_every != 0 && it != config.max_iters) {
      continue;
    }
    const double previous = report.elbo_trace.back().elbo;
    record(it);
    if (relative_change(previous, report.elbo_trace.back().elbo) < config.tol) {
      report.converged = true;
      break;
    }
  }

  report.final_state = model.state();
  report.metadata = model.metadata();
  return report;
}

namespace {

struct Candidate {
  std::size_t param;
  std::vector<double> params;
};

// Valid single-parameter perturbations of one factor.
std::vector<Candidate> perturbations(const ExpFamParam &factor, double step) {
  std::vector<Candidate> out;
  const auto base = factor.params();
  const std::vector<double> original(base.begin(), base.end());

  if (factor.family() == Family::Categorical) {
    const std::size_t k = original.size();
    for (std::size_t i = 0; i < k; ++i) {
      for (std::size_t j = 0; j < k; ++j) {
        if (i == j || original[j] < step) {
          continue;
        }
        std::vector<double> p = original;
        p[i] += step;
        p[j] -= step;
        // Exact renormalization guards the sum-to-one tolerance.
        const double total = std::accumulate(p.begin(), p.end(), 0.0);
        for (double &v : p) {
          v /= total;
        }
        out.push_back({i, std::move(p)});
      }
    }
    return out;
  }

  std::size_t sym_begin = original.size();
  std::size_t dim = 0;
  if (factor.family() == Family::MvNormalGamma) {
    dim = mv_normal_gamma_dim(original.size());
    sym_begin = dim;
  }
  for (std::size_t i = 0; i < original.size(); ++i) {
    const bool in_matrix = i >= sym_begin && i < sym_begin + dim * dim;
    std::size_t mirror = i;
    if (in_matrix) {
      const std::size_t r = (i - sym_begin) / dim;
      const std::size_t c = (i - sym_begin) % dim;
      if (c < r) {
        continue;
      }
      mirror = sym_begin + c * dim + r;
    }
    for (double sign : {1.0, -1.0}) {
      std::vector<double> p = original;
      p[i] += sign * step;
      if (mirror != i) {
        p[mirror] += sign * step;
      }
      out.push_back({i, std::move(p)});
    }
  }
  return out;
}

} // namespace

PerturbationResult
coordinate_perturbation_check(VariationalModel &model, const MeanFieldState &at,
                              double step,
                              const std::vector<std::size_t> &factors) {
  std::vector<std::size_t> which = factors;
  if (which.empty()) {
    which.resize(at.size());
    std::iota(which.begin(), which.end(), std::size_t{0});
  }
  const double base = compute_elbo(model, at);
  PerturbationResult result;
  for (std::size_t f : which) {
    for (auto &cand : perturbations(at.factors.at(f), step)) {
      MeanFieldState moved = at;
      try {
        moved.factors[f] =
            ExpFamParam::from_params(at.factors[f].family(), cand.params);
        model.set_state(moved);
      } catch (const DomainError &) {
        continue;
      }
      const double gain = model.elbo() - base;
      ++result.directions;
      if (gain > result.max_gain) {
        result.max_gain = gain;
        result.worst_label = at.labels[f];
        result.worst_param = cand.param;
      }
    }
  }
  model.set_state(at);
  return result;
}

namespace {

void require_spd(const Eigen::Matrix2d &cov) {
  if (!cov.allFinite() || std::abs(cov(0, 1) - cov(1, 0)) > 1e-12 ||
      !(cov(0, 0) > 0.0) || !(cov.determinant() > 0.0)) {
    throw DomainError("covariance must be symmetric positive definite");
  }
}

} // namespace

BivariateMeanField
meanfield_gaussian_fixed_point(const std::array<double, 2> &mean,
                               const Eigen::Matrix2d &covariance) {
  require_spd(covariance);
  const Eigen::Matrix2d precision = covariance.inverse();
  return {mean, {1.0 / precision(0, 0), 1.0 / precision(1, 1)}};
}

BivariateMeanField meanfield_gaussian_cavi(const std::array<double, 2> &mean,
                                           const Eigen::Matrix2d &covariance,
                                           const std::array<double, 2> &init,
                                           std::size_t max_iters, double tol) {
  require_spd(covariance);
  const Eigen::Matrix2d lam = covariance.inverse();
  // q*(z_j) is Gaussian with precision lam_jj and mean
  // mu_j - lam_jk / lam_jj (E[z_k] - mu_k).
  std::array<double, 2> m = init;
  for (std::size_t it = 0; it < max_iters; ++it) {
    const std::array<double, 2> old = m;
    m[0] = mean[0] - lam(0, 1) / lam(0, 0) * (m[1] - mean[1]);
    m[1] = mean[1] - lam(1, 0) / lam(1, 1) * (m[0] - mean[0]);
    if (std::abs(m[0] - old[0]) + std::abs(m[1] - old[1]) <= tol) {
      break;
    }
  }
  return {m, {1.0 / lam(0, 0), 1.0 / lam(1, 1)}};
}

std::vector<std::array<double, 2>>
gaussian_contour(const std::array<double, 2> &mean,
                 const Eigen::Matrix2d &covariance, double n_sigma,
                 std::size_t points) {
  require_spd(covariance);
  const Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> eig(covariance);
  const Eigen::Matrix2d basis = eig.eigenvectors();
  const Eigen::Vector2d radii = eig.eigenvalues().cwiseSqrt() * n_sigma;
  std::vector<std::array<double, 2>> out;
  out.reserve(points);
  for (std::size_t i = 0; i < points; ++i) {
    const double t =
        2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(points);
    const Eigen::Vector2d local(radii[0] * std::cos(t), radii[1] * std::sin(t));
    const Eigen::Vector2d p = basis * local;
    out.push_back({mean[0] + p[0], mean[1] + p[1]});
  }
  return out;
}

void write_trace_csv(const FitReport &report, std::ostream &out) {
  const auto old_precision = out.precision(17);
  out << "iter,elbo,elapsed_ms,heldout_logpred\n";
  std::size_t h = 0;
  for (const auto &point : report.elbo_trace) {
    out << point.iteration << ',' << point.elbo << ',' << point.elapsed_ms
        << ',';
    while (h < report.heldout_trace.size() &&
           report.heldout_trace[h].iteration < point.iteration) {
      ++h;
    }
    if (h < report.heldout_trace.size() &&
        report.heldout_trace[h].iteration == point.iteration) {
      out << report.heldout_trace[h].log_predictive;
    }
    out << '\n';
  }
  out.precision(old_precision);
}

Split heldout_split(std::size_t n, double fraction, std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction <= 0.5)) {
    throw ConfigError("heldout_fraction", "must lie in [0, 0.5]");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto n_held = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  if (n > 0 && n_held >= n) {
    n_held = n - 1;
  }
  Split split;
  if (n_held == 0) {
    split.train = std::move(order);
    return split;
  }
  std::mt19937_64 rng(seed ^ 0x5bd1e995u);
  std::shuffle(order.begin(), order.end(), rng);
  split.heldout.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_held));
  split.train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_held), order.end());
  std::sort(split.heldout.begin(), split.heldout.end());
  std::sort(split.train.begin(), split.train.end());
  return split;
}

} // namespace mfvi
