#include <doctest.h>

#include <bit>
#include <cmath>
#include <random>
#include <vector>

#include "mfvi/condconj.hpp"
#include "mfvi/errors.hpp"
#include "mfvi/gmm.hpp"
#include "oracles.hpp"

using namespace mfvi;
using doctest::Approx;

namespace {

// Unknown mean with unit-variance observations and no local latents:
//   beta ~ N(a1 / a2, 1 / a2),  x_i | beta ~ N(beta, 1).
// Written independently of the library models to pin down the generic
// ELBO, gradient and SVI formulas.
class NormalMean {
public:
  struct Local {};

  NormalMean(std::vector<double> x, double a1, double a2)
      : x_(std::move(x)), a1_(a1), a2_(a2) {}

  std::size_t num_points() const { return x_.size(); }
  ConjugateNatural prior() const { return {{a1_}, a2_}; }
  Local local_step(const ConjugateNatural &, std::size_t) const { return {}; }
  void accumulate_suff_stat(const Local &, std::size_t i, double w,
                            std::span<double> acc) const {
    acc[0] += w * x_[i];
  }
  std::vector<double> expected_global_stats(const ConjugateNatural &l) const {
    const double m = l.stat[0] / l.count;
    const double v = 1.0 / l.count;
    return {m, -0.5 * (m * m + v)};
  }
  static double a(double l1, double l2) {
    return l1 * l1 / (2.0 * l2) - 0.5 * std::log(l2) + 0.5 * oracle::kLog2Pi;
  }
  double global_log_normalizer(const ConjugateNatural &l) const {
    return a(l.stat[0], l.count);
  }
  double local_elbo_term(const Local &, std::size_t) const { return 0.0; }
  double elbo_constant() const {
    double c = -a(a1_, a2_);
    for (double xi : x_) {
      c += -0.5 * oracle::kLog2Pi - 0.5 * xi * xi;
    }
    return c;
  }
  MeanFieldState global_factors(const ConjugateNatural &l) const {
    MeanFieldState s;
    s.add("beta", ExpFamParam::gaussian(l.stat[0] / l.count, 1.0 / l.count));
    return s;
  }

private:
  std::vector<double> x_;
  double a1_, a2_;
};

static_assert(ConditionallyConjugate<NormalMean>);
static_assert(ConditionallyConjugate<gmm::UniGmmConjugate>);

gmm::Data gaussian_data(std::mt19937_64 &rng, Eigen::Index n, Eigen::Index d) {
  std::normal_distribution<double> nd(0.0, 3.0);
  gmm::Data x(n, d);
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    x.data()[i] = nd(rng);
  }
  return x;
}

ConjugateNatural random_lambda(std::mt19937_64 &rng, const gmm::UniGmmConjugate &model,
                               Eigen::Index k, Eigen::Index d) {
  std::normal_distribution<double> nd(0.0, 2.0);
  std::uniform_real_distribution<double> ud(0.05, 3.0);
  Eigen::MatrixXd m(k, d), s2(k, d);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    m.data()[i] = nd(rng);
    s2.data()[i] = ud(rng);
  }
  return model.to_natural(m, s2);
}

double max_abs(const std::vector<double> &v) {
  double out = 0.0;
  for (double x : v) {
    out = std::max(out, std::abs(x));
  }
  return out;
}

} // namespace

TEST_CASE("local_step examples") {
  gmm::Data x(3, 1);
  x << 1.0, -2.0, 0.5;
  const gmm::UniGmmConjugate model(x, {2, 1.0});
  Eigen::MatrixXd m(2, 1), s2(2, 1);
  m << 0.0, 1.0;
  s2 << 1.0, 1.0;
  const auto lambda = model.to_natural(m, s2);
  const auto phi = local_step(model, lambda, 0);
  CHECK(phi[1] == Approx(1.0 / (1.0 + std::exp(-0.5))).epsilon(1e-14));
  CHECK(phi[1] == Approx(0.6225).epsilon(1e-4));
  CHECK(local_step(model, lambda, 0) == phi);
  CHECK_THROWS_AS((void)local_step(model, lambda, 3), DomainError);

  m << 0.7, 0.7;
  const auto sym = local_step(model, model.to_natural(m, s2), 1);
  CHECK(sym[0] == Approx(0.5).epsilon(1e-15));
}

TEST_CASE("global_step examples") {
  const NormalMean none({}, 0.5, 2.0);
  CHECK(global_step<NormalMean>(none, {}) == none.prior());

  const NormalMean zero({0.0}, 0.5, 2.0);
  const std::vector<NormalMean::Local> one(1);
  const auto l = global_step<NormalMean>(zero, one);
  CHECK(l.stat[0] == 0.5);
  CHECK(l.count == 3.0);

  const NormalMean dup({1.5, 1.5}, 0.5, 2.0);
  const std::vector<NormalMean::Local> two(2);
  const auto l2 = global_step<NormalMean>(dup, two);
  CHECK(l2.stat[0] == 0.5 + 3.0);
  CHECK(l2.count == 4.0);
  CHECK_THROWS_AS((void)global_step<NormalMean>(dup, one), DomainError);
}

TEST_CASE("natural_gradient examples") {
  const ConjugateNatural lambda{{1.0, -2.0, 0.5}, 3.0};
  CHECK(max_abs(natural_gradient(lambda, lambda)) == 0.0);
  const ConjugateNatural zero{{0.0, 0.0, 0.0}, 0.0};
  CHECK(natural_gradient(zero, lambda) == std::vector<double>{1.0, -2.0, 0.5, 3.0});
  const ConjugateNatural up{{1.5, -2.0, 0.5}, 3.0};
  CHECK(natural_gradient(lambda, up)[0] > 0.0);
  CHECK_THROWS_AS((void)natural_gradient(lambda, ConjugateNatural{{1.0}, 0.0}), DomainError);
}

TEST_CASE("noisy natural gradient examples") {
  const NormalMean single({2.0}, 0.3, 1.0);
  const ConjugateNatural lambda{{-1.0}, 5.0};
  CHECK(noisy_natural_gradient(single, lambda, 0) == full_natural_gradient(single, lambda));
  // lambda at the optimum of a one-point dataset.
  const ConjugateNatural opt{{0.3 + 2.0}, 2.0};
  CHECK(max_abs(noisy_natural_gradient(single, opt, 0)) == 0.0);
  CHECK_THROWS_AS((void)noisy_natural_gradient(single, opt, 1), DomainError);
}

TEST_CASE("noisy gradients average to the full gradient") {
  std::mt19937_64 rng(41);
  for (int rep = 0; rep < 20; ++rep) {
    const Eigen::Index n = 1 + static_cast<Eigen::Index>(rng() % 64);
    const Eigen::Index k = 1 + static_cast<Eigen::Index>(rng() % 4);
    const Eigen::Index d = 1 + static_cast<Eigen::Index>(rng() % 3);
    const auto x = gaussian_data(rng, n, d);
    const gmm::UniGmmConjugate model(x, {static_cast<std::size_t>(k), 4.0});
    const auto lambda = random_lambda(rng, model, k, d);
    const auto full = full_natural_gradient(model, lambda);
    std::vector<double> avg(full.size(), 0.0);
    for (std::size_t t = 0; t < model.num_points(); ++t) {
      const auto g = noisy_natural_gradient(model, lambda, t);
      for (std::size_t j = 0; j < g.size(); ++j) {
        avg[j] += g[j] / static_cast<double>(n);
      }
    }
    const double scale = std::max(1.0, max_abs(full));
    for (std::size_t j = 0; j < full.size(); ++j) {
      CHECK(std::abs(avg[j] - full[j]) <= 1e-12 * scale);
    }
  }
}

TEST_CASE("minibatch gradients average to the full gradient over all subsets") {
  std::mt19937_64 rng(42);
  const auto x = gaussian_data(rng, 4, 2);
  const gmm::UniGmmConjugate model(x, {3, 2.0});
  const auto lambda = random_lambda(rng, model, 3, 2);
  const auto full = full_natural_gradient(model, lambda);
  for (std::size_t b = 1; b <= 3; ++b) {
    std::vector<double> avg(full.size(), 0.0);
    std::size_t subsets = 0;
    for (unsigned mask = 0; mask < 16; ++mask) {
      if (static_cast<std::size_t>(std::popcount(mask)) != b) {
        continue;
      }
      std::vector<std::size_t> batch;
      for (std::size_t i = 0; i < 4; ++i) {
        if (mask & (1u << i)) {
          batch.push_back(i);
        }
      }
      const auto g = minibatch_natural_gradient(model, lambda, batch);
      for (std::size_t j = 0; j < g.size(); ++j) {
        avg[j] += g[j];
      }
      ++subsets;
    }
    const double scale = std::max(1.0, max_abs(full));
    for (std::size_t j = 0; j < full.size(); ++j) {
      CHECK(std::abs(avg[j] / static_cast<double>(subsets) - full[j]) <= 1e-12 * scale);
    }
  }
}

TEST_CASE("step_size examples and schedule validation") {
  CHECK(step_size({1.0, 0.0, 1.0}, 4) == 0.25);
  CHECK(step_size({0.7, 0.0, 1.0}, 1) == 1.0);
  CHECK(step_size({0.7, 3.0, 2.0}, 5) == Approx(2.0 * std::pow(8.0, -0.7)).epsilon(1e-15));
  CHECK_THROWS_AS((StepSchedule{0.5, 1.0, 1.0}.validate()), ConfigError);
  CHECK_THROWS_AS((StepSchedule{1.01, 1.0, 1.0}.validate()), ConfigError);
  CHECK_THROWS_AS((StepSchedule{0.7, -1.0, 1.0}.validate()), ConfigError);
  CHECK_THROWS_AS((StepSchedule{0.7, 1.0, 0.0}.validate()), ConfigError);
  CHECK_NOTHROW((StepSchedule{0.5 + 1e-9, 0.0, 1.0}.validate()));
  CHECK_THROWS_AS((void)step_size({0.7, 1.0, 1.0}, 0), DomainError);
}

TEST_CASE("Robbins-Monro sums: divergent first power, convergent square") {
  for (double kappa : {0.51, 0.7, 1.0}) {
    for (double delay : {0.0, 10.0}) {
      const StepSchedule s{kappa, delay, 1.0};
      double sum = 0.0, sum2 = 0.0;
      double prev_lower = -1.0;
      const double sq_bound = std::pow(1.0 + delay, -2.0 * kappa) +
                              std::pow(1.0 + delay, 1.0 - 2.0 * kappa) / (2.0 * kappa - 1.0);
      std::size_t next_check = 10;
      bool positive = true;
      for (std::size_t t = 1; t <= 1000000; ++t) {
        const double e = step_size(s, t);
        positive = positive && e > 0.0;
        sum += e;
        sum2 += e * e;
        if (t == next_check) {
          next_check *= 10;
          const double T = static_cast<double>(t);
          // Integral lower bound of the partial sum; unbounded in T.
          const double lower =
              kappa == 1.0 ? std::log((T + 1.0 + delay) / (1.0 + delay))
                           : (std::pow(T + 1.0 + delay, 1.0 - kappa) -
                              std::pow(1.0 + delay, 1.0 - kappa)) /
                                 (1.0 - kappa);
          CHECK(sum >= lower);
          CHECK(lower > prev_lower);
          prev_lower = lower;
          CHECK(sum2 <= sq_bound);
        }
      }
      CHECK(positive);
      CHECK(prev_lower > (kappa == 1.0 ? 9.0 : 30.0));
    }
  }
}

TEST_CASE("cond_conj_elbo on the toy model equals the exact evidence at the optimum") {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> nd(0.5, 1.5);
  for (int rep = 0; rep < 10; ++rep) {
    std::vector<double> x(1 + rep);
    for (auto &v : x) {
      v = nd(rng);
    }
    const double prior_var = 0.5 + rep;
    const NormalMean model(x, 0.0, 1.0 / prior_var);
    const std::vector<NormalMean::Local> locals(x.size());
    const auto opt = global_step<NormalMean>(model, locals);
    const double elbo = cond_conj_elbo<NormalMean>(model, opt, locals) + model.elbo_constant();
    CHECK(elbo == Approx(oracle::log_marginal_shared_mean(x, prior_var)).epsilon(1e-12));
    CHECK(optimized_elbo(model, opt) == Approx(elbo).epsilon(1e-15));
  }
}

TEST_CASE("cond_conj_elbo with no data is minus the KL to the prior") {
  const NormalMean model({}, 1.0, 2.0);
  const std::vector<NormalMean::Local> none;
  CHECK(std::abs(optimized_elbo(model, model.prior())) <= 1e-14);
  const ConjugateNatural q{{3.0}, 5.0};
  const double expect = -gaussian_kl(3.0 / 5.0, 1.0 / 5.0, 1.0 / 2.0, 1.0 / 2.0);
  CHECK(optimized_elbo(model, q) == Approx(expect).epsilon(1e-12));
}

TEST_CASE("cond_conj_elbo agrees with the GMM ELBO up to the constant") {
  std::mt19937_64 rng(12);
  for (int rep = 0; rep < 20; ++rep) {
    const Eigen::Index n = 1 + static_cast<Eigen::Index>(rng() % 30);
    const Eigen::Index k = 1 + static_cast<Eigen::Index>(rng() % 4);
    const Eigen::Index d = 1 + static_cast<Eigen::Index>(rng() % 3);
    const auto x = gaussian_data(rng, n, d);
    const double sigma2 = 0.5 + static_cast<double>(rep);
    const gmm::UniGmmConjugate model(x, {static_cast<std::size_t>(k), sigma2});
    const auto lambda = random_lambda(rng, model, k, d);
    std::vector<ExpFamParam> phis;
    gmm::UniGmmState st;
    std::tie(st.m, st.s2) = model.components(lambda);
    st.phi.resize(n, k);
    std::gamma_distribution<double> gd(1.0, 1.0);
    for (Eigen::Index i = 0; i < n; ++i) {
      std::vector<double> row(static_cast<std::size_t>(k));
      double tot = 0.0;
      for (auto &r : row) {
        r = gd(rng);
        tot += r;
      }
      for (Eigen::Index c = 0; c < k; ++c) {
        row[static_cast<std::size_t>(c)] /= tot;
        st.phi(i, c) = row[static_cast<std::size_t>(c)];
      }
      phis.push_back(ExpFamParam::categorical(row));
    }
    const double generic = cond_conj_elbo<gmm::UniGmmConjugate>(model, lambda, phis) +
                           model.elbo_constant();
    const double direct = gmm::gmm_elbo(st, x, sigma2);
    CHECK(std::abs(generic - direct) <= 1e-9 * std::max(1.0, std::abs(direct)));
  }
}

TEST_CASE("alternating local and global steps never lower cond_conj_elbo") {
  std::mt19937_64 rng(13);
  const auto x = gaussian_data(rng, 40, 2);
  const gmm::UniGmmConjugate model(x, {3, 9.0});
  auto lambda = random_lambda(rng, model, 3, 2);
  std::vector<ExpFamParam> phis(40, ExpFamParam::categorical(std::vector(3, 1.0 / 3.0)));
  double prev = cond_conj_elbo<gmm::UniGmmConjugate>(model, lambda, phis);
  for (int it = 0; it < 30; ++it) {
    for (std::size_t i = 0; i < 40; ++i) {
      phis[i] = local_step(model, lambda, i);
    }
    const double after_local = cond_conj_elbo<gmm::UniGmmConjugate>(model, lambda, phis);
    CHECK(after_local >= prev - elbo_slack(prev));
    lambda = global_step<gmm::UniGmmConjugate>(model, phis);
    const double after_global = cond_conj_elbo<gmm::UniGmmConjugate>(model, lambda, phis);
    CHECK(after_global >= after_local - elbo_slack(after_local));
    prev = after_global;
  }
}

TEST_CASE("direct sweeps and local/global steps produce the same iterates") {
  const auto sim = gmm::simulate(4, 150, 21, 2);
  gmm::UniGmmModel cavi(sim.data, {4, 25.0});
  cavi.initialize(InitStrategy::DataCalibrated, 5);
  const gmm::UniGmmConjugate cc(sim.data, {4, 25.0});
  auto lambda = cc.to_natural(cavi.params().m, cavi.params().s2);
  for (int it = 0; it < 25; ++it) {
    cavi.sweep();
    std::vector<ExpFamParam> phis;
    for (std::size_t i = 0; i < cc.num_points(); ++i) {
      phis.push_back(local_step(cc, lambda, i));
    }
    lambda = global_step<gmm::UniGmmConjugate>(cc, phis);
    const auto [m, s2] = cc.components(lambda);
    CHECK((m - cavi.params().m).cwiseAbs().maxCoeff() <= 1e-12);
    CHECK((s2 - cavi.params().s2).cwiseAbs().maxCoeff() <= 1e-12);
    for (std::size_t i = 0; i < cc.num_points(); ++i) {
      for (Eigen::Index c = 0; c < 4; ++c) {
        CHECK(std::abs(phis[i][static_cast<std::size_t>(c)] -
                       cavi.params().phi(static_cast<Eigen::Index>(i), c)) <= 1e-12);
      }
    }
  }
}

TEST_CASE("SVI with unit steps reproduces CAVI's global updates") {
  const auto sim = gmm::simulate(2, 30, 2, 1);
  const gmm::UniGmmConjugate model(sim.data, {2, 25.0});
  gmm::UniGmmModel cavi(sim.data, {2, 25.0});
  cavi.initialize(InitStrategy::DataCalibrated, 1);
  const auto init = model.to_natural(cavi.params().m, cavi.params().s2);
  FitConfig cfg;
  cfg.max_iters = 7;
  const auto unit = [](std::size_t) { return 1.0; };
  const auto svi = svi_fit<gmm::UniGmmConjugate>(model, unit, cfg, init,
                                                 SviOptions{model.num_points()});
  for (int it = 0; it < 7; ++it) {
    cavi.sweep();
  }
  const auto [m, s2] = model.components(svi.lambda);
  CHECK((m - cavi.params().m).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK((s2 - cavi.params().s2).cwiseAbs().maxCoeff() <= 1e-12);

  // n = 1: one unit step is exactly the CAVI global update.
  const gmm::Data one = sim.data.topRows(1);
  const gmm::UniGmmConjugate single(one, {2, 25.0});
  FitConfig once;
  once.max_iters = 1;
  const auto l0 = single.to_natural(cavi.params().m, cavi.params().s2);
  const auto r = svi_fit<gmm::UniGmmConjugate>(single, unit, once, l0);
  const std::vector<ExpFamParam> phi{single.local_step(l0, 0)};
  CHECK(r.lambda == global_step<gmm::UniGmmConjugate>(single, phi));
}

TEST_CASE("svi_fit is deterministic per seed and validates its inputs") {
  const auto sim = gmm::simulate(3, 100, 9, 2);
  const gmm::UniGmmConjugate model(sim.data, {3, 25.0});
  gmm::UniGmmModel cavi(sim.data, {3, 25.0});
  cavi.initialize(InitStrategy::DataCalibrated, 2);
  const auto init = model.to_natural(cavi.params().m, cavi.params().s2);
  FitConfig cfg;
  cfg.max_iters = 200;
  cfg.elbo_every = 50;
  cfg.seed = 99;
  const StepSchedule sched{0.7, 1.0, 1.0};
  const auto a = svi_fit(model, sched, cfg, init, SviOptions{5});
  const auto b = svi_fit(model, sched, cfg, init, SviOptions{5});
  CHECK(a.lambda == b.lambda);
  CHECK(a.report.elbo_trace.size() == 5);
  CHECK(a.report.final_state.size() == 6);
  CHECK_THROWS_AS((void)svi_fit(model, sched, cfg, init, SviOptions{0}), ConfigError);
  CHECK_THROWS_AS((void)svi_fit(model, sched, cfg, init, SviOptions{101}), ConfigError);
  CHECK_THROWS_AS((void)svi_fit(model, StepSchedule{0.4, 1.0, 1.0}, cfg, init), ConfigError);
}

TEST_CASE("SVI reaches the CAVI optimum on a 200-point GMM") {
  const auto sim = gmm::simulate(3, 200, 4, 1, {5.0, 4.0});
  gmm::UniGmmModel cavi(sim.data, {3, 25.0});
  const auto init_state_ = init_state(cavi, InitStrategy::DataCalibrated, 0);
  const gmm::UniGmmConjugate model(sim.data, {3, 25.0});
  const auto init = model.to_natural(cavi.params().m, cavi.params().s2);
  FitConfig cfg;
  cfg.tol = 1e-12;
  const double best = cavi_fit(cavi, cfg, init_state_).final_elbo();
  FitConfig scfg;
  scfg.max_iters = 5000;
  scfg.elbo_every = 500;
  const auto svi = svi_fit(model, StepSchedule{0.7, 1.0, 1.0}, scfg, init, SviOptions{20});
  CHECK(std::abs(svi.report.final_elbo() - best) <= 1e-3 * std::abs(best));
}
