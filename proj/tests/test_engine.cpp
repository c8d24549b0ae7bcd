#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>
#include <string>

#include "mfvi/diag_gmm.hpp"
#include "mfvi/engine.hpp"
#include "mfvi/errors.hpp"
#include "mfvi/gmm.hpp"
#include "oracles.hpp"

using namespace mfvi;
using doctest::Approx;

namespace {

gmm::Data column(std::initializer_list<double> v) {
  gmm::Data x(static_cast<Eigen::Index>(v.size()), 1);
  Eigen::Index i = 0;
  for (double a : v) {
    x(i++, 0) = a;
  }
  return x;
}

// A one-factor model whose ELBO follows a scripted sequence.
class ScriptedModel final : public VariationalModel {
public:
  explicit ScriptedModel(std::vector<double> values) : values_(std::move(values)) {}

  void initialize(InitStrategy, std::uint64_t) override { step_ = 0; }
  void sweep() override { ++step_; }
  double elbo() const override {
    return values_[std::min(step_, values_.size() - 1)];
  }
  MeanFieldState state() const override {
    MeanFieldState s;
    s.add("x", ExpFamParam::gaussian(static_cast<double>(step_), 1.0));
    return s;
  }
  void set_state(const MeanFieldState &s) override {
    step_ = static_cast<std::size_t>(s.factors.at(0)[0]);
  }

private:
  std::vector<double> values_;
  std::size_t step_{0};
};

// Throws from inside the third sweep.
class FailingSweepModel final : public VariationalModel {
public:
  void initialize(InitStrategy, std::uint64_t) override {}
  void sweep() override {
    if (++calls_ == 3) {
      throw NumericError(0, "overflow in update");
    }
  }
  double elbo() const override { return -1.0 / static_cast<double>(calls_ + 1); }
  MeanFieldState state() const override {
    MeanFieldState s;
    s.add("x", ExpFamParam::gaussian(0.0, 1.0));
    return s;
  }
  void set_state(const MeanFieldState &) override {}

private:
  std::size_t calls_{0};
};

Eigen::Matrix2d random_spd(std::mt19937_64 &rng) {
  std::uniform_real_distribution<double> var(0.2, 5.0);
  std::uniform_real_distribution<double> corr(-0.95, 0.95);
  const double a = var(rng), b = var(rng), r = corr(rng);
  Eigen::Matrix2d c;
  c << a, r * std::sqrt(a * b), r * std::sqrt(a * b), b;
  return c;
}

} // namespace

TEST_CASE("FitConfig validation names the field") {
  FitConfig cfg;
  cfg.max_iters = 0;
  try {
    cfg.validate();
    FAIL("expected ConfigError");
  } catch (const ConfigError &e) {
    CHECK(e.field() == "max_iters");
  }
  cfg = {};
  cfg.heldout_fraction = 0.6;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.tol = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK_THROWS_AS((void)parse_init_strategy("random"), ConfigError);
  CHECK(parse_init_strategy("prior") == InitStrategy::Prior);
  CHECK(parse_init_strategy("data_calibrated") == InitStrategy::DataCalibrated);
}

TEST_CASE("prior initialization replicates the prior") {
  gmm::UniGmmModel model(column({-1.0, 0.5, 2.0}), {3, 1.0});
  const auto s = init_state(model, InitStrategy::Prior, 9);
  REQUIRE(s.size() == 6);
  for (std::size_t k = 0; k < 3; ++k) {
    CHECK(s.factors[k] == ExpFamParam::gaussian(0.0, 1.0));
  }
  for (std::size_t i = 3; i < 6; ++i) {
    for (double p : s.factors[i].params()) {
      CHECK(p == Approx(1.0 / 3.0).epsilon(1e-15));
    }
  }
  CHECK(s.labels[0] == "mu[0]");
  CHECK(s.labels[3] == "c[0]");
}

TEST_CASE("initialization is deterministic per seed") {
  const auto sim = gmm::simulate(3, 40, 4, 2);
  gmm::UniGmmModel model(sim.data, {3, 10.0});
  const auto a = init_state(model, InitStrategy::DataCalibrated, 77);
  const auto b = init_state(model, InitStrategy::DataCalibrated, 77);
  const auto c = init_state(model, InitStrategy::DataCalibrated, 78);
  CHECK(a == b);
  CHECK_FALSE(a == c);
}

TEST_CASE("data-calibrated means follow N(mean, variance)") {
  // Data with mean 5 and sample variance 4.
  const auto x = column({3.0, 7.0, 3.0, 7.0, 5.0 - std::sqrt(2.0), 5.0 + std::sqrt(2.0)});
  const double mean = x.mean();
  const double var = (x.array() - mean).square().sum() / 5.0;
  REQUIRE(mean == Approx(5.0).epsilon(1e-14));
  gmm::UniGmmModel model(x, {1, 1.0});
  const int seeds = 4000;
  double s1 = 0.0, s2 = 0.0;
  for (int seed = 0; seed < seeds; ++seed) {
    model.initialize(InitStrategy::DataCalibrated, static_cast<std::uint64_t>(seed));
    const double m = model.params().m(0, 0);
    s1 += m;
    s2 += m * m;
  }
  const double emp_mean = s1 / seeds;
  const double emp_var = s2 / seeds - emp_mean * emp_mean;
  // Five standard errors.
  CHECK(std::abs(emp_mean - mean) < 5.0 * std::sqrt(var / seeds));
  CHECK(std::abs(emp_var - var) < 5.0 * var * std::sqrt(2.0 / seeds));
}

TEST_CASE("cavi_fit on K = 1 reaches the conjugate posterior and the evidence") {
  const auto x = column({1.0, 1.0});
  gmm::UniGmmModel model(x, {1, 1.0});
  FitConfig cfg;
  cfg.tol = 1e-12;
  const auto report = cavi_fit(model, cfg, init_state(model, InitStrategy::Prior, 0));
  CHECK(report.converged);
  CHECK(report.elbo_trace.front().iteration == 0);
  CHECK(model.params().m(0, 0) == Approx(2.0 / 3.0).epsilon(1e-14));
  CHECK(model.params().s2(0, 0) == Approx(1.0 / 3.0).epsilon(1e-14));
  CHECK(std::abs(report.final_elbo() - oracle::k1_log_evidence(x, 1.0)) <= 1e-9);
  CHECK(report.final_state.at("mu[0]")[0] == Approx(2.0 / 3.0).epsilon(1e-14));
}

TEST_CASE("compute_elbo at the exact K = 1 posterior equals log p(x)") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd(1.0, 2.0);
  for (int rep = 0; rep < 10; ++rep) {
    gmm::Data x(5 + rep, 2);
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      x.data()[i] = nd(rng);
    }
    const double sigma2 = 0.5 + rep;
    gmm::UniGmmModel model(x, {1, sigma2});
    const auto post = oracle::k1_posterior(x, sigma2);
    MeanFieldState s = model.state();
    s.factors[0] = ExpFamParam::gaussian(post.m[0], post.s2);
    s.factors[1] = ExpFamParam::gaussian(post.m[1], post.s2);
    CHECK(std::abs(compute_elbo(model, s) - oracle::k1_log_evidence(x, sigma2)) <= 1e-9);
  }
}

TEST_CASE("no data: the prior state has ELBO 0 and stays put") {
  const gmm::Data empty(0, 1);
  gmm::UniGmmModel uni(empty, {3, 2.0});
  FitConfig cfg;
  const auto r = cavi_fit(uni, cfg, init_state(uni, InitStrategy::Prior, 0));
  CHECK(r.final_elbo() == Approx(0.0).epsilon(1e-15));
  CHECK(uni.params().m.isZero());
  CHECK((uni.params().s2.array() == 2.0).all());

  gmm::DiagGmmConfig dcfg;
  dcfg.k = 2;
  gmm::DiagGmmModel diag(gmm::Data(0, 3), dcfg);
  const auto rd = cavi_fit(diag, cfg, init_state(diag, InitStrategy::Prior, 0));
  CHECK(std::abs(rd.final_elbo()) <= 1e-12);
  CHECK((diag.params().conc.array() == 0.5).all());
  CHECK((diag.params().shape.array() == 1.0).all());
}

TEST_CASE("enumeration: ELBO + KL = log p(x) and the ELBO bound holds") {
  const auto x = column({-1.0, 0.0, 1.0});
  gmm::UniGmmModel model(x, {2, 1.0});
  FitConfig cfg;
  cfg.tol = 1e-12;
  const auto init = init_state(model, InitStrategy::DataCalibrated, 1);
  const double log_px = oracle::gmm_log_evidence(x, 2, 1.0);
  std::size_t checked = 0;
  const auto report = cavi_fit(model, cfg, init, [&](std::size_t, const VariationalModel &) {
    const auto &p = model.params();
    const auto e = oracle::gmm_enumerate(x, p.m, p.s2, p.phi, 1.0);
    CHECK(std::abs(e.log_evidence - log_px) <= 1e-12);
    CHECK(std::abs(e.elbo - model.elbo()) <= 1e-9);
    CHECK(std::abs(e.elbo + e.kl - log_px) <= 1e-9);
    CHECK(model.elbo() <= log_px + 1e-12);
    ++checked;
  });
  CHECK(checked == report.iterations_run + 1);
}

TEST_CASE("evidence bound on random enumerable instances") {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> nd(0.0, 2.5);
  for (int rep = 0; rep < 12; ++rep) {
    const int k = 1 + rep % 3;
    const int n = 2 + rep % 7;
    gmm::Data x(n, 1);
    for (int i = 0; i < n; ++i) {
      x(i, 0) = nd(rng);
    }
    gmm::UniGmmModel model(x, {static_cast<std::size_t>(k), 4.0});
    FitConfig cfg;
    cfg.tol = 1e-13;
    const auto r = cavi_fit(model, cfg,
                            init_state(model, InitStrategy::DataCalibrated,
                                       static_cast<std::uint64_t>(rep)));
    const double log_px = oracle::gmm_log_evidence(x, k, 4.0);
    for (const auto &pt : r.elbo_trace) {
      CHECK(pt.elbo <= log_px + 1e-12);
    }
    if (k == 1) {
      CHECK(std::abs(r.final_elbo() - log_px) <= 1e-9);
    }
  }
}

TEST_CASE("coordinate optimality after convergence") {
  const auto sim = gmm::simulate(3, 60, 12, 2);
  gmm::UniGmmModel model(sim.data, {3, 25.0});
  FitConfig cfg;
  cfg.tol = 1e-15;
  cfg.max_iters = 5000;
  const auto r = cavi_fit(model, cfg, init_state(model, InitStrategy::DataCalibrated, 2));
  const auto probe = coordinate_perturbation_check(model, r.final_state, 1e-3);
  CHECK(probe.directions > 0);
  CHECK(probe.max_gain <= 1e-10);
}

TEST_CASE("heldout log predictive examples") {
  Eigen::MatrixXd m1(1, 1);
  m1 << 0.0;
  CHECK(gmm::heldout_log_predictive(m1, column({0.0})) ==
        Approx(-0.918938533204672742).epsilon(1e-15));
  CHECK(gmm::heldout_log_predictive(m1, column({0.0, 0.0, 0.0})) ==
        gmm::heldout_log_predictive(m1, column({0.0})));
  Eigen::MatrixXd m2(2, 1);
  m2 << -1.0, 1.0;
  CHECK(gmm::heldout_log_predictive(m2, column({0.0})) ==
        Approx(oracle::mixture_log_density({-1.0, 1.0}, 0.0)).epsilon(1e-14));
  CHECK(gmm::heldout_log_predictive(m2, column({0.0})) == Approx(-1.41894).epsilon(1e-5));
  CHECK_THROWS_AS((void)gmm::heldout_log_predictive(m2, gmm::Data(0, 1)), DomainError);
}

TEST_CASE("heldout trace is recorded but never stops the fit") {
  const auto sim = gmm::simulate(2, 80, 5, 1);
  gmm::UniGmmModel model(sim.data.topRows(60), {2, 25.0}, gmm::Data(sim.data.bottomRows(20)));
  FitConfig cfg;
  cfg.tol = 1e-10;
  const auto r = cavi_fit(model, cfg, init_state(model, InitStrategy::DataCalibrated, 3));
  CHECK(r.heldout_trace.size() == r.elbo_trace.size());
  std::ostringstream csv;
  write_trace_csv(r, csv);
  const std::string text = csv.str();
  CHECK(text.rfind("iter,elbo,elapsed_ms,heldout_logpred\n", 0) == 0);
}

TEST_CASE("trace CSV leaves the heldout column empty when disabled") {
  gmm::UniGmmModel model(column({0.3, 0.2}), {1, 1.0});
  const auto r = cavi_fit(model, FitConfig{}, init_state(model, InitStrategy::Prior, 0));
  std::ostringstream csv;
  write_trace_csv(r, csv);
  std::istringstream in(csv.str());
  std::string line;
  std::getline(in, line);
  CHECK(line == "iter,elbo,elapsed_ms,heldout_logpred");
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    CHECK(line.back() == ',');
    ++rows;
  }
  CHECK(rows == r.elbo_trace.size());
}

TEST_CASE("elbo_every thins the trace") {
  const auto sim = gmm::simulate(2, 50, 6, 1);
  gmm::UniGmmModel model(sim.data, {2, 25.0});
  FitConfig cfg;
  cfg.max_iters = 10;
  cfg.tol = 1e-300;
  cfg.elbo_every = 4;
  const auto r = cavi_fit(model, cfg, init_state(model, InitStrategy::DataCalibrated, 0));
  std::vector<std::size_t> its;
  for (const auto &p : r.elbo_trace) {
    its.push_back(p.iteration);
  }
  CHECK(its == std::vector<std::size_t>{0, 4, 8, 10});
}

TEST_CASE("an ELBO decrease is a consistency error") {
  ScriptedModel model({-10.0, -5.0, -6.0, -4.0});
  FitConfig cfg;
  cfg.tol = 1e-300;
  cfg.max_iters = 5;
  try {
    (void)cavi_fit(model, cfg, init_state(model, InitStrategy::Prior, 0));
    FAIL("expected ConsistencyError");
  } catch (const ConsistencyError &e) {
    CHECK(e.iteration() == 2);
  }
  // A decrease within the slack is tolerated.
  ScriptedModel tiny({-10.0, -5.0, -5.0 - 1e-9, -4.0});
  CHECK_NOTHROW((void)cavi_fit(tiny, cfg, init_state(tiny, InitStrategy::Prior, 0)));
}

TEST_CASE("non-finite ELBO and sweep failures report the iteration") {
  ScriptedModel model({-10.0, -5.0, std::nan("")});
  FitConfig cfg;
  cfg.tol = 1e-300;
  try {
    (void)cavi_fit(model, cfg, init_state(model, InitStrategy::Prior, 0));
    FAIL("expected NumericError");
  } catch (const ConsistencyError &) {
    FAIL("wrong error type");
  } catch (const NumericError &e) {
    CHECK(e.iteration() == 2);
  }
  FailingSweepModel failing;
  try {
    (void)cavi_fit(failing, cfg, failing.state());
    FAIL("expected NumericError");
  } catch (const NumericError &e) {
    CHECK(e.iteration() == 3);
    CHECK(e.message() == "overflow in update");
  }
}

TEST_CASE("meanfield fixed point examples") {
  Eigen::Matrix2d diag;
  diag << 2.0, 0.0, 0.0, 3.0;
  auto mf = meanfield_gaussian_fixed_point({1.0, -1.0}, diag);
  CHECK(mf.variances[0] == Approx(2.0).epsilon(1e-15));
  CHECK(mf.variances[1] == Approx(3.0).epsilon(1e-15));
  CHECK(mf.means[0] == 1.0);
  Eigen::Matrix2d c;
  c << 1.0, 0.9, 0.9, 1.0;
  mf = meanfield_gaussian_fixed_point({0.0, 0.0}, c);
  CHECK(mf.variances[0] == Approx(0.19).epsilon(1e-13));
  CHECK(mf.variances[1] == Approx(0.19).epsilon(1e-13));
  Eigen::Matrix2d bad;
  bad << 1.0, 2.0, 2.0, 1.0;
  CHECK_THROWS_AS((void)meanfield_gaussian_fixed_point({0.0, 0.0}, bad), DomainError);
  Eigen::Matrix2d asym;
  asym << 1.0, 0.2, 0.1, 1.0;
  CHECK_THROWS_AS((void)meanfield_gaussian_fixed_point({0.0, 0.0}, asym), DomainError);
}

TEST_CASE("meanfield CAVI converges to the closed form; variances shrink") {
  std::mt19937_64 rng(31);
  std::normal_distribution<double> nd(0.0, 3.0);
  for (int rep = 0; rep < 200; ++rep) {
    const Eigen::Matrix2d cov = random_spd(rng);
    const std::array<double, 2> mean{nd(rng), nd(rng)};
    const auto closed = meanfield_gaussian_fixed_point(mean, cov);
    const auto iter = meanfield_gaussian_cavi(mean, cov, {nd(rng), nd(rng)});
    // Oracle: 1 / [Sigma^-1]_jj from the explicit 2 x 2 inverse.
    const double det = cov(0, 0) * cov(1, 1) - cov(0, 1) * cov(1, 0);
    CHECK(closed.variances[0] == Approx(det / cov(1, 1)).epsilon(1e-12));
    CHECK(closed.variances[1] == Approx(det / cov(0, 0)).epsilon(1e-12));
    for (int j = 0; j < 2; ++j) {
      CHECK(std::abs(iter.means[j] - closed.means[j]) <= 1e-10);
      CHECK(std::abs(iter.variances[j] - closed.variances[j]) <= 1e-10);
      CHECK(closed.variances[j] <= cov(j, j) * (1.0 + 1e-14));
    }
  }
}

TEST_CASE("gaussian contour points lie on the Mahalanobis ellipse") {
  Eigen::Matrix2d c;
  c << 2.0, 0.7, 0.7, 1.0;
  const auto pts = gaussian_contour({1.0, 2.0}, c, 2.0, 64);
  REQUIRE(pts.size() == 64);
  const Eigen::Matrix2d prec = c.inverse();
  for (const auto &p : pts) {
    const Eigen::Vector2d d(p[0] - 1.0, p[1] - 2.0);
    CHECK(d.dot(prec * d) == Approx(4.0).epsilon(1e-12));
  }
}

TEST_CASE("heldout_split is deterministic and disjoint") {
  const auto a = heldout_split(100, 0.2, 5);
  const auto b = heldout_split(100, 0.2, 5);
  CHECK(a.heldout == b.heldout);
  CHECK(a.heldout.size() == 20);
  CHECK(a.train.size() == 80);
  std::vector<int> seen(100, 0);
  for (auto i : a.train) {
    ++seen[i];
  }
  for (auto i : a.heldout) {
    ++seen[i];
  }
  for (int s : seen) {
    CHECK(s == 1);
  }
  CHECK(heldout_split(1, 0.5, 0).train.size() == 1);
}
