#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "mfvi/errors.hpp"
#include "mfvi/gmm.hpp"
#include "oracles.hpp"

using namespace mfvi;
using namespace mfvi::gmm;
using doctest::Approx;

namespace {

Data column(std::initializer_list<double> v) {
  Data x(static_cast<Eigen::Index>(v.size()), 1);
  Eigen::Index i = 0;
  for (double a : v) {
    x(i++, 0) = a;
  }
  return x;
}

UniGmmState make_state(std::initializer_list<double> m, std::initializer_list<double> s2,
                       Eigen::Index n) {
  UniGmmState s;
  s.m = column(m);
  s.s2 = column(s2);
  s.phi = Eigen::MatrixXd::Constant(n, s.m.rows(), 1.0 / static_cast<double>(s.m.rows()));
  return s;
}

} // namespace

TEST_CASE("config validation") {
  CHECK_THROWS_AS((UniGmmConfig{0, 1.0}.validate()), ConfigError);
  CHECK_THROWS_AS((UniGmmConfig{2, 0.0}.validate()), ConfigError);
  CHECK_THROWS_AS(UniGmmModel(column({1.0}), {2, -1.0}), ConfigError);
}

TEST_CASE("update_assignments examples") {
  auto s = make_state({0.3}, {2.0}, 3);
  update_assignments(s, column({-4.0, 0.0, 9.0}));
  CHECK((s.phi.array() == 1.0).all());

  s = make_state({1.7, -1.7}, {0.4, 0.4}, 1);
  update_assignments(s, column({0.0}));
  CHECK(s.phi(0, 0) == Approx(0.5).epsilon(1e-15));

  s = make_state({0.0, 1.0}, {1.0, 1.0}, 1);
  update_assignments(s, column({1.0}));
  CHECK(s.phi(0, 0) == Approx(1.0 / (1.0 + std::exp(0.5))).epsilon(1e-14));
  CHECK(s.phi(0, 1) == Approx(0.6225).epsilon(1e-4));
  CHECK(s.phi(0, 0) == Approx(0.3775).epsilon(1e-4));

  // Old responsibilities play no role.
  auto t = s;
  t.phi << 0.99, 0.01;
  update_assignments(t, column({1.0}));
  CHECK(t.phi == s.phi);
}

TEST_CASE("update_assignments stays finite for extreme data") {
  auto s = make_state({-50.0, 0.0, 50.0}, {1.0, 1.0, 1.0}, 2);
  update_assignments(s, column({1e4, -1e4}));
  CHECK(s.phi.allFinite());
  CHECK(s.phi(0, 2) == Approx(1.0));
  CHECK(s.phi(1, 0) == Approx(1.0));
}

TEST_CASE("update_components examples") {
  auto s = make_state({5.0, 5.0}, {0.1, 0.1}, 2);
  s.phi << 1.0, 0.0, 1.0, 0.0;
  update_components(s, column({1.0, 1.0}), 1.0);
  CHECK(s.m(0, 0) == Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(s.s2(0, 0) == Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(s.m(1, 0) == 0.0);
  CHECK(s.s2(1, 0) == 1.0);

  s = make_state({0.0, 0.0}, {1.0, 1.0}, 1);
  s.phi << 0.5, 0.5;
  update_components(s, column({2.0}), 1.0);
  CHECK(s.m(0, 0) == Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(s.s2(0, 0) == Approx(2.0 / 3.0).epsilon(1e-15));

  s = make_state({0.0, 0.0}, {1.0, 1.0}, 1);
  s.phi << 0.0, 1.0;
  update_components(s, column({2.0}), 3.5);
  CHECK(s.s2(0, 0) == 3.5);
}

TEST_CASE("K = 1 is exact after a single sweep") {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> nd(-3.0, 2.0);
  for (int rep = 0; rep < 20; ++rep) {
    Data x(1 + rep, 1 + rep % 3);
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      x.data()[i] = nd(rng);
    }
    const double sigma2 = 0.1 + 0.7 * rep;
    UniGmmModel model(x, {1, sigma2});
    model.sweep();
    const auto post = oracle::k1_posterior(x, sigma2);
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      CHECK(std::abs(model.params().m(0, j) - post.m[j]) <= 1e-10);
      CHECK(std::abs(model.params().s2(0, j) - post.s2) <= 1e-10);
    }
    CHECK(std::abs(model.elbo() - oracle::k1_log_evidence(x, sigma2)) <=
          1e-9 * std::max(1.0, std::abs(model.elbo())));
  }
}

TEST_CASE("gmm_elbo with no data at the prior is zero") {
  auto s = make_state({0.0, 0.0, 0.0}, {4.0, 4.0, 4.0}, 0);
  CHECK(gmm_elbo(s, Data(0, 1), 4.0) == 0.0);
  s.m(1, 0) = 1.0;
  CHECK(gmm_elbo(s, Data(0, 1), 4.0) == Approx(-gaussian_kl(1.0, 4.0, 0.0, 4.0)));
}

TEST_CASE("gmm_elbo matches enumeration and stays below log p(x)") {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> nd(0.0, 2.0);
  std::uniform_real_distribution<double> ud(0.1, 2.0);
  std::gamma_distribution<double> gd(0.5, 1.0);
  for (int rep = 0; rep < 30; ++rep) {
    const Eigen::Index k = 2 + rep % 2;
    const Eigen::Index n = 3 + rep % 4;
    Data x(n, 1);
    UniGmmState s;
    s.m.resize(k, 1);
    s.s2.resize(k, 1);
    s.phi.resize(n, k);
    for (Eigen::Index i = 0; i < n; ++i) {
      x(i, 0) = nd(rng);
      double tot = 0.0;
      for (Eigen::Index c = 0; c < k; ++c) {
        s.phi(i, c) = gd(rng) + 1e-12;
        tot += s.phi(i, c);
      }
      s.phi.row(i) /= tot;
    }
    for (Eigen::Index c = 0; c < k; ++c) {
      s.m(c, 0) = nd(rng);
      s.s2(c, 0) = ud(rng);
    }
    const auto e = oracle::gmm_enumerate(x, s.m, s.s2, s.phi, 2.0);
    const double elbo = gmm_elbo(s, x, 2.0);
    CHECK(std::abs(elbo - e.elbo) <= 1e-9);
    CHECK(e.kl >= 0.0);
    CHECK(elbo <= e.log_evidence);
  }
}

TEST_CASE("predictive density examples") {
  Eigen::MatrixXd m(1, 1);
  m << 0.0;
  const std::vector<double> zero{0.0};
  CHECK(std::exp(predictive_log_density(m, zero)) == Approx(0.398942).epsilon(1e-6));
  Eigen::MatrixXd m2(2, 1);
  m2 << -1.0, 1.0;
  CHECK(std::exp(predictive_log_density(m2, zero)) == Approx(0.241971).epsilon(1e-6));
}

TEST_CASE("predictive density integrates to one") {
  Eigen::MatrixXd m(3, 1);
  m << -4.0, 0.5, 7.0;
  const double h = 1e-3;
  double total = 0.0;
  for (double x = -20.0; x <= 27.0; x += h) {
    const std::vector<double> p{x};
    total += std::exp(predictive_log_density(m, p)) * h;
  }
  CHECK(std::abs(total - 1.0) <= 1e-4);
  for (double x : {-3.0, 0.0, 6.5}) {
    const std::vector<double> p{x};
    CHECK(predictive_log_density(m, p) ==
          Approx(oracle::mixture_log_density({-4.0, 0.5, 7.0}, x)).epsilon(1e-13));
  }
}

TEST_CASE("simulate is deterministic and honours its options") {
  const auto a = simulate(5, 1000, 17, 2);
  const auto b = simulate(5, 1000, 17, 2);
  CHECK(a.data == b.data);
  CHECK(a.means == b.means);
  CHECK(a.labels == b.labels);
  CHECK(a.data.rows() == 1000);
  CHECK(a.data.cols() == 2);
  CHECK(a.means.rows() == 5);
  CHECK_FALSE(simulate(5, 1000, 18, 2).data == a.data);

  const auto c = simulate(4, 4, 3, 1, {5.0, 0.0, true});
  CHECK(c.labels == std::vector<std::size_t>{0, 1, 2, 3});

  const auto sep = simulate(5, 10, 3, 2, {5.0, 4.0});
  for (Eigen::Index i = 0; i < 5; ++i) {
    for (Eigen::Index j = 0; j < i; ++j) {
      CHECK((sep.means.row(i) - sep.means.row(j)).norm() >= 4.0);
    }
  }
  CHECK_THROWS_AS((void)simulate(0, 10, 1, 1), DomainError);
}

TEST_CASE("aligned accuracy is permutation invariant") {
  Eigen::MatrixXd phi(4, 3);
  phi << 0, 1, 0, 0, 0, 1, 1, 0, 0, 0, 0.6, 0.4;
  const std::vector<std::size_t> labels{2, 0, 1, 2};
  CHECK(aligned_accuracy(phi, labels) == 1.0);
  const std::vector<std::size_t> off{2, 0, 1, 0};
  CHECK(aligned_accuracy(phi, off) == 0.75);
}

TEST_CASE("ELBO is nondecreasing over 50 seeds") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const std::size_t k = 1 + seed % 5;
    const auto sim = simulate(k, 20 + 9 * seed, 1000 + seed, 1 + seed % 3);
    UniGmmModel model(sim.data, {k, 1.0 + static_cast<double>(seed)});
    model.initialize(InitStrategy::DataCalibrated, seed);
    double prev = model.elbo();
    for (int it = 0; it < 100; ++it) {
      model.sweep();
      const double cur = model.elbo();
      CHECK(cur >= prev - elbo_slack(prev));
      prev = cur;
    }
  }
}

TEST_CASE("state round trip through MeanFieldState") {
  const auto sim = simulate(3, 12, 8, 2);
  UniGmmModel model(sim.data, {3, 4.0});
  model.initialize(InitStrategy::DataCalibrated, 4);
  model.sweep();
  const auto st = model.state();
  CHECK(st.size() == 3 * 2 + 12);
  CHECK(st.labels[1] == "mu[0,1]");
  const double e = model.elbo();
  UniGmmModel other(sim.data, {3, 4.0});
  other.set_state(st);
  CHECK(other.elbo() == e);
  CHECK(other.metadata().at("k") == 3.0);
}

TEST_CASE("clusters are recovered at desk scale") {
  const auto sim = simulate(5, 1000, 2024, 2, {5.0, 4.0});
  double best_elbo = -std::numeric_limits<double>::infinity();
  double best_acc = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    UniGmmModel model(sim.data, {5, 25.0});
    FitConfig cfg;
    cfg.tol = 1e-10;
    const auto r = cavi_fit(model, cfg, init_state(model, InitStrategy::DataCalibrated, seed));
    if (r.final_elbo() > best_elbo) {
      best_elbo = r.final_elbo();
      best_acc = aligned_accuracy(model.params().phi, sim.labels);
    }
  }
  CHECK(best_acc >= 0.95);
}
