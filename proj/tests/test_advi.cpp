#include <cmath>
#include <numbers>
#include <vector>

#include <gtest/gtest.h>

#include <bayeslearn/advi.hpp>
#include <bayeslearn/linear_regression.hpp>

#include "support.hpp"

using namespace bayeslearn;
using testing_support::NormalNormal;

namespace {

ModelGraph prior_only() { return ModelBuilder().scalar("x", Distribution::normal(0, 1)).build(); }

NormalNormal conjugate_problem() {
  NormalNormal nn{0.0, 2.0, 1.0, {}};
  Rng rng = make_stream(314, "conjugate-data");
  std::normal_distribution<double> noise(0.0, 1.0);
  for (int i = 0; i < 20; ++i) nn.y.push_back(1.3 + noise(rng));
  return nn;
}

ModelGraph conjugate_graph(const NormalNormal& nn) {
  Dataset data{Matrix(static_cast<Index>(nn.y.size()), 0), Vector(static_cast<Index>(nn.y.size()))};
  for (std::size_t i = 0; i < nn.y.size(); ++i) data.y(static_cast<Index>(i)) = nn.y[i];
  const double s = nn.s;
  return ModelBuilder()
      .scalar("theta", Distribution::normal(nn.m0, nn.s0))
      .likelihood(std::move(data),
                  [s](ad::Tape& t, const ParamValues& p, const Dataset& b) {
                    const ad::Var r = (t.variable(b.y) - p.at("theta")) / s;
                    return -0.5 * ad::dot(r, r) - static_cast<double>(b.size()) * (std::log(s) + kHalfLog2Pi);
                  })
      .build();
}

}  // namespace

TEST(Entropy, ClosedForm) {
  VariationalPosterior q{Vector::Zero(1), Vector::Zero(1)};
  EXPECT_NEAR(q.entropy(), 1.4189385, 1e-7);
  VariationalPosterior q3{Vector::Zero(3), Vector{{0.3, -1.2, 2.0}}};
  double prod = 1.0;
  for (double w : q3.omega) prod *= std::exp(2 * w);
  const double reference = 0.5 * std::log(std::pow(2 * std::numbers::pi * std::numbers::e, 3) * prod);
  EXPECT_NEAR(q3.entropy(), reference, 1e-12);
}

TEST(ElboEstimate, ExactMatchIsZeroAndShiftedIsMinusHalf) {
  const ModelGraph m = prior_only();
  Rng rng = make_stream(1, "elbo");
  const Dataset& none = m.data();
  EXPECT_NEAR(elbo_estimate({Vector::Zero(1), Vector::Zero(1)}, m, 100000, none, rng), 0.0, 0.01);
  EXPECT_NEAR(elbo_estimate({Vector::Ones(1), Vector::Zero(1)}, m, 100000, none, rng), -0.5, 0.01);
}

TEST(ElboGradient, ExpectedValuesOnStandardNormal) {
  const ModelGraph m = prior_only();
  Rng rng = make_stream(2, "grad");
  double mu0 = 0, om0 = 0, mu1 = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const auto g0 = elbo_gradient({Vector::Zero(1), Vector::Zero(1)}, m, 1, m.data(), rng);
    mu0 += g0.mu(0);
    om0 += g0.omega(0);
    mu1 += elbo_gradient({Vector::Ones(1), Vector::Zero(1)}, m, 1, m.data(), rng).mu(0);
  }
  EXPECT_NEAR(mu0 / n, 0.0, 0.02);
  EXPECT_NEAR(om0 / n, 0.0, 0.02);
  EXPECT_NEAR(mu1 / n, -1.0, 0.02);
}

TEST(ElboGradient, MatchesFiniteDifferencesWithFrozenNoise) {
  Dataset data{Matrix(12, 2), Vector(12)};
  for (int i = 0; i < 12; ++i) {
    data.X(i, 0) = std::sin(i);
    data.X(i, 1) = std::cos(0.7 * i);
    data.y(i) = 0.4 * i - 2.0;
  }
  const ModelGraph m = linear_regression_graph(data);
  const VariationalPosterior q{Vector{{0.1, -0.3, 0.2, -0.4}}, Vector{{-0.5, -0.8, -1.0, -1.2}}};
  Rng rng = make_stream(3, "frozen");
  const Matrix eps = draw_noise(m.dimension(), 3, rng);
  const ElboGradient g = elbo_gradient_at(q, m, eps, m.data());
  EXPECT_NEAR(g.elbo, elbo_estimate_at(q, m, eps, m.data()), 1e-12);
  const Vector fd_mu = testing_support::central_difference(
      [&](const Vector& mu) { return elbo_estimate_at({mu, q.omega}, m, eps, m.data()); }, q.mu, 1e-6);
  const Vector fd_om = testing_support::central_difference(
      [&](const Vector& om) { return elbo_estimate_at({q.mu, om}, m, eps, m.data()); }, q.omega, 1e-6);
  EXPECT_LT(testing_support::max_relative_error(g.mu, fd_mu), 1e-6);
  EXPECT_LT(testing_support::max_relative_error(g.omega, fd_om), 1e-6);
}

TEST(ElboGradient, UnbiasedOnConjugateModel) {
  const NormalNormal nn = conjugate_problem();
  const ModelGraph m = conjugate_graph(nn);
  const double mu = 0.4, omega = -0.7, sd = std::exp(omega);
  const double n = static_cast<double>(nn.y.size());
  double sum_y = 0;
  for (double v : nn.y) sum_y += v;
  // d/dmu and d/domega of E_q[log p] + entropy, evaluated analytically
  const double precision = 1.0 / (nn.s0 * nn.s0) + n / (nn.s * nn.s);
  const double analytic_mu = -(mu - nn.m0) / (nn.s0 * nn.s0) - (n * mu - sum_y) / (nn.s * nn.s);
  const double analytic_omega = -sd * sd * precision + 1.0;

  Rng rng = make_stream(4, "unbiased");
  const int draws = 100000;
  std::vector<double> gm, go;
  for (int i = 0; i < draws; ++i) {
    const auto g = elbo_gradient({Vector::Constant(1, mu), Vector::Constant(1, omega)}, m, 1, m.data(), rng);
    gm.push_back(g.mu(0));
    go.push_back(g.omega(0));
  }
  const auto mean_se = [](const std::vector<double>& v) {
    double mean = 0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double var = 0;
    for (double x : v) var += (x - mean) * (x - mean);
    var /= static_cast<double>(v.size() - 1);
    return std::pair{mean, std::sqrt(var / static_cast<double>(v.size()))};
  };
  const auto [m_mu, se_mu] = mean_se(gm);
  const auto [m_om, se_om] = mean_se(go);
  EXPECT_LT(std::abs(m_mu - analytic_mu), 3 * se_mu + 1e-12);
  EXPECT_LT(std::abs(m_om - analytic_omega), 3 * se_om + 1e-12);
}

TEST(FitAdvi, PriorOnlyRecoversPrior) {
  AdviConfig cfg;
  cfg.steps = 5000;
  cfg.convergence_tol = 0.0;
  const AdviResult r = fit_advi(prior_only(), cfg);
  EXPECT_EQ(r.history.size(), 5000u);
  EXPECT_NEAR(r.posterior.mu(0), 0.0, 0.05);
  EXPECT_NEAR(r.posterior.omega(0), 0.0, 0.1);
}

TEST(FitAdvi, ConjugatePosteriorRecovered) {
  const NormalNormal nn = conjugate_problem();
  AdviConfig cfg;
  cfg.n_mc = 10;
  const AdviResult r = fit_advi(conjugate_graph(nn), cfg);
  EXPECT_NEAR(r.posterior.mu(0), nn.posterior_mean(), 0.05);
  EXPECT_NEAR(r.posterior.sd()(0) / std::sqrt(nn.posterior_var()), 1.0, 0.10);
  EXPECT_GT(r.history.smoothed_at(r.history.size() - 1), r.history.smoothed_at(99));
}

TEST(FitAdvi, DeterministicForFixedSeed) {
  const ModelGraph m = conjugate_graph(conjugate_problem());
  AdviConfig cfg;
  cfg.steps = 800;
  cfg.seed = 17;
  const AdviResult a = fit_advi(m, cfg), b = fit_advi(m, cfg);
  EXPECT_EQ(a.posterior.mu, b.posterior.mu);
  EXPECT_EQ(a.posterior.omega, b.posterior.omega);
  EXPECT_EQ(a.history.values, b.history.values);
  cfg.seed = 18;
  EXPECT_NE(fit_advi(m, cfg).history.values, a.history.values);
}

TEST(FitAdvi, BatchOfAllRowsEqualsFullBatch) {
  const ModelGraph m = conjugate_graph(conjugate_problem());
  AdviConfig cfg;
  cfg.steps = 500;
  const AdviResult full = fit_advi(m, cfg);
  cfg.batch_size = static_cast<std::size_t>(m.data_size());
  const AdviResult batch = fit_advi(m, cfg);
  EXPECT_EQ(full.posterior.mu, batch.posterior.mu);
  EXPECT_EQ(full.posterior.omega, batch.posterior.omega);
  EXPECT_EQ(full.history.values, batch.history.values);
}

TEST(FitAdvi, MiniBatchesStillFindThePosterior) {
  const NormalNormal nn = conjugate_problem();
  AdviConfig cfg;
  cfg.batch_size = 5;
  cfg.steps = 6000;
  cfg.convergence_tol = 0.0;
  cfg.learning_rate = 0.005;
  const AdviResult r = fit_advi(conjugate_graph(nn), cfg);
  EXPECT_NEAR(r.posterior.mu(0), nn.posterior_mean(), 0.15);
}

TEST(FitAdvi, PersistentNonFiniteDensityDiverges) {
  const ModelGraph m = ModelBuilder()
                           .scalar("x", Distribution::normal(0, 1))
                           .likelihood(Dataset{Matrix(1, 0), Vector::Zero(1)},
                                       [](ad::Tape& t, const ParamValues&, const Dataset&) { return t.variable(kNegInf); })
                           .build();
  try {
    fit_advi(m, AdviConfig{});
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("51"), std::string::npos) << what;
    EXPECT_NE(what.find("learning rate"), std::string::npos) << what;
  }
}

TEST(FitAdvi, OccasionalBadDrawsAreSkippedNotFatal) {
  // Density is -inf for x > 1.5; some draws land there early on.
  const ModelGraph m = ModelBuilder()
                           .scalar("x", Distribution::normal(0, 1))
                           .likelihood(Dataset{Matrix(1, 0), Vector::Zero(1)},
                                       [](ad::Tape& t, const ParamValues& p, const Dataset&) {
                                         return p.at("x").scalar() > 1.5 ? t.variable(kNegInf) : t.variable(0.0);
                                       })
                           .build();
  AdviConfig cfg;
  cfg.steps = 2000;
  cfg.initial_omega = 0.5;
  const AdviResult r = fit_advi(m, cfg);
  EXPECT_GT(r.skipped_steps, 0u);
  EXPECT_TRUE(r.posterior.mu.allFinite());
}

TEST(FitAdvi, InvalidConfig) {
  const ModelGraph m = conjugate_graph(conjugate_problem());
  AdviConfig cfg;
  cfg.steps = 0;
  EXPECT_THROW(fit_advi(m, cfg), UsageError);
  cfg = {};
  cfg.n_mc = 0;
  EXPECT_THROW(fit_advi(m, cfg), UsageError);
  cfg = {};
  cfg.batch_size = 21;
  EXPECT_THROW(fit_advi(m, cfg), UsageError);
}

TEST(ElboHistory, TrailingWindowMean) {
  ElboHistory h{{1, 2, 3, 4, 5}, 2};
  EXPECT_EQ(h.smoothed_at(0), 1.0);
  EXPECT_EQ(h.smoothed_at(1), 1.5);
  EXPECT_EQ(h.smoothed_at(4), 4.5);
  EXPECT_EQ(h.smoothed(), (std::vector<double>{1, 1.5, 2.5, 3.5, 4.5}));
}
