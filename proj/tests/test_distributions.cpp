#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <vector>

#include <gtest/gtest.h>

#include <bayeslearn/autodiff.hpp>
#include <bayeslearn/distributions.hpp>
#include <bayeslearn/random.hpp>

#include "support.hpp"

using namespace bayeslearn;
using testing_support::kPi;

// ---- counter-based generator ----

TEST(Philox, KnownAnswerVectors) {
  using C = Philox4x32::counter_type;
  using K = Philox4x32::key_type;
  EXPECT_EQ(Philox4x32::bijection(C{0, 0, 0, 0}, K{0, 0}),
            (C{0x6627e8d5u, 0xe169c58du, 0xbc57ac4cu, 0x9b00dbd8u}));
  EXPECT_EQ(Philox4x32::bijection(C{0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu},
                                  K{0xffffffffu, 0xffffffffu}),
            (C{0x408f276du, 0x41c83b0eu, 0xa20bc7c6u, 0x6d5451fdu}));
  EXPECT_EQ(Philox4x32::bijection(C{0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u},
                                  K{0xa4093822u, 0x299f31d0u}),
            (C{0xd16cfe09u, 0x94fdccebu, 0x5001e420u, 0x24126ea1u}));
}

TEST(Philox, StreamsAreDeterministicAndDistinct) {
  Rng a = make_stream(42, "advi-noise");
  Rng b = make_stream(42, "advi-noise");
  Rng c = make_stream(42, "advi-batch");
  Rng d = make_stream(42, "nuts-chain", 1);
  Rng e = make_stream(43, "advi-noise");
  std::vector<std::uint32_t> va, vb, vc, vd, ve;
  for (int i = 0; i < 64; ++i) {
    va.push_back(a());
    vb.push_back(b());
    vc.push_back(c());
    vd.push_back(d());
    ve.push_back(e());
  }
  EXPECT_EQ(va, vb);
  EXPECT_NE(va, vc);
  EXPECT_NE(va, vd);
  EXPECT_NE(va, ve);
  std::set<std::uint64_t> keys;
  for (std::uint64_t i = 0; i < 1000; ++i) keys.insert(stream_key(7, "nuts-chain", i));
  EXPECT_EQ(keys.size(), 1000u);
}

TEST(Philox, DiscardMatchesStepping) {
  Rng a = make_stream(1, "x");
  Rng b = make_stream(1, "x");
  for (int i = 0; i < 37; ++i) a();
  b.discard(37);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a(), b());
}

TEST(Philox, UniformBitsLookUniform) {
  Rng r = make_stream(5, "bits");
  std::vector<double> u(100000);
  for (double& v : u) v = std::uniform_real_distribution<double>(0.0, 1.0)(r);
  EXPECT_LT(testing_support::ks_statistic(u, [](double x) { return std::clamp(x, 0.0, 1.0); }), 0.01);
}

// ---- densities ----

TEST(LogPdf, ClosedForms) {
  EXPECT_NEAR(Distribution::normal(0, 1).log_pdf(0.0), -0.9189385332, 1e-10);
  EXPECT_NEAR(Distribution::half_normal(1).log_pdf(1.0), -0.7257913526, 1e-10);
  EXPECT_NEAR(Distribution::half_cauchy(1).log_pdf(0.0), std::log(2.0 / kPi), 1e-12);
  EXPECT_NEAR(Distribution::half_cauchy(1).log_pdf(0.0), -0.4515827053, 1e-10);
  EXPECT_NEAR(Distribution::gamma(2.0, 3.0).log_pdf(0.5), std::log(9.0 * 0.5 * std::exp(-1.5)), 1e-12);
  EXPECT_NEAR(Distribution::uniform(2.0, 6.0).log_pdf(3.0), -std::log(4.0), 1e-15);
  EXPECT_NEAR(Distribution::normal(1.5, 2.0).log_pdf(-0.3), testing_support::normal_log_pdf(-0.3, 1.5, 2.0),
              1e-13);
}

TEST(LogPdf, OutsideSupportIsNegativeInfinity) {
  EXPECT_EQ(Distribution::half_normal(1).log_pdf(-0.1), kNegInf);
  EXPECT_EQ(Distribution::half_cauchy(1).log_pdf(-1e-12), kNegInf);
  EXPECT_EQ(Distribution::gamma(2, 1).log_pdf(0.0), kNegInf);
  EXPECT_EQ(Distribution::uniform(0, 1).log_pdf(1.5), kNegInf);
  EXPECT_EQ(Distribution::uniform(0, 1).log_pdf(-0.5), kNegInf);
}

TEST(LogPdf, InvalidParametersAreUsageErrors) {
  EXPECT_THROW(Distribution::normal(0, 0), UsageError);
  EXPECT_THROW(Distribution::half_normal(-1), UsageError);
  EXPECT_THROW(Distribution::half_cauchy(0), UsageError);
  EXPECT_THROW(Distribution::gamma(1, 0), UsageError);
  EXPECT_THROW(Distribution::uniform(1, 1), UsageError);
}

TEST(LogPdf, IntegratesToOne) {
  // Substitution x = t/(1-t) maps (0,1) onto (0,inf) for the heavy-tailed
  // HalfCauchy; the others integrate on wide finite ranges.
  const auto mass = [](const Distribution& d, double lo, double hi) {
    return testing_support::simpson([&](double x) { return std::exp(d.log_pdf(x)); }, lo, hi, 200000);
  };
  EXPECT_NEAR(mass(Distribution::normal(0, 1), -8, 8), 1.0, 1e-6);
  EXPECT_NEAR(mass(Distribution::normal(3, 0.5), -2, 8), 1.0, 1e-6);
  EXPECT_NEAR(mass(Distribution::half_normal(2), 0, 20), 1.0, 1e-6);
  EXPECT_NEAR(mass(Distribution::gamma(2.5, 1.5), 1e-12, 60), 1.0, 1e-6);
  EXPECT_NEAR(mass(Distribution::uniform(-1, 3), -1, 3), 1.0, 1e-6);
  const Distribution hc = Distribution::half_cauchy(5);
  const double hc_mass = testing_support::simpson(
      [&](double t) {
        if (t >= 1.0) return 2.0 * 5.0 / kPi;  // limit of the integrand as t -> 1
        const double x = t / (1.0 - t);
        return std::exp(hc.log_pdf(x)) / ((1.0 - t) * (1.0 - t));
      },
      0.0, 1.0, 200000);
  EXPECT_NEAR(hc_mass, 1.0, 1e-6);
}

TEST(LogPdf, TapedAndUntapedPrimalsAreBitIdentical) {
  const std::vector<Distribution> ds{Distribution::normal(0.3, 1.7), Distribution::half_normal(2.0),
                                     Distribution::half_cauchy(5.0), Distribution::gamma(2.0, 0.5),
                                     Distribution::uniform(0.0, 4.0)};
  for (const auto& d : ds) {
    for (double x : {0.1, 0.9, 2.5, 3.9}) {
      ad::Tape t;
      EXPECT_EQ(d.log_pdf(t.variable(x)).scalar(), d.log_pdf(x)) << d.name() << " at " << x;
    }
  }
}

TEST(LogPdf, TapedVectorSumsAndDifferentiates) {
  const Distribution d = Distribution::normal(1.0, 2.0);
  const Eigen::VectorXd x{{0.5, -1.0, 3.0}};
  ad::Tape t;
  const ad::Var v = t.variable(x);
  const ad::Var lp = d.log_pdf(v);
  double expected = 0.0;
  for (double xi : x) expected += d.log_pdf(xi);
  EXPECT_NEAR(lp.scalar(), expected, 1e-13);
  const Eigen::MatrixXd g = t.backward(lp).wrt(v);
  for (Eigen::Index i = 0; i < 3; ++i) EXPECT_NEAR(g(i), -(x(i) - 1.0) / 4.0, 1e-15);
}

TEST(MultivariateNormal, MatchesIndependentProductAndGradients) {
  const Eigen::VectorXd mean{{1.0, -2.0}};
  Eigen::MatrixXd cov(2, 2);
  cov << 4.0, 0.0, 0.0, 9.0;
  MultivariateNormal mvn(mean, cov);
  const Eigen::VectorXd x{{0.0, 1.0}};
  EXPECT_NEAR(mvn.log_pdf(x),
              testing_support::normal_log_pdf(0.0, 1.0, 2.0) + testing_support::normal_log_pdf(1.0, -2.0, 3.0),
              1e-12);

  // correlated case against the dense formula
  cov << 2.0, 0.6, 0.6, 1.0;
  MultivariateNormal corr(mean, cov);
  const Eigen::VectorXd r = x - mean;
  const double dense = -0.5 * r.dot(cov.inverse() * r) - 0.5 * std::log(cov.determinant()) - std::log(2.0 * kPi);
  EXPECT_NEAR(corr.log_pdf(x), dense, 1e-12);
  EXPECT_THROW(MultivariateNormal(mean, Eigen::MatrixXd::Identity(3, 3)), ShapeError);
}

TEST(MultivariateNormal, SampleMoments) {
  const Eigen::VectorXd mean{{1.0, -2.0}};
  Eigen::MatrixXd cov(2, 2);
  cov << 2.0, 0.6, 0.6, 1.0;
  MultivariateNormal mvn(mean, cov);
  Rng rng = make_stream(3, "mvn");
  const int n = 100000;
  Eigen::MatrixXd s(n, 2);
  for (int i = 0; i < n; ++i) s.row(i) = mvn.sample(rng).transpose();
  const Eigen::RowVectorXd m = s.colwise().mean();
  const Eigen::MatrixXd c = (s.rowwise() - m).transpose() * (s.rowwise() - m) / (n - 1.0);
  EXPECT_LT((m.transpose() - mean).cwiseAbs().maxCoeff(), 0.02);
  EXPECT_LT((c - cov).cwiseAbs().maxCoeff(), 0.04);
}

// ---- sampling ----

TEST(Sample, NormalMoments) {
  Rng rng = make_stream(1, "normal");
  const auto x = Distribution::normal(0, 1).sample(rng, 100000);
  const double mean = std::accumulate(x.begin(), x.end(), 0.0) / x.size();
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(x.size() - 1);
  EXPECT_NEAR(mean, 0.0, 0.02);
  EXPECT_NEAR(var, 1.0, 0.02);
}

TEST(Sample, NarrowUniformStaysInSupport) {
  Rng rng = make_stream(2, "uniform");
  for (double v : Distribution::uniform(2.0, 2.000001).sample(rng, 10000)) {
    EXPECT_GE(v, 2.0);
    EXPECT_LE(v, 2.000001);
  }
}

TEST(Sample, SameSeedSameSequence) {
  Rng a = make_stream(9, "s"), b = make_stream(9, "s");
  EXPECT_EQ(Distribution::gamma(2, 1).sample(a, 100), Distribution::gamma(2, 1).sample(b, 100));
  EXPECT_THROW(Distribution::normal(0, 1).sample(a, 0), UsageError);
}

TEST(Sample, KolmogorovSmirnovAgainstCdf) {
  using testing_support::ks_statistic;
  using testing_support::normal_cdf;
  Rng rng = make_stream(4, "ks");
  const std::size_t n = 100000;
  EXPECT_LT(ks_statistic(Distribution::normal(1, 2).sample(rng, n), [](double x) { return normal_cdf((x - 1) / 2); }),
            0.01);
  EXPECT_LT(ks_statistic(Distribution::half_normal(3).sample(rng, n),
                         [](double x) { return x < 0 ? 0.0 : 2.0 * normal_cdf(x / 3) - 1.0; }),
            0.01);
  EXPECT_LT(ks_statistic(Distribution::uniform(-1, 3).sample(rng, n),
                         [](double x) { return std::clamp((x + 1) / 4, 0.0, 1.0); }),
            0.01);
  EXPECT_LT(ks_statistic(Distribution::half_cauchy(5).sample(rng, n),
                         [](double x) { return x < 0 ? 0.0 : 2.0 / kPi * std::atan(x / 5); }),
            0.01);
  // Gamma(k=2, rate 1): CDF 1 - (1 + x) e^-x
  EXPECT_LT(ks_statistic(Distribution::gamma(2, 1).sample(rng, n),
                         [](double x) { return x < 0 ? 0.0 : 1.0 - (1.0 + x) * std::exp(-x); }),
            0.01);
}

// ---- transforms ----

TEST(Transform, KindsForSupports) {
  EXPECT_EQ(transform_for(Distribution::normal(0, 1).support()).kind(), TransformKind::Identity);
  EXPECT_EQ(transform_for(Distribution::half_normal(1).support()).kind(), TransformKind::Log);
  EXPECT_EQ(transform_for(Distribution::uniform(0, 1).support()).kind(), TransformKind::LogitInterval);
  EXPECT_THROW(transform_for(Support{static_cast<SupportKind>(99)}), UsageError);
}

TEST(Transform, ClosedForms) {
  const Transform lg = Transform::log();
  for (double z : {-2.0, 0.0, 1.3}) {
    EXPECT_EQ(lg.inverse(z), std::exp(z));
    EXPECT_EQ(lg.log_abs_det_jacobian(z), z);
    EXPECT_EQ(Transform::identity().log_abs_det_jacobian(z), 0.0);
  }
  EXPECT_EQ(lg.forward(std::exp(1.0)), 1.0);
  EXPECT_EQ(Transform::logit_interval(0, 1).inverse(0.0), 0.5);
}

TEST(Transform, RoundTripAndJacobian) {
  const std::vector<Transform> ts{Transform::identity(), Transform::log(), Transform::logit_interval(0, 1),
                                  Transform::logit_interval(-3, 5)};
  for (const auto& t : ts) {
    for (double z : {-4.0, -1.0, -0.2, 0.0, 0.7, 2.5, 4.0}) {
      const double theta = t.inverse(z);
      EXPECT_NEAR(t.inverse(t.forward(theta)), theta, 1e-12 * std::max(1.0, std::abs(theta)));
      EXPECT_NEAR(t.forward(theta), z, 1e-12 * std::max(1.0, std::abs(z)));
      const double h = 1e-6;
      const double deriv = (t.inverse(z + h) - t.inverse(z - h)) / (2 * h);
      const double analytic = std::exp(t.log_abs_det_jacobian(z));
      EXPECT_NEAR(analytic, deriv, 1e-8 * std::max(1.0, analytic)) << "z=" << z;
      ad::Tape tape;
      EXPECT_EQ(t.log_abs_det_jacobian(tape.variable(z)).scalar(), t.log_abs_det_jacobian(z));
      EXPECT_EQ(t.inverse(tape.variable(z)).scalar(), t.inverse(z));
    }
  }
}
