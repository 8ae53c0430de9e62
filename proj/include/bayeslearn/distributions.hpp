#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "autodiff.hpp"
#include "errors.hpp"
#include "random.hpp"

namespace bayeslearn {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();
inline constexpr double kHalfLog2Pi = 0.91893853320467274178;

enum class Family { Normal, HalfNormal, HalfCauchy, Gamma, Uniform };

enum class SupportKind { Real, Positive, Interval, RealVector };

struct Support {
  SupportKind kind = SupportKind::Real;
  double low = -std::numeric_limits<double>::infinity();
  double high = std::numeric_limits<double>::infinity();
};

namespace detail {

inline double min_value(double x) { return x; }
inline double min_value(const ad::Var& x) { return x.value().minCoeff(); }
inline double max_value(double x) { return x; }
inline double max_value(const ad::Var& x) { return x.value().maxCoeff(); }

inline double constant_like(double, double c) { return c; }
inline ad::Var constant_like(const ad::Var& x, double c) {
  return x.tape()->variable(c);
}

inline double reduce_sum(double x) { return x; }
inline ad::Var reduce_sum(const ad::Var& x) { return ad::sum(x); }

inline double element_count(double) { return 1.0; }
inline double element_count(const ad::Var& x) {
  return static_cast<double>(x.size());
}

}  // namespace detail

/**
 * Univariate distribution with fixed parameters.
 *
 * Scale-type parameters must be strictly positive and interval bounds
 * ordered.  log_pdf returns -inf outside the support instead of throwing,
 * so it is a total function for the samplers.  Applied to a taped vector,
 * log_pdf returns the summed i.i.d. log density.
 */
class Distribution {
 public:
  static Distribution normal(double mean, double sd) {
    require_positive("Normal sd", sd);
    return Distribution(Family::Normal, mean, sd);
  }
  static Distribution half_normal(double scale) {
    require_positive("HalfNormal scale", scale);
    return Distribution(Family::HalfNormal, scale, 0.0);
  }
  static Distribution half_cauchy(double scale) {
    require_positive("HalfCauchy scale", scale);
    return Distribution(Family::HalfCauchy, scale, 0.0);
  }
  /// Shape/rate parameterization.
  static Distribution gamma(double shape, double rate) {
    require_positive("Gamma shape", shape);
    require_positive("Gamma rate", rate);
    return Distribution(Family::Gamma, shape, rate);
  }
  static Distribution uniform(double low, double high) {
    if (!(low < high) || !std::isfinite(low) || !std::isfinite(high))
      throw UsageError("Uniform bounds must satisfy low < high");
    return Distribution(Family::Uniform, low, high);
  }

  Family family() const noexcept { return family_; }
  double a() const noexcept { return a_; }
  double b() const noexcept { return b_; }

  Support support() const {
    switch (family_) {
      case Family::Normal: return {SupportKind::Real};
      case Family::HalfNormal:
      case Family::HalfCauchy:
      case Family::Gamma: return {SupportKind::Positive, 0.0};
      case Family::Uniform: return {SupportKind::Interval, a_, b_};
    }
    throw UsageError("unknown family");
  }

  std::string name() const {
    switch (family_) {
      case Family::Normal: return "Normal";
      case Family::HalfNormal: return "HalfNormal";
      case Family::HalfCauchy: return "HalfCauchy";
      case Family::Gamma: return "Gamma";
      case Family::Uniform: return "Uniform";
    }
    return "unknown";
  }

  /// Log density in nats; T is double or ad::Var.  The same expression is
  /// evaluated on both paths, so taped and untaped primals agree exactly.
  template <class T>
  T log_pdf(const T& x) const {
    using std::log;
    switch (family_) {
      case Family::Normal: {
        const double c = -std::log(b_) - kHalfLog2Pi;
        const T z = (x - a_) / b_;
        return detail::reduce_sum(c - 0.5 * z * z);
      }
      case Family::HalfNormal: {
        if (detail::min_value(x) < 0.0) return detail::constant_like(x, kNegInf);
        const double c = std::numbers::ln2 - kHalfLog2Pi - std::log(a_);
        const T z = x / a_;
        return detail::reduce_sum(c - 0.5 * z * z);
      }
      case Family::HalfCauchy: {
        if (detail::min_value(x) < 0.0) return detail::constant_like(x, kNegInf);
        const double c = std::numbers::ln2 - std::log(std::numbers::pi) - std::log(a_);
        const T z = x / a_;
        return detail::reduce_sum(c - log(1.0 + z * z));
      }
      case Family::Gamma: {
        if (detail::min_value(x) <= 0.0) return detail::constant_like(x, kNegInf);
        const double c = a_ * std::log(b_) - std::lgamma(a_);
        return detail::reduce_sum(c + (a_ - 1.0) * log(x) - b_ * x);
      }
      case Family::Uniform: {
        if (detail::min_value(x) < a_ || detail::max_value(x) > b_)
          return detail::constant_like(x, kNegInf);
        return detail::constant_like(x, -std::log(b_ - a_) * detail::element_count(x));
      }
    }
    throw UsageError("unknown family");
  }

  double sample(Rng& rng) const {
    switch (family_) {
      case Family::Normal:
        return std::normal_distribution<double>(a_, b_)(rng);
      case Family::HalfNormal:
        return std::abs(std::normal_distribution<double>(0.0, a_)(rng));
      case Family::HalfCauchy: {
        const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
        return a_ * std::abs(std::tan(std::numbers::pi * (u - 0.5)));
      }
      case Family::Gamma:
        return std::gamma_distribution<double>(a_, 1.0 / b_)(rng);
      case Family::Uniform: {
        const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
        return std::clamp(a_ + (b_ - a_) * u, a_, b_);
      }
    }
    throw UsageError("unknown family");
  }

  std::vector<double> sample(Rng& rng, std::size_t n) const {
    if (n < 1) throw UsageError("sample: n must be >= 1");
    std::vector<double> out(n);
    for (double& v : out) v = sample(rng);
    return out;
  }

 private:
  Distribution(Family f, double a, double b) : family_(f), a_(a), b_(b) {}

  static void require_positive(const char* what, double v) {
    if (!(v > 0.0) || !std::isfinite(v))
      throw UsageError(std::string(what) + " must be positive and finite");
  }

  Family family_;
  double a_;
  double b_;
};

/// Log density of N(mean, cov) evaluated through a Cholesky factor on the
/// tape, differentiable in all three arguments.
inline ad::Var mvn_log_pdf(const ad::Var& x, const ad::Var& mean,
                           const ad::Var& cov) {
  const ad::Var l = ad::cholesky(cov);
  const ad::Var alpha = ad::solve_lower(l, x - mean);
  const double n = static_cast<double>(x.rows());
  return -0.5 * ad::dot(alpha, alpha) - ad::log_diag_sum(l) - n * kHalfLog2Pi;
}

class MultivariateNormal {
 public:
  MultivariateNormal(Eigen::VectorXd mean, Eigen::MatrixXd cov)
      : mean_(std::move(mean)), cov_(std::move(cov)) {
    if (cov_.rows() != cov_.cols() || cov_.rows() != mean_.size())
      throw ShapeError("MultivariateNormal: covariance must be square and match the mean");
    chol_ = ad::cholesky_lower(cov_);
  }

  const Eigen::VectorXd& mean() const noexcept { return mean_; }
  const Eigen::MatrixXd& cov() const noexcept { return cov_; }
  Support support() const { return {SupportKind::RealVector}; }

  double log_pdf(const Eigen::VectorXd& x) const {
    ad::Tape tape;
    return mvn_log_pdf(tape.variable(x), tape.variable(mean_), tape.variable(cov_)).scalar();
  }

  Eigen::VectorXd sample(Rng& rng) const {
    std::normal_distribution<double> normal;
    Eigen::VectorXd z(mean_.size());
    for (auto& v : z) v = normal(rng);
    return mean_ + chol_.triangularView<Eigen::Lower>() * z;
  }

 private:
  Eigen::VectorXd mean_;
  Eigen::MatrixXd cov_;
  Eigen::MatrixXd chol_;
};

enum class TransformKind { Identity, Log, LogitInterval };

/**
 * Bijection between a constrained support and the real line.
 *
 * `forward` maps constrained -> unconstrained; `inverse` maps back and
 * `log_abs_det_jacobian` is log|d inverse / d zeta|.  The taped overloads
 * act elementwise and return the summed Jacobian term.
 */
class Transform {
 public:
  static Transform identity() { return Transform(TransformKind::Identity, 0, 0); }
  static Transform log() { return Transform(TransformKind::Log, 0, 0); }
  static Transform logit_interval(double low, double high) {
    if (!(low < high)) throw UsageError("interval transform requires low < high");
    return Transform(TransformKind::LogitInterval, low, high);
  }

  TransformKind kind() const noexcept { return kind_; }

  double forward(double theta) const {
    switch (kind_) {
      case TransformKind::Identity: return theta;
      case TransformKind::Log: return std::log(theta);
      case TransformKind::LogitInterval: return std::log((theta - low_) / (high_ - theta));
    }
    return theta;
  }

  template <class T>
  T inverse(const T& zeta) const {
    using std::exp;
    switch (kind_) {
      case TransformKind::Identity: return zeta;
      case TransformKind::Log: return exp(zeta);
      case TransformKind::LogitInterval:
        return low_ + (high_ - low_) * (1.0 / (1.0 + exp(-zeta)));
    }
    return zeta;
  }

  template <class T>
  T log_abs_det_jacobian(const T& zeta) const {
    using std::exp;
    using std::log;
    switch (kind_) {
      case TransformKind::Identity:
        return detail::constant_like(zeta, 0.0);
      case TransformKind::Log:
        return detail::reduce_sum(zeta);
      case TransformKind::LogitInterval: {
        // sigma * (1 - sigma) = sigma^2 * exp(-zeta)
        const T s = 1.0 / (1.0 + exp(-zeta));
        return detail::reduce_sum(std::log(high_ - low_) + 2.0 * log(s) - zeta);
      }
    }
    return zeta;
  }

 private:
  Transform(TransformKind k, double low, double high) : kind_(k), low_(low), high_(high) {}

  TransformKind kind_;
  double low_;
  double high_;
};

inline Transform transform_for(const Support& support) {
  switch (support.kind) {
    case SupportKind::Real:
    case SupportKind::RealVector:
      return Transform::identity();
    case SupportKind::Positive:
      return Transform::log();
    case SupportKind::Interval:
      return Transform::logit_interval(support.low, support.high);
  }
  throw UsageError("transform_for: unknown support kind " +
                   std::to_string(static_cast<int>(support.kind)));
}

}  // namespace bayeslearn
