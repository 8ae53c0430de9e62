#pragma once

// Independent reference computations shared by the test binaries.  Nothing
// here calls into the library's numerics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace testing_support {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

inline constexpr double kPi = 3.14159265358979323846;

/// Central finite differences of f at x with step h * max(1, |x_i|).
inline Vector central_difference(const std::function<double(const Vector&)>& f, const Vector& x,
                                 double h = 1e-6) {
  Vector g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double step = h * std::max(1.0, std::abs(x(i)));
    Vector xp = x, xm = x;
    xp(i) += step;
    xm(i) -= step;
    g(i) = (f(xp) - f(xm)) / (2.0 * step);
  }
  return g;
}

/// max_i |a_i - b_i| / max(1, |b_i|)
inline double max_relative_error(const Matrix& a, const Matrix& b) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]) / std::max(1.0, std::abs(b.data()[i])));
  return worst;
}

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

inline double normal_log_pdf(double x, double mean, double sd) {
  const double z = (x - mean) / sd;
  return -0.5 * z * z - std::log(sd) - 0.5 * std::log(2.0 * kPi);
}

/// One-sample Kolmogorov-Smirnov statistic against `cdf`.
inline double ks_statistic(std::vector<double> x, const std::function<double(double)>& cdf) {
  std::sort(x.begin(), x.end());
  const double n = static_cast<double>(x.size());
  double d = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double f = cdf(x[i]);
    d = std::max({d, static_cast<double>(i + 1) / n - f, f - static_cast<double>(i) / n});
  }
  return d;
}

/// Asymptotic KS critical value at level 0.001.
inline double ks_critical(std::size_t n) { return 1.949 / std::sqrt(static_cast<double>(n)); }

/// Composite Simpson rule on [a, b] with n (even) panels.
inline double simpson(const std::function<double(double)>& f, double a, double b, int n = 20000) {
  const double h = (b - a) / n;
  double s = f(a) + f(b);
  for (int i = 1; i < n; ++i) s += f(a + i * h) * (i % 2 ? 4.0 : 2.0);
  return s * h / 3.0;
}

/// Naive dense Cholesky (lower) by the textbook recurrence.
inline Matrix reference_cholesky(const Matrix& a) {
  const Eigen::Index n = a.rows();
  Matrix l = Matrix::Zero(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    double s = a(j, j);
    for (Eigen::Index k = 0; k < j; ++k) s -= l(j, k) * l(j, k);
    l(j, j) = std::sqrt(s);
    for (Eigen::Index i = j + 1; i < n; ++i) {
      double t = a(i, j);
      for (Eigen::Index k = 0; k < j; ++k) t -= l(i, k) * l(j, k);
      l(i, j) = t / l(j, j);
    }
  }
  return l;
}

/// Random symmetric positive definite matrix.
inline Matrix random_spd(Eigen::Index n, std::mt19937_64& gen) {
  std::normal_distribution<double> normal;
  Matrix b(n, n);
  for (Eigen::Index i = 0; i < b.size(); ++i) b.data()[i] = normal(gen);
  return b * b.transpose() + static_cast<double>(n) * Matrix::Identity(n, n);
}

inline Matrix random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& gen, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(gen);
  return m;
}

/// Conjugate Gaussian posterior for y = X beta + noise with known noise sd
/// and independent zero-mean Normal priors of sd `prior_sd`.
struct GaussianPosterior {
  Vector mean;
  Matrix cov;
};

inline GaussianPosterior conjugate_linear_posterior(const Matrix& X, const Vector& y, const Vector& prior_sd,
                                                    double noise_sd) {
  Matrix precision = (X.transpose() * X) / (noise_sd * noise_sd);
  for (Eigen::Index i = 0; i < prior_sd.size(); ++i) precision(i, i) += 1.0 / (prior_sd(i) * prior_sd(i));
  GaussianPosterior p;
  p.cov = precision.inverse();
  p.mean = p.cov * (X.transpose() * y) / (noise_sd * noise_sd);
  return p;
}

/// Normal-Normal model: theta ~ N(m0, s0), y_i ~ N(theta, s).
struct NormalNormal {
  double m0, s0, s;
  std::vector<double> y;

  double posterior_var() const {
    return 1.0 / (1.0 / (s0 * s0) + static_cast<double>(y.size()) / (s * s));
  }
  double posterior_mean() const {
    double sum = 0.0;
    for (double v : y) sum += v;
    return posterior_var() * (m0 / (s0 * s0) + sum / (s * s));
  }
  /// log p(y) = log N(y | m0 1, s^2 I + s0^2 11^T), via the matrix
  /// determinant lemma and Sherman-Morrison.
  double log_evidence() const {
    const double n = static_cast<double>(y.size());
    const double a = s * s, b = s0 * s0;
    double sum = 0.0, sq = 0.0;
    for (double v : y) {
      sum += v - m0;
      sq += (v - m0) * (v - m0);
    }
    const double logdet = (n - 1.0) * std::log(a) + std::log(a + n * b);
    const double quad = sq / a - b * sum * sum / (a * (a + n * b));
    return -0.5 * n * std::log(2.0 * kPi) - 0.5 * logdet - 0.5 * quad;
  }
};

/// Split-R-hat by the textbook definition on an iterations x chains matrix.
inline double reference_split_rhat(const Matrix& draws) {
  const Eigen::Index half = draws.rows() / 2;
  std::vector<Vector> chains;
  for (Eigen::Index c = 0; c < draws.cols(); ++c) {
    chains.push_back(draws.col(c).head(half));
    chains.push_back(draws.col(c).segment(draws.rows() - half, half));
  }
  const double n = static_cast<double>(half);
  const double m = static_cast<double>(chains.size());
  double grand = 0.0;
  std::vector<double> means, vars;
  for (const auto& ch : chains) {
    const double mu = ch.mean();
    means.push_back(mu);
    vars.push_back((ch.array() - mu).square().sum() / (n - 1.0));
    grand += mu / m;
  }
  double b = 0.0, w = 0.0;
  for (std::size_t i = 0; i < chains.size(); ++i) {
    b += (means[i] - grand) * (means[i] - grand);
    w += vars[i] / m;
  }
  b *= n / (m - 1.0);
  const double var_plus = (n - 1.0) / n * w + b / n;
  return std::sqrt(var_plus / w);
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("bayeslearn-test-" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testing_support
