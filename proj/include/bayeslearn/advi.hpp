#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "errors.hpp"
#include "model.hpp"
#include "random.hpp"

namespace bayeslearn {

/// Mean-field Gaussian over the unconstrained space: N(mu, diag(exp(2 omega))).
struct VariationalPosterior {
  Vector mu;
  Vector omega;

  Index dimension() const noexcept { return mu.size(); }
  Vector sd() const { return omega.array().exp().matrix(); }

  double entropy() const {
    const double d = static_cast<double>(mu.size());
    return 0.5 * d * (1.0 + std::log(2.0 * std::numbers::pi)) + omega.sum();
  }

  Vector sample(Rng& rng) const {
    std::normal_distribution<double> normal;
    Vector z(mu.size());
    for (Index i = 0; i < z.size(); ++i) z(i) = mu(i) + std::exp(omega(i)) * normal(rng);
    return z;
  }
};

/// One noisy ELBO estimate per optimisation step.
struct ElboHistory {
  std::vector<double> values;
  std::size_t window = 100;

  std::size_t size() const noexcept { return values.size(); }

  /// Trailing mean over the last `window` entries ending at step i.
  double smoothed_at(std::size_t i) const {
    const std::size_t w = std::max<std::size_t>(window, 1);
    const std::size_t lo = i + 1 >= w ? i + 1 - w : 0;
    double s = 0.0;
    for (std::size_t k = lo; k <= i; ++k) s += values[k];
    return s / static_cast<double>(i + 1 - lo);
  }

  std::vector<double> smoothed() const {
    std::vector<double> out(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) out[i] = smoothed_at(i);
    return out;
  }
};

struct AdviConfig {
  std::size_t steps = 10000;
  std::size_t n_mc = 1;
  /// 0 means the full dataset.
  std::size_t batch_size = 0;
  double learning_rate = 0.01;
  std::uint64_t seed = 0;
  std::size_t convergence_window = 100;
  double convergence_tol = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  double initial_omega = -1.0;
  std::size_t max_consecutive_skips = 50;
};

struct AdviResult {
  VariationalPosterior posterior;
  ElboHistory history;
  std::size_t skipped_steps = 0;
  bool converged = false;
};

struct ElboGradient {
  Vector mu;
  Vector omega;
  /// Paired estimate from the same draws; -inf if any draw was non-finite.
  double elbo = kNegInf;
  std::size_t finite_draws = 0;
};

/// Standard-normal noise for n_mc draws, one column per draw.
inline Matrix draw_noise(Index dimension, std::size_t n_mc, Rng& rng) {
  if (n_mc < 1) throw UsageError("n_mc must be >= 1");
  std::normal_distribution<double> normal;
  Matrix eps(dimension, static_cast<Index>(n_mc));
  for (Index j = 0; j < eps.cols(); ++j)
    for (Index i = 0; i < dimension; ++i) eps(i, j) = normal(rng);
  return eps;
}

/**
 * Reparameterised ELBO gradient for fixed noise `eps` (D x n_mc).
 *
 * For zeta = mu + exp(omega) * eps and g = grad log_joint(zeta):
 *   d/dmu = mean(g),  d/domega = mean(g * eps * exp(omega)) + 1.
 * Draws with a non-finite log joint are dropped from the gradient average
 * and make the paired estimate -inf.
 */
inline ElboGradient elbo_gradient_at(const VariationalPosterior& q, const ModelGraph& m,
                                     const Matrix& eps, const Dataset& batch) {
  const Index d = q.dimension();
  if (m.dimension() != d)
    throw UsageError("variational dimension " + std::to_string(d) +
                     " does not match model dimension " + std::to_string(m.dimension()));
  const Vector sd = q.sd();
  ElboGradient out{Vector::Zero(d), Vector::Zero(d)};
  double total = 0.0;
  Vector g(d);
  for (Index j = 0; j < eps.cols(); ++j) {
    const Vector e = eps.col(j);
    const Vector zeta = q.mu + sd.cwiseProduct(e);
    const double lp = m.log_density_gradient(zeta, g, batch);
    total += lp;
    if (!std::isfinite(lp)) continue;
    out.mu += g;
    out.omega += g.cwiseProduct(e).cwiseProduct(sd);
    ++out.finite_draws;
  }
  if (out.finite_draws > 0) {
    const double k = static_cast<double>(out.finite_draws);
    out.mu /= k;
    out.omega /= k;
  }
  out.omega.array() += 1.0;
  out.elbo = total / static_cast<double>(eps.cols()) + q.entropy();
  return out;
}

inline double elbo_estimate_at(const VariationalPosterior& q, const ModelGraph& m,
                               const Matrix& eps, const Dataset& batch) {
  const Vector sd = q.sd();
  double total = 0.0;
  for (Index j = 0; j < eps.cols(); ++j)
    total += m.log_density(q.mu + sd.cwiseProduct(Vector(eps.col(j))), batch);
  return total / static_cast<double>(eps.cols()) + q.entropy();
}

inline double elbo_estimate(const VariationalPosterior& q, const ModelGraph& m,
                            std::size_t n_mc, const Dataset& batch, Rng& rng) {
  return elbo_estimate_at(q, m, draw_noise(q.dimension(), n_mc, rng), batch);
}

inline ElboGradient elbo_gradient(const VariationalPosterior& q, const ModelGraph& m,
                                  std::size_t n_mc, const Dataset& batch, Rng& rng) {
  return elbo_gradient_at(q, m, draw_noise(q.dimension(), n_mc, rng), batch);
}

namespace detail {

inline std::vector<Index> sample_batch(Index n, std::size_t k, Rng& rng,
                                       std::vector<Index>& scratch) {
  if (scratch.size() != static_cast<std::size_t>(n)) {
    scratch.resize(static_cast<std::size_t>(n));
    std::iota(scratch.begin(), scratch.end(), Index{0});
  }
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, scratch.size() - 1);
    std::swap(scratch[i], scratch[pick(rng)]);
  }
  return {scratch.begin(), scratch.begin() + static_cast<std::ptrdiff_t>(k)};
}

}  // namespace detail

/**
 * Maximise the ELBO with Adam from mu = init_point, omega = initial_omega.
 *
 * Stops after `steps` or once the mean ELBO of two consecutive windows
 * changes by less than `convergence_tol` relative.  A step whose draws are
 * all non-finite is skipped; too many in a row raise DivergenceError.
 */
inline AdviResult fit_advi(const ModelGraph& m, const AdviConfig& config) {
  if (config.steps < 1) throw UsageError("ADVI steps must be >= 1");
  if (config.n_mc < 1) throw UsageError("ADVI n_mc must be >= 1");
  const Index n = m.data_size();
  const bool full_batch =
      config.batch_size == 0 || static_cast<Index>(config.batch_size) == n || !m.has_likelihood();
  if (!full_batch && static_cast<Index>(config.batch_size) > n)
    throw UsageError("batch_size " + std::to_string(config.batch_size) +
                     " exceeds dataset size " + std::to_string(n));

  const Index d = m.dimension();
  AdviResult result;
  result.posterior = {m.init_point(), Vector::Constant(d, config.initial_omega)};
  result.history.window = config.convergence_window;
  result.history.values.reserve(config.steps);

  Rng noise_rng = make_stream(config.seed, "advi-noise");
  Rng batch_rng = make_stream(config.seed, "advi-batch");
  std::vector<Index> scratch;

  Vector m_mu = Vector::Zero(d), v_mu = Vector::Zero(d);
  Vector m_om = Vector::Zero(d), v_om = Vector::Zero(d);
  double b1t = 1.0, b2t = 1.0;
  std::size_t consecutive_skips = 0;
  const std::size_t window = config.convergence_window;

  for (std::size_t step = 0; step < config.steps; ++step) {
    ElboGradient grad;
    if (full_batch) {
      grad = elbo_gradient(result.posterior, m, config.n_mc, m.data(), noise_rng);
    } else {
      const auto rows = detail::sample_batch(n, config.batch_size, batch_rng, scratch);
      grad = elbo_gradient(result.posterior, m, config.n_mc, m.data().subset(rows), noise_rng);
    }
    result.history.values.push_back(grad.elbo);

    if (grad.finite_draws == 0) {
      ++result.skipped_steps;
      if (++consecutive_skips > config.max_consecutive_skips) {
        throw DivergenceError(
            "ADVI diverged: " + std::to_string(consecutive_skips) +
            " consecutive steps with a non-finite log density; consider "
            "re-parameterizing the model or lowering the learning rate");
      }
      continue;
    }
    consecutive_skips = 0;

    b1t *= config.beta1;
    b2t *= config.beta2;
    const auto adam = [&](Vector& param, Vector& mom, Vector& var, const Vector& g) {
      mom = config.beta1 * mom + (1.0 - config.beta1) * g;
      var = config.beta2 * var + (1.0 - config.beta2) * g.cwiseProduct(g);
      for (Index i = 0; i < d; ++i) {
        const double mhat = mom(i) / (1.0 - b1t);
        const double vhat = var(i) / (1.0 - b2t);
        param(i) += config.learning_rate * mhat / (std::sqrt(vhat) + config.adam_epsilon);
      }
    };
    adam(result.posterior.mu, m_mu, v_mu, grad.mu);
    adam(result.posterior.omega, m_om, v_om, grad.omega);

    const std::size_t done = step + 1;
    if (window > 0 && done % window == 0 && done >= 2 * window) {
      const auto& h = result.history.values;
      double cur = 0.0, prev = 0.0;
      for (std::size_t k = done - window; k < done; ++k) cur += h[k];
      for (std::size_t k = done - 2 * window; k < done - window; ++k) prev += h[k];
      cur /= static_cast<double>(window);
      prev /= static_cast<double>(window);
      if (std::isfinite(cur) && std::isfinite(prev) && prev != 0.0 &&
          std::abs(cur - prev) / std::abs(prev) < config.convergence_tol) {
        result.converged = true;
        break;
      }
    }
  }
  return result;
}

}  // namespace bayeslearn
