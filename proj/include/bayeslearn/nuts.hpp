#pragma once

// No-U-Turn Sampler with multinomial trajectory sampling and dual-averaging
// step size adaptation.
//
// REFERENCE: Hoffman, M.D. and Gelman, A., 2014. The No-U-Turn sampler:
// adaptively setting path lengths in Hamiltonian Monte Carlo. JMLR 15,
// pp.1593-1623.  Multinomial selection follows Betancourt, 2017, "A
// conceptual introduction to Hamiltonian Monte Carlo", arXiv:1701.02434.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <exception>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "distributions.hpp"
#include "errors.hpp"
#include "random.hpp"
#include "trace.hpp"

namespace bayeslearn {

/// Anything exposing a differentiable log density over R^D.
template <class M>
concept LogDensityModel = requires(const M& m, const Eigen::VectorXd& z, Eigen::VectorXd& g) {
  { m.dimension() } -> std::convertible_to<Eigen::Index>;
  { m.log_density_gradient(z, g) } -> std::convertible_to<double>;
};

struct PhasePoint {
  Eigen::VectorXd q;
  Eigen::VectorXd p;
  double log_density = kNegInf;
  Eigen::VectorXd gradient;
};

template <LogDensityModel M>
PhasePoint make_phase_point(const M& m, Eigen::VectorXd q) {
  PhasePoint z;
  z.log_density = m.log_density_gradient(q, z.gradient);
  z.q = std::move(q);
  z.p = Eigen::VectorXd::Zero(z.q.size());
  return z;
}

inline double kinetic_energy(const Eigen::VectorXd& p, const Eigen::VectorXd& inv_metric) {
  return 0.5 * p.cwiseProduct(p).dot(inv_metric);
}

/// H = -log p(q) + p^T M^-1 p / 2; +inf when the density is not finite.
inline double hamiltonian(const PhasePoint& z, const Eigen::VectorXd& inv_metric) {
  if (!std::isfinite(z.log_density)) return std::numeric_limits<double>::infinity();
  return -z.log_density + kinetic_energy(z.p, inv_metric);
}

/// One leapfrog step against U(q) = -log p(q).  A negative `eps`
/// integrates backwards in time.
template <LogDensityModel M>
PhasePoint leapfrog(const PhasePoint& z, double eps, const M& m,
                    const Eigen::VectorXd& inv_metric) {
  PhasePoint out;
  out.p = z.p + 0.5 * eps * z.gradient;
  out.q = z.q + eps * inv_metric.cwiseProduct(out.p);
  out.log_density = m.log_density_gradient(out.q, out.gradient);
  out.p += 0.5 * eps * out.gradient;
  return out;
}

template <LogDensityModel M>
PhasePoint leapfrog(const PhasePoint& z, double eps, const M& m) {
  return leapfrog(z, eps, m, Eigen::VectorXd::Ones(z.q.size()));
}

/// True when the trajectory spanning [minus, plus] has started to double
/// back: (q+ - q-) . v- < 0 or (q+ - q-) . v+ < 0, with v = M^-1 p.
inline bool is_u_turn(const Eigen::VectorXd& q_minus, const Eigen::VectorXd& q_plus,
                      const Eigen::VectorXd& p_minus, const Eigen::VectorXd& p_plus,
                      const Eigen::VectorXd& inv_metric) {
  const Eigen::VectorXd dq = q_plus - q_minus;
  return dq.dot(inv_metric.cwiseProduct(p_minus)) < 0.0 ||
         dq.dot(inv_metric.cwiseProduct(p_plus)) < 0.0;
}

struct NutsTransition {
  PhasePoint state;
  int tree_depth = 0;
  int n_leapfrog = 0;
  bool divergent = false;
  double accept_stat = 0.0;
  double energy = 0.0;
};

namespace detail {

inline double log_sum_exp(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double hi = std::max(a, b);
  return hi + std::log1p(std::exp(std::min(a, b) - hi));
}

template <LogDensityModel M>
class TreeBuilder {
 public:
  struct Subtree {
    PhasePoint minus;
    PhasePoint plus;
    PhasePoint proposal;
    double log_weight = kNegInf;
    double sum_accept = 0.0;
    int n_leapfrog = 0;
    bool valid = true;
    bool divergent = false;
  };

  TreeBuilder(const M& m, const Eigen::VectorXd& inv_metric, double eps, double h0,
              double divergence_threshold, Rng& rng)
      : m_(m), inv_metric_(inv_metric), eps_(eps), h0_(h0),
        threshold_(divergence_threshold), rng_(rng) {}

  Subtree build(const PhasePoint& edge, int direction, int depth) {
    if (depth == 0) {
      Subtree t;
      t.n_leapfrog = 1;
      PhasePoint z = leapfrog(edge, direction * eps_, m_, inv_metric_);
      const double h = hamiltonian(z, inv_metric_);
      if (!std::isfinite(h) || h - h0_ > threshold_) {
        t.valid = false;
        t.divergent = true;
        return t;
      }
      t.log_weight = h0_ - h;
      t.sum_accept = std::min(1.0, std::exp(h0_ - h));
      t.minus = z;
      t.plus = z;
      t.proposal = std::move(z);
      return t;
    }

    Subtree inner = build(edge, direction, depth - 1);
    if (!inner.valid) return inner;
    Subtree outer = build(direction > 0 ? inner.plus : inner.minus, direction, depth - 1);
    inner.n_leapfrog += outer.n_leapfrog;
    inner.sum_accept += outer.sum_accept;
    if (!outer.valid) {
      inner.valid = false;
      inner.divergent = outer.divergent;
      return inner;
    }

    // uniform progressive sampling inside a subtree
    const double total = log_sum_exp(inner.log_weight, outer.log_weight);
    if (uniform() < std::exp(outer.log_weight - total)) inner.proposal = std::move(outer.proposal);
    inner.log_weight = total;
    if (direction > 0) {
      inner.plus = std::move(outer.plus);
    } else {
      inner.minus = std::move(outer.minus);
    }
    if (is_u_turn(inner.minus.q, inner.plus.q, inner.minus.p, inner.plus.p, inv_metric_))
      inner.valid = false;
    return inner;
  }

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(rng_); }

 private:
  const M& m_;
  const Eigen::VectorXd& inv_metric_;
  double eps_;
  double h0_;
  double threshold_;
  Rng& rng_;
};

inline Eigen::VectorXd draw_momentum(const Eigen::VectorXd& inv_metric, Rng& rng) {
  std::normal_distribution<double> normal;
  Eigen::VectorXd p(inv_metric.size());
  for (Eigen::Index i = 0; i < p.size(); ++i) p(i) = normal(rng) / std::sqrt(inv_metric(i));
  return p;
}

}  // namespace detail

/**
 * One NUTS transition from `z` (its momentum is resampled).
 *
 * The trajectory doubles in a random direction until a subtree or the full
 * tree makes a U-turn, the energy error exceeds `divergence_threshold`, or
 * `max_depth` doublings were made.  The next state is drawn by multinomial
 * weights exp(-H) over the valid trajectory points.
 */
template <LogDensityModel M>
NutsTransition nuts_step(const PhasePoint& z, double eps, const M& m, Rng& rng, int max_depth,
                         const Eigen::VectorXd& inv_metric,
                         double divergence_threshold = 1000.0) {
  if (!(eps > 0.0)) throw UsageError("nuts_step: step size must be positive");
  if (max_depth < 1) throw UsageError("nuts_step: max_depth must be >= 1");

  PhasePoint start = z;
  start.p = detail::draw_momentum(inv_metric, rng);
  const double h0 = hamiltonian(start, inv_metric);

  detail::TreeBuilder<M> builder(m, inv_metric, eps, h0, divergence_threshold, rng);
  PhasePoint minus = start, plus = start;
  NutsTransition out;
  out.state = start;
  double log_weight = 0.0;
  double sum_accept = 0.0;

  for (int depth = 0; depth < max_depth; ++depth) {
    const int direction = builder.uniform() < 0.5 ? -1 : 1;
    auto sub = builder.build(direction > 0 ? plus : minus, direction, depth);
    out.n_leapfrog += sub.n_leapfrog;
    sum_accept += sub.sum_accept;
    out.tree_depth = depth + 1;
    if (!sub.valid) {
      out.divergent = sub.divergent;
      break;
    }
    // biased progressive sampling favours the newer subtree
    if (builder.uniform() < std::exp(sub.log_weight - log_weight)) out.state = sub.proposal;
    log_weight = detail::log_sum_exp(log_weight, sub.log_weight);
    if (direction > 0) {
      plus = std::move(sub.plus);
    } else {
      minus = std::move(sub.minus);
    }
    if (is_u_turn(minus.q, plus.q, minus.p, plus.p, inv_metric)) break;
  }
  out.accept_stat = out.n_leapfrog > 0 ? sum_accept / out.n_leapfrog : 0.0;
  out.energy = hamiltonian(out.state, inv_metric);
  return out;
}

template <LogDensityModel M>
NutsTransition nuts_step(const PhasePoint& z, double eps, const M& m, Rng& rng, int max_depth) {
  return nuts_step(z, eps, m, rng, max_depth, Eigen::VectorXd::Ones(z.q.size()));
}

/**
 * Dual-averaging step size adaptation.
 *
 * Shrinks log step size toward mu = log(10 eps0) and drives the mean
 * acceptance statistic to `target`.  After adaptation the averaged iterate
 * exp(x_bar) is used.
 */
class DualAveraging {
 public:
  DualAveraging(double eps0, double target, double gamma = 0.05, double t0 = 10.0,
                double kappa = 0.75)
      : target_(target), gamma_(gamma), t0_(t0), kappa_(kappa) {
    restart(eps0);
  }

  void restart(double eps0) {
    mu_ = std::log(10.0 * eps0);
    log_eps_ = std::log(eps0);
    log_eps_bar_ = 0.0;
    s_bar_ = 0.0;
    count_ = 0;
  }

  /// Feed one acceptance statistic; returns the next step size.
  double update(double accept_stat) {
    accept_stat = std::clamp(std::isfinite(accept_stat) ? accept_stat : 0.0, 0.0, 1.0);
    ++count_;
    const double m = static_cast<double>(count_);
    const double eta = 1.0 / (m + t0_);
    s_bar_ = (1.0 - eta) * s_bar_ + eta * (target_ - accept_stat);
    log_eps_ = mu_ - std::sqrt(m) / gamma_ * s_bar_;
    const double w = std::pow(m, -kappa_);
    log_eps_bar_ = w * log_eps_ + (1.0 - w) * log_eps_bar_;
    return step_size();
  }

  double step_size() const { return std::exp(log_eps_); }
  double averaged_step_size() const {
    return count_ == 0 ? step_size() : std::exp(log_eps_bar_);
  }
  std::size_t iterations() const noexcept { return count_; }

 private:
  double target_, gamma_, t0_, kappa_;
  double mu_ = 0.0;
  double log_eps_ = 0.0;
  double log_eps_bar_ = 0.0;
  double s_bar_ = 0.0;
  std::size_t count_ = 0;
};

struct StepSizeSchedule {
  std::vector<double> step_sizes;
  double final_step_size = 0.0;
};

/// Step sizes produced by dual averaging over a fixed acceptance history.
inline StepSizeSchedule adapt_step_size(std::span<const double> accept_stats, double target,
                                        double eps0) {
  DualAveraging da(eps0, target);
  StepSizeSchedule out;
  out.step_sizes.reserve(accept_stats.size());
  for (double a : accept_stats) out.step_sizes.push_back(da.update(a));
  out.final_step_size = da.averaged_step_size();
  return out;
}

/// Doubling/halving search for a step size whose one-step acceptance
/// probability crosses 1/2.
template <LogDensityModel M>
double find_reasonable_step_size(const PhasePoint& z, double eps, const M& m,
                                 const Eigen::VectorXd& inv_metric, Rng& rng) {
  PhasePoint start = z;
  start.p = detail::draw_momentum(inv_metric, rng);
  const double h0 = hamiltonian(start, inv_metric);
  const auto log_accept = [&](double e) {
    const double h = hamiltonian(leapfrog(start, e, m, inv_metric), inv_metric);
    return std::isfinite(h) ? h0 - h : kNegInf;
  };
  const double threshold = std::log(0.5);
  const int direction = log_accept(eps) > threshold ? 1 : -1;
  for (int i = 0; i < 50; ++i) {
    const double next = direction > 0 ? 2.0 * eps : 0.5 * eps;
    const bool above = log_accept(next) > threshold;
    if ((direction > 0 && !above) || (direction < 0 && above)) {
      if (direction < 0) eps = next;
      break;
    }
    eps = next;
  }
  return eps;
}

struct NutsConfig {
  std::size_t chains = 4;
  std::size_t draws = 1000;
  /// Defaults to `draws`.
  std::optional<std::size_t> warmup;
  double target_accept = 0.8;
  int max_depth = 10;
  std::uint64_t seed = 0;
  double init_jitter = 0.2;
  double divergence_threshold = 1000.0;
  bool adapt_metric = true;
  bool save_warmup = false;
  bool parallel = true;
};

namespace detail {

template <LogDensityModel M>
Eigen::VectorXd to_constrained(const M& m, const Eigen::VectorXd& q) {
  if constexpr (requires { { m.constrain(q) } -> std::convertible_to<Eigen::VectorXd>; }) {
    return m.constrain(q);
  } else {
    return q;
  }
}

template <LogDensityModel M>
ChainDraws run_chain(const M& m, const NutsConfig& config, std::size_t chain) {
  const std::size_t warmup = config.warmup.value_or(config.draws);
  const Eigen::Index d = static_cast<Eigen::Index>(m.dimension());
  Rng rng = make_stream(config.seed, "nuts-chain", chain);

  Eigen::VectorXd base = Eigen::VectorXd::Zero(d);
  if constexpr (requires { { m.init_point() } -> std::convertible_to<Eigen::VectorXd>; }) {
    base = m.init_point();
  }
  std::uniform_real_distribution<double> jitter(-config.init_jitter, config.init_jitter);
  PhasePoint z;
  for (int attempt = 0;; ++attempt) {
    Eigen::VectorXd q = base;
    if (config.init_jitter > 0.0)
      for (Eigen::Index i = 0; i < d; ++i) q(i) += jitter(rng);
    z = make_phase_point(m, std::move(q));
    if (std::isfinite(z.log_density)) break;
    if (attempt >= 100)
      throw DivergenceError("NUTS: could not find a finite initial point for chain " +
                            std::to_string(chain));
  }

  Eigen::VectorXd inv_metric = Eigen::VectorXd::Ones(d);
  double eps = find_reasonable_step_size(z, 1.0, m, inv_metric, rng);
  DualAveraging adaptation(eps, config.target_accept);

  const bool metric_phase = config.adapt_metric && warmup >= 20;
  const std::size_t metric_begin = warmup / 2;
  const std::size_t metric_end = warmup * 85 / 100;
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(d), m2 = Eigen::VectorXd::Zero(d);
  std::size_t collected = 0;

  const std::size_t stored = config.draws + (config.save_warmup ? warmup : 0);
  ChainDraws out;
  out.draws.resize(static_cast<Eigen::Index>(stored), d);
  out.divergent.reserve(stored);
  out.tree_depth.reserve(stored);
  out.step_size.reserve(stored);
  out.accept_stat.reserve(stored);
  out.energy.reserve(stored);

  if (warmup == 0) eps = adaptation.step_size();
  Eigen::Index row = 0;
  for (std::size_t it = 0; it < warmup + config.draws; ++it) {
    const bool in_warmup = it < warmup;
    const double step = in_warmup ? adaptation.step_size() : eps;
    NutsTransition t = nuts_step(z, step, m, rng, config.max_depth, inv_metric,
                                 config.divergence_threshold);
    z = std::move(t.state);

    if (in_warmup) {
      adaptation.update(t.accept_stat);
      if (metric_phase && it >= metric_begin && it < metric_end) {
        ++collected;
        const Eigen::VectorXd delta = z.q - mean;
        mean += delta / static_cast<double>(collected);
        m2 += delta.cwiseProduct(z.q - mean);
      }
      if (metric_phase && it + 1 == metric_end && collected > 1) {
        const double n = static_cast<double>(collected);
        const Eigen::VectorXd var = m2 / (n - 1.0);
        // regularise toward the identity metric
        inv_metric = (n / (n + 5.0)) * var.array() + 5.0 / (n + 5.0);
        adaptation.restart(find_reasonable_step_size(z, adaptation.step_size(), m, inv_metric, rng));
      }
      if (it + 1 == warmup) eps = adaptation.averaged_step_size();
    }

    if (!in_warmup || config.save_warmup) {
      out.draws.row(row++) = to_constrained(m, z.q).transpose();
      out.divergent.push_back(t.divergent ? 1 : 0);
      out.tree_depth.push_back(t.tree_depth);
      out.step_size.push_back(step);
      out.accept_stat.push_back(t.accept_stat);
      out.energy.push_back(t.energy);
    }
  }
  out.adapted_step_size = eps;
  out.inverse_metric = inv_metric;
  return out;
}

}  // namespace detail

/**
 * Run independent NUTS chains.  Chain c uses the RNG stream
 * (seed, "nuts-chain", c) and starts at init_point plus uniform jitter, so
 * results do not depend on whether chains run concurrently.
 */
template <LogDensityModel M>
Trace sample_nuts(const M& m, const NutsConfig& config) {
  if (config.chains < 1) throw UsageError("NUTS: chains must be >= 1");
  if (config.draws < 1) throw UsageError("NUTS: draws must be >= 1");
  if (!(config.target_accept > 0.0 && config.target_accept < 1.0))
    throw UsageError("NUTS: target_accept must lie in (0, 1)");

  Trace trace;
  trace.warmup = config.warmup.value_or(config.draws);
  trace.includes_warmup = config.save_warmup;
  const auto d = static_cast<Eigen::Index>(m.dimension());
  if constexpr (requires { m.parameter_names(); m.blocks(); }) {
    trace.names = m.parameter_names();
    for (const auto& b : m.blocks()) trace.blocks.push_back({b.name, b.offset, b.size});
  } else {
    for (Eigen::Index i = 0; i < d; ++i) trace.names.push_back("x[" + std::to_string(i) + "]");
    trace.blocks.push_back({"x", 0, d});
  }

  trace.chains.resize(config.chains);
  if (config.parallel && config.chains > 1) {
    std::vector<std::exception_ptr> errors(config.chains);
    std::vector<std::thread> workers;
    for (std::size_t c = 0; c < config.chains; ++c) {
      workers.emplace_back([&, c] {
        try {
          trace.chains[c] = detail::run_chain(m, config, c);
        } catch (...) {
          errors[c] = std::current_exception();
        }
      });
    }
    for (auto& w : workers) w.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  } else {
    for (std::size_t c = 0; c < config.chains; ++c) trace.chains[c] = detail::run_chain(m, config, c);
  }

  std::size_t divergent = 0, post = 0;
  for (const auto& c : trace.chains) {
    for (std::size_t i = 0; i < c.divergent.size(); ++i) {
      if (config.save_warmup && i < trace.warmup) continue;
      divergent += c.divergent[i];
      ++post;
    }
  }
  if (post > 0 && divergent * 10 > post) {
    trace.warnings.push_back(std::to_string(divergent) + " of " + std::to_string(post) +
                             " post-warmup iterations diverged; consider raising "
                             "target_accept or re-parameterizing the model");
  }
  return trace;
}

}  // namespace bayeslearn
