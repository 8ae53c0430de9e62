#pragma once

#include <cmath>
#include <optional>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "estimator.hpp"

namespace bayeslearn {

/// Isotropic squared-exponential GP regression, priors on the standardised
/// scale.  `fixed_noise` pins the noise sd and drops it from the model.
struct GPRegressorSpec {
  double lengthscale_scale = 5.0;
  double signal_scale = 1.0;
  double noise_scale = 1.0;
  std::optional<double> fixed_noise;

  void validate() const {
    if (!(lengthscale_scale > 0.0) || !(signal_scale > 0.0) || !(noise_scale > 0.0))
      throw UsageError("GP prior scales must be > 0");
    if (fixed_noise && !(*fixed_noise > 0.0)) throw UsageError("fixed_noise must be > 0");
  }
};

namespace gp {

inline constexpr double kInitialJitter = 1e-8;
inline constexpr double kMaxJitter = 1e-4;

/// Pairwise squared Euclidean distances between rows of A and rows of B.
inline Matrix squared_distances(const Matrix& A, const Matrix& B) {
  Matrix D(A.rows(), B.rows());
  for (Index j = 0; j < B.rows(); ++j)
    for (Index i = 0; i < A.rows(); ++i) D(i, j) = (A.row(i) - B.row(j)).squaredNorm();
  return D;
}

inline Matrix se_kernel(const Matrix& A, const Matrix& B, double lengthscale, double signal) {
  return (signal * signal) *
         (-squared_distances(A, B).array() / (2.0 * lengthscale * lengthscale)).exp().matrix();
}

/// Smallest diagonal jitter (relative to the mean diagonal) for which `cov`
/// factors, or nullopt once the ceiling is passed.
inline std::optional<double> find_jitter(const Matrix& cov) {
  const double scale = cov.diagonal().mean();
  for (double rel = kInitialJitter; rel <= kMaxJitter * 1.000001; rel *= 10.0) {
    Eigen::LLT<Matrix> llt(cov + Matrix::Identity(cov.rows(), cov.cols()) * (rel * scale));
    if (llt.info() == Eigen::Success) return rel * scale;
  }
  return std::nullopt;
}

}  // namespace gp

/// log N(y | 0, K + noise^2 I) on the tape.  A covariance that cannot be
/// factored even after jitter yields a constant -inf.
inline ad::Var gp_marginal_log_likelihood(ad::Tape& tape, const Matrix& X, const Vector& y,
                                          const ad::Var& lengthscale, const ad::Var& signal,
                                          const ad::Var& noise) {
  const Index n = X.rows();
  const Matrix D = gp::squared_distances(X, X);
  const double l = lengthscale.scalar(), sf = signal.scalar(), sn = noise.scalar();
  if (!(l > 0.0) || !(sf > 0.0) || !(sn > 0.0) || !std::isfinite(l) || !std::isfinite(sf) ||
      !std::isfinite(sn))
    return tape.variable(kNegInf);
  const Matrix k_value = (sf * sf) * (-D.array() / (2.0 * l * l)).exp().matrix() +
                         Matrix::Identity(n, n) * (sn * sn);
  const auto jitter = gp::find_jitter(k_value);
  if (!jitter) return tape.variable(kNegInf);

  const ad::Var dist = tape.variable(D);
  const ad::Var eye = tape.variable(Matrix(Matrix::Identity(n, n)));
  const ad::Var K = ad::pow(signal, 2.0) * ad::exp(-dist / (2.0 * ad::pow(lengthscale, 2.0))) +
                    (ad::pow(noise, 2.0) + *jitter) * eye;
  return mvn_log_pdf(tape.variable(y), tape.variable(Vector(Vector::Zero(n))), K);
}

inline ModelGraph gp_graph(Dataset data, const GPRegressorSpec& spec = {}) {
  spec.validate();
  ModelBuilder builder;
  builder.scalar("lengthscale", Distribution::half_cauchy(spec.lengthscale_scale))
      .scalar("signal", Distribution::half_normal(spec.signal_scale));
  if (!spec.fixed_noise) builder.scalar("noise", Distribution::half_normal(spec.noise_scale));
  const std::optional<double> fixed = spec.fixed_noise;
  builder.likelihood(std::move(data), [fixed](ad::Tape& tape, const ParamValues& p, const Dataset& batch) {
    const ad::Var noise = fixed ? tape.variable(*fixed) : p.at("noise");
    return gp_marginal_log_likelihood(tape, batch.X, batch.y, p.at("lengthscale"), p.at("signal"), noise);
  });
  return std::move(builder).build();
}

class GaussianProcessRegressor : public Estimator<GaussianProcessRegressor> {
 public:
  static constexpr const char* kKind = "gp";
  static constexpr std::size_t kDefaultPredictDraws = 200;
  static constexpr bool kRetainsTrainingData = true;

  explicit GaussianProcessRegressor(GPRegressorSpec spec = {}) : spec_(spec) { spec_.validate(); }

  const GPRegressorSpec& spec() const noexcept { return spec_; }

  ModelGraph build_graph(const Dataset& data) const { return gp_graph(data, spec_); }

  /// The marginal likelihood does not factor over rows, so subsampling it
  /// is not an unbiased estimate.
  void check_options(const FitOptions& options, const Dataset& data) const {
    if (options.engine == Engine::Advi && options.advi.batch_size != 0 &&
        static_cast<Index>(options.advi.batch_size) < data.size())
      throw UsageError("GP regression does not support mini-batches (batch_size must be 0 or n)");
  }

  nlohmann::json hyperparameters() const {
    nlohmann::json j = {{"lengthscale_scale", spec_.lengthscale_scale},
                        {"signal_scale", spec_.signal_scale},
                        {"noise_scale", spec_.noise_scale},
                        {"fixed_noise", nullptr}};
    if (spec_.fixed_noise) j["fixed_noise"] = *spec_.fixed_noise;
    return j;
  }

  void set_hyperparameters(const nlohmann::json& j) {
    GPRegressorSpec s;
    s.lengthscale_scale = persistence::require_as<double>(j, "lengthscale_scale");
    s.signal_scale = persistence::require_as<double>(j, "signal_scale");
    s.noise_scale = persistence::require_as<double>(j, "noise_scale");
    const auto& fixed = persistence::require(j, "fixed_noise");
    if (!fixed.is_null()) s.fixed_noise = persistence::require_as<double>(j, "fixed_noise");
    try {
      s.validate();
    } catch (const UsageError& e) {
      throw LoadError("hyperparameters", e.what());
    }
    spec_ = s;
  }

  struct Hyperparameters {
    double lengthscale;
    double signal;
    double noise;
  };

  /// Hyperparameter draws used by predict: samples from q for ADVI, thinned
  /// trace draws for NUTS.
  std::vector<Hyperparameters> hyperparameter_draws() const {
    require_fitted("hyperparameter_draws");
    std::vector<Hyperparameters> out;
    if (const auto* a = std::get_if<AdviFit>(&*state_.fitted)) {
      const ModelGraph g = parameter_graph();
      Rng rng = make_stream(state_.seed, "gp-predict");
      for (std::size_t i = 0; i < state_.predict_draws; ++i) {
        const auto values = g.unflatten(a->posterior.sample(rng));
        out.push_back({values.at("lengthscale")(0), values.at("signal")(0),
                       spec_.fixed_noise ? *spec_.fixed_noise : values.at("noise")(0)});
      }
      return out;
    }
    const Trace t = std::get<Trace>(*state_.fitted).without_warmup();
    const Matrix pooled = t.pooled();
    const auto l = static_cast<Index>(t.parameter_index("lengthscale"));
    const auto s = static_cast<Index>(t.parameter_index("signal"));
    const Index n = spec_.fixed_noise ? -1 : static_cast<Index>(t.parameter_index("noise"));
    for (Index r : detail::thin_indices(pooled.rows(), state_.predict_draws))
      out.push_back({pooled(r, l), pooled(r, s), n >= 0 ? pooled(r, n) : *spec_.fixed_noise});
    return out;
  }

  /// Mixture of per-draw Gaussian conditionals.  Draws whose covariance
  /// cannot be factored are skipped.
  Prediction predict_standardized(const Matrix& Xs, bool return_std) const {
    if (!state_.training) throw StateError("GP state has no training data");
    const Dataset& train = *state_.training;
    const Matrix D = gp::squared_distances(train.X, train.X);
    const Matrix Ds = gp::squared_distances(train.X, Xs);
    Vector sum = Vector::Zero(Xs.rows());
    Vector sum_sq = Vector::Zero(Xs.rows());
    std::size_t used = 0;
    for (const auto& h : hyperparameter_draws()) {
      const double inv = 1.0 / (2.0 * h.lengthscale * h.lengthscale);
      const double sf2 = h.signal * h.signal;
      const double sn2 = h.noise * h.noise;
      if (!std::isfinite(inv) || !std::isfinite(sf2) || !std::isfinite(sn2)) continue;
      Matrix K = sf2 * (-D.array() * inv).exp().matrix();
      K.diagonal().array() += sn2;
      const auto jitter = gp::find_jitter(K);
      if (!jitter) continue;
      K.diagonal().array() += *jitter;
      const Eigen::LLT<Matrix> llt(K);
      const Matrix ks = sf2 * (-Ds.array() * inv).exp().matrix();
      const Vector alpha = llt.solve(train.y);
      const Vector mean = ks.transpose() * alpha;
      if (!mean.allFinite()) continue;
      sum += mean;
      if (return_std) {
        const Matrix v = llt.matrixL().solve(ks);
        const Vector var = (sf2 + sn2 - v.colwise().squaredNorm().transpose().array()).cwiseMax(0.0);
        sum_sq += (var.array() + mean.array().square()).matrix();
      }
      ++used;
    }
    if (used == 0) throw NumericError("GP predict: no posterior draw gave a factorable covariance");
    const double k = static_cast<double>(used);
    Prediction out;
    out.mean = sum / k;
    if (return_std) out.sd = ((sum_sq / k).array() - out.mean.array().square()).cwiseMax(0.0).sqrt().matrix();
    return out;
  }

 private:
  GPRegressorSpec spec_;
};

}  // namespace bayeslearn
