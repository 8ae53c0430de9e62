#pragma once

#include <cmath>
#include <optional>

#include <json.hpp>

#include "estimator.hpp"

namespace bayeslearn {

/// Prior scales on the standardised scale.  Setting `fixed_noise` removes
/// the noise parameter and uses that value as a known sd.
struct LinearRegressionSpec {
  double weight_scale = 10.0;
  double intercept_scale = 10.0;
  double noise_scale = 1.0;
  std::optional<double> fixed_noise;

  void validate() const {
    if (!(weight_scale > 0.0) || !(intercept_scale > 0.0) || !(noise_scale > 0.0))
      throw UsageError("linear regression prior scales must be > 0");
    if (fixed_noise && !(*fixed_noise > 0.0)) throw UsageError("fixed_noise must be > 0");
  }
};

/// y ~ Normal(X w + b, sigma) with blocks w (length d), b, and sigma.
inline ModelGraph linear_regression_graph(Dataset data, const LinearRegressionSpec& spec = {}) {
  spec.validate();
  const Index d = data.X.cols();
  ModelBuilder builder;
  builder.vector("w", d, Distribution::normal(0.0, spec.weight_scale))
      .scalar("b", Distribution::normal(0.0, spec.intercept_scale));
  if (!spec.fixed_noise) builder.scalar("sigma", Distribution::half_normal(spec.noise_scale));
  const std::optional<double> fixed = spec.fixed_noise;
  builder.likelihood(std::move(data), [fixed](ad::Tape& tape, const ParamValues& p, const Dataset& batch) {
    const ad::Var X = tape.variable(batch.X);
    const ad::Var y = tape.variable(batch.y);
    const ad::Var mu = ad::matvec(X, p.at("w")) + p.at("b");
    const double n = static_cast<double>(batch.size());
    if (fixed) {
      const ad::Var r = (y - mu) / *fixed;
      return -0.5 * ad::dot(r, r) - n * (std::log(*fixed) + kHalfLog2Pi);
    }
    const ad::Var& sigma = p.at("sigma");
    const ad::Var r = (y - mu) / sigma;
    return -0.5 * ad::dot(r, r) - n * ad::log(sigma) - n * kHalfLog2Pi;
  });
  return std::move(builder).build();
}

class LinearRegression : public Estimator<LinearRegression> {
 public:
  static constexpr const char* kKind = "linear";
  static constexpr std::size_t kDefaultPredictDraws = 1000;
  static constexpr bool kRetainsTrainingData = false;

  explicit LinearRegression(LinearRegressionSpec spec = {}) : spec_(spec) { spec_.validate(); }

  const LinearRegressionSpec& spec() const noexcept { return spec_; }

  ModelGraph build_graph(const Dataset& data) const { return linear_regression_graph(data, spec_); }

  void check_options(const FitOptions&, const Dataset&) const {}

  nlohmann::json hyperparameters() const {
    nlohmann::json j = {{"weight_scale", spec_.weight_scale},
                        {"intercept_scale", spec_.intercept_scale},
                        {"noise_scale", spec_.noise_scale},
                        {"fixed_noise", nullptr}};
    if (spec_.fixed_noise) j["fixed_noise"] = *spec_.fixed_noise;
    return j;
  }

  void set_hyperparameters(const nlohmann::json& j) {
    LinearRegressionSpec s;
    s.weight_scale = persistence::require_as<double>(j, "weight_scale");
    s.intercept_scale = persistence::require_as<double>(j, "intercept_scale");
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

  /// Analytic moments under the mean-field Gaussian, or a thinned Monte
  /// Carlo average over trace draws.
  Prediction predict_standardized(const Matrix& Xs, bool return_std) const {
    const ModelGraph g = parameter_graph();
    const auto& wb = g.block("w");
    const auto& bb = g.block("b");
    Prediction out;
    if (const auto* a = std::get_if<AdviFit>(&*state_.fitted)) {
      const Vector& mu = a->posterior.mu;
      const Vector sd = a->posterior.sd();
      out.mean = (Xs * mu.segment(wb.offset, wb.size)).array() + mu(bb.offset);
      if (return_std) {
        double noise_var;
        if (spec_.fixed_noise) {
          noise_var = *spec_.fixed_noise * *spec_.fixed_noise;
        } else {
          const Index s = g.block("sigma").offset;
          noise_var = std::exp(2.0 * mu(s) + 2.0 * sd(s) * sd(s));
        }
        const Vector w_var = sd.segment(wb.offset, wb.size).array().square();
        out.sd = ((Xs.array().square().matrix() * w_var).array() + sd(bb.offset) * sd(bb.offset) + noise_var)
                     .sqrt()
                     .matrix();
      }
      return out;
    }
    const Trace t = std::get<Trace>(*state_.fitted).without_warmup();
    const Matrix pooled = t.pooled();
    const auto rows = detail::thin_indices(pooled.rows(), state_.predict_draws);
    const Index sigma_col = spec_.fixed_noise ? -1 : static_cast<Index>(t.parameter_index("sigma"));
    const Index w_col = static_cast<Index>(t.parameter_index(wb.size == 1 && !wb.is_vector ? "w" : "w[0]"));
    const Index b_col = static_cast<Index>(t.parameter_index("b"));
    Vector sum = Vector::Zero(Xs.rows());
    Vector sum_sq = Vector::Zero(Xs.rows());
    double noise_var_sum = 0.0;
    for (Index r : rows) {
      const Vector w = pooled.row(r).segment(w_col, wb.size).transpose();
      const Vector m = (Xs * w).array() + pooled(r, b_col);
      sum += m;
      sum_sq += m.array().square().matrix();
      const double s = sigma_col >= 0 ? pooled(r, sigma_col) : *spec_.fixed_noise;
      noise_var_sum += s * s;
    }
    const double k = static_cast<double>(rows.size());
    out.mean = sum / k;
    if (return_std) {
      const Vector var = (sum_sq / k).array() - out.mean.array().square() + noise_var_sum / k;
      out.sd = var.cwiseMax(0.0).cwiseSqrt();
    }
    return out;
  }

 private:
  LinearRegressionSpec spec_;
};

}  // namespace bayeslearn
