#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "advi.hpp"
#include "diagnostics.hpp"
#include "errors.hpp"
#include "model.hpp"
#include "nuts.hpp"
#include "persistence.hpp"
#include "random.hpp"
#include "trace.hpp"

namespace bayeslearn {

enum class Engine { Advi, Nuts };

inline std::string to_string(Engine e) { return e == Engine::Advi ? "advi" : "nuts"; }

struct FitOptions {
  Engine engine = Engine::Advi;
  AdviConfig advi;
  NutsConfig nuts;
  /// Used in error messages and persisted with the model.
  std::vector<std::string> feature_names;
  /// Posterior draws averaged by predict; 0 selects the estimator default.
  std::size_t predict_draws = 0;
};

struct Prediction {
  Vector mean;
  /// Empty unless requested.
  Vector sd;
};

/// Affine standardisation constants for features and target.
struct Normalization {
  Vector x_mean;
  Vector x_sd;
  double y_mean = 0.0;
  double y_sd = 1.0;

  static Normalization identity(Index features) {
    return {Vector::Zero(features), Vector::Ones(features), 0.0, 1.0};
  }

  Matrix apply_x(const Matrix& X) const {
    return ((X.rowwise() - x_mean.transpose()).array().rowwise() / x_sd.transpose().array()).matrix();
  }
  Vector apply_y(const Vector& y) const { return ((y.array() - y_mean) / y_sd).matrix(); }
};

struct AdviFit {
  VariationalPosterior posterior;
  ElboHistory history;
};

using FittedArtifact = std::variant<AdviFit, Trace>;

/// Everything needed to predict without refitting; what save() writes.
struct EstimatorState {
  int format_version = persistence::kFormatVersion;
  std::string kind;
  nlohmann::json hyperparameters = nlohmann::json::object();
  std::vector<std::string> feature_names;
  Normalization normalization;
  std::uint64_t seed = 0;
  std::size_t predict_draws = 0;
  std::optional<FittedArtifact> fitted;
  /// Standardised training data, kept only by estimators that need it.
  std::optional<Dataset> training;
};

/// Coefficient of determination 1 - SS_res / SS_tot.
inline double r2_score(const Vector& y, const Vector& predicted) {
  if (y.size() != predicted.size())
    throw UsageError("score: " + std::to_string(y.size()) + " targets but " +
                     std::to_string(predicted.size()) + " predictions");
  if (y.size() < 1) throw UsageError("score: empty target vector");
  const double mean = y.mean();
  const double ss_tot = (y.array() - mean).square().sum();
  if (!(ss_tot > 0.0)) throw DataError("score is undefined: targets have zero variance");
  const double ss_res = (y - predicted).squaredNorm();
  return 1.0 - ss_res / ss_tot;
}

namespace detail {

/// Evenly spaced indices selecting at most `k` of `total` items.
inline std::vector<Index> thin_indices(Index total, std::size_t k) {
  std::vector<Index> out;
  const auto kk = static_cast<Index>(k);
  if (k == 0 || total <= kk) {
    for (Index i = 0; i < total; ++i) out.push_back(i);
    return out;
  }
  for (Index i = 0; i < kk; ++i) out.push_back(i * total / kk);
  return out;
}

inline std::string column_label(const std::vector<std::string>& names, Index j) {
  if (static_cast<std::size_t>(j) < names.size()) return "'" + names[static_cast<std::size_t>(j)] + "'";
  return std::to_string(j);
}

inline nlohmann::json trace_to_json(const Trace& t) {
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& b : t.blocks) blocks.push_back({{"name", b.name}, {"offset", b.offset}, {"size", b.size}});
  nlohmann::json chains = nlohmann::json::array();
  for (const auto& c : t.chains) {
    std::vector<double> div(c.divergent.begin(), c.divergent.end());
    std::vector<double> depth(c.tree_depth.begin(), c.tree_depth.end());
    chains.push_back({{"draws", persistence::pack(c.draws)},
                      {"divergent", persistence::pack(div)},
                      {"tree_depth", persistence::pack(depth)},
                      {"step_size", persistence::pack(c.step_size)},
                      {"accept_stat", persistence::pack(c.accept_stat)},
                      {"energy", persistence::pack(c.energy)},
                      {"adapted_step_size", persistence::pack(std::vector<double>{c.adapted_step_size})},
                      {"inverse_metric", persistence::pack(Matrix(c.inverse_metric))}});
  }
  return {{"engine", "nuts"},
          {"names", t.names},
          {"blocks", blocks},
          {"warmup", t.warmup},
          {"includes_warmup", t.includes_warmup},
          {"warnings", t.warnings},
          {"chains", chains}};
}

inline Trace trace_from_json(const nlohmann::json& j) {
  using persistence::require;
  using persistence::require_as;
  Trace t;
  t.names = require_as<std::vector<std::string>>(j, "names");
  for (const auto& b : require(j, "blocks"))
    t.blocks.push_back({require_as<std::string>(b, "name"), require_as<Index>(b, "offset"),
                        require_as<Index>(b, "size")});
  t.warmup = require_as<std::size_t>(j, "warmup");
  t.includes_warmup = require_as<bool>(j, "includes_warmup");
  t.warnings = require_as<std::vector<std::string>>(j, "warnings");
  for (const auto& c : require(j, "chains")) {
    ChainDraws d;
    d.draws = persistence::unpack(require(c, "draws"), "draws");
    if (d.draws.cols() != static_cast<Index>(t.names.size()))
      throw LoadError("draws", "column count does not match parameter names");
    for (double v : persistence::unpack_vector(require(c, "divergent"), "divergent"))
      d.divergent.push_back(v != 0.0 ? 1 : 0);
    for (double v : persistence::unpack_vector(require(c, "tree_depth"), "tree_depth"))
      d.tree_depth.push_back(static_cast<int>(v));
    d.step_size = persistence::unpack_vector(require(c, "step_size"), "step_size");
    d.accept_stat = persistence::unpack_vector(require(c, "accept_stat"), "accept_stat");
    d.energy = persistence::unpack_vector(require(c, "energy"), "energy");
    const auto eps = persistence::unpack_vector(require(c, "adapted_step_size"), "adapted_step_size");
    if (eps.size() != 1) throw LoadError("adapted_step_size", "expected one value");
    d.adapted_step_size = eps.front();
    d.inverse_metric = persistence::unpack(require(c, "inverse_metric"), "inverse_metric");
    if (!t.chains.empty() && d.draws.rows() != t.chains.front().draws.rows())
      throw LoadError("chains", "chains have different draw counts");
    t.chains.push_back(std::move(d));
  }
  if (t.chains.empty()) throw LoadError("chains", "trace has no chains");
  return t;
}

}  // namespace detail

/**
 * fit / predict / score / save / load shared by every estimator.
 *
 * Derived supplies:
 *   static constexpr const char* kKind;
 *   static constexpr std::size_t kDefaultPredictDraws;
 *   static constexpr bool kRetainsTrainingData;
 *   ModelGraph build_graph(const Dataset& standardized) const;
 *   Prediction predict_standardized(const Matrix& Xs, bool return_std) const;
 *   nlohmann::json hyperparameters() const;
 *   void set_hyperparameters(const nlohmann::json&);
 *   void check_options(const FitOptions&, const Dataset&) const;
 */
template <class Derived>
class Estimator {
 public:
  /// Standardise, build the model graph and run the selected engine.  On
  /// failure the previous state is left untouched.
  Derived& fit(const Matrix& X, const Vector& y, const FitOptions& options = {}) {
    validate_training_data(X, y, options.feature_names);
    Normalization norm;
    norm.x_mean = X.colwise().mean().transpose();
    norm.x_sd.resize(X.cols());
    for (Index j = 0; j < X.cols(); ++j) {
      norm.x_sd(j) = std::sqrt((X.col(j).array() - norm.x_mean(j)).square().sum() /
                               static_cast<double>(X.rows() - 1));
      if (!(norm.x_sd(j) > 0.0))
        throw DataError("feature column " + detail::column_label(options.feature_names, j) +
                        " is constant");
    }
    norm.y_mean = y.mean();
    norm.y_sd = std::sqrt((y.array() - norm.y_mean).square().sum() / static_cast<double>(y.size() - 1));
    if (!(norm.y_sd > 0.0)) throw DataError("target is constant");

    Dataset data{norm.apply_x(X), norm.apply_y(y)};
    derived().check_options(options, data);
    const ModelGraph graph = derived().build_graph(data);

    EstimatorState next;
    next.kind = Derived::kKind;
    next.hyperparameters = derived().hyperparameters();
    next.feature_names = options.feature_names;
    next.normalization = norm;
    next.predict_draws = options.predict_draws ? options.predict_draws : Derived::kDefaultPredictDraws;
    if (options.engine == Engine::Advi) {
      next.seed = options.advi.seed;
      AdviResult r = fit_advi(graph, options.advi);
      next.fitted = AdviFit{std::move(r.posterior), std::move(r.history)};
    } else {
      next.seed = options.nuts.seed;
      next.fitted = sample_nuts(graph, options.nuts);
    }
    if (Derived::kRetainsTrainingData) next.training = std::move(data);
    state_ = std::move(next);
    return derived();
  }

  Prediction predict(const Matrix& X, bool return_std = false) const {
    require_fitted("predict");
    const Index d = state_.normalization.x_mean.size();
    if (X.cols() != d)
      throw UsageError("predict: expected " + std::to_string(d) + " feature columns, got " +
                       std::to_string(X.cols()));
    if (!X.allFinite()) throw DataError("predict: non-finite feature values");
    Prediction p = derived().predict_standardized(state_.normalization.apply_x(X), return_std);
    p.mean = (p.mean.array() * state_.normalization.y_sd + state_.normalization.y_mean).matrix();
    if (return_std) p.sd *= state_.normalization.y_sd;
    return p;
  }

  double score(const Matrix& X, const Vector& y) const {
    require_fitted("score");
    if (X.rows() != y.size())
      throw UsageError("score: " + std::to_string(X.rows()) + " rows but " +
                       std::to_string(y.size()) + " targets");
    return r2_score(y, predict(X).mean);
  }

  bool is_fitted() const noexcept { return state_.fitted.has_value(); }
  const EstimatorState& state() const noexcept { return state_; }
  Engine engine() const {
    require_fitted("engine");
    return std::holds_alternative<Trace>(*state_.fitted) ? Engine::Nuts : Engine::Advi;
  }

  const Trace& trace() const {
    require_fitted("trace");
    if (const auto* t = std::get_if<Trace>(&*state_.fitted)) return *t;
    throw StateError("trace: estimator was fitted with ADVI, not NUTS");
  }

  const AdviFit& advi_fit() const {
    require_fitted("advi_fit");
    if (const auto* a = std::get_if<AdviFit>(&*state_.fitted)) return *a;
    throw StateError("advi_fit: estimator was fitted with NUTS, not ADVI");
  }

  const ElboHistory& elbo_history() const { return advi_fit().history; }

  /// Graph carrying only the parameter layout (no data); used to map
  /// unconstrained draws to named constrained values.
  ModelGraph parameter_graph() const {
    const Index d = state_.normalization.x_mean.size();
    return derived().build_graph(Dataset{Matrix(0, d), Vector(0)});
  }

  /// Posterior summary on the standardised scale.  ADVI posteriors are
  /// summarised from `variational_draws` independent draws.
  PosteriorSummary summary(std::size_t variational_draws = 4000, double hdi_prob = 0.94) const {
    require_fitted("summary");
    if (const auto* t = std::get_if<Trace>(&*state_.fitted)) return summarize(*t, hdi_prob);
    Rng rng = make_stream(state_.seed, "summary");
    return summarize(advi_fit().posterior, parameter_graph(), variational_draws, rng, hdi_prob);
  }

  /// Install a state directly (as load does).  The kind must match.
  Derived& set_state(EstimatorState state) {
    if (state.kind != Derived::kKind)
      throw LoadError("kind", "expected '" + std::string(Derived::kKind) + "', found '" + state.kind + "'");
    derived().set_hyperparameters(state.hyperparameters);
    state_ = std::move(state);
    return derived();
  }

  nlohmann::json to_json() const {
    require_fitted("save");
    const auto& s = state_;
    nlohmann::json doc = {{"format", persistence::kFormatName},
                          {"version", s.format_version},
                          {"kind", s.kind},
                          {"hyperparameters", s.hyperparameters},
                          {"feature_names", s.feature_names},
                          {"seed", s.seed},
                          {"predict_draws", s.predict_draws},
                          {"normalization",
                           {{"x_mean", persistence::pack(Matrix(s.normalization.x_mean))},
                            {"x_sd", persistence::pack(Matrix(s.normalization.x_sd))},
                            {"y", persistence::pack(std::vector<double>{s.normalization.y_mean,
                                                                        s.normalization.y_sd})}}}};
    if (const auto* a = std::get_if<AdviFit>(&*s.fitted)) {
      doc["fit"] = {{"engine", "advi"},
                    {"mu", persistence::pack(Matrix(a->posterior.mu))},
                    {"omega", persistence::pack(Matrix(a->posterior.omega))},
                    {"elbo", persistence::pack(a->history.values)},
                    {"elbo_window", a->history.window}};
    } else {
      doc["fit"] = detail::trace_to_json(std::get<Trace>(*s.fitted));
    }
    if (s.training) {
      doc["training"] = {{"X", persistence::pack(s.training->X)},
                         {"y", persistence::pack(Matrix(s.training->y))}};
    }
    return doc;
  }

  void save(const std::filesystem::path& path) const {
    const std::string text = to_json().dump(2) + "\n";
    std::error_code ec;
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(path.string(), "cannot open model file for writing");
    out << text;
    out.flush();
    if (!out) throw IoError(path.string(), "failed writing model file");
  }

  Derived& load(const std::filesystem::path& path) { return set_state(read_state(path)); }

  /// Parse a saved-model document into a state, validating every field.
  static EstimatorState read_state(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(path.string(), "cannot open model file");
    std::stringstream buffer;
    buffer << in.rdbuf();
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(buffer.str());
    } catch (const nlohmann::json::parse_error& e) {
      throw LoadError("document", std::string("corrupt or truncated model file: ") + e.what());
    }
    return state_from_json(doc);
  }

  static EstimatorState state_from_json(const nlohmann::json& doc) {
    using persistence::require;
    using persistence::require_as;
    if (!doc.is_object()) throw LoadError("document", "corrupt model file: not an object");
    if (require_as<std::string>(doc, "format") != persistence::kFormatName)
      throw LoadError("format", "not a " + std::string(persistence::kFormatName) + " document");
    EstimatorState s;
    s.format_version = require_as<int>(doc, "version");
    if (s.format_version != persistence::kFormatVersion)
      throw LoadError("version", "unsupported format version " + std::to_string(s.format_version) +
                                     " (expected " + std::to_string(persistence::kFormatVersion) + ")");
    s.kind = require_as<std::string>(doc, "kind");
    s.hyperparameters = require(doc, "hyperparameters");
    s.feature_names = require_as<std::vector<std::string>>(doc, "feature_names");
    s.seed = require_as<std::uint64_t>(doc, "seed");
    s.predict_draws = require_as<std::size_t>(doc, "predict_draws");

    const auto& norm = require(doc, "normalization");
    s.normalization.x_mean = persistence::unpack(require(norm, "x_mean"), "x_mean");
    s.normalization.x_sd = persistence::unpack(require(norm, "x_sd"), "x_sd");
    const auto ys = persistence::unpack_vector(require(norm, "y"), "y");
    if (ys.size() != 2) throw LoadError("y", "expected target mean and sd");
    s.normalization.y_mean = ys[0];
    s.normalization.y_sd = ys[1];
    if (s.normalization.x_mean.size() != s.normalization.x_sd.size())
      throw LoadError("x_sd", "length does not match x_mean");

    const auto& fit = require(doc, "fit");
    const auto engine = require_as<std::string>(fit, "engine");
    if (engine == "advi") {
      AdviFit a;
      a.posterior.mu = persistence::unpack(require(fit, "mu"), "mu");
      a.posterior.omega = persistence::unpack(require(fit, "omega"), "omega");
      if (a.posterior.mu.size() != a.posterior.omega.size())
        throw LoadError("omega", "length does not match mu");
      a.history.values = persistence::unpack_vector(require(fit, "elbo"), "elbo");
      a.history.window = require_as<std::size_t>(fit, "elbo_window");
      s.fitted = std::move(a);
    } else if (engine == "nuts") {
      s.fitted = detail::trace_from_json(fit);
    } else {
      throw LoadError("engine", "unknown engine '" + engine + "'");
    }
    if (doc.contains("training")) {
      const auto& t = doc.at("training");
      Dataset d{persistence::unpack(require(t, "X"), "X"), persistence::unpack(require(t, "y"), "y")};
      if (d.X.rows() != d.y.size()) throw LoadError("training", "X and y row counts differ");
      s.training = std::move(d);
    }
    return s;
  }

 protected:
  Estimator() = default;

  void require_fitted(const char* what) const {
    if (!state_.fitted) throw StateError(std::string(what) + ": estimator is not fitted");
  }

  EstimatorState state_;

 private:
  Derived& derived() { return static_cast<Derived&>(*this); }
  const Derived& derived() const { return static_cast<const Derived&>(*this); }

  static void validate_training_data(const Matrix& X, const Vector& y,
                                     const std::vector<std::string>& names) {
    if (X.rows() != y.size())
      throw DataError("X has " + std::to_string(X.rows()) + " rows but y has " +
                      std::to_string(y.size()) + " entries");
    if (X.rows() < 2) throw DataError("need at least 2 training rows");
    if (X.cols() < 1) throw DataError("need at least 1 feature column");
    if (!names.empty() && static_cast<Index>(names.size()) != X.cols())
      throw UsageError("feature_names has " + std::to_string(names.size()) + " entries for " +
                       std::to_string(X.cols()) + " columns");
    for (Index j = 0; j < X.cols(); ++j)
      for (Index i = 0; i < X.rows(); ++i)
        if (!std::isfinite(X(i, j)))
          throw DataError("non-finite value at row " + std::to_string(i) + ", feature column " +
                          detail::column_label(names, j));
    for (Index i = 0; i < y.size(); ++i)
      if (!std::isfinite(y(i))) throw DataError("non-finite target at row " + std::to_string(i));
  }
};

}  // namespace bayeslearn
