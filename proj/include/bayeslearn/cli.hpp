#pragma once

// Command-line front end: fit, score, predict, diagnose, split.
//
// Exit codes: 0 success, 1 usage, 2 data / file / model-load problems,
// 3 inference failure.

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include <boost/tokenizer.hpp>
#include <CLI11.hpp>
#include <Eigen/Dense>

#include "diagnostics.hpp"
#include "errors.hpp"
#include "gaussian_process.hpp"
#include "linear_regression.hpp"
#include "random.hpp"

namespace bayeslearn::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kInference = 3 };

inline constexpr const char* kOutputDirEnv = "BAYESLEARN_OUTPUT_DIR";
inline constexpr const char* kDefaultOutputDir = "bayeslearn-out";

struct Table {
  std::vector<std::string> columns;
  Matrix values;  // rows x columns
};

struct CsvData {
  Matrix X;
  Vector y;  // empty without a target column
  std::vector<std::string> feature_names;
  std::string target;
};

/// Reads a numeric CSV with a header row.  Row numbers in errors count data
/// rows from 1 (the header is not counted).
inline Table read_table(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path.string(), "cannot open data file");
  using Tokenizer = boost::tokenizer<boost::escaped_list_separator<char>>;
  const auto split = [&](const std::string& line, std::size_t row) {
    std::vector<std::string> fields;
    try {
      for (auto field : Tokenizer(line)) {
        const auto b = field.find_first_not_of(" \t");
        const auto e = field.find_last_not_of(" \t");
        fields.push_back(b == std::string::npos ? std::string() : field.substr(b, e - b + 1));
      }
    } catch (const boost::escaped_list_error& err) {
      throw DataError(path.string() + ": row " + std::to_string(row) + ": malformed field: " + err.what());
    }
    return fields;
  };

  std::string line;
  bool have_header = false;
  while (!have_header && std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    have_header = !line.empty();
  }
  if (!have_header) throw DataError(path.string() + ": empty file");
  Table t;
  t.columns = split(line, 0);
  for (std::size_t j = 0; j < t.columns.size(); ++j) {
    if (t.columns[j].empty())
      throw DataError(path.string() + ": header column " + std::to_string(j + 1) + " has no name");
    for (std::size_t k = 0; k < j; ++k)
      if (t.columns[k] == t.columns[j])
        throw DataError(path.string() + ": duplicate column '" + t.columns[j] + "'");
  }

  std::vector<std::vector<double>> rows;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    ++row;
    const auto fields = split(line, row);
    if (fields.size() != t.columns.size())
      throw DataError(path.string() + ": row " + std::to_string(row) + " has " +
                      std::to_string(fields.size()) + " fields, header has " +
                      std::to_string(t.columns.size()));
    std::vector<double> values(fields.size());
    for (std::size_t j = 0; j < fields.size(); ++j) {
      const std::string where = path.string() + ": row " + std::to_string(row) + ", column '" + t.columns[j] + "'";
      if (fields[j].empty()) throw DataError(where + ": missing value");
      double v;
      try {
        v = parse_double(fields[j]);
      } catch (const DataError&) {
        throw DataError(where + ": non-numeric value '" + fields[j] + "'");
      }
      if (!std::isfinite(v)) throw DataError(where + ": non-finite value");
      values[j] = v;
    }
    rows.push_back(std::move(values));
  }
  if (rows.empty()) throw DataError(path.string() + ": no data rows");
  t.values.resize(static_cast<Index>(rows.size()), static_cast<Index>(t.columns.size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j)
      t.values(static_cast<Index>(i), static_cast<Index>(j)) = rows[i][j];
  return t;
}

/// Features are every non-target column in header order.  An empty target
/// name treats all columns as features.
inline CsvData load_csv(const std::filesystem::path& path, const std::string& target) {
  const Table t = read_table(path);
  CsvData d;
  d.target = target;
  std::optional<Index> target_col;
  for (std::size_t j = 0; j < t.columns.size(); ++j) {
    if (!target.empty() && t.columns[j] == target) {
      target_col = static_cast<Index>(j);
    } else {
      d.feature_names.push_back(t.columns[j]);
    }
  }
  if (!target.empty() && !target_col)
    throw DataError(path.string() + ": target column '" + target + "' not found");
  if (d.feature_names.empty()) throw DataError(path.string() + ": no feature columns");
  d.X.resize(t.values.rows(), static_cast<Index>(d.feature_names.size()));
  Index k = 0;
  for (Index j = 0; j < t.values.cols(); ++j)
    if (!target_col || j != *target_col) d.X.col(k++) = t.values.col(j);
  if (target_col) d.y = t.values.col(*target_col);
  return d;
}

inline void write_table(const std::vector<std::string>& columns, const Matrix& values, std::ostream& out) {
  for (std::size_t j = 0; j < columns.size(); ++j) out << (j ? "," : "") << columns[j];
  out << "\n";
  for (Index i = 0; i < values.rows(); ++i) {
    for (Index j = 0; j < values.cols(); ++j) out << (j ? "," : "") << format_double(values(i, j));
    out << "\n";
  }
}

inline void write_table_file(const std::vector<std::string>& columns, const Matrix& values,
                             const std::filesystem::path& path) {
  auto out = detail::open_for_write(path);
  write_table(columns, values, out);
  detail::finish(out, path);
}

struct Split {
  Matrix X_train;
  Vector y_train;
  Matrix X_test;
  Vector y_test;
  std::vector<Index> train_rows;
  std::vector<Index> test_rows;
};

/// Seeded Fisher-Yates permutation; the first round(n * fraction) rows of
/// the permutation form the test set.  Each side keeps original row order.
inline Split train_test_split(const Matrix& X, const Vector& y, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction >= 0.0 && test_fraction < 1.0))
    throw UsageError("test fraction must be in [0, 1), got " + format_double(test_fraction));
  if (X.rows() != y.size()) throw DataError("X and y have different row counts");
  const Index n = X.rows();
  std::vector<Index> perm(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;
  Rng rng = make_stream(seed, "split");
  for (Index i = n - 1; i > 0; --i) {
    std::uniform_int_distribution<Index> pick(0, i);
    std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(pick(rng))]);
  }
  const auto n_test = static_cast<Index>(std::llround(static_cast<double>(n) * test_fraction));
  if (n - n_test < 2)
    throw DataError("train/test split leaves " + std::to_string(n - n_test) + " training rows; need at least 2");
  Split s;
  s.test_rows.assign(perm.begin(), perm.begin() + n_test);
  s.train_rows.assign(perm.begin() + n_test, perm.end());
  std::sort(s.test_rows.begin(), s.test_rows.end());
  std::sort(s.train_rows.begin(), s.train_rows.end());
  const auto take = [&](const std::vector<Index>& rows, Matrix& Xo, Vector& yo) {
    Xo.resize(static_cast<Index>(rows.size()), X.cols());
    yo.resize(static_cast<Index>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
      Xo.row(static_cast<Index>(i)) = X.row(rows[i]);
      yo(static_cast<Index>(i)) = y(rows[i]);
    }
  };
  take(s.train_rows, s.X_train, s.y_train);
  take(s.test_rows, s.X_test, s.y_test);
  return s;
}

inline std::filesystem::path default_output_dir() {
  if (const char* env = std::getenv(kOutputDirEnv); env && *env) return env;
  return kDefaultOutputDir;
}

/// Calls f with a default-constructed estimator of the named kind.
template <class F>
decltype(auto) with_estimator(const std::string& kind, const std::optional<double>& fixed_noise, F&& f) {
  if (kind == LinearRegression::kKind) {
    LinearRegressionSpec spec;
    spec.fixed_noise = fixed_noise;
    LinearRegression est(spec);
    return f(est);
  }
  if (kind == GaussianProcessRegressor::kKind) {
    GPRegressorSpec spec;
    spec.fixed_noise = fixed_noise;
    GaussianProcessRegressor est(spec);
    return f(est);
  }
  throw UsageError("unknown model kind '" + kind + "' (expected linear or gp)");
}

namespace detail {

inline void check_features(const std::vector<std::string>& saved, const CsvData& data) {
  if (saved.empty()) return;
  if (saved.size() != data.feature_names.size())
    throw DataError("data has " + std::to_string(data.feature_names.size()) + " feature columns, model expects " +
                    std::to_string(saved.size()));
  for (std::size_t j = 0; j < saved.size(); ++j)
    if (saved[j] != data.feature_names[j])
      throw DataError("feature column " + std::to_string(j + 1) + " is '" + data.feature_names[j] +
                      "', model expects '" + saved[j] + "'");
}

template <class Est>
void write_diagnostics(const Est& est, const std::filesystem::path& dir, bool svg,
                       std::vector<std::filesystem::path>& written) {
  write_summary_csv(est.summary(), dir / "summary.csv");
  written.push_back(dir / "summary.csv");
  if (est.engine() == Engine::Advi) {
    export_elbo(est.elbo_history(), dir / "elbo.csv", svg);
    written.push_back(dir / "elbo.csv");
    if (svg) written.push_back(dir / "elbo.svg");
  } else {
    for (auto& p : export_trace(est.trace(), dir / "trace", svg)) written.push_back(std::move(p));
  }
}

}  // namespace detail

struct FitArgs {
  std::string model = "linear";
  std::string engine = "advi";
  std::string data;
  std::string target;
  std::string out;
  std::string test_data;
  double test_fraction = 0.0;
  std::uint64_t seed = 0;
  std::size_t steps = 10000;
  double learning_rate = 0.01;
  std::size_t n_mc = 1;
  std::size_t batch_size = 0;
  std::size_t chains = 4;
  std::size_t draws = 1000;
  std::optional<std::size_t> warmup;
  double target_accept = 0.8;
  int max_depth = 10;
  std::optional<double> fixed_noise;
  bool svg = false;
};

inline int cmd_fit(const FitArgs& a, std::ostream& out, std::ostream& err) {
  const CsvData data = load_csv(a.data, a.target);
  Matrix X_train = data.X, X_test;
  Vector y_train = data.y, y_test;
  bool have_test = false;
  if (!a.test_data.empty()) {
    if (a.test_fraction > 0.0) throw UsageError("--test-data and --test-fraction are mutually exclusive");
    const CsvData test = load_csv(a.test_data, a.target);
    detail::check_features(data.feature_names, test);
    X_test = test.X;
    y_test = test.y;
    have_test = true;
  } else if (a.test_fraction > 0.0) {
    Split s = train_test_split(data.X, data.y, a.test_fraction, a.seed);
    X_train = std::move(s.X_train);
    y_train = std::move(s.y_train);
    X_test = std::move(s.X_test);
    y_test = std::move(s.y_test);
    have_test = y_test.size() > 0;
  }

  FitOptions opt;
  opt.engine = a.engine == "nuts" ? Engine::Nuts : Engine::Advi;
  opt.feature_names = data.feature_names;
  opt.advi.steps = a.steps;
  opt.advi.learning_rate = a.learning_rate;
  opt.advi.n_mc = a.n_mc;
  opt.advi.batch_size = a.batch_size;
  opt.advi.seed = a.seed;
  opt.nuts.chains = a.chains;
  opt.nuts.draws = a.draws;
  opt.nuts.warmup = a.warmup;
  opt.nuts.target_accept = a.target_accept;
  opt.nuts.max_depth = a.max_depth;
  opt.nuts.seed = a.seed;

  const std::filesystem::path dir = a.out.empty() ? default_output_dir() : std::filesystem::path(a.out);
  return with_estimator(a.model, a.fixed_noise, [&](auto& est) {
    est.fit(X_train, y_train, opt);
    std::vector<std::filesystem::path> written;
    est.save(dir / "model.bml");
    written.push_back(dir / "model.bml");
    detail::write_diagnostics(est, dir, a.svg, written);
    if (est.engine() == Engine::Nuts)
      for (const auto& w : est.trace().warnings) err << "warning: " << w << "\n";
    if (have_test) {
      const std::string score = format_double(est.score(X_test, y_test));
      auto f = bayeslearn::detail::open_for_write(dir / "score.txt");
      f << score << "\n";
      bayeslearn::detail::finish(f, dir / "score.txt");
      written.push_back(dir / "score.txt");
      out << score << "\n";
    }
    for (const auto& w : written) err << "wrote " << w.string() << "\n";
    return kOk;
  });
}

inline int cmd_score(const std::string& model, const std::string& data_path, const std::string& target,
                     std::ostream& out) {
  const EstimatorState state = LinearRegression::read_state(model);
  const CsvData data = load_csv(data_path, target);
  detail::check_features(state.feature_names, data);
  return with_estimator(state.kind, std::nullopt, [&](auto& est) {
    est.set_state(state);
    out << format_double(est.score(data.X, data.y)) << "\n";
    return kOk;
  });
}

inline int cmd_predict(const std::string& model, const std::string& data_path, const std::string& target,
                       bool with_std, const std::string& out_path, std::ostream& out) {
  const EstimatorState state = LinearRegression::read_state(model);
  const CsvData data = load_csv(data_path, target);
  detail::check_features(state.feature_names, data);
  return with_estimator(state.kind, std::nullopt, [&](auto& est) {
    est.set_state(state);
    const Prediction p = est.predict(data.X, with_std);
    Matrix values(p.mean.size(), with_std ? 2 : 1);
    values.col(0) = p.mean;
    if (with_std) values.col(1) = p.sd;
    std::vector<std::string> cols{"mean"};
    if (with_std) cols.push_back("sd");
    if (out_path.empty()) {
      write_table(cols, values, out);
    } else {
      write_table_file(cols, values, out_path);
    }
    return kOk;
  });
}

inline int cmd_diagnose(const std::string& model, const std::string& out_dir, bool svg, std::ostream& out) {
  const EstimatorState state = LinearRegression::read_state(model);
  const std::filesystem::path dir = out_dir.empty() ? default_output_dir() : std::filesystem::path(out_dir);
  return with_estimator(state.kind, std::nullopt, [&](auto& est) {
    est.set_state(state);
    std::vector<std::filesystem::path> written;
    detail::write_diagnostics(est, dir, svg, written);
    for (const auto& w : written) out << w.string() << "\n";
    return kOk;
  });
}

inline int cmd_split(const std::string& data_path, double fraction, std::uint64_t seed,
                     const std::string& out_dir, std::ostream& err) {
  const Table t = read_table(data_path);
  const Split s = train_test_split(t.values, Vector::Zero(t.values.rows()), fraction, seed);
  const std::filesystem::path dir = out_dir.empty() ? default_output_dir() : std::filesystem::path(out_dir);
  const auto rows_of = [&](const std::vector<Index>& idx) {
    Matrix m(static_cast<Index>(idx.size()), t.values.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) m.row(static_cast<Index>(i)) = t.values.row(idx[i]);
    return m;
  };
  write_table_file(t.columns, rows_of(s.train_rows), dir / "train.csv");
  write_table_file(t.columns, rows_of(s.test_rows), dir / "test.csv");
  err << "wrote " << (dir / "train.csv").string() << " (" << s.train_rows.size() << " rows)\n";
  err << "wrote " << (dir / "test.csv").string() << " (" << s.test_rows.size() << " rows)\n";
  return kOk;
}

/// Entry point.  `args` excludes the program name.
inline int run(std::vector<std::string> args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Bayesian regression with ADVI or NUTS", "bayeslearn"};
  app.require_subcommand(1);

  FitArgs fa;
  auto* fit = app.add_subcommand("fit", "fit a model and write model.bml plus diagnostics");
  fit->add_option("--model", fa.model, "model kind")->check(CLI::IsMember({"linear", "gp"}));
  fit->add_option("--engine", fa.engine, "inference engine")->check(CLI::IsMember({"advi", "nuts"}));
  fit->add_option("--data", fa.data, "training CSV")->required();
  fit->add_option("--target", fa.target, "target column name")->required();
  fit->add_option("--out", fa.out, "output directory");
  fit->add_option("--test-data", fa.test_data, "held-out CSV to score");
  fit->add_option("--test-fraction", fa.test_fraction, "fraction of rows held out")->check(CLI::Range(0.0, 1.0));
  fit->add_option("--seed", fa.seed, "random seed");
  fit->add_option("--steps", fa.steps, "ADVI iterations")->check(CLI::PositiveNumber);
  fit->add_option("--learning-rate", fa.learning_rate, "ADVI learning rate")->check(CLI::PositiveNumber);
  fit->add_option("--n-mc", fa.n_mc, "ADVI Monte Carlo draws per step")->check(CLI::PositiveNumber);
  fit->add_option("--batch-size", fa.batch_size, "ADVI mini-batch size (0 = full data)");
  fit->add_option("--chains", fa.chains, "NUTS chains")->check(CLI::PositiveNumber);
  fit->add_option("--draws", fa.draws, "NUTS draws per chain")->check(CLI::PositiveNumber);
  fit->add_option("--warmup", fa.warmup, "NUTS warmup iterations (default: draws)");
  fit->add_option("--target-accept", fa.target_accept, "NUTS target acceptance")->check(CLI::Range(0.0, 1.0));
  fit->add_option("--max-depth", fa.max_depth, "NUTS maximum tree depth")->check(CLI::Range(1, 30));
  fit->add_option("--fixed-noise", fa.fixed_noise, "pin the noise sd (standardised scale)")
      ->check(CLI::PositiveNumber);
  fit->add_flag("--svg", fa.svg, "also write SVG plots");

  std::string model, data, target, out_path, out_dir;
  bool with_std = false, svg = false;
  double fraction = 0.3;
  std::uint64_t seed = 0;

  auto* score = app.add_subcommand("score", "print R^2 of a saved model on a CSV");
  score->add_option("--model", model, "model file")->required();
  score->add_option("--data", data, "CSV with features and target")->required();
  score->add_option("--target", target, "target column name")->required();

  auto* predict = app.add_subcommand("predict", "write posterior-predictive means as CSV");
  predict->add_option("--model", model, "model file")->required();
  predict->add_option("--data", data, "CSV with feature columns")->required();
  predict->add_option("--target", target, "column to ignore if present");
  predict->add_flag("--std", with_std, "include predictive sd");
  predict->add_option("--out", out_path, "output CSV (default: standard output)");

  auto* diagnose = app.add_subcommand("diagnose", "write summary and ELBO or trace exports");
  diagnose->add_option("--model", model, "model file")->required();
  diagnose->add_option("--out", out_dir, "output directory");
  diagnose->add_flag("--svg", svg, "also write SVG plots");

  auto* split = app.add_subcommand("split", "deterministic train/test split of a CSV");
  split->add_option("--data", data, "CSV to split")->required();
  split->add_option("--test-fraction", fraction, "fraction of rows for test.csv");
  split->add_option("--seed", seed, "random seed");
  split->add_option("--out", out_dir, "output directory");

  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kOk : kUsage;
  }

  try {
    if (fit->parsed()) return cmd_fit(fa, out, err);
    if (score->parsed()) return cmd_score(model, data, target, out);
    if (predict->parsed()) return cmd_predict(model, data, target, with_std, out_path, out);
    if (diagnose->parsed()) return cmd_diagnose(model, out_dir, svg, out);
    if (split->parsed()) return cmd_split(data, fraction, seed, out_dir, err);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const ShapeError& e) {
    err << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const DivergenceError& e) {
    err << "inference failed: " << e.what() << "\n";
    return kInference;
  } catch (const NumericError& e) {
    err << "inference failed: " << e.what() << "\n";
    return kInference;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kData;
  }
  return kUsage;
}

}  // namespace bayeslearn::cli
