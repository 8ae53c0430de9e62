#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "advi.hpp"
#include "errors.hpp"
#include "random.hpp"
#include "trace.hpp"

namespace bayeslearn {

struct ParameterSummary {
  std::string name;
  double mean = 0.0;
  double sd = 0.0;
  double q025 = 0.0;
  double median = 0.0;
  double q975 = 0.0;
  double hdi_low = 0.0;
  double hdi_high = 0.0;
  /// Empty when not applicable (e.g. zero variance).
  std::optional<double> ess;
  /// MCMC only.
  std::optional<double> rhat;
  std::optional<double> mcse;
};

struct PosteriorSummary {
  double hdi_prob = 0.94;
  std::vector<ParameterSummary> parameters;

  const ParameterSummary& at(const std::string& name) const {
    for (const auto& p : parameters)
      if (p.name == name) return p;
    throw UsageError("summary has no parameter named '" + name + "'");
  }
};

/// Linearly interpolated quantile of sorted data.
inline double quantile_sorted(const std::vector<double>& sorted, double prob) {
  if (sorted.empty()) throw UsageError("quantile of an empty sample");
  const double h = prob * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

/// Narrowest interval containing ceil(prob * n) of the draws.
inline std::pair<double, double> hdi(std::vector<double> draws, double prob = 0.94) {
  if (draws.empty()) throw UsageError("hdi of an empty sample");
  if (!(prob > 0.0 && prob <= 1.0)) throw UsageError("hdi probability must lie in (0, 1]");
  std::sort(draws.begin(), draws.end());
  const std::size_t n = draws.size();
  const auto m = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::ceil(prob * static_cast<double>(n) - 1e-9)));
  std::size_t best = 0;
  double width = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i + m <= n; ++i) {
    const double w = draws[i + m - 1] - draws[i];
    if (w < width) {
      width = w;
      best = i;
    }
  }
  return {draws[best], draws[best + m - 1]};
}

namespace detail {

inline void require_draws(const Eigen::MatrixXd& draws, const char* what) {
  if (draws.cols() < 1 || draws.rows() < 4)
    throw UsageError(std::string(what) + ": need at least 1 chain and 4 draws per chain, got " +
                     std::to_string(draws.cols()) + " x " + std::to_string(draws.rows()));
}

inline double sample_variance(const Eigen::VectorXd& x) {
  const double mu = x.mean();
  return (x.array() - mu).square().sum() / static_cast<double>(x.size() - 1);
}

}  // namespace detail

/**
 * Split potential scale reduction for iterations x chains draws.
 *
 * Each chain is cut into halves of length h (the middle draw is dropped for
 * odd lengths); with W the mean within-half variance and B/h the variance
 * of half means over the 2c halves,
 *   R = sqrt(((h - 1)/h W + B/h) / W).
 * Returns empty when the within-chain variance is zero.
 */
inline std::optional<double> split_rhat(const Eigen::MatrixXd& draws) {
  detail::require_draws(draws, "split_rhat");
  const Eigen::Index n = draws.rows();
  const Eigen::Index h = n / 2;
  const Eigen::Index halves = 2 * draws.cols();
  Eigen::VectorXd means(halves), vars(halves);
  for (Eigen::Index c = 0; c < draws.cols(); ++c) {
    const Eigen::VectorXd first = draws.col(c).head(h);
    const Eigen::VectorXd second = draws.col(c).tail(h);
    means(2 * c) = first.mean();
    means(2 * c + 1) = second.mean();
    vars(2 * c) = detail::sample_variance(first);
    vars(2 * c + 1) = detail::sample_variance(second);
  }
  const double w = vars.mean();
  if (!(w > 0.0)) return std::nullopt;
  const double hd = static_cast<double>(h);
  const double b = hd * detail::sample_variance(means);
  return std::sqrt(((hd - 1.0) / hd * w + b / hd) / w);
}

/**
 * Effective sample size from pooled autocorrelations, truncated by Geyer's
 * initial monotone positive sequence.  Capped at 1.5x the total draw count
 * (antithetic chains can otherwise report arbitrarily large values).
 */
inline std::optional<double> ess(const Eigen::MatrixXd& draws) {
  detail::require_draws(draws, "ess");
  const Eigen::Index n = draws.rows();
  const Eigen::Index chains = draws.cols();
  const double nd = static_cast<double>(n);

  Eigen::MatrixXd centered(n, chains);
  Eigen::VectorXd means(chains), vars(chains);
  for (Eigen::Index c = 0; c < chains; ++c) {
    means(c) = draws.col(c).mean();
    centered.col(c) = draws.col(c).array() - means(c);
    vars(c) = centered.col(c).squaredNorm() / (nd - 1.0);
  }
  const double w = vars.mean();
  double var_plus = w * (nd - 1.0) / nd;
  if (chains > 1) var_plus += detail::sample_variance(means);
  if (!(w > 0.0) || !(var_plus > 0.0)) return std::nullopt;

  // mean over chains of the biased lag-t autocovariance
  const auto acov = [&](Eigen::Index t) {
    double s = 0.0;
    for (Eigen::Index c = 0; c < chains; ++c)
      s += centered.col(c).head(n - t).dot(centered.col(c).tail(n - t));
    return s / (nd * static_cast<double>(chains));
  };
  const auto rho = [&](Eigen::Index t) { return t == 0 ? 1.0 : 1.0 - (w - acov(t)) / var_plus; };

  double sum = 0.0;
  double previous = std::numeric_limits<double>::infinity();
  for (Eigen::Index t = 0; t + 1 < n; t += 2) {
    double pair = rho(t) + rho(t + 1);
    if (!(pair > 0.0)) break;
    pair = std::min(pair, previous);
    sum += pair;
    previous = pair;
  }
  const double total = nd * static_cast<double>(chains);
  const double tau = -1.0 + 2.0 * sum;
  if (!(tau > 0.0)) return 1.5 * total;
  return std::min(total / tau, 1.5 * total);
}

namespace detail {

inline ParameterSummary summarize_column(const std::string& name, const Eigen::MatrixXd& chains,
                                         double hdi_prob) {
  std::vector<double> all(chains.data(), chains.data() + chains.size());
  std::vector<double> sorted = all;
  std::sort(sorted.begin(), sorted.end());
  ParameterSummary s;
  s.name = name;
  // accumulate in sorted order so the moments ignore draw order
  double total = 0.0;
  for (double v : sorted) total += v;
  s.mean = total / static_cast<double>(sorted.size());
  double ss = 0.0;
  for (double v : sorted) ss += (v - s.mean) * (v - s.mean);
  s.sd = std::sqrt(ss / static_cast<double>(sorted.size() - 1));
  s.q025 = quantile_sorted(sorted, 0.025);
  s.median = quantile_sorted(sorted, 0.5);
  s.q975 = quantile_sorted(sorted, 0.975);
  std::tie(s.hdi_low, s.hdi_high) = hdi(std::move(all), hdi_prob);
  return s;
}

}  // namespace detail

/// Summary of MCMC draws, one row per scalar parameter.
inline PosteriorSummary summarize(const Trace& full, double hdi_prob = 0.94) {
  const Trace trace = full.without_warmup();
  if (trace.num_draws() < 4)
    throw UsageError("summarize: need at least 4 draws per chain, got " +
                     std::to_string(trace.num_draws()));
  PosteriorSummary out;
  out.hdi_prob = hdi_prob;
  for (std::size_t j = 0; j < trace.dimension(); ++j) {
    const Eigen::MatrixXd chains = trace.parameter(j);
    ParameterSummary s = detail::summarize_column(trace.names[j], chains, hdi_prob);
    s.ess = ess(chains);
    s.rhat = split_rhat(chains);
    if (s.ess) s.mcse = s.sd / std::sqrt(*s.ess);
    out.parameters.push_back(std::move(s));
  }
  return out;
}

/// Summary of independent draws (rows) of named parameters (columns).
/// ESS is the draw count and R-hat is not applicable.
inline PosteriorSummary summarize_independent(const std::vector<std::string>& names,
                                              const Eigen::MatrixXd& draws,
                                              double hdi_prob = 0.94) {
  if (draws.rows() < 4)
    throw UsageError("summarize: need at least 4 draws, got " + std::to_string(draws.rows()));
  if (static_cast<std::size_t>(draws.cols()) != names.size())
    throw UsageError("summarize: names do not match draw columns");
  PosteriorSummary out;
  out.hdi_prob = hdi_prob;
  for (Eigen::Index j = 0; j < draws.cols(); ++j) {
    ParameterSummary s =
        detail::summarize_column(names[static_cast<std::size_t>(j)], draws.col(j), hdi_prob);
    s.ess = static_cast<double>(draws.rows());
    s.mcse = s.sd / std::sqrt(*s.ess);
    out.parameters.push_back(std::move(s));
  }
  return out;
}

/// Constrained draws from a variational posterior, summarised.
template <class M>
PosteriorSummary summarize(const VariationalPosterior& q, const M& model, std::size_t n_draws,
                           Rng& rng, double hdi_prob = 0.94) {
  if (n_draws < 4) throw UsageError("summarize: need at least 4 draws");
  Eigen::MatrixXd draws(static_cast<Eigen::Index>(n_draws), q.dimension());
  for (Eigen::Index i = 0; i < draws.rows(); ++i)
    draws.row(i) = model.constrain(q.sample(rng)).transpose();
  return summarize_independent(model.parameter_names(), draws, hdi_prob);
}

// ---- delimited text and plot exports ----

/// 17 significant digits, enough for an exact parse back.
inline std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, 17);
  return std::string(buf, r.ptr);
}

inline double parse_double(std::string_view s) {
  double v = 0.0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size())
    throw DataError("not a number: '" + std::string(s) + "'");
  return v;
}

namespace detail {

inline std::ofstream open_for_write(const std::filesystem::path& path) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path.string(), "cannot open for writing");
  return out;
}

inline void finish(std::ofstream& out, const std::filesystem::path& path) {
  out.flush();
  if (!out) throw IoError(path.string(), "write failed");
}

inline std::vector<std::vector<std::string>> read_rows(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path.string(), "cannot open for reading");
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(f);
    rows.push_back(std::move(fields));
  }
  return rows;
}

inline std::string file_stem_for(const std::string& name) {
  std::string out;
  for (char c : name) {
    const bool keep = std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-';
    if (keep) {
      out += c;
    } else if (!out.empty() && out.back() != '_') {
      out += '_';
    }
  }
  while (!out.empty() && out.back() == '_') out.pop_back();
  return out.empty() ? "param" : out;
}

}  // namespace detail

/// Minimal static SVG line chart, one polyline per series.
inline std::string line_chart_svg(const std::vector<std::vector<double>>& series,
                                  const std::string& title) {
  constexpr double width = 640, height = 360, margin = 40;
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  std::size_t longest = 1;
  for (const auto& s : series) {
    longest = std::max(longest, s.size());
    for (double v : s)
      if (std::isfinite(v)) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
  }
  if (!std::isfinite(lo)) lo = hi = 0.0;
  if (hi == lo) hi = lo + 1.0;
  static constexpr const char* colours[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
                                            "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
      << height << "\" viewBox=\"0 0 " << width << ' ' << height << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"" << margin << "\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">"
      << title << "</text>\n"
      << "<text x=\"4\" y=\"" << margin << "\" font-family=\"sans-serif\" font-size=\"10\">"
      << format_double(hi) << "</text>\n"
      << "<text x=\"4\" y=\"" << height - margin << "\" font-family=\"sans-serif\" font-size=\"10\">"
      << format_double(lo) << "</text>\n";
  const double span_x = longest > 1 ? static_cast<double>(longest - 1) : 1.0;
  for (std::size_t k = 0; k < series.size(); ++k) {
    svg << "<polyline fill=\"none\" stroke-width=\"1\" stroke=\"" << colours[k % 8]
        << "\" points=\"";
    for (std::size_t i = 0; i < series[k].size(); ++i) {
      const double v = series[k][i];
      if (!std::isfinite(v)) continue;
      const double x = margin + (width - 2 * margin) * static_cast<double>(i) / span_x;
      const double y = height - margin - (height - 2 * margin) * (v - lo) / (hi - lo);
      svg << x << ',' << y << ' ';
    }
    svg << "\"/>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

/// iteration,elbo,elbo_smoothed rows; optional SVG alongside with the same stem.
inline void export_elbo(const ElboHistory& history, const std::filesystem::path& path,
                        bool svg = false) {
  if (history.size() == 0) throw UsageError("export_elbo: empty ELBO history");
  auto out = detail::open_for_write(path);
  out << "iteration,elbo,elbo_smoothed\n";
  const std::vector<double> smooth = history.smoothed();
  for (std::size_t i = 0; i < history.size(); ++i)
    out << i << ',' << format_double(history.values[i]) << ',' << format_double(smooth[i]) << '\n';
  detail::finish(out, path);
  if (svg) {
    std::filesystem::path figure = path;
    figure.replace_extension(".svg");
    auto f = detail::open_for_write(figure);
    f << line_chart_svg({history.values, smooth}, "ELBO");
    detail::finish(f, figure);
  }
}

inline ElboHistory read_elbo(const std::filesystem::path& path, std::size_t window = 100) {
  const auto rows = detail::read_rows(path);
  if (rows.empty() || rows.front().size() < 2 || rows.front()[1] != "elbo")
    throw DataError("not an ELBO export: " + path.string());
  ElboHistory h;
  h.window = window;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (rows[i].size() < 2) throw DataError("short row " + std::to_string(i) + " in " + path.string());
    h.values.push_back(parse_double(rows[i][1]));
  }
  return h;
}

/**
 * One CSV per scalar parameter (iteration, chain_0 .. chain_{c-1}) plus
 * manifest.json listing every emitted file.  Returns the emitted files,
 * manifest last.
 */
inline std::vector<std::filesystem::path> export_trace(const Trace& trace,
                                                       const std::filesystem::path& dir,
                                                       bool svg = false) {
  if (trace.num_chains() == 0 || trace.num_draws() == 0)
    throw UsageError("export_trace: empty trace");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError(dir.string(), "cannot create directory");

  std::vector<std::filesystem::path> written;
  nlohmann::json files = nlohmann::json::array();
  nlohmann::json figures = nlohmann::json::array();
  std::vector<std::string> used;
  for (std::size_t j = 0; j < trace.dimension(); ++j) {
    std::string stem = "trace_" + detail::file_stem_for(trace.names[j]);
    // disambiguate names that sanitise to the same stem
    if (std::find(used.begin(), used.end(), stem) != used.end()) stem += "_" + std::to_string(j);
    used.push_back(stem);

    const Eigen::MatrixXd draws = trace.parameter(j);
    const auto path = dir / (stem + ".csv");
    auto out = detail::open_for_write(path);
    out << "iteration";
    for (std::size_t c = 0; c < trace.num_chains(); ++c) out << ",chain_" << c;
    out << '\n';
    for (Eigen::Index i = 0; i < draws.rows(); ++i) {
      out << i;
      for (Eigen::Index c = 0; c < draws.cols(); ++c) out << ',' << format_double(draws(i, c));
      out << '\n';
    }
    detail::finish(out, path);
    written.push_back(path);
    files.push_back({{"parameter", trace.names[j]},
                     {"file", path.filename().string()},
                     {"rows", draws.rows()},
                     {"columns", draws.cols() + 1}});

    if (svg) {
      std::vector<std::vector<double>> series;
      for (Eigen::Index c = 0; c < draws.cols(); ++c)
        series.emplace_back(draws.col(c).data(), draws.col(c).data() + draws.rows());
      const auto figure = dir / (stem + ".svg");
      auto f = detail::open_for_write(figure);
      f << line_chart_svg(series, trace.names[j]);
      detail::finish(f, figure);
      written.push_back(figure);
      figures.push_back(figure.filename().string());
    }
  }

  nlohmann::json manifest = {{"chains", trace.num_chains()},
                             {"draws", trace.num_draws()},
                             {"warmup", trace.warmup},
                             {"includes_warmup", trace.includes_warmup},
                             {"divergences", trace.divergences()},
                             {"files", files},
                             {"figures", figures}};
  const auto path = dir / "manifest.json";
  auto out = detail::open_for_write(path);
  out << manifest.dump(2) << '\n';
  detail::finish(out, path);
  written.push_back(path);
  return written;
}

/// Reads one exported trace CSV back as iterations x chains.
inline Eigen::MatrixXd read_trace_csv(const std::filesystem::path& path) {
  const auto rows = detail::read_rows(path);
  if (rows.size() < 2 || rows.front().empty() || rows.front()[0] != "iteration")
    throw DataError("not a trace export: " + path.string());
  const auto chains = static_cast<Eigen::Index>(rows.front().size() - 1);
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size() - 1), chains);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (static_cast<Eigen::Index>(rows[i].size()) != chains + 1)
      throw DataError("ragged row " + std::to_string(i) + " in " + path.string());
    for (Eigen::Index c = 0; c < chains; ++c)
      out(static_cast<Eigen::Index>(i - 1), c) = parse_double(rows[i][static_cast<std::size_t>(c + 1)]);
  }
  return out;
}

inline void write_summary_csv(const PosteriorSummary& summary, const std::filesystem::path& path) {
  auto out = detail::open_for_write(path);
  const auto opt = [](const std::optional<double>& v) { return v ? format_double(*v) : "NA"; };
  out << "parameter,mean,sd,q2.5,q50,q97.5,hdi_low,hdi_high,ess,rhat,mcse\n";
  for (const auto& p : summary.parameters) {
    out << p.name << ',' << format_double(p.mean) << ',' << format_double(p.sd) << ','
        << format_double(p.q025) << ',' << format_double(p.median) << ','
        << format_double(p.q975) << ',' << format_double(p.hdi_low) << ','
        << format_double(p.hdi_high) << ',' << opt(p.ess) << ',' << opt(p.rhat) << ','
        << opt(p.mcse) << '\n';
  }
  detail::finish(out, path);
}

}  // namespace bayeslearn
