#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "autodiff.hpp"
#include "distributions.hpp"
#include "errors.hpp"

namespace bayeslearn {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

/// Design matrix and targets.  Models without data use an empty dataset.
struct Dataset {
  Matrix X;
  Vector y;

  Index size() const noexcept { return y.size(); }

  Dataset subset(std::span<const Index> rows) const {
    Dataset out{Matrix(static_cast<Index>(rows.size()), X.cols()),
                Vector(static_cast<Index>(rows.size()))};
    for (std::size_t i = 0; i < rows.size(); ++i) {
      out.X.row(static_cast<Index>(i)) = X.row(rows[i]);
      out.y(static_cast<Index>(i)) = y(rows[i]);
    }
    return out;
  }
};

struct ParamBlock {
  std::string name;
  Index size = 1;
  bool is_vector = false;
  Distribution prior;
  Transform transform;
  Index offset = 0;
};

/// Constrained parameter values on the tape, keyed by block name.
using ParamValues = std::map<std::string, ad::Var>;

/// Taped log-likelihood of a batch given constrained parameters.
using Likelihood =
    std::function<ad::Var(ad::Tape&, const ParamValues&, const Dataset&)>;

class ModelBuilder;

/**
 * Log-joint density over a flat unconstrained vector.
 *
 * Blocks tile the vector in declaration order.  The density is
 *
 *   sum_b [ log p_b(T_b^-1(zeta_b)) + log|J_b|(zeta_b) ] + (N/|batch|) log L(batch)
 *
 * and is immutable once built, so one graph may back many concurrent chains
 * as long as each evaluation uses its own tape.
 */
class ModelGraph {
 public:
  Index dimension() const noexcept { return dimension_; }
  const std::vector<ParamBlock>& blocks() const noexcept { return blocks_; }
  const Dataset& data() const noexcept { return data_; }
  Index data_size() const noexcept { return data_.size(); }
  bool has_likelihood() const noexcept { return static_cast<bool>(likelihood_); }

  const ParamBlock& block(const std::string& name) const {
    for (const auto& b : blocks_)
      if (b.name == name) return b;
    throw UsageError("no parameter block named '" + name + "'");
  }

  /// Scalar parameter names in flat order, e.g. "w[0]", "w[1]", "sigma".
  std::vector<std::string> parameter_names() const {
    std::vector<std::string> names;
    for (const auto& b : blocks_) {
      if (!b.is_vector) {
        names.push_back(b.name);
        continue;
      }
      for (Index i = 0; i < b.size; ++i)
        names.push_back(b.name + "[" + std::to_string(i) + "]");
    }
    return names;
  }

  ad::Var log_joint(ad::Tape& tape, const ad::Var& zeta, const Dataset& batch) const {
    if (zeta.rows() != dimension_ || !zeta.is_vector()) {
      throw UsageError("log_joint: expected an unconstrained vector of length " +
                       std::to_string(dimension_) + ", got " +
                       std::to_string(zeta.rows()) + "x" + std::to_string(zeta.cols()));
    }
    ParamValues params;
    ad::Var total = tape.variable(0.0);
    for (const auto& b : blocks_) {
      const ad::Var z = ad::segment(zeta, b.offset, b.size);
      const ad::Var theta = b.transform.inverse(z);
      params.emplace(b.name, theta);
      total = total + b.prior.log_pdf(theta) + b.transform.log_abs_det_jacobian(z);
    }
    if (likelihood_) {
      if (batch.size() < 1) throw UsageError("log_joint: empty batch");
      const ad::Var ll = likelihood_(tape, params, batch);
      if (batch.size() == data_.size()) {
        total = total + ll;
      } else {
        total = total + static_cast<double>(data_.size()) / static_cast<double>(batch.size()) * ll;
      }
    }
    return total;
  }

  ad::Var log_joint(ad::Tape& tape, const ad::Var& zeta) const {
    return log_joint(tape, zeta, data_);
  }

  /// Value and gradient at `zeta`.  Non-finite densities (including a
  /// failed Cholesky) come back as -inf with a zero gradient.
  double log_density_gradient(const Vector& zeta, Vector& gradient,
                              const Dataset& batch) const {
    gradient.setZero(dimension_);
    ad::Tape tape;
    const ad::Var z = tape.variable(zeta);
    double value;
    ad::Var lp;
    try {
      lp = log_joint(tape, z, batch);
      value = lp.scalar();
    } catch (const NumericError&) {
      return kNegInf;
    }
    if (!std::isfinite(value)) return kNegInf;
    const ad::Gradient g = tape.backward(lp);
    gradient = g.wrt(z);
    return value;
  }

  double log_density_gradient(const Vector& zeta, Vector& gradient) const {
    return log_density_gradient(zeta, gradient, data_);
  }

  double log_density(const Vector& zeta, const Dataset& batch) const {
    ad::Tape tape;
    try {
      const double v = log_joint(tape, tape.variable(zeta), batch).scalar();
      return std::isfinite(v) ? v : kNegInf;
    } catch (const NumericError&) {
      return kNegInf;
    }
  }

  double log_density(const Vector& zeta) const { return log_density(zeta, data_); }

  Vector init_point() const { return Vector::Zero(dimension_); }

  /// Flat constrained values for an unconstrained point.
  Vector constrain(const Vector& zeta) const {
    check_length(zeta);
    Vector out(dimension_);
    for (const auto& b : blocks_)
      for (Index i = b.offset; i < b.offset + b.size; ++i)
        out(i) = b.transform.inverse(zeta(i));
    return out;
  }

  std::map<std::string, Vector> unflatten(const Vector& zeta) const {
    const Vector theta = constrain(zeta);
    std::map<std::string, Vector> out;
    for (const auto& b : blocks_) out.emplace(b.name, theta.segment(b.offset, b.size));
    return out;
  }

  Vector flatten(const std::map<std::string, Vector>& values) const {
    std::set<std::string> missing, extra;
    for (const auto& b : blocks_)
      if (!values.contains(b.name)) missing.insert(b.name);
    for (const auto& [name, v] : values) {
      const bool known = std::any_of(blocks_.begin(), blocks_.end(),
                                     [&](const ParamBlock& b) { return b.name == name; });
      if (!known) extra.insert(name);
    }
    if (!missing.empty() || !extra.empty()) {
      std::string msg = "flatten: block names do not match the model;";
      if (!missing.empty()) msg += " missing: " + join(missing);
      if (!extra.empty()) msg += " unknown: " + join(extra);
      throw UsageError(msg);
    }
    Vector zeta(dimension_);
    for (const auto& b : blocks_) {
      const Vector& v = values.at(b.name);
      if (v.size() != b.size)
        throw UsageError("flatten: block '" + b.name + "' expects " +
                         std::to_string(b.size) + " values, got " + std::to_string(v.size()));
      for (Index i = 0; i < b.size; ++i) zeta(b.offset + i) = b.transform.forward(v(i));
    }
    return zeta;
  }

 private:
  friend class ModelBuilder;

  void check_length(const Vector& zeta) const {
    if (zeta.size() != dimension_)
      throw UsageError("expected an unconstrained vector of length " +
                       std::to_string(dimension_) + ", got " + std::to_string(zeta.size()));
  }

  static std::string join(const std::set<std::string>& names) {
    std::string out;
    for (const auto& n : names) out += (out.empty() ? "" : ", ") + n;
    return out;
  }

  std::vector<ParamBlock> blocks_;
  Likelihood likelihood_;
  Dataset data_;
  Index dimension_ = 0;
};

class ModelBuilder {
 public:
  ModelBuilder& scalar(const std::string& name, const Distribution& prior) {
    return add(name, 1, false, prior);
  }

  ModelBuilder& vector(const std::string& name, Index size, const Distribution& prior) {
    if (size < 1) throw UsageError("vector block '" + name + "' must have size >= 1");
    return add(name, size, true, prior);
  }

  /// Data is validated here, once; inference loops assume it is clean.
  ModelBuilder& likelihood(Dataset data, Likelihood fn) {
    if (data.X.rows() != data.y.size())
      throw DataError("dataset has " + std::to_string(data.X.rows()) + " rows in X but " +
                      std::to_string(data.y.size()) + " targets");
    for (Index j = 0; j < data.X.cols(); ++j)
      for (Index i = 0; i < data.X.rows(); ++i)
        if (!std::isfinite(data.X(i, j)))
          throw DataError("non-finite value in X at row " + std::to_string(i) +
                          ", column " + std::to_string(j));
    for (Index i = 0; i < data.y.size(); ++i)
      if (!std::isfinite(data.y(i)))
        throw DataError("non-finite target at row " + std::to_string(i));
    graph_.data_ = std::move(data);
    graph_.likelihood_ = std::move(fn);
    return *this;
  }

  ModelGraph build() const& { return graph_; }
  ModelGraph build() && { return std::move(graph_); }

 private:
  ModelBuilder& add(const std::string& name, Index size, bool is_vector,
                    const Distribution& prior) {
    for (const auto& b : graph_.blocks_)
      if (b.name == name) throw UsageError("duplicate parameter block '" + name + "'");
    graph_.blocks_.push_back(ParamBlock{name, size, is_vector, prior,
                                        transform_for(prior.support()),
                                        graph_.dimension_});
    graph_.dimension_ += size;
    return *this;
  }

  ModelGraph graph_;
};

}  // namespace bayeslearn
