#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <iterator>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "errors.hpp"

namespace bayeslearn {

struct BlockView {
  std::string name;
  Eigen::Index offset = 0;
  Eigen::Index size = 1;
};

/// Draws and sampler metadata for one chain.  Rows of `draws` are
/// iterations, columns are flat constrained parameters.
struct ChainDraws {
  Eigen::MatrixXd draws;
  std::vector<std::uint8_t> divergent;
  std::vector<int> tree_depth;
  std::vector<double> step_size;
  std::vector<double> accept_stat;
  std::vector<double> energy;
  double adapted_step_size = 0.0;
  Eigen::VectorXd inverse_metric;
};

/// MCMC output in constrained space, chains ordered by index.
struct Trace {
  std::vector<std::string> names;
  std::vector<BlockView> blocks;
  std::size_t warmup = 0;
  bool includes_warmup = false;
  std::vector<ChainDraws> chains;
  std::vector<std::string> warnings;

  std::size_t num_chains() const noexcept { return chains.size(); }
  std::size_t num_draws() const {
    return chains.empty() ? 0 : static_cast<std::size_t>(chains.front().draws.rows());
  }
  std::size_t dimension() const noexcept { return names.size(); }

  std::size_t parameter_index(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return i;
    throw UsageError("trace has no parameter named '" + name + "'");
  }

  /// iterations x chains for one scalar parameter.
  Eigen::MatrixXd parameter(std::size_t j) const {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(num_draws()),
                        static_cast<Eigen::Index>(num_chains()));
    for (std::size_t c = 0; c < chains.size(); ++c)
      out.col(static_cast<Eigen::Index>(c)) = chains[c].draws.col(static_cast<Eigen::Index>(j));
    return out;
  }

  Eigen::MatrixXd parameter(const std::string& name) const {
    return parameter(parameter_index(name));
  }

  /// Per-chain draws of one named block (iterations x block size).
  std::vector<Eigen::MatrixXd> block(const std::string& name) const {
    for (const auto& b : blocks) {
      if (b.name != name) continue;
      std::vector<Eigen::MatrixXd> out;
      for (const auto& c : chains) out.emplace_back(c.draws.middleCols(b.offset, b.size));
      return out;
    }
    throw UsageError("trace has no block named '" + name + "'");
  }

  /// All chains stacked by chain index: (chains * draws) x dimension.
  Eigen::MatrixXd pooled() const {
    const auto n = static_cast<Eigen::Index>(num_draws());
    Eigen::MatrixXd out(n * static_cast<Eigen::Index>(num_chains()),
                        static_cast<Eigen::Index>(dimension()));
    for (std::size_t c = 0; c < chains.size(); ++c)
      out.middleRows(static_cast<Eigen::Index>(c) * n, n) = chains[c].draws;
    return out;
  }

  /// Copy holding only post-warmup iterations.
  Trace without_warmup() const {
    if (!includes_warmup) return *this;
    Trace out = *this;
    out.includes_warmup = false;
    const auto w = static_cast<Eigen::Index>(warmup);
    for (auto& c : out.chains) {
      const Eigen::Index keep = std::max<Eigen::Index>(c.draws.rows() - w, 0);
      c.draws = Eigen::MatrixXd(c.draws.bottomRows(keep));
      const auto drop = [&](auto& v) {
        v.erase(v.begin(), v.begin() + std::min<std::ptrdiff_t>(w, std::ssize(v)));
      };
      drop(c.divergent);
      drop(c.tree_depth);
      drop(c.step_size);
      drop(c.accept_stat);
      drop(c.energy);
    }
    return out;
  }

  std::size_t divergences() const {
    std::size_t n = 0;
    for (const auto& c : chains)
      for (auto d : c.divergent) n += d;
    return n;
  }
};

}  // namespace bayeslearn
