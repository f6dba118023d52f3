#pragma once

#include <algorithm>
#include <optional>
#include <set>

#include "kvembed/embed.hpp"

namespace kvembed {

struct PointCloud {
  std::vector<RealVector> points;
};

struct TwoNNOptions {
  double trim_fraction = 0.10;  // largest mu ratios dropped before the MLE sum
};

struct TwoNNResult {
  double dimension = 0.0;
  std::size_t retained = 0;            // N' points entering the sum
  std::size_t duplicates_removed = 0;  // exact duplicates merged before search
};

// TwoNN maximum-likelihood intrinsic dimension from the ratios
// mu_i = r2_i/r1_i over each point's two nearest neighbors. The largest
// trim_fraction of ratios is discarded as heavy-tail outliers; they enter
// the likelihood only through the censoring term (N-N') log mu_(N'), which
// keeps the estimator unbiased under trimming. Exact duplicates are merged
// first so r1 > 0.
inline TwoNNResult twonn_estimate(const PointCloud& cloud,
                                  const TwoNNOptions& opt = {}) {
  if (opt.trim_fraction < 0.0 || opt.trim_fraction >= 1.0) {
    throw Error("twonn: trim fraction must be in [0, 1)");
  }
  const std::size_t n_in = cloud.points.size();
  if (n_in < 3) {
    throw Error("twonn: need at least 3 points, got " + std::to_string(n_in));
  }
  const std::size_t dim = cloud.points[0].size();
  for (const auto& p : cloud.points) {
    if (p.size() != dim) throw Error("twonn: point dimension mismatch");
    for (double v : p) {
      if (!std::isfinite(v)) throw Error("twonn: non-finite coordinate");
    }
  }

  // Merge exact duplicates, keeping first occurrences in order.
  std::vector<const RealVector*> pts;
  pts.reserve(n_in);
  std::size_t duplicates = 0;
  for (const auto& p : cloud.points) {
    bool dup = false;
    for (const RealVector* q : pts) {
      if (*q == p) {
        dup = true;
        break;
      }
    }
    if (dup) {
      ++duplicates;
    } else {
      pts.push_back(&p);
    }
  }
  const std::size_t n = pts.size();
  if (n < 3) {
    throw Error("twonn: fewer than 3 distinct points after merging " +
                std::to_string(duplicates) + " duplicates");
  }

  // Exact brute-force neighbor search; clouds here stay in the thousands.
  std::vector<double> mu(n);
  for (std::size_t i = 0; i < n; ++i) {
    double d1 = std::numeric_limits<double>::infinity();
    double d2 = std::numeric_limits<double>::infinity();
    const RealVector& a = *pts[i];
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const RealVector& b = *pts[j];
      double s = 0.0;
      for (std::size_t k = 0; k < dim; ++k) {
        const double diff = a[k] - b[k];
        s += diff * diff;
      }
      if (s < d1) {
        d2 = d1;
        d1 = s;
      } else if (s < d2) {
        d2 = s;
      }
    }
    if (d1 <= 0.0) {
      throw std::logic_error("twonn: zero first-neighbor distance after dedup");
    }
    mu[i] = std::sqrt(d2 / d1);
  }

  // Sorted ascending before trimming and summing: permutation-invariant.
  std::sort(mu.begin(), mu.end());
  const std::size_t drop =
      static_cast<std::size_t>(std::floor(opt.trim_fraction * double(n)));
  const std::size_t retained = n - drop;
  double log_sum = 0.0;
  for (std::size_t i = 0; i < retained; ++i) log_sum += std::log(mu[i]);
  log_sum += static_cast<double>(drop) * std::log(mu[retained - 1]);
  if (!(log_sum > 0.0)) {
    throw Error("twonn: degenerate cloud (all neighbor ratios 1)");
  }
  TwoNNResult res;
  res.dimension = static_cast<double>(retained) / log_sum;
  res.retained = retained;
  res.duplicates_removed = duplicates;
  return res;
}

// Per-layer intrinsic-dimension estimates; values[0] is the embedding layer.
struct IDTrajectory {
  std::vector<double> values;  // length L+1
  std::size_t corpus_size = 0;

  std::size_t n_block_layers() const {
    return values.empty() ? 0 : values.size() - 1;
  }
};

struct IDTrajectoryDetail {
  IDTrajectory trajectory;
  std::vector<std::size_t> retained;            // N' per layer
  std::vector<std::size_t> duplicates_removed;  // per layer
};

// Runs the compression-prompted standard pass per text and estimates ID per
// layer. Block layers (1..L) use the final position's hidden state. At the
// embedding layer that position is the fixed terminator token, identical for
// every text, so layer 0 measures the mean-pooled input representation
// instead; it never participates in layer selection.
inline IDTrajectoryDetail id_trajectory_detail(const Weights& w,
                                               const ModelConfig& cfg,
                                               const std::vector<std::string>& corpus,
                                               Role role = Role::context,
                                               const TwoNNOptions& opt = {}) {
  if (corpus.size() < 3) {
    throw Error("id_trajectory: need at least 3 texts, got " +
                std::to_string(corpus.size()));
  }
  const std::size_t n_layers = cfg.n_layers;
  std::vector<std::vector<RealVector>> per_text(corpus.size());
  parallel_for(corpus.size(), [&](std::size_t t) {
    const std::string prompted = apply_prompt(corpus[t], role);
    const TokenSequence tokens = tokenize(prompted, cfg);
    const ForwardTrace trace = forward_standard(w, cfg, tokens);
    std::vector<RealVector> rows(n_layers + 1);
    const RealMatrix& embed_layer = trace.hidden[0];
    RealVector mean(cfg.d_model, 0.0);
    for (std::size_t i = 0; i < embed_layer.rows; ++i) {
      const double* row = embed_layer.row_ptr(i);
      for (std::size_t j = 0; j < cfg.d_model; ++j) mean[j] += row[j];
    }
    for (double& v : mean) v /= static_cast<double>(embed_layer.rows);
    rows[0] = std::move(mean);
    for (std::size_t l = 1; l <= n_layers; ++l) {
      rows[l] = trace.hidden[l].row(tokens.size() - 1);
    }
    per_text[t] = std::move(rows);
  });

  IDTrajectoryDetail out;
  out.trajectory.values.assign(n_layers + 1, 0.0);
  out.trajectory.corpus_size = corpus.size();
  out.retained.assign(n_layers + 1, 0);
  out.duplicates_removed.assign(n_layers + 1, 0);
  parallel_for(n_layers + 1, [&](std::size_t l) {
    PointCloud cloud;
    cloud.points.reserve(corpus.size());
    for (const auto& rows : per_text) cloud.points.push_back(rows[l]);
    const TwoNNResult r = twonn_estimate(cloud, opt);
    out.trajectory.values[l] = r.dimension;
    out.retained[l] = r.retained;
    out.duplicates_removed[l] = r.duplicates_removed;
  });
  return out;
}

inline IDTrajectory id_trajectory(const Weights& w, const ModelConfig& cfg,
                                  const std::vector<std::string>& corpus,
                                  Role role = Role::context,
                                  const TwoNNOptions& opt = {}) {
  return id_trajectory_detail(w, cfg, corpus, role, opt).trajectory;
}

enum class SelectionStrategy { window, multimin };

struct LayerSelection {
  std::vector<std::size_t> layers;  // sorted, 1-based
  SelectionStrategy strategy = SelectionStrategy::window;
  std::optional<std::size_t> l_star;
};

inline void validate_trajectory(const IDTrajectory& traj) {
  if (traj.values.size() < 2) {
    throw Error("layer selection: trajectory must cover at least one block");
  }
  for (double v : traj.values) {
    if (!(v > 0.0) || !std::isfinite(v)) {
      throw Error("layer selection: trajectory values must be positive finite");
    }
  }
}

// Contiguous window from the global ID minimum over block layers:
// layers = { l : l* <= l <= min(L, l* + floor(0.1 L)) }, ties -> lowest index.
inline LayerSelection select_layers_window(const IDTrajectory& traj) {
  validate_trajectory(traj);
  const std::size_t L = traj.n_block_layers();
  if (L < 2) throw Error("select_layers_window: need at least 2 block layers");
  std::size_t l_star = 1;
  for (std::size_t l = 2; l <= L; ++l) {
    if (traj.values[l] < traj.values[l_star]) l_star = l;
  }
  const std::size_t width = static_cast<std::size_t>(
      std::floor(0.1 * static_cast<double>(L)));
  const std::size_t hi = std::min(L, l_star + width);
  LayerSelection sel;
  sel.strategy = SelectionStrategy::window;
  sel.l_star = l_star;
  for (std::size_t l = l_star; l <= hi; ++l) sel.layers.push_back(l);
  return sel;
}

// Windows around every local minimum in the middle-to-late portion of the
// network: minima with index <= floor(0.2 L) are dropped as surface-feature
// layers; if none survive, falls back to the single-window rule.
inline LayerSelection select_layers_multimin(const IDTrajectory& traj) {
  validate_trajectory(traj);
  const std::size_t L = traj.n_block_layers();
  const auto& v = traj.values;

  std::vector<std::size_t> minima;
  for (std::size_t l = 1; l <= L; ++l) {
    const bool left_ok = v[l] < v[l - 1];
    const bool right_ok = (l == L) || (v[l] <= v[l + 1]);
    if (left_ok && right_ok) minima.push_back(l);
  }
  const std::size_t cutoff = static_cast<std::size_t>(
      std::floor(0.2 * static_cast<double>(L)));
  const std::size_t width = static_cast<std::size_t>(
      std::floor(0.1 * static_cast<double>(L)));

  std::set<std::size_t> layers;
  for (std::size_t m : minima) {
    if (m <= cutoff) continue;
    for (std::size_t l = m; l <= std::min(L, m + width); ++l) layers.insert(l);
  }
  if (layers.empty()) return select_layers_window(traj);

  LayerSelection sel;
  sel.strategy = SelectionStrategy::multimin;
  sel.layers.assign(layers.begin(), layers.end());
  return sel;
}

}  // namespace kvembed
