#pragma once

#include <optional>
#include <utility>

#include "kvembed/numerics.hpp"

namespace kvembed {

using PairSet = std::vector<std::pair<RealVector, RealVector>>;

namespace detail {

inline void require_unit(const RealVector& v, const char* who) {
  const double n = l2_norm(v);
  if (std::abs(n - 1.0) > 1e-6) {
    throw Error(std::string(who) + ": input vectors must be unit-norm, got " +
                std::to_string(n));
  }
}

inline double sq_distance(const RealVector& a, const RealVector& b) {
  if (a.size() != b.size()) throw Error("metric: dimension mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

}  // namespace detail

// Mean ||x - y||^alpha over positive pairs; 0 iff every pair coincides.
inline double alignment(const PairSet& pairs, double alpha = 2.0) {
  if (pairs.empty()) throw Error("alignment: empty pair set");
  double sum = 0.0;
  for (const auto& [x, y] : pairs) {
    detail::require_unit(x, "alignment");
    detail::require_unit(y, "alignment");
    sum += std::pow(std::sqrt(detail::sq_distance(x, y)), alpha);
  }
  return sum / static_cast<double>(pairs.size());
}

// log mean over ordered distinct pairs of exp(-t ||x - y||^2). More negative
// means the points spread further over the hypersphere.
inline double uniformity(const std::vector<RealVector>& points, double t = 2.0) {
  if (points.size() < 2) {
    throw Error("uniformity: need at least 2 points, got " +
                std::to_string(points.size()));
  }
  for (const auto& p : points) detail::require_unit(p, "uniformity");
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    for (std::size_t j = 0; j < points.size(); ++j) {
      if (i == j) continue;
      sum += std::exp(-t * detail::sq_distance(points[i], points[j]));
      ++count;
    }
  }
  return std::log(sum / static_cast<double>(count));
}

// Dot product of unit vectors, clamped to [-1, 1].
inline double cosine(const RealVector& a, const RealVector& b) {
  if (a.size() != b.size()) {
    throw Error("cosine: dimension mismatch, " + std::to_string(a.size()) +
                " vs " + std::to_string(b.size()));
  }
  const double d = dot(a, b);
  return std::min(1.0, std::max(-1.0, d));
}

struct MetricReport {
  std::optional<double> alignment;  // absent when no pair set was given
  double uniformity = 0.0;
  double alpha = 2.0;
  double t = 2.0;
  std::size_t n_points = 0;
  std::size_t n_pairs = 0;
};

}  // namespace kvembed
