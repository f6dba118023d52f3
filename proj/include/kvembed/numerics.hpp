#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace kvembed {

// Thrown for rejected inputs: shape mismatches, malformed files, bad configs.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

using RealVector = std::vector<double>;

// Dense row-major matrix of 64-bit reals.
struct RealMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  RealMatrix() = default;
  RealMatrix(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), data(r * c, fill) {}

  double& at(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double at(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

  double* row_ptr(std::size_t i) { return data.data() + i * cols; }
  const double* row_ptr(std::size_t i) const { return data.data() + i * cols; }

  RealVector row(std::size_t i) const {
    return RealVector(row_ptr(i), row_ptr(i) + cols);
  }

  void set_row(std::size_t i, const RealVector& v) {
    for (std::size_t j = 0; j < cols; ++j) at(i, j) = v[j];
  }

  bool same_shape(const RealMatrix& o) const {
    return rows == o.rows && cols == o.cols;
  }
};

inline std::string shape_str(const RealMatrix& m) {
  return std::to_string(m.rows) + "x" + std::to_string(m.cols);
}

inline RealMatrix matmul(const RealMatrix& a, const RealMatrix& b) {
  if (a.cols != b.rows) {
    throw Error("matmul: dimension mismatch, lhs " + shape_str(a) + " vs rhs " +
                shape_str(b));
  }
  RealMatrix out(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double* arow = a.row_ptr(i);
    double* orow = out.row_ptr(i);
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double aik = arow[k];
      const double* brow = b.row_ptr(k);
      for (std::size_t j = 0; j < b.cols; ++j) orow[j] += aik * brow[j];
    }
  }
  return out;
}

inline double dot(const RealVector& a, const RealVector& b) {
  if (a.size() != b.size()) {
    throw Error("dot: dimension mismatch, " + std::to_string(a.size()) +
                " vs " + std::to_string(b.size()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double l2_norm(const RealVector& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

// Softmax with a scalar bias added to the logit at index 0 before
// exponentiation. A bias of -inf disables index 0 (used when the virtual
// prefix is switched off); callers without a prefix pass bias = 0.
inline RealVector softmax_with_bias(const RealVector& scores,
                                    double bias_at_index_0) {
  if (scores.empty()) throw Error("softmax_with_bias: empty score vector");
  if (std::isnan(bias_at_index_0) ||
      bias_at_index_0 == std::numeric_limits<double>::infinity()) {
    throw Error("softmax_with_bias: bias must be finite or -inf");
  }
  for (double s : scores) {
    if (!std::isfinite(s)) throw Error("softmax_with_bias: non-finite score");
  }
  RealVector shifted = scores;
  shifted[0] += bias_at_index_0;

  double mx = -std::numeric_limits<double>::infinity();
  for (double s : shifted) mx = std::max(mx, s);
  if (!(mx > -std::numeric_limits<double>::infinity())) {
    throw Error("softmax_with_bias: all scores disabled");
  }

  RealVector out(shifted.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < shifted.size(); ++i) {
    out[i] = std::exp(shifted[i] - mx);
    sum += out[i];
  }
  for (double& w : out) w /= sum;
  return out;
}

// x / sqrt(mean(x^2) + eps) * gain, elementwise.
inline RealVector rmsnorm(const RealVector& x, const RealVector& gain,
                          double eps) {
  if (x.size() != gain.size()) {
    throw Error("rmsnorm: dimension mismatch, x " + std::to_string(x.size()) +
                " vs gain " + std::to_string(gain.size()));
  }
  if (x.empty()) throw Error("rmsnorm: empty input");
  if (eps < 0.0) throw Error("rmsnorm: negative eps");
  double ms = 0.0;
  for (double v : x) ms += v * v;
  ms /= static_cast<double>(x.size());
  const double denom = std::sqrt(ms + eps);
  if (denom == 0.0) throw Error("rmsnorm: zero norm with eps=0");
  RealVector out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] / denom * gain[i];
  return out;
}

// Rotary position encoding: rotates pair (x[2j], x[2j+1]) by
// position * theta_base^(-2j/dim). position is the token's rotary phase
// index; fractional values are accepted so angles can be probed directly.
inline RealVector rope_rotate(const RealVector& x, double position,
                              double theta_base) {
  if (x.size() % 2 != 0) {
    throw Error("rope_rotate: dimension must be even, got " +
                std::to_string(x.size()));
  }
  if (position < 0.0) throw Error("rope_rotate: negative position");
  const std::size_t dim = x.size();
  RealVector out(dim);
  for (std::size_t j = 0; j * 2 < dim; ++j) {
    const double freq = std::pow(
        theta_base, -2.0 * static_cast<double>(j) / static_cast<double>(dim));
    const double angle = position * freq;
    const double c = std::cos(angle);
    const double s = std::sin(angle);
    const double x0 = x[2 * j];
    const double x1 = x[2 * j + 1];
    out[2 * j] = c * x0 - s * x1;
    out[2 * j + 1] = s * x0 + c * x1;
  }
  return out;
}

// FNV-1a, used for prompt provenance and file digests.
inline std::uint64_t fnv1a64(const void* bytes, std::size_t len,
                             std::uint64_t h = 1469598103934665603ull) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

inline std::uint64_t fnv1a64(const std::string& s) {
  return fnv1a64(s.data(), s.size());
}

}  // namespace kvembed
