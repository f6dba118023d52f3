#pragma once

#include <algorithm>
#include <optional>

#include "kvembed/model.hpp"

namespace kvembed {

// Layer set and attention bias of the virtual-prefix mechanism. Layers are
// 1-based block indices. bias may be -inf, which disables the prefix while
// keeping the re-routed code path (the zero-weight limit).
struct RerouteConfig {
  std::vector<std::size_t> layers;
  double bias = 1.0;
  bool enabled = true;

  static RerouteConfig off() { return RerouteConfig{{}, 0.0, false}; }

  bool is_active() const { return enabled && !layers.empty(); }

  void validate(std::size_t n_layers) const {
    if (std::isnan(bias) || bias == std::numeric_limits<double>::infinity()) {
      throw Error("RerouteConfig: bias must be finite or -inf");
    }
    for (std::size_t l : layers) {
      if (l < 1 || l > n_layers) {
        throw Error("RerouteConfig: layer " + std::to_string(l) +
                    " outside 1.." + std::to_string(n_layers));
      }
    }
  }
};

// Post-softmax attention weights of one (layer, head). At a re-routed layer
// the matrix is n x (n+1) with column 0 = virtual prefix; otherwise n x n
// lower-triangular. Masked entries are exactly 0.
struct AttentionDump {
  std::size_t layer = 0;
  std::size_t head = 0;
  bool rerouted = false;
  RealMatrix weights;
};

struct HeadAttention {
  RealMatrix context;  // n x head_dim
  RealMatrix weights;  // n x (n+1), column 0 = virtual prefix
};

// Single-head attention with the final position's cached KV pair prepended as
// a biased virtual prefix. For query i the candidates are the prefix followed
// by real positions j <= i. k_last/v_last must be row n of K/V as cached.
inline HeadAttention rerouted_attention(const RealMatrix& q,
                                        const RealMatrix& k,
                                        const RealMatrix& v,
                                        const RealVector& k_last,
                                        const RealVector& v_last, double bias) {
  const std::size_t n = k.rows;
  const std::size_t hd = k.cols;
  if (q.rows != n || q.cols != hd || !v.same_shape(k)) {
    throw Error("rerouted_attention: Q/K/V shape mismatch: q " + shape_str(q) +
                ", k " + shape_str(k) + ", v " + shape_str(v));
  }
  if (k_last.size() != hd || v_last.size() != hd) {
    throw Error("rerouted_attention: prefix dimension mismatch");
  }
  if (n == 0) throw Error("rerouted_attention: empty sequence");
  for (std::size_t j = 0; j < hd; ++j) {
    if (k_last[j] != k.at(n - 1, j) || v_last[j] != v.at(n - 1, j)) {
      throw Error("rerouted_attention: prefix is not row n of K/V as cached");
    }
  }

  const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));
  HeadAttention out;
  out.context = RealMatrix(n, hd);
  out.weights = RealMatrix(n, n + 1);
  for (std::size_t i = 0; i < n; ++i) {
    const RealVector qi = q.row(i);
    RealVector scores;
    scores.reserve(i + 2);
    scores.push_back(dot(qi, k_last) * inv_sqrt_hd);
    for (std::size_t j = 0; j <= i; ++j) {
      scores.push_back(dot(qi, k.row(j)) * inv_sqrt_hd);
    }
    const RealVector alpha = softmax_with_bias(scores, bias);
    out.weights.at(i, 0) = alpha[0];
    for (std::size_t d = 0; d < hd; ++d) {
      out.context.at(i, d) = alpha[0] * v_last[d];
    }
    for (std::size_t j = 0; j <= i; ++j) {
      out.weights.at(i, j + 1) = alpha[j + 1];
      const double wgt = alpha[j + 1];
      const double* vr = v.row_ptr(j);
      for (std::size_t d = 0; d < hd; ++d) out.context.at(i, d) += wgt * vr[d];
    }
  }
  return out;
}

namespace detail {

inline RerouteSpec make_spec(const RerouteConfig& rc, std::size_t n_layers) {
  rc.validate(n_layers);
  RerouteSpec spec;
  if (!rc.is_active()) return spec;
  spec.active = true;
  spec.bias = rc.bias;
  spec.layer_mask.assign(n_layers, false);
  for (std::size_t l : rc.layers) spec.layer_mask[l - 1] = true;
  return spec;
}

class DumpCollector : public AttentionObserver {
 public:
  DumpCollector(std::optional<std::size_t> layer, std::optional<std::size_t> head)
      : layer_(layer), head_(head) {}

  bool wants(std::size_t layer, std::size_t head) const override {
    return (!layer_ || *layer_ == layer) && (!head_ || *head_ == head);
  }

  void on_attention(std::size_t layer, std::size_t head, bool rerouted,
                    RealMatrix weights) override {
    dumps_.push_back(AttentionDump{layer, head, rerouted, std::move(weights)});
  }

  std::vector<AttentionDump> take() { return std::move(dumps_); }

 private:
  std::optional<std::size_t> layer_;
  std::optional<std::size_t> head_;
  std::vector<AttentionDump> dumps_;
};

}  // namespace detail

// Single forward pass with the final token's per-head KV pair prepended as a
// biased virtual prefix at each configured layer. With no active layers the
// result is identical to forward_standard.
inline ForwardTrace forward_rerouted(const Weights& w, const ModelConfig& cfg,
                                     const TokenSequence& tokens,
                                     const RerouteConfig& rc) {
  return detail::run_forward(w, cfg, tokens,
                             detail::make_spec(rc, cfg.n_layers), nullptr);
}

// Runs the pass with attention recording switched on and returns the dumps
// for every (layer, head) passing the optional filters. Recording does not
// perturb hidden states.
inline std::vector<AttentionDump> collect_attention(
    const Weights& w, const ModelConfig& cfg, const TokenSequence& tokens,
    const RerouteConfig& rc, std::optional<std::size_t> layer = std::nullopt,
    std::optional<std::size_t> head = std::nullopt) {
  if (layer && (*layer < 1 || *layer > cfg.n_layers)) {
    throw Error("collect_attention: layer " + std::to_string(*layer) +
                " outside 1.." + std::to_string(cfg.n_layers));
  }
  if (head && *head >= cfg.n_heads) {
    throw Error("collect_attention: head " + std::to_string(*head) +
                " outside 0.." + std::to_string(cfg.n_heads - 1));
  }
  detail::DumpCollector collector(layer, head);
  detail::run_forward(w, cfg, tokens, detail::make_spec(rc, cfg.n_layers),
                      &collector);
  return collector.take();
}

inline AttentionDump dump_attention(const Weights& w, const ModelConfig& cfg,
                                    const TokenSequence& tokens,
                                    const RerouteConfig& rc, std::size_t layer,
                                    std::size_t head) {
  auto dumps = collect_attention(w, cfg, tokens, rc, layer, head);
  if (dumps.size() != 1) {
    throw Error("dump_attention: expected one dump, got " +
                std::to_string(dumps.size()));
  }
  return std::move(dumps.front());
}

}  // namespace kvembed
