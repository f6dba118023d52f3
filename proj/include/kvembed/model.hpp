#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <random>
#include <utility>

#include "kvembed/numerics.hpp"

namespace kvembed {

// Reserved token ids of the byte-level tokenizer.
inline constexpr std::uint32_t kPadId = 0;
inline constexpr std::uint32_t kBosId = 1;
inline constexpr std::uint32_t kEosId = 2;
inline constexpr std::uint32_t kByteIdOffset = 3;

struct ModelConfig {
  std::size_t n_layers = 8;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t head_dim = 16;
  std::size_t d_ffn = 128;
  std::size_t vocab_size = 259;
  std::size_t max_seq = 512;
  double rope_theta = 10000.0;
  double norm_eps = 1e-5;

  void validate() const {
    if (n_layers < 1 || d_model < 1 || n_heads < 1 || head_dim < 1 ||
        d_ffn < 1 || vocab_size < 1 || max_seq < 1) {
      throw Error("ModelConfig: all counts must be >= 1");
    }
    if (n_heads * head_dim != d_model) {
      throw Error("ModelConfig: n_heads*head_dim (" +
                  std::to_string(n_heads * head_dim) + ") != d_model (" +
                  std::to_string(d_model) + ")");
    }
    if (vocab_size < 259) {
      throw Error("ModelConfig: vocab_size must cover 256 bytes + 3 specials");
    }
    if (!(rope_theta > 0.0) || !(norm_eps > 0.0)) {
      throw Error("ModelConfig: rope_theta and norm_eps must be positive");
    }
  }
};

struct LayerWeights {
  RealMatrix wq, wk, wv, wo;    // d_model x d_model
  RealMatrix ffn_up, ffn_gate;  // d_model x d_ffn
  RealMatrix ffn_down;          // d_ffn x d_model
  RealVector norm1, norm2;      // rmsnorm gains, d_model
};

struct Weights {
  RealMatrix token_embedding;  // vocab_size x d_model
  std::vector<LayerWeights> layers;
  RealVector final_norm;  // d_model

  void validate(const ModelConfig& cfg) const {
    cfg.validate();
    auto expect = [](const RealMatrix& m, std::size_t r, std::size_t c,
                     const char* name) {
      if (m.rows != r || m.cols != c) {
        throw Error(std::string("Weights: ") + name + " has shape " +
                    shape_str(m) + ", expected " + std::to_string(r) + "x" +
                    std::to_string(c));
      }
    };
    expect(token_embedding, cfg.vocab_size, cfg.d_model, "token_embedding");
    if (layers.size() != cfg.n_layers) {
      throw Error("Weights: layer count " + std::to_string(layers.size()) +
                  " != n_layers " + std::to_string(cfg.n_layers));
    }
    for (const auto& l : layers) {
      expect(l.wq, cfg.d_model, cfg.d_model, "wq");
      expect(l.wk, cfg.d_model, cfg.d_model, "wk");
      expect(l.wv, cfg.d_model, cfg.d_model, "wv");
      expect(l.wo, cfg.d_model, cfg.d_model, "wo");
      expect(l.ffn_up, cfg.d_model, cfg.d_ffn, "ffn_up");
      expect(l.ffn_gate, cfg.d_model, cfg.d_ffn, "ffn_gate");
      expect(l.ffn_down, cfg.d_ffn, cfg.d_model, "ffn_down");
      if (l.norm1.size() != cfg.d_model || l.norm2.size() != cfg.d_model) {
        throw Error("Weights: norm gain dimension mismatch");
      }
    }
    if (final_norm.size() != cfg.d_model) {
      throw Error("Weights: final norm dimension mismatch");
    }
  }
};

// Token ids at positions 1..n.
struct TokenSequence {
  std::vector<std::uint32_t> ids;
  std::size_t size() const { return ids.size(); }
};

// [BOS] + raw bytes (byte b -> id b+3) + [EOS].
inline TokenSequence tokenize(const std::string& text, const ModelConfig& cfg) {
  if (text.size() + 2 > cfg.max_seq) {
    throw Error("tokenize: text is " + std::to_string(text.size()) +
                " bytes; limit is max_seq-2 = " +
                std::to_string(cfg.max_seq - 2));
  }
  TokenSequence out;
  out.ids.reserve(text.size() + 2);
  out.ids.push_back(kBosId);
  for (unsigned char b : text) out.ids.push_back(kByteIdOffset + b);
  out.ids.push_back(kEosId);
  return out;
}

inline std::string detokenize(const TokenSequence& tokens) {
  std::string out;
  for (std::uint32_t id : tokens.ids) {
    if (id >= kByteIdOffset && id < kByteIdOffset + 256) {
      out.push_back(static_cast<char>(id - kByteIdOffset));
    }
  }
  return out;
}

// Per-layer hidden states and per-head KV matrices of one forward pass.
// hidden[0] is the embedding output; hidden[1..L] are block outputs.
// keys[l][h] / values[l][h] are n x head_dim; keys carry their RoPE phase.
struct ForwardTrace {
  std::vector<RealMatrix> hidden;
  std::vector<std::vector<RealMatrix>> keys;
  std::vector<std::vector<RealMatrix>> values;
};

struct KVCacheEntry {
  std::size_t layer = 0;
  std::size_t head = 0;
  RealVector key;
  RealVector value;
};

namespace detail {

// Deterministic standard-normal stream: Box-Muller over mt19937_64. The
// algorithm is pinned here (not std::normal_distribution) so a seed yields
// the same weights on every standard library.
class NormalSampler {
 public:
  explicit NormalSampler(std::uint64_t seed) : rng_(seed) {}

  double next() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const double u1 = uniform_open();
    const double u2 = uniform_open();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

 private:
  // Uniform in (0, 1]: 53 mantissa bits, never zero.
  double uniform_open() {
    return static_cast<double>((rng_() >> 11) + 1) * 0x1.0p-53;
  }

  std::mt19937_64 rng_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

inline void fill_normal(RealMatrix& m, NormalSampler& gen, double scale) {
  for (double& v : m.data) v = gen.next() * scale;
}

inline void fill_normal(RealVector& v, NormalSampler& gen, double scale) {
  for (double& x : v) x = gen.next() * scale;
}

}  // namespace detail

// All tensors i.i.d. normal with standard deviation 1/sqrt(d_model).
// Bit-identical for identical (cfg, seed).
inline Weights random_init(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  detail::NormalSampler gen(seed);
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
  Weights w;
  w.token_embedding = RealMatrix(cfg.vocab_size, cfg.d_model);
  detail::fill_normal(w.token_embedding, gen, scale);
  w.layers.resize(cfg.n_layers);
  for (auto& l : w.layers) {
    l.wq = RealMatrix(cfg.d_model, cfg.d_model);
    l.wk = RealMatrix(cfg.d_model, cfg.d_model);
    l.wv = RealMatrix(cfg.d_model, cfg.d_model);
    l.wo = RealMatrix(cfg.d_model, cfg.d_model);
    l.ffn_up = RealMatrix(cfg.d_model, cfg.d_ffn);
    l.ffn_gate = RealMatrix(cfg.d_model, cfg.d_ffn);
    l.ffn_down = RealMatrix(cfg.d_ffn, cfg.d_model);
    l.norm1.assign(cfg.d_model, 0.0);
    l.norm2.assign(cfg.d_model, 0.0);
    detail::fill_normal(l.wq, gen, scale);
    detail::fill_normal(l.wk, gen, scale);
    detail::fill_normal(l.wv, gen, scale);
    detail::fill_normal(l.wo, gen, scale);
    detail::fill_normal(l.ffn_up, gen, scale);
    detail::fill_normal(l.ffn_gate, gen, scale);
    detail::fill_normal(l.ffn_down, gen, scale);
    detail::fill_normal(l.norm1, gen, scale);
    detail::fill_normal(l.norm2, gen, scale);
  }
  w.final_norm.assign(cfg.d_model, 0.0);
  detail::fill_normal(w.final_norm, gen, scale);
  return w;
}

namespace detail {

// Re-routing parameters threaded through the forward pass. `layer_mask` has
// one flag per block (1-based layer l -> index l-1). An inactive spec runs
// the plain causal pass at every layer.
struct RerouteSpec {
  std::vector<bool> layer_mask;
  double bias = 0.0;
  bool active = false;

  bool rerouted(std::size_t layer_1based) const {
    return active && layer_1based - 1 < layer_mask.size() &&
           layer_mask[layer_1based - 1];
  }
};

// Observes the exact post-softmax attention rows used in a pass. Rows are
// assembled into a dump matrix: n x (n+1) with column 0 = virtual prefix at
// re-routed layers, n x n lower-triangular otherwise; masked entries stay 0.
class AttentionObserver {
 public:
  virtual ~AttentionObserver() = default;
  virtual bool wants(std::size_t layer, std::size_t head) const = 0;
  virtual void on_attention(std::size_t layer, std::size_t head,
                            bool rerouted, RealMatrix weights) = 0;
};

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }

inline ForwardTrace run_forward(const Weights& w, const ModelConfig& cfg,
                                const TokenSequence& tokens,
                                const RerouteSpec& spec,
                                AttentionObserver* obs) {
  w.validate(cfg);
  const std::size_t n = tokens.size();
  if (n < 1) throw Error("forward: empty token sequence");
  if (n > cfg.max_seq) {
    throw Error("forward: sequence length " + std::to_string(n) +
                " exceeds max_seq " + std::to_string(cfg.max_seq));
  }
  for (std::uint32_t id : tokens.ids) {
    if (id >= cfg.vocab_size) {
      throw Error("forward: token id " + std::to_string(id) +
                  " out of vocab range");
    }
  }

  const std::size_t H = cfg.n_heads;
  const std::size_t hd = cfg.head_dim;
  const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));

  ForwardTrace trace;
  trace.hidden.reserve(cfg.n_layers + 1);
  trace.keys.resize(cfg.n_layers);
  trace.values.resize(cfg.n_layers);

  RealMatrix x(n, cfg.d_model);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = w.token_embedding.row_ptr(tokens.ids[i]);
    for (std::size_t j = 0; j < cfg.d_model; ++j) x.at(i, j) = row[j];
  }
  trace.hidden.push_back(x);

  for (std::size_t l = 1; l <= cfg.n_layers; ++l) {
    const LayerWeights& lw = w.layers[l - 1];
    const bool reroute_here = spec.rerouted(l);

    RealMatrix xn(n, cfg.d_model);
    for (std::size_t i = 0; i < n; ++i) {
      xn.set_row(i, rmsnorm(x.row(i), lw.norm1, cfg.norm_eps));
    }
    const RealMatrix q_all = matmul(xn, lw.wq);
    const RealMatrix k_all = matmul(xn, lw.wk);
    const RealMatrix v_all = matmul(xn, lw.wv);

    // Split heads, rotate q/k to the row's position phase, cache k/v.
    std::vector<RealMatrix> qh(H), kh(H), vh(H);
    for (std::size_t h = 0; h < H; ++h) {
      qh[h] = RealMatrix(n, hd);
      kh[h] = RealMatrix(n, hd);
      vh[h] = RealMatrix(n, hd);
      for (std::size_t i = 0; i < n; ++i) {
        RealVector qi(hd), ki(hd);
        for (std::size_t j = 0; j < hd; ++j) {
          qi[j] = q_all.at(i, h * hd + j);
          ki[j] = k_all.at(i, h * hd + j);
          vh[h].at(i, j) = v_all.at(i, h * hd + j);
        }
        const double phase = static_cast<double>(i);  // position i+1
        qh[h].set_row(i, rope_rotate(qi, phase, cfg.rope_theta));
        kh[h].set_row(i, rope_rotate(ki, phase, cfg.rope_theta));
      }
    }
    trace.keys[l - 1] = kh;
    trace.values[l - 1] = vh;

    RealMatrix ctx(n, cfg.d_model);
    for (std::size_t h = 0; h < H; ++h) {
      const bool dump = obs != nullptr && obs->wants(l, h);
      RealMatrix dump_weights;
      if (dump) dump_weights = RealMatrix(n, reroute_here ? n + 1 : n);

      RealVector k_last, v_last;
      if (reroute_here) {
        k_last = kh[h].row(n - 1);
        v_last = vh[h].row(n - 1);
      }
      for (std::size_t i = 0; i < n; ++i) {
        const RealVector qi = qh[h].row(i);
        RealVector scores;
        scores.reserve(i + 2);
        if (reroute_here) {
          scores.push_back(dot(qi, k_last) * inv_sqrt_hd);
        }
        for (std::size_t j = 0; j <= i; ++j) {
          scores.push_back(dot(qi, kh[h].row(j)) * inv_sqrt_hd);
        }
        const RealVector alpha =
            softmax_with_bias(scores, reroute_here ? spec.bias : 0.0);

        RealVector acc(hd, 0.0);
        std::size_t base = 0;
        if (reroute_here) {
          for (std::size_t d = 0; d < hd; ++d) acc[d] += alpha[0] * v_last[d];
          base = 1;
        }
        for (std::size_t j = 0; j <= i; ++j) {
          const double wgt = alpha[base + j];
          const double* vr = vh[h].row_ptr(j);
          for (std::size_t d = 0; d < hd; ++d) acc[d] += wgt * vr[d];
        }
        for (std::size_t d = 0; d < hd; ++d) ctx.at(i, h * hd + d) = acc[d];

        if (dump) {
          if (reroute_here) {
            dump_weights.at(i, 0) = alpha[0];
            for (std::size_t j = 0; j <= i; ++j) {
              dump_weights.at(i, j + 1) = alpha[j + 1];
            }
          } else {
            for (std::size_t j = 0; j <= i; ++j) {
              dump_weights.at(i, j) = alpha[j];
            }
          }
        }
      }
      if (dump) {
        obs->on_attention(l, h, reroute_here, std::move(dump_weights));
      }
    }

    const RealMatrix attn_out = matmul(ctx, lw.wo);
    RealMatrix a(n, cfg.d_model);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < cfg.d_model; ++j) {
        a.at(i, j) = x.at(i, j) + attn_out.at(i, j);
      }
    }

    RealMatrix fn(n, cfg.d_model);
    for (std::size_t i = 0; i < n; ++i) {
      fn.set_row(i, rmsnorm(a.row(i), lw.norm2, cfg.norm_eps));
    }
    const RealMatrix up = matmul(fn, lw.ffn_up);
    const RealMatrix gate = matmul(fn, lw.ffn_gate);
    RealMatrix act(n, cfg.d_ffn);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < cfg.d_ffn; ++j) {
        act.at(i, j) = silu(gate.at(i, j)) * up.at(i, j);
      }
    }
    const RealMatrix down = matmul(act, lw.ffn_down);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < cfg.d_model; ++j) {
        x.at(i, j) = a.at(i, j) + down.at(i, j);
      }
    }
    trace.hidden.push_back(x);
  }
  return trace;
}

}  // namespace detail

// Plain causal pass: position i attends to positions <= i at every layer.
inline ForwardTrace forward_standard(const Weights& w, const ModelConfig& cfg,
                                     const TokenSequence& tokens) {
  return detail::run_forward(w, cfg, tokens, detail::RerouteSpec{}, nullptr);
}

// ---------------------------------------------------------------------------
// Weight file: little-endian, magic "KVEM", version u32=1, ModelConfig
// (counts as u64, reals as f64, declaration order), then f64 row-major
// tensors: embedding, per layer q,k,v,o,ffn-up,ffn-gate,ffn-down,norm1,norm2,
// then the final norm gain.
// ---------------------------------------------------------------------------

inline constexpr char kWeightMagic[4] = {'K', 'V', 'E', 'M'};
inline constexpr std::uint32_t kWeightVersion = 1;

namespace detail {

struct ByteWriter {
  std::ofstream out;
  explicit ByteWriter(const std::string& path)
      : out(path, std::ios::binary | std::ios::trunc) {
    if (!out) throw Error("cannot open for writing: " + path);
  }
  void bytes(const void* p, std::size_t len) {
    out.write(static_cast<const char*>(p), static_cast<std::streamsize>(len));
  }
  void u32(std::uint32_t v) { bytes(&v, 4); }
  void u64(std::uint64_t v) { bytes(&v, 8); }
  void f64(double v) { bytes(&v, 8); }
};

struct ByteReader {
  std::ifstream in;
  std::string path;
  std::uint64_t offset = 0;

  explicit ByteReader(const std::string& p) : in(p, std::ios::binary), path(p) {
    if (!in) throw Error("cannot open: " + p);
  }
  void bytes(void* p, std::size_t len, const char* what) {
    in.read(static_cast<char*>(p), static_cast<std::streamsize>(len));
    if (static_cast<std::size_t>(in.gcount()) != len) {
      throw Error(path + ": truncated at offset " + std::to_string(offset) +
                  " while reading " + what);
    }
    offset += len;
  }
  std::uint32_t u32(const char* what) {
    std::uint32_t v;
    bytes(&v, 4, what);
    return v;
  }
  std::uint64_t u64(const char* what) {
    std::uint64_t v;
    bytes(&v, 8, what);
    return v;
  }
  double f64(const char* what) {
    double v;
    bytes(&v, 8, what);
    return v;
  }
  bool at_eof() {
    in.peek();
    return in.eof();
  }
};

inline void write_tensor(ByteWriter& bw, const RealMatrix& m) {
  bw.bytes(m.data.data(), m.data.size() * sizeof(double));
}

inline void write_tensor(ByteWriter& bw, const RealVector& v) {
  bw.bytes(v.data(), v.size() * sizeof(double));
}

inline void read_tensor(ByteReader& br, RealMatrix& m, const char* what) {
  const std::uint64_t start = br.offset;
  br.bytes(m.data.data(), m.data.size() * sizeof(double), what);
  for (std::size_t i = 0; i < m.data.size(); ++i) {
    if (!std::isfinite(m.data[i])) {
      throw Error(br.path + ": non-finite value in " + what + " at offset " +
                  std::to_string(start + i * sizeof(double)));
    }
  }
}

inline void read_tensor(ByteReader& br, RealVector& v, const char* what) {
  const std::uint64_t start = br.offset;
  br.bytes(v.data(), v.size() * sizeof(double), what);
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      throw Error(br.path + ": non-finite value in " + what + " at offset " +
                  std::to_string(start + i * sizeof(double)));
    }
  }
}

}  // namespace detail

inline void save_weights(const std::string& path, const ModelConfig& cfg,
                         const Weights& w) {
  w.validate(cfg);
  detail::ByteWriter bw(path);
  bw.bytes(kWeightMagic, 4);
  bw.u32(kWeightVersion);
  bw.u64(cfg.n_layers);
  bw.u64(cfg.d_model);
  bw.u64(cfg.n_heads);
  bw.u64(cfg.head_dim);
  bw.u64(cfg.d_ffn);
  bw.u64(cfg.vocab_size);
  bw.u64(cfg.max_seq);
  bw.f64(cfg.rope_theta);
  bw.f64(cfg.norm_eps);
  detail::write_tensor(bw, w.token_embedding);
  for (const auto& l : w.layers) {
    detail::write_tensor(bw, l.wq);
    detail::write_tensor(bw, l.wk);
    detail::write_tensor(bw, l.wv);
    detail::write_tensor(bw, l.wo);
    detail::write_tensor(bw, l.ffn_up);
    detail::write_tensor(bw, l.ffn_gate);
    detail::write_tensor(bw, l.ffn_down);
    detail::write_tensor(bw, l.norm1);
    detail::write_tensor(bw, l.norm2);
  }
  detail::write_tensor(bw, w.final_norm);
  bw.out.flush();
  if (!bw.out) throw Error("write failed: " + path);
}

inline std::pair<ModelConfig, Weights> load_weights(const std::string& path) {
  detail::ByteReader br(path);
  char magic[4];
  br.bytes(magic, 4, "magic");
  if (std::memcmp(magic, kWeightMagic, 4) != 0) {
    throw Error(path + ": bad magic at offset 0");
  }
  const std::uint32_t version = br.u32("version");
  if (version != kWeightVersion) {
    throw Error(path + ": unsupported format version " +
                std::to_string(version) + " at offset 4");
  }
  ModelConfig cfg;
  const std::uint64_t cfg_offset = br.offset;
  cfg.n_layers = br.u64("n_layers");
  cfg.d_model = br.u64("d_model");
  cfg.n_heads = br.u64("n_heads");
  cfg.head_dim = br.u64("head_dim");
  cfg.d_ffn = br.u64("d_ffn");
  cfg.vocab_size = br.u64("vocab_size");
  cfg.max_seq = br.u64("max_seq");
  cfg.rope_theta = br.f64("rope_theta");
  cfg.norm_eps = br.f64("norm_eps");
  try {
    cfg.validate();
  } catch (const Error& e) {
    throw Error(path + ": invalid config block at offset " +
                std::to_string(cfg_offset) + ": " + e.what());
  }

  Weights w;
  w.token_embedding = RealMatrix(cfg.vocab_size, cfg.d_model);
  detail::read_tensor(br, w.token_embedding, "token_embedding");
  w.layers.resize(cfg.n_layers);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    auto& lw = w.layers[l];
    lw.wq = RealMatrix(cfg.d_model, cfg.d_model);
    lw.wk = RealMatrix(cfg.d_model, cfg.d_model);
    lw.wv = RealMatrix(cfg.d_model, cfg.d_model);
    lw.wo = RealMatrix(cfg.d_model, cfg.d_model);
    lw.ffn_up = RealMatrix(cfg.d_model, cfg.d_ffn);
    lw.ffn_gate = RealMatrix(cfg.d_model, cfg.d_ffn);
    lw.ffn_down = RealMatrix(cfg.d_ffn, cfg.d_model);
    lw.norm1.assign(cfg.d_model, 0.0);
    lw.norm2.assign(cfg.d_model, 0.0);
    const std::string tag = "layer " + std::to_string(l + 1);
    detail::read_tensor(br, lw.wq, (tag + " wq").c_str());
    detail::read_tensor(br, lw.wk, (tag + " wk").c_str());
    detail::read_tensor(br, lw.wv, (tag + " wv").c_str());
    detail::read_tensor(br, lw.wo, (tag + " wo").c_str());
    detail::read_tensor(br, lw.ffn_up, (tag + " ffn_up").c_str());
    detail::read_tensor(br, lw.ffn_gate, (tag + " ffn_gate").c_str());
    detail::read_tensor(br, lw.ffn_down, (tag + " ffn_down").c_str());
    detail::read_tensor(br, lw.norm1, (tag + " norm1").c_str());
    detail::read_tensor(br, lw.norm2, (tag + " norm2").c_str());
  }
  w.final_norm.assign(cfg.d_model, 0.0);
  detail::read_tensor(br, w.final_norm, "final_norm");
  if (!br.at_eof()) {
    throw Error(path + ": trailing bytes at offset " +
                std::to_string(br.offset) +
                " contradict the config-implied size");
  }
  return {cfg, std::move(w)};
}

}  // namespace kvembed
