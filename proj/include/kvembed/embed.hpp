#pragma once

#include <optional>

#include "kvembed/parallel.hpp"
#include "kvembed/reroute.hpp"

namespace kvembed {

enum class Role { context, query };
enum class Strategy { kv_embedding, last_token, mean, prompteol, echo };
enum class Pooling { last, mean, hybrid };

inline const char* to_string(Role r) {
  return r == Role::context ? "context" : "query";
}

inline const char* to_string(Strategy s) {
  switch (s) {
    case Strategy::kv_embedding: return "kv_embedding";
    case Strategy::last_token: return "last_token";
    case Strategy::mean: return "mean";
    case Strategy::prompteol: return "prompteol";
    case Strategy::echo: return "echo";
  }
  return "?";
}

inline const char* to_string(Pooling p) {
  switch (p) {
    case Pooling::last: return "last";
    case Pooling::mean: return "mean";
    case Pooling::hybrid: return "hybrid";
  }
  return "?";
}

// `"{Prefix}: {text}" Compress the {Prefix} in one word:` with Prefix =
// "Context" for documents and "Query" for queries. Byte-exact, applied
// exactly once per pipeline run.
inline std::string apply_prompt(const std::string& text, Role role) {
  const std::string prefix = role == Role::context ? "Context" : "Query";
  return "\"" + prefix + ": " + text + "\" Compress the " + prefix +
         " in one word:";
}

// Pooling over rows [first, last] of the final hidden states (0-based,
// inclusive). last -> final row; mean -> columnwise mean; hybrid ->
// (last + mean) / 2. Normalization is applied by the caller afterwards.
inline RealVector pool_span(const RealMatrix& hidden_final, Pooling mode,
                            std::size_t first, std::size_t last) {
  if (hidden_final.rows == 0) throw Error("pool: empty hidden-state matrix");
  if (first > last || last >= hidden_final.rows) {
    throw Error("pool: invalid row span");
  }
  const std::size_t d = hidden_final.cols;
  RealVector last_row = hidden_final.row(last);
  if (mode == Pooling::last) return last_row;
  RealVector mean_row(d, 0.0);
  for (std::size_t i = first; i <= last; ++i) {
    const double* row = hidden_final.row_ptr(i);
    for (std::size_t j = 0; j < d; ++j) mean_row[j] += row[j];
  }
  const double inv = 1.0 / static_cast<double>(last - first + 1);
  for (double& v : mean_row) v *= inv;
  if (mode == Pooling::mean) return mean_row;
  for (std::size_t j = 0; j < d; ++j) {
    mean_row[j] = (mean_row[j] + last_row[j]) / 2.0;
  }
  return mean_row;
}

inline RealVector pool(const RealMatrix& hidden_final, Pooling mode) {
  return pool_span(hidden_final, mode, 0, hidden_final.rows - 1);
}

struct EmbedRequest {
  std::string id;
  std::string text;
  Role role = Role::query;
  Strategy strategy = Strategy::kv_embedding;
  std::optional<Pooling> pooling;  // absent -> strategy default
  std::optional<RerouteConfig> reroute;
  bool echo_mean_second_copy = false;
  // Restrict the mean component of pooling to the original text bytes,
  // excluding prompt template and BOS/EOS positions. Default pools over the
  // whole prompted sequence. Ignored for empty texts.
  bool restrict_mean_to_text = false;

  Pooling effective_pooling() const {
    if (pooling) return *pooling;
    switch (strategy) {
      case Strategy::kv_embedding: return Pooling::hybrid;
      case Strategy::last_token: return Pooling::last;
      case Strategy::mean: return Pooling::mean;
      case Strategy::prompteol: return Pooling::last;
      case Strategy::echo: return Pooling::last;
    }
    return Pooling::last;
  }

  void validate() const {
    if (strategy == Strategy::kv_embedding && !reroute) {
      throw Error("embed: kv_embedding requires a reroute config");
    }
    if ((strategy == Strategy::echo || strategy == Strategy::prompteol) &&
        reroute) {
      throw Error("embed: echo/prompteol must not carry a reroute config");
    }
  }
};

// Unit-norm embedding plus provenance.
struct Embedding {
  std::string id;
  RealVector vector;
  Strategy strategy = Strategy::kv_embedding;
  Pooling pooling = Pooling::hybrid;
  std::vector<std::size_t> layers;
  double bias = 0.0;
  std::uint64_t prompt_hash = 0;  // FNV-1a of the exact tokenized string
};

inline Embedding embed(const Weights& w, const ModelConfig& cfg,
                       const EmbedRequest& req) {
  req.validate();
  const Pooling pooling = req.effective_pooling();

  std::string input;
  switch (req.strategy) {
    case Strategy::kv_embedding:
    case Strategy::prompteol:
      input = apply_prompt(req.text, req.role);
      break;
    case Strategy::echo:
      input = req.text + req.text;
      break;
    default:
      input = req.text;
  }
  // Reject over-length before any compute; for echo this mirrors the doubled
  // sequence cost.
  if (input.size() + 2 > cfg.max_seq) {
    throw Error("embed: input of " + std::to_string(input.size()) +
                " bytes exceeds max_seq-2 = " + std::to_string(cfg.max_seq - 2) +
                (req.strategy == Strategy::echo ? " (echo doubles the text)"
                                                : ""));
  }
  const TokenSequence tokens = tokenize(input, cfg);

  ForwardTrace trace;
  if (req.strategy == Strategy::kv_embedding) {
    trace = forward_rerouted(w, cfg, tokens, *req.reroute);
  } else {
    trace = forward_standard(w, cfg, tokens);
  }
  const RealMatrix& final_hidden = trace.hidden.back();

  RealVector pooled;
  if (req.strategy == Strategy::echo && req.echo_mean_second_copy) {
    // Mean over everything after the first copy (second copy + EOS).
    const std::size_t second_start = 1 + req.text.size();
    pooled = pool_span(final_hidden, Pooling::mean, second_start,
                       final_hidden.rows - 1);
  } else if (req.restrict_mean_to_text && pooling != Pooling::last &&
             !req.text.empty()) {
    // Rows holding the original text bytes inside the tokenized input.
    std::size_t span_first = 1;  // after BOS
    std::size_t span_len = req.text.size();
    if (req.strategy == Strategy::kv_embedding ||
        req.strategy == Strategy::prompteol) {
      const std::string prefix =
          req.role == Role::context ? "Context" : "Query";
      span_first = 1 + 1 + prefix.size() + 2;  // BOS, quote, prefix, ": "
    } else if (req.strategy == Strategy::echo) {
      span_len = 2 * req.text.size();
    }
    const RealVector mean_part = pool_span(final_hidden, Pooling::mean,
                                           span_first,
                                           span_first + span_len - 1);
    if (pooling == Pooling::mean) {
      pooled = mean_part;
    } else {
      pooled = mean_part;
      const RealVector last_row = final_hidden.row(final_hidden.rows - 1);
      for (std::size_t j = 0; j < pooled.size(); ++j) {
        pooled[j] = (pooled[j] + last_row[j]) / 2.0;
      }
    }
  } else {
    pooled = pool(final_hidden, pooling);
  }

  const double norm = l2_norm(pooled);
  if (!(norm > 0.0)) throw Error("embed: pooled vector has zero norm");
  for (double& v : pooled) v /= norm;

  Embedding out;
  out.id = req.id;
  out.vector = std::move(pooled);
  out.strategy = req.strategy;
  out.pooling = pooling;
  if (req.strategy == Strategy::kv_embedding && req.reroute->is_active()) {
    out.layers = req.reroute->layers;
    out.bias = req.reroute->bias;
  }
  out.prompt_hash = fnv1a64(input);
  return out;
}

struct BatchItem {
  std::optional<Embedding> embedding;
  std::string error;  // empty on success
};

// Order-preserving batch embedding; per-item failures are reported in-place
// and the rest of the batch still completes.
inline std::vector<BatchItem> embed_batch(const Weights& w,
                                          const ModelConfig& cfg,
                                          const std::vector<EmbedRequest>& reqs) {
  std::vector<BatchItem> out(reqs.size());
  parallel_for(reqs.size(), [&](std::size_t i) {
    try {
      out[i].embedding = embed(w, cfg, reqs[i]);
    } catch (const std::exception& e) {
      out[i].error = "request " + std::to_string(i) + ": " + e.what();
    }
  });
  return out;
}

}  // namespace kvembed
