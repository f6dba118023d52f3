#pragma once

#include <map>
#include <optional>
#include <set>

#include "kvembed/embed.hpp"
#include "kvembed/geometry_metrics.hpp"
#include "kvembed/probing.hpp"

namespace kvembed {

struct STSRecord {
  std::string text_a;
  std::string text_b;
  double gold = 0.0;
};

struct RetrievalCorpus {
  std::map<std::string, std::string> docs;     // id -> text
  std::map<std::string, std::string> queries;  // id -> text
  // query id -> (doc id -> relevance grade >= 0)
  std::map<std::string, std::map<std::string, int>> qrels;

  void validate() const {
    for (const auto& [qid, rels] : qrels) {
      if (!queries.count(qid)) {
        throw Error("qrels reference unknown query id: " + qid);
      }
      for (const auto& [did, grade] : rels) {
        if (!docs.count(did)) {
          throw Error("qrels reference unknown doc id: " + did);
        }
        if (grade < 0) throw Error("qrels grade must be >= 0");
      }
    }
  }
};

struct LabeledRecord {
  std::string text;
  int label = 0;
  bool is_train = true;
};

// Spearman rank correlation with average ranks for ties. nullopt marks the
// degenerate zero-rank-variance case instead of returning NaN.
inline std::optional<double> spearman(const RealVector& x,
                                      const RealVector& y) {
  if (x.size() != y.size()) throw Error("spearman: length mismatch");
  if (x.size() < 2) throw Error("spearman: need at least 2 observations");
  const std::size_t n = x.size();

  auto ranks = [n](const RealVector& v) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    RealVector r(n);
    std::size_t i = 0;
    while (i < n) {
      std::size_t j = i;
      while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
      const double avg = (static_cast<double>(i) + static_cast<double>(j)) /
                             2.0 +
                         1.0;
      for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
      i = j + 1;
    }
    return r;
  };

  const RealVector rx = ranks(x);
  const RealVector ry = ranks(y);
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += rx[i];
    my += ry[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = rx[i] - mx;
    const double dy = ry[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) return std::nullopt;
  return sxy / std::sqrt(sxx * syy);
}

// NDCG@k with gain 2^rel - 1 and log2(rank+1) discount. nullopt marks a
// query with no relevant documents (skipped rather than scored 0). Doc ids
// in the ranking must come from `known_docs` when that set is supplied.
inline std::optional<double> ndcg_at_k(
    const std::vector<std::string>& ranking,
    const std::map<std::string, int>& qrels, std::size_t k = 10,
    const std::set<std::string>* known_docs = nullptr) {
  if (k < 1) throw Error("ndcg: k must be >= 1");
  if (known_docs != nullptr) {
    for (const auto& id : ranking) {
      if (!known_docs->count(id)) {
        throw Error("ndcg: unknown doc id in ranking: " + id);
      }
    }
  }
  std::vector<int> grades;
  for (const auto& [id, g] : qrels) {
    (void)id;
    if (g > 0) grades.push_back(g);
  }
  if (grades.empty()) return std::nullopt;
  std::sort(grades.begin(), grades.end(), std::greater<int>());

  auto gain = [](int rel) { return std::pow(2.0, rel) - 1.0; };
  double dcg = 0.0;
  for (std::size_t r = 0; r < std::min(k, ranking.size()); ++r) {
    const auto it = qrels.find(ranking[r]);
    const int rel = it == qrels.end() ? 0 : it->second;
    dcg += gain(rel) / std::log2(static_cast<double>(r) + 2.0);
  }
  double idcg = 0.0;
  for (std::size_t r = 0; r < std::min(k, grades.size()); ++r) {
    idcg += gain(grades[r]) / std::log2(static_cast<double>(r) + 2.0);
  }
  return dcg / idcg;
}

// Embedding strategy under evaluation.
struct StrategySpec {
  Strategy strategy = Strategy::kv_embedding;
  std::optional<Pooling> pooling;
  RerouteConfig reroute = RerouteConfig::off();

  EmbedRequest request(const std::string& id, const std::string& text,
                       Role role) const {
    EmbedRequest req;
    req.id = id;
    req.text = text;
    req.role = role;
    req.strategy = strategy;
    req.pooling = pooling;
    if (strategy == Strategy::kv_embedding) req.reroute = reroute;
    return req;
  }
};

struct EvalReport {
  std::string task;
  std::string metric;
  std::optional<double> value;  // absent when degenerate
  bool degenerate = false;
  std::map<std::string, double> per_strategy;
  // config echo
  std::vector<std::size_t> layers;
  double bias = 0.0;
  std::string pooling;
  std::size_t skipped_queries = 0;
};

namespace detail {

inline std::vector<Embedding> embed_all(const Weights& w,
                                        const ModelConfig& cfg,
                                        const std::vector<EmbedRequest>& reqs) {
  std::vector<Embedding> out;
  out.reserve(reqs.size());
  auto batch = embed_batch(w, cfg, reqs);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (!batch[i].embedding) throw Error(batch[i].error);
    out.push_back(std::move(*batch[i].embedding));
  }
  return out;
}

inline void echo_config(EvalReport& r, const StrategySpec& spec) {
  if (spec.strategy == Strategy::kv_embedding && spec.reroute.is_active()) {
    r.layers = spec.reroute.layers;
    r.bias = spec.reroute.bias;
  }
  EmbedRequest probe;
  probe.strategy = spec.strategy;
  probe.pooling = spec.pooling;
  r.pooling = to_string(probe.effective_pooling());
}

}  // namespace detail

// Embeds both sides as queries and reports Spearman correlation between the
// pairwise cosine similarities and the gold scores.
inline EvalReport eval_sts(const Weights& w, const ModelConfig& cfg,
                           const std::vector<STSRecord>& records,
                           const StrategySpec& spec) {
  if (records.size() < 2) throw Error("eval_sts: need at least 2 records");
  std::vector<EmbedRequest> reqs;
  reqs.reserve(records.size() * 2);
  for (std::size_t i = 0; i < records.size(); ++i) {
    reqs.push_back(spec.request("a" + std::to_string(i), records[i].text_a,
                                Role::query));
    reqs.push_back(spec.request("b" + std::to_string(i), records[i].text_b,
                                Role::query));
  }
  const auto embs = detail::embed_all(w, cfg, reqs);
  RealVector sims(records.size()), gold(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    sims[i] = cosine(embs[2 * i].vector, embs[2 * i + 1].vector);
    gold[i] = records[i].gold;
  }
  EvalReport r;
  r.task = "sts";
  r.metric = "spearman";
  const auto rho = spearman(sims, gold);
  if (rho) {
    r.value = *rho;
    r.per_strategy[to_string(spec.strategy)] = *rho;
  } else {
    r.degenerate = true;
  }
  detail::echo_config(r, spec);
  return r;
}

// Ranks documents by cosine (ties by doc id) and reports mean NDCG@10 over
// queries that have at least one relevant document. Documents normally embed
// with the context role; symmetric_roles embeds them as queries instead,
// which makes the encoder a single function of the text. Self-consistency
// oracles (identical query and document text must rank first) need that,
// since the role prefixes intentionally produce different embeddings for
// the same text.
inline EvalReport eval_retrieval(const Weights& w, const ModelConfig& cfg,
                                 const RetrievalCorpus& corpus,
                                 const StrategySpec& spec, std::size_t k = 10,
                                 bool symmetric_roles = false) {
  corpus.validate();
  if (corpus.docs.empty() || corpus.queries.empty()) {
    throw Error("eval_retrieval: empty docs or queries");
  }

  const Role doc_role = symmetric_roles ? Role::query : Role::context;
  std::vector<std::string> doc_ids;
  std::vector<EmbedRequest> doc_reqs;
  for (const auto& [id, text] : corpus.docs) {
    doc_ids.push_back(id);
    doc_reqs.push_back(spec.request(id, text, doc_role));
  }
  std::vector<std::string> query_ids;
  std::vector<EmbedRequest> query_reqs;
  for (const auto& [id, text] : corpus.queries) {
    query_ids.push_back(id);
    query_reqs.push_back(spec.request(id, text, Role::query));
  }
  const auto doc_embs = detail::embed_all(w, cfg, doc_reqs);
  const auto query_embs = detail::embed_all(w, cfg, query_reqs);

  std::set<std::string> known;
  for (const auto& id : doc_ids) known.insert(id);

  EvalReport r;
  r.task = "retrieval";
  r.metric = "ndcg@" + std::to_string(k);
  double sum = 0.0;
  std::size_t counted = 0;
  for (std::size_t q = 0; q < query_ids.size(); ++q) {
    std::vector<std::pair<double, std::string>> scored;
    scored.reserve(doc_ids.size());
    for (std::size_t d = 0; d < doc_ids.size(); ++d) {
      scored.emplace_back(-cosine(query_embs[q].vector, doc_embs[d].vector),
                          doc_ids[d]);
    }
    std::sort(scored.begin(), scored.end());
    std::vector<std::string> ranking;
    ranking.reserve(scored.size());
    for (const auto& [neg, id] : scored) {
      (void)neg;
      ranking.push_back(id);
    }
    static const std::map<std::string, int> kEmpty;
    const auto it = corpus.qrels.find(query_ids[q]);
    const auto score =
        ndcg_at_k(ranking, it == corpus.qrels.end() ? kEmpty : it->second, k,
                  &known);
    if (score) {
      sum += *score;
      ++counted;
    } else {
      ++r.skipped_queries;
    }
  }
  if (counted == 0) {
    r.degenerate = true;
  } else {
    r.value = sum / static_cast<double>(counted);
    r.per_strategy[to_string(spec.strategy)] = *r.value;
  }
  detail::echo_config(r, spec);
  return r;
}

// Embeds every record, trains the logistic-regression probe on the train
// split and reports test accuracy.
inline EvalReport eval_classify(const Weights& w, const ModelConfig& cfg,
                                const std::vector<LabeledRecord>& records,
                                const StrategySpec& spec,
                                const std::vector<double>& l2_grid =
                                    default_l2_grid(),
                                const LogRegOptions& opt = {}) {
  std::vector<EmbedRequest> reqs;
  reqs.reserve(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    reqs.push_back(
        spec.request(std::to_string(i), records[i].text, Role::context));
  }
  const auto embs = detail::embed_all(w, cfg, reqs);

  ProbeDataset ds;
  const std::size_t dim = embs.empty() ? 0 : embs[0].vector.size();
  ds.features = RealMatrix(records.size(), dim);
  ds.labels.resize(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    ds.features.set_row(i, embs[i].vector);
    ds.labels[i] = records[i].label;
    (records[i].is_train ? ds.train_idx : ds.val_idx).push_back(i);
  }
  if (ds.train_idx.empty() || ds.val_idx.empty()) {
    throw Error("eval_classify: need both train and test records");
  }
  auto [model, l2] = train_logreg(ds, l2_grid, opt);
  (void)l2;
  EvalReport r;
  r.task = "classification";
  r.metric = "accuracy";
  r.value = probe_accuracy(model, ds.features, ds.labels, ds.val_idx);
  r.per_strategy[to_string(spec.strategy)] = *r.value;
  detail::echo_config(r, spec);
  return r;
}

}  // namespace kvembed
