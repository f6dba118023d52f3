#pragma once

#include <algorithm>
#include <numeric>
#include <set>

#include "kvembed/model.hpp"
#include "kvembed/parallel.hpp"

namespace kvembed {

enum class ProbePosition { first, middle, last };

inline const char* to_string(ProbePosition p) {
  switch (p) {
    case ProbePosition::first: return "first";
    case ProbePosition::middle: return "middle";
    case ProbePosition::last: return "last";
  }
  return "?";
}

struct ProbeDataset {
  RealMatrix features;  // N x F
  std::vector<int> labels;
  std::vector<std::size_t> train_idx;
  std::vector<std::size_t> val_idx;

  void validate() const {
    if (features.rows != labels.size()) {
      throw Error("probe dataset: feature rows != label count");
    }
    for (std::size_t i : train_idx) {
      for (std::size_t j : val_idx) {
        if (i == j) throw Error("probe dataset: train/validation overlap");
      }
    }
    for (int y : labels) {
      if (y < 0) throw Error("probe dataset: negative class id");
    }
  }
};

struct ProbeModel {
  RealMatrix weight;  // classes x F
  RealVector bias;    // classes
  double l2 = 0.0;
};

namespace detail {

// Multinomial cross-entropy with L2 on the weight matrix (bias excluded):
// J = -(1/N) sum log softmax(W x + b)[y] + (l2/2) ||W||_F^2.
struct LogRegProblem {
  const RealMatrix& features;
  const std::vector<int>& labels;
  const std::vector<std::size_t>& idx;
  std::size_t classes;
  double l2;

  std::size_t dim() const { return features.cols; }

  double loss(const RealMatrix& w, const RealVector& b) const {
    const std::size_t F = dim();
    double total = 0.0;
    RealVector logits(classes);
    for (std::size_t i : idx) {
      const double* x = features.row_ptr(i);
      for (std::size_t c = 0; c < classes; ++c) {
        double s = b[c];
        const double* wc = w.row_ptr(c);
        for (std::size_t f = 0; f < F; ++f) s += wc[f] * x[f];
        logits[c] = s;
      }
      double mx = logits[0];
      for (double v : logits) mx = std::max(mx, v);
      double z = 0.0;
      for (double v : logits) z += std::exp(v - mx);
      total -= logits[labels[i]] - mx - std::log(z);
    }
    total /= static_cast<double>(idx.size());
    double reg = 0.0;
    for (double v : w.data) reg += v * v;
    return total + 0.5 * l2 * reg;
  }

  void gradient(const RealMatrix& w, const RealVector& b, RealMatrix& gw,
                RealVector& gb) const {
    const std::size_t F = dim();
    gw = RealMatrix(classes, F);
    gb.assign(classes, 0.0);
    RealVector logits(classes), prob(classes);
    for (std::size_t i : idx) {
      const double* x = features.row_ptr(i);
      for (std::size_t c = 0; c < classes; ++c) {
        double s = b[c];
        const double* wc = w.row_ptr(c);
        for (std::size_t f = 0; f < F; ++f) s += wc[f] * x[f];
        logits[c] = s;
      }
      double mx = logits[0];
      for (double v : logits) mx = std::max(mx, v);
      double z = 0.0;
      for (std::size_t c = 0; c < classes; ++c) {
        prob[c] = std::exp(logits[c] - mx);
        z += prob[c];
      }
      for (std::size_t c = 0; c < classes; ++c) {
        const double g = prob[c] / z - (labels[i] == static_cast<int>(c));
        gb[c] += g;
        double* gwc = gw.row_ptr(c);
        for (std::size_t f = 0; f < F; ++f) gwc[f] += g * x[f];
      }
    }
    const double inv = 1.0 / static_cast<double>(idx.size());
    for (double& v : gw.data) v *= inv;
    for (double& v : gb) v *= inv;
    for (std::size_t c = 0; c < classes; ++c) {
      double* gwc = gw.row_ptr(c);
      const double* wc = w.row_ptr(c);
      for (std::size_t f = 0; f < F; ++f) gwc[f] += l2 * wc[f];
    }
  }
};

inline double grad_norm(const RealMatrix& gw, const RealVector& gb) {
  double s = 0.0;
  for (double v : gw.data) s += v * v;
  for (double v : gb) s += v * v;
  return std::sqrt(s);
}

// Full-batch gradient descent with Armijo backtracking; accepted steps never
// increase the loss. Zero-initialized, so the fit is deterministic.
inline ProbeModel fit_logreg(const LogRegProblem& prob, double grad_tol,
                             std::size_t max_iters) {
  ProbeModel m;
  m.weight = RealMatrix(prob.classes, prob.dim());
  m.bias.assign(prob.classes, 0.0);
  m.l2 = prob.l2;

  double loss = prob.loss(m.weight, m.bias);
  double step = 1.0;
  RealMatrix gw;
  RealVector gb;
  for (std::size_t iter = 0; iter < max_iters; ++iter) {
    prob.gradient(m.weight, m.bias, gw, gb);
    const double gn = grad_norm(gw, gb);
    if (gn < grad_tol) break;

    const double g2 = gn * gn;
    RealMatrix w_try;
    RealVector b_try;
    bool accepted = false;
    for (int halvings = 0; halvings < 60; ++halvings) {
      w_try = m.weight;
      b_try = m.bias;
      for (std::size_t k = 0; k < w_try.data.size(); ++k) {
        w_try.data[k] -= step * gw.data[k];
      }
      for (std::size_t c = 0; c < b_try.size(); ++c) {
        b_try[c] -= step * gb[c];
      }
      const double trial = prob.loss(w_try, b_try);
      if (trial <= loss - 1e-4 * step * g2) {
        m.weight = std::move(w_try);
        m.bias = std::move(b_try);
        loss = trial;
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;  // step underflowed; gradient is numerically flat
    step = std::min(step * 2.0, 1e6);
  }
  return m;
}

}  // namespace detail

inline int predict_class(const ProbeModel& m, const double* x, std::size_t F) {
  int best = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < m.weight.rows; ++c) {
    double s = m.bias[c];
    const double* wc = m.weight.row_ptr(c);
    for (std::size_t f = 0; f < F; ++f) s += wc[f] * x[f];
    if (s > best_score) {
      best_score = s;
      best = static_cast<int>(c);
    }
  }
  return best;
}

inline double probe_accuracy(const ProbeModel& m, const RealMatrix& features,
                             const std::vector<int>& labels,
                             const std::vector<std::size_t>& idx) {
  if (idx.empty()) throw Error("probe accuracy: empty index set");
  std::size_t hits = 0;
  for (std::size_t i : idx) {
    if (predict_class(m, features.row_ptr(i), features.cols) == labels[i]) {
      ++hits;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(idx.size());
}

// Six log-spaced regularization strengths over [1e-4, 1e1].
inline std::vector<double> default_l2_grid() {
  return {1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0};
}

struct LogRegOptions {
  double grad_tol = 1e-6;
  std::size_t max_iters = 10000;
  std::size_t cv_folds = 5;
};

// Fits a multinomial logistic regression on the train split; the L2 strength
// is picked by k-fold cross-validation accuracy (ties -> smaller l2).
inline std::pair<ProbeModel, double> train_logreg(
    const ProbeDataset& ds, const std::vector<double>& l2_grid,
    const LogRegOptions& opt = {}) {
  ds.validate();
  if (ds.train_idx.empty()) throw Error("train_logreg: empty train split");
  if (l2_grid.empty()) throw Error("train_logreg: empty l2 grid");

  int max_label = 0;
  std::set<int> train_classes;
  for (std::size_t i : ds.train_idx) {
    train_classes.insert(ds.labels[i]);
    max_label = std::max(max_label, ds.labels[i]);
  }
  for (int y : ds.labels) max_label = std::max(max_label, y);
  if (train_classes.size() < 2) {
    throw Error("train_logreg: train split holds a single class");
  }
  const std::size_t classes = static_cast<std::size_t>(max_label) + 1;

  // Round-robin folds over the train split in its given order.
  const std::size_t folds = std::min(opt.cv_folds, ds.train_idx.size());
  std::vector<double> cv_acc(l2_grid.size(), 0.0);
  std::vector<double> cv_count(l2_grid.size(), 0.0);
  for (std::size_t g = 0; g < l2_grid.size(); ++g) {
    std::vector<double> fold_acc(folds, -1.0);
    parallel_for(folds, [&](std::size_t f) {
      std::vector<std::size_t> fit_idx, hold_idx;
      for (std::size_t k = 0; k < ds.train_idx.size(); ++k) {
        (k % folds == f ? hold_idx : fit_idx).push_back(ds.train_idx[k]);
      }
      if (fit_idx.empty() || hold_idx.empty()) return;
      std::set<int> present;
      for (std::size_t i : fit_idx) present.insert(ds.labels[i]);
      if (present.size() < 2) return;
      detail::LogRegProblem prob{ds.features, ds.labels, fit_idx, classes,
                                 l2_grid[g]};
      const ProbeModel m =
          detail::fit_logreg(prob, opt.grad_tol, opt.max_iters);
      fold_acc[f] = probe_accuracy(m, ds.features, ds.labels, hold_idx);
    });
    for (double a : fold_acc) {
      if (a >= 0.0) {
        cv_acc[g] += a;
        cv_count[g] += 1.0;
      }
    }
    if (cv_count[g] > 0.0) cv_acc[g] /= cv_count[g];
  }

  std::size_t best = 0;
  for (std::size_t g = 1; g < l2_grid.size(); ++g) {
    if (cv_acc[g] > cv_acc[best]) best = g;  // ties keep the smaller l2
  }
  detail::LogRegProblem prob{ds.features, ds.labels, ds.train_idx, classes,
                             l2_grid[best]};
  ProbeModel model = detail::fit_logreg(prob, opt.grad_tol, opt.max_iters);
  return {std::move(model), l2_grid[best]};
}

// Per-text concatenation of every head's key vector then every head's value
// vector at one position of one layer; F = 2 * d_model.
inline RealMatrix extract_kv_features(const Weights& w, const ModelConfig& cfg,
                                      const std::vector<std::string>& texts,
                                      ProbePosition position,
                                      std::size_t layer) {
  if (layer < 1 || layer > cfg.n_layers) {
    throw Error("extract_kv_features: layer " + std::to_string(layer) +
                " outside 1.." + std::to_string(cfg.n_layers));
  }
  if (texts.empty()) throw Error("extract_kv_features: no texts");
  const std::size_t F = 2 * cfg.d_model;
  RealMatrix out(texts.size(), F);
  parallel_for(texts.size(), [&](std::size_t t) {
    const TokenSequence tokens = tokenize(texts[t], cfg);
    const ForwardTrace trace = forward_standard(w, cfg, tokens);
    const std::size_t n = tokens.size();
    std::size_t pos = 0;  // 0-based row
    switch (position) {
      case ProbePosition::first: pos = 0; break;
      case ProbePosition::middle: pos = (n + 1) / 2 - 1; break;
      case ProbePosition::last: pos = n - 1; break;
    }
    std::size_t col = 0;
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
      const double* kr = trace.keys[layer - 1][h].row_ptr(pos);
      for (std::size_t d = 0; d < cfg.head_dim; ++d) out.at(t, col++) = kr[d];
    }
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
      const double* vr = trace.values[layer - 1][h].row_ptr(pos);
      for (std::size_t d = 0; d < cfg.head_dim; ++d) out.at(t, col++) = vr[d];
    }
  });
  return out;
}

struct PositionProbeReport {
  struct Entry {
    ProbePosition position;
    double accuracy = 0.0;  // validation accuracy
    double chosen_l2 = 0.0;
  };
  std::vector<Entry> entries;
  std::size_t layer = 0;

  double accuracy(ProbePosition p) const {
    for (const auto& e : entries) {
      if (e.position == p) return e.accuracy;
    }
    throw Error("position probe report: missing position");
  }
};

// Extracts first/middle/last KV features in one forward sweep per text and
// trains a probe per position.
inline PositionProbeReport probe_positions(
    const Weights& w, const ModelConfig& cfg,
    const std::vector<std::string>& texts, const std::vector<int>& labels,
    std::size_t n_train, std::size_t layer,
    const std::vector<double>& l2_grid = default_l2_grid(),
    const LogRegOptions& opt = {}) {
  if (texts.size() != labels.size()) {
    throw Error("probe_positions: texts/labels size mismatch");
  }
  if (n_train == 0 || n_train >= texts.size()) {
    throw Error("probe_positions: train count must split the data");
  }
  if (layer < 1 || layer > cfg.n_layers) {
    throw Error("probe_positions: layer out of range");
  }

  const std::size_t F = 2 * cfg.d_model;
  RealMatrix first(texts.size(), F), middle(texts.size(), F),
      last(texts.size(), F);
  parallel_for(texts.size(), [&](std::size_t t) {
    const TokenSequence tokens = tokenize(texts[t], cfg);
    const ForwardTrace trace = forward_standard(w, cfg, tokens);
    const std::size_t n = tokens.size();
    const std::size_t rows[3] = {0, (n + 1) / 2 - 1, n - 1};
    RealMatrix* mats[3] = {&first, &middle, &last};
    for (int p = 0; p < 3; ++p) {
      std::size_t col = 0;
      for (std::size_t h = 0; h < cfg.n_heads; ++h) {
        const double* kr = trace.keys[layer - 1][h].row_ptr(rows[p]);
        for (std::size_t d = 0; d < cfg.head_dim; ++d) {
          mats[p]->at(t, col++) = kr[d];
        }
      }
      for (std::size_t h = 0; h < cfg.n_heads; ++h) {
        const double* vr = trace.values[layer - 1][h].row_ptr(rows[p]);
        for (std::size_t d = 0; d < cfg.head_dim; ++d) {
          mats[p]->at(t, col++) = vr[d];
        }
      }
    }
  });

  std::vector<std::size_t> train_idx(n_train), val_idx(texts.size() - n_train);
  std::iota(train_idx.begin(), train_idx.end(), 0);
  std::iota(val_idx.begin(), val_idx.end(), n_train);

  PositionProbeReport report;
  report.layer = layer;
  const ProbePosition positions[3] = {ProbePosition::first,
                                      ProbePosition::middle,
                                      ProbePosition::last};
  const RealMatrix* mats[3] = {&first, &middle, &last};
  for (int p = 0; p < 3; ++p) {
    ProbeDataset ds;
    ds.features = *mats[p];
    ds.labels = labels;
    ds.train_idx = train_idx;
    ds.val_idx = val_idx;
    auto [model, l2] = train_logreg(ds, l2_grid, opt);
    PositionProbeReport::Entry e;
    e.position = positions[p];
    e.accuracy = probe_accuracy(model, ds.features, ds.labels, val_idx);
    e.chosen_l2 = l2;
    report.entries.push_back(e);
  }
  return report;
}

}  // namespace kvembed
