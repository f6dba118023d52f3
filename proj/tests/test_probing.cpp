#include <catch_amalgamated.hpp>

#include <algorithm>

#include "kvembed/probing.hpp"
#include "kvembed/synthetic.hpp"
#include "test_util.hpp"

using namespace kvembed;

namespace {

ProbeDataset make_dataset(const RealMatrix& features,
                          const std::vector<int>& labels, std::size_t n_train) {
  ProbeDataset ds;
  ds.features = features;
  ds.labels = labels;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    (i < n_train ? ds.train_idx : ds.val_idx).push_back(i);
  }
  return ds;
}

// Central finite differences over every parameter of the logistic problem.
void finite_diff_gradient(const detail::LogRegProblem& prob,
                          const ProbeModel& at, RealMatrix& gw,
                          RealVector& gb, double h) {
  gw = RealMatrix(at.weight.rows, at.weight.cols);
  gb.assign(at.bias.size(), 0.0);
  ProbeModel probe = at;
  for (std::size_t k = 0; k < probe.weight.data.size(); ++k) {
    const double orig = probe.weight.data[k];
    probe.weight.data[k] = orig + h;
    const double up = prob.loss(probe.weight, probe.bias);
    probe.weight.data[k] = orig - h;
    const double dn = prob.loss(probe.weight, probe.bias);
    probe.weight.data[k] = orig;
    gw.data[k] = (up - dn) / (2.0 * h);
  }
  for (std::size_t c = 0; c < probe.bias.size(); ++c) {
    const double orig = probe.bias[c];
    probe.bias[c] = orig + h;
    const double up = prob.loss(probe.weight, probe.bias);
    probe.bias[c] = orig - h;
    const double dn = prob.loss(probe.weight, probe.bias);
    probe.bias[c] = orig;
    gb[c] = (up - dn) / (2.0 * h);
  }
}

double gradient_rel_error(const detail::LogRegProblem& prob,
                          const ProbeModel& at) {
  RealMatrix ga;
  RealVector gba;
  prob.gradient(at.weight, at.bias, ga, gba);
  RealMatrix gf;
  RealVector gbf;
  finite_diff_gradient(prob, at, gf, gbf, 1e-6);
  double num = 0.0, den = 0.0;
  for (std::size_t k = 0; k < ga.data.size(); ++k) {
    num += (ga.data[k] - gf.data[k]) * (ga.data[k] - gf.data[k]);
    den += gf.data[k] * gf.data[k];
  }
  for (std::size_t c = 0; c < gba.size(); ++c) {
    num += (gba[c] - gbf[c]) * (gba[c] - gbf[c]);
    den += gbf[c] * gbf[c];
  }
  return std::sqrt(num) / std::max(std::sqrt(den), 1.0);
}

}  // namespace

TEST_CASE("separable toy problem reaches train accuracy 1.0") {
  RealMatrix features(20, 2);
  std::vector<int> labels(20);
  for (std::size_t i = 0; i < 20; ++i) {
    const double side = i < 10 ? -1.0 : 1.0;
    features.at(i, 0) = side * (1.0 + 0.05 * static_cast<double>(i));
    features.at(i, 1) = 0.3 * side;
    labels[i] = side > 0 ? 1 : 0;
  }
  ProbeDataset ds = make_dataset(features, labels, 20);
  ds.val_idx.clear();
  auto [model, l2] = train_logreg(ds, default_l2_grid());
  CHECK(l2 >= 1e-4);
  CHECK(probe_accuracy(model, ds.features, ds.labels, ds.train_idx) == 1.0);
}

TEST_CASE("random labels stay near chance on validation") {
  std::mt19937_64 rng(900);
  RealMatrix features(600, 4);
  for (double& v : features.data) v = testutil::urand(rng);
  std::vector<int> labels(600);
  for (auto& y : labels) y = static_cast<int>(rng() % 2);
  const ProbeDataset ds = make_dataset(features, labels, 400);
  auto [model, l2] = train_logreg(ds, default_l2_grid());
  (void)l2;
  const double acc = probe_accuracy(model, ds.features, ds.labels, ds.val_idx);
  CHECK(acc > 0.4);
  CHECK(acc < 0.6);
}

TEST_CASE("analytic gradient matches central finite differences") {
  std::mt19937_64 rng(901);
  for (int trial = 0; trial < 8; ++trial) {
    const std::size_t n = 10 + rng() % 30;
    const std::size_t f = 2 + rng() % 5;
    const std::size_t classes = 2 + rng() % 3;
    RealMatrix features(n, f);
    for (double& v : features.data) v = testutil::urand(rng, -2.0, 2.0);
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
      labels[i] = static_cast<int>(rng() % classes);
    }
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    const double l2 = std::pow(10.0, testutil::urand(rng, -4.0, 1.0));
    detail::LogRegProblem prob{features, labels, idx, classes, l2};

    // random parameter point
    ProbeModel at;
    at.weight = RealMatrix(classes, f);
    for (double& v : at.weight.data) v = testutil::urand(rng);
    at.bias = testutil::random_vector(rng, classes);
    CHECK(gradient_rel_error(prob, at) < 1e-4);

    // and at the returned optimum
    const ProbeModel fitted = detail::fit_logreg(prob, 1e-6, 4000);
    CHECK(gradient_rel_error(prob, fitted) < 1e-4);
  }
}

TEST_CASE("training rejects single-class data and accepts multiway") {
  RealMatrix features(6, 2);
  std::vector<int> labels = {1, 1, 1, 1, 1, 1};
  ProbeDataset ds = make_dataset(features, labels, 4);
  CHECK_THROWS_AS(train_logreg(ds, default_l2_grid()), Error);

  std::mt19937_64 rng(902);
  RealMatrix f3(90, 3);
  std::vector<int> y3(90);
  for (std::size_t i = 0; i < 90; ++i) {
    const int c = static_cast<int>(i % 3);
    for (std::size_t j = 0; j < 3; ++j) {
      f3.at(i, j) = testutil::urand(rng, -0.2, 0.2) + (j == std::size_t(c));
    }
    y3[i] = c;
  }
  const ProbeDataset ds3 = make_dataset(f3, y3, 60);
  auto [model, l2] = train_logreg(ds3, default_l2_grid());
  (void)l2;
  CHECK(probe_accuracy(model, ds3.features, ds3.labels, ds3.val_idx) > 0.9);
}

TEST_CASE("loss is non-increasing along the fitted path") {
  // fit twice with a max-iteration ladder; later caps can never be worse
  std::mt19937_64 rng(903);
  RealMatrix features(60, 3);
  for (double& v : features.data) v = testutil::urand(rng);
  std::vector<int> labels(60);
  for (std::size_t i = 0; i < 60; ++i) labels[i] = static_cast<int>(rng() % 2);
  std::vector<std::size_t> idx(60);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  detail::LogRegProblem prob{features, labels, idx, 2, 1e-3};
  double prev = prob.loss(RealMatrix(2, 3), RealVector(2, 0.0));
  for (std::size_t iters : {1u, 5u, 20u, 100u, 400u}) {
    const ProbeModel m = detail::fit_logreg(prob, 0.0, iters);
    const double loss = prob.loss(m.weight, m.bias);
    CHECK(loss <= prev + 1e-12);
    prev = loss;
  }
}

TEST_CASE("kv feature extraction shapes and position collapse") {
  const ModelConfig cfg = testutil::tiny_config(2, 16, 2);
  const Weights w = random_init(cfg, 904);
  const std::vector<std::string> texts = {"alpha", "beta", "gamma"};

  const RealMatrix last =
      extract_kv_features(w, cfg, texts, ProbePosition::last, 2);
  REQUIRE(last.rows == texts.size());
  REQUIRE(last.cols == 2 * cfg.d_model);

  // last-position features equal the trace's row-n key/value concatenation
  const TokenSequence toks = tokenize(texts[0], cfg);
  const ForwardTrace trace = forward_standard(w, cfg, toks);
  std::size_t col = 0;
  for (std::size_t h = 0; h < cfg.n_heads; ++h) {
    const RealVector key = trace.keys[1][h].row(toks.size() - 1);
    for (std::size_t d = 0; d < cfg.head_dim; ++d) {
      CHECK(last.at(0, col++) == key[d]);
    }
  }
  for (std::size_t h = 0; h < cfg.n_heads; ++h) {
    const RealVector value = trace.values[1][h].row(toks.size() - 1);
    for (std::size_t d = 0; d < cfg.head_dim; ++d) {
      CHECK(last.at(0, col++) == value[d]);
    }
  }

  // collapsed positions: "" tokenizes to BOS,EOS (n=2), so first == middle
  const std::vector<std::string> empty_text = {""};
  const RealMatrix f =
      extract_kv_features(w, cfg, empty_text, ProbePosition::first, 1);
  const RealMatrix m =
      extract_kv_features(w, cfg, empty_text, ProbePosition::middle, 1);
  CHECK(f.data == m.data);

  CHECK_THROWS_AS(extract_kv_features(w, cfg, texts, ProbePosition::last, 0),
                  Error);
  CHECK_THROWS_AS(extract_kv_features(w, cfg, texts, ProbePosition::last, 3),
                  Error);
}

TEST_CASE("suffix-determined task separates last from first position") {
  const ModelConfig cfg = testutil::tiny_config(3, 32, 4);
  const Weights w = random_init(cfg, 905);
  const auto records = synthetic::parity_task(240, 120, 906);
  std::vector<std::string> texts;
  std::vector<int> labels;
  for (const auto& r : records) {
    texts.push_back(r.text);
    labels.push_back(r.label);
  }
  const auto report =
      probe_positions(w, cfg, texts, labels, 240, cfg.n_layers);
  const double first = report.accuracy(ProbePosition::first);
  const double last = report.accuracy(ProbePosition::last);
  INFO("first=" << first << " last=" << last);
  CHECK(last >= first + 0.10);
}
