#include <catch_amalgamated.hpp>

#include "kvembed/reroute.hpp"
#include "test_util.hpp"

using namespace kvembed;

namespace {

// Dense attention over explicitly concatenated [k_n||K], [v_n||V]: an
// independent route to the same augmented computation.
RealMatrix concat_oracle(const RealMatrix& q, const RealMatrix& k,
                         const RealMatrix& v, double bias) {
  const std::size_t n = k.rows;
  const std::size_t hd = k.cols;
  RealMatrix aug_k(n + 1, hd), aug_v(n + 1, hd);
  for (std::size_t d = 0; d < hd; ++d) {
    aug_k.at(0, d) = k.at(n - 1, d);
    aug_v.at(0, d) = v.at(n - 1, d);
  }
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t d = 0; d < hd; ++d) {
      aug_k.at(j + 1, d) = k.at(j, d);
      aug_v.at(j + 1, d) = v.at(j, d);
    }
  }
  RealMatrix ctx(n, hd);
  for (std::size_t i = 0; i < n; ++i) {
    // candidates: augmented rows 0..i+1
    std::vector<double> scores(i + 2);
    for (std::size_t j = 0; j <= i + 1; ++j) {
      double s = 0.0;
      for (std::size_t d = 0; d < hd; ++d) s += q.at(i, d) * aug_k.at(j, d);
      scores[j] = s / std::sqrt(static_cast<double>(hd));
    }
    scores[0] += bias;
    double mx = scores[0];
    for (double s : scores) mx = std::max(mx, s);
    double z = 0.0;
    std::vector<double> e(scores.size());
    for (std::size_t j = 0; j < scores.size(); ++j) {
      e[j] = std::exp(scores[j] - mx);
      z += e[j];
    }
    for (std::size_t j = 0; j < scores.size(); ++j) {
      for (std::size_t d = 0; d < hd; ++d) {
        ctx.at(i, d) += (e[j] / z) * aug_v.at(j, d);
      }
    }
  }
  return ctx;
}

struct HeadInputs {
  RealMatrix q, k, v;
  RealVector k_last, v_last;
};

HeadInputs random_head(std::mt19937_64& rng, std::size_t n, std::size_t hd) {
  HeadInputs in;
  in.q = testutil::random_matrix(rng, n, hd);
  in.k = testutil::random_matrix(rng, n, hd);
  in.v = testutil::random_matrix(rng, n, hd);
  in.k_last = in.k.row(n - 1);
  in.v_last = in.v.row(n - 1);
  return in;
}

}  // namespace

TEST_CASE("rerouted attention equals the explicit-concatenation oracle") {
  std::mt19937_64 rng(100);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t n = 1 + rng() % 32;
    const std::size_t hd = 2 * (1 + rng() % 8);
    const double bias = trial % 3 == 0 ? 0.0 : testutil::urand(rng, -2.0, 2.0);
    const HeadInputs in = random_head(rng, n, hd);
    const HeadAttention res =
        rerouted_attention(in.q, in.k, in.v, in.k_last, in.v_last, bias);
    const RealMatrix oracle = concat_oracle(in.q, in.k, in.v, bias);
    CHECK(testutil::max_abs_diff(res.context, oracle) < 1e-12);
  }
}

TEST_CASE("rerouted attention with one token returns v_1") {
  std::mt19937_64 rng(101);
  for (double bias : {-3.0, 0.0, 1.0, 7.5}) {
    const HeadInputs in = random_head(rng, 1, 6);
    const HeadAttention res =
        rerouted_attention(in.q, in.k, in.v, in.k_last, in.v_last, bias);
    CHECK(testutil::max_abs_diff(res.context.row(0), in.v.row(0)) < 1e-12);
  }
}

TEST_CASE("prefix weight increases strictly with the bias") {
  std::mt19937_64 rng(102);
  const HeadInputs in = random_head(rng, 6, 8);
  double prev = -1.0;
  for (double bias : {-1.0, 0.0, 0.5, 1.0, 2.0}) {
    const HeadAttention res =
        rerouted_attention(in.q, in.k, in.v, in.k_last, in.v_last, bias);
    for (std::size_t i = 0; i < 6; ++i) {
      CHECK(res.weights.at(i, 0) > 0.0);
    }
    CHECK(res.weights.at(3, 0) > prev);
    prev = res.weights.at(3, 0);
  }
}

TEST_CASE("rerouted attention validates the cached prefix pair") {
  std::mt19937_64 rng(103);
  HeadInputs in = random_head(rng, 4, 6);
  RealVector wrong = in.k_last;
  wrong[0] += 1e-9;
  CHECK_THROWS_AS(rerouted_attention(in.q, in.k, in.v, wrong, in.v_last, 0.0),
                  Error);
  RealVector short_vec(5, 0.0);
  CHECK_THROWS_AS(
      rerouted_attention(in.q, in.k, in.v, short_vec, in.v_last, 0.0), Error);
}

TEST_CASE("prefix does not shift scores of real positions") {
  // Softmax weight ratios between real candidates must be identical with and
  // without the prefix: the prefix adds a column, never re-rotates keys.
  std::mt19937_64 rng(104);
  const std::size_t n = 7, hd = 8;
  const HeadInputs in = random_head(rng, n, hd);
  const HeadAttention with =
      rerouted_attention(in.q, in.k, in.v, in.k_last, in.v_last, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    // plain causal weights for query i
    std::vector<double> scores(i + 1);
    for (std::size_t j = 0; j <= i; ++j) {
      double s = 0.0;
      for (std::size_t d = 0; d < hd; ++d) s += in.q.at(i, d) * in.k.at(j, d);
      scores[j] = s / std::sqrt(static_cast<double>(hd));
    }
    const RealVector plain = softmax_with_bias(scores, 0.0);
    for (std::size_t j = 0; j < i; ++j) {
      const double ratio_with =
          with.weights.at(i, j + 1) / with.weights.at(i, i + 1);
      const double ratio_plain = plain[j] / plain[i];
      CHECK(ratio_with == Catch::Approx(ratio_plain).epsilon(1e-9));
    }
  }
}

TEST_CASE("empty layer set reproduces the standard pass bitwise") {
  const ModelConfig cfg = testutil::tiny_config(3, 16, 2);
  const Weights w = random_init(cfg, 200);
  std::mt19937_64 rng(201);
  const TokenSequence tokens = testutil::random_tokens(rng, cfg, 4, 10);

  const ForwardTrace std_trace = forward_standard(w, cfg, tokens);
  RerouteConfig empty;
  empty.layers = {};
  empty.bias = 1.0;
  const ForwardTrace a = forward_rerouted(w, cfg, tokens, empty);
  RerouteConfig disabled;
  disabled.layers = {1, 2};
  disabled.enabled = false;
  const ForwardTrace b = forward_rerouted(w, cfg, tokens, disabled);
  for (std::size_t l = 0; l <= cfg.n_layers; ++l) {
    CHECK(testutil::bitwise_equal(a.hidden[l], std_trace.hidden[l]));
    CHECK(testutil::bitwise_equal(b.hidden[l], std_trace.hidden[l]));
  }
}

TEST_CASE("minus-infinity bias reproduces the standard pass") {
  const ModelConfig cfg = testutil::tiny_config(3, 16, 2);
  const Weights w = random_init(cfg, 202);
  std::mt19937_64 rng(203);
  RerouteConfig rc;
  rc.layers = {1, 2, 3};
  rc.bias = -std::numeric_limits<double>::infinity();
  for (int trial = 0; trial < 10; ++trial) {
    const TokenSequence tokens = testutil::random_tokens(rng, cfg, 1, 12);
    const ForwardTrace std_trace = forward_standard(w, cfg, tokens);
    const ForwardTrace off_trace = forward_rerouted(w, cfg, tokens, rc);
    for (std::size_t l = 0; l <= cfg.n_layers; ++l) {
      CHECK(testutil::max_abs_diff(std_trace.hidden[l], off_trace.hidden[l]) <
            1e-9);
    }
  }
}

TEST_CASE("re-routing grants position 1 access to last-token edits") {
  const ModelConfig cfg = testutil::tiny_config(4, 16, 2);
  const Weights w = random_init(cfg, 204);
  const std::string base_text = "signal over the river";
  std::string edited_text = base_text;
  edited_text.back() = 'x';

  const TokenSequence base = tokenize(base_text, cfg);
  const TokenSequence edited = tokenize(edited_text, cfg);

  // standard pass: position 1 is bitwise blind to the edit
  const ForwardTrace s0 = forward_standard(w, cfg, base);
  const ForwardTrace s1 = forward_standard(w, cfg, edited);
  for (std::size_t l = 0; l <= cfg.n_layers; ++l) {
    CHECK(s0.hidden[l].row(0) == s1.hidden[l].row(0));
  }

  // re-routed at layer 2: position 1 changes from layer 2 on
  RerouteConfig rc;
  rc.layers = {2};
  rc.bias = 1.0;
  const ForwardTrace r0 = forward_rerouted(w, cfg, base, rc);
  const ForwardTrace r1 = forward_rerouted(w, cfg, edited, rc);
  for (std::size_t l = 0; l < 2; ++l) {
    CHECK(r0.hidden[l].row(0) == r1.hidden[l].row(0));
  }
  // already at the re-routed layer itself
  CHECK(testutil::max_abs_diff(r0.hidden[2].row(0), r1.hidden[2].row(0)) >
        0.0);
  double diff = 0.0;
  for (std::size_t l = 2; l <= cfg.n_layers; ++l) {
    diff = std::max(diff, testutil::max_abs_diff(r0.hidden[l].row(0),
                                                 r1.hidden[l].row(0)));
  }
  CHECK(diff > 0.0);
}

TEST_CASE("attention dumps: stochastic rows, causal zeros, prefix column") {
  const ModelConfig cfg = testutil::tiny_config(3, 16, 2);
  const Weights w = random_init(cfg, 205);
  std::mt19937_64 rng(206);
  const TokenSequence tokens = testutil::random_tokens(rng, cfg, 5, 9);
  const std::size_t n = tokens.size();

  RerouteConfig rc;
  rc.layers = {2};
  rc.bias = 1.0;
  const auto dumps = collect_attention(w, cfg, tokens, rc);
  REQUIRE(dumps.size() == cfg.n_layers * cfg.n_heads);
  for (const auto& d : dumps) {
    const bool rerouted = d.layer == 2;
    CHECK(d.rerouted == rerouted);
    REQUIRE(d.weights.rows == n);
    REQUIRE(d.weights.cols == (rerouted ? n + 1 : n));
    for (std::size_t i = 0; i < n; ++i) {
      double sum = 0.0;
      for (std::size_t j = 0; j < d.weights.cols; ++j) {
        sum += d.weights.at(i, j);
      }
      CHECK(std::abs(sum - 1.0) < 1e-9);
      // masked (future) candidates are exactly zero
      const std::size_t first_masked = rerouted ? i + 2 : i + 1;
      for (std::size_t j = first_masked; j < d.weights.cols; ++j) {
        CHECK(d.weights.at(i, j) == 0.0);
      }
    }
  }

  // dumping does not perturb the pass
  const ForwardTrace plain = forward_rerouted(w, cfg, tokens, rc);
  detail::DumpCollector collector(std::nullopt, std::nullopt);
  const ForwardTrace observed = detail::run_forward(
      w, cfg, tokens, detail::make_spec(rc, cfg.n_layers), &collector);
  for (std::size_t l = 0; l <= cfg.n_layers; ++l) {
    CHECK(testutil::bitwise_equal(plain.hidden[l], observed.hidden[l]));
  }

  // single-dump accessor and range validation
  const AttentionDump one = dump_attention(w, cfg, tokens, rc, 2, 1);
  CHECK(one.layer == 2);
  CHECK(one.head == 1);
  CHECK(one.rerouted);
  CHECK_THROWS_AS(dump_attention(w, cfg, tokens, rc, 0, 0), Error);
  CHECK_THROWS_AS(dump_attention(w, cfg, tokens, rc, 9, 0), Error);
  CHECK_THROWS_AS(dump_attention(w, cfg, tokens, rc, 1, 7), Error);
}

TEST_CASE("reroute config validation") {
  const ModelConfig cfg = testutil::tiny_config(3, 16, 2);
  const Weights w = random_init(cfg, 207);
  TokenSequence tokens = tokenize("ab", cfg);
  RerouteConfig rc;
  rc.layers = {4};
  CHECK_THROWS_AS(forward_rerouted(w, cfg, tokens, rc), Error);
  rc.layers = {1};
  rc.bias = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(forward_rerouted(w, cfg, tokens, rc), Error);
}
