#pragma once

#include <array>
#include <random>

#include "kvembed/eval_harness.hpp"

namespace kvembed {

// Seeded generators for desk-scale corpora, so no external data is needed.
// Sampling arithmetic is pinned (no std distributions) so the same seed
// yields the same corpus on every standard library.
namespace synthetic {

namespace detail {

inline std::size_t pick(std::mt19937_64& rng, std::size_t n) {
  return static_cast<std::size_t>(rng() % n);
}

inline std::size_t pick_range(std::mt19937_64& rng, std::size_t lo,
                              std::size_t hi) {
  return lo + pick(rng, hi - lo + 1);
}

inline double unit(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline const std::array<const char*, 64>& wordlist() {
  static const std::array<const char*, 64> kWords = {
      "river",   "bank",    "stone",  "light",   "signal",  "garden",
      "engine",  "matrix",  "vector", "window",  "circle",  "forest",
      "market",  "silver",  "copper", "branch",  "stream",  "puzzle",
      "lantern", "harbor",  "meadow", "quartz",  "violet",  "summit",
      "canyon",  "thread",  "fabric", "mirror",  "hollow",  "ember",
      "glacier", "orchard", "pillar", "saddle",  "tunnel",  "whistle",
      "anchor",  "beacon",  "cliff",  "dune",    "field",   "grove",
      "hearth",  "island",  "jungle", "kernel",  "ledge",   "marsh",
      "needle",  "oasis",   "prairie","quarry",  "ridge",   "shore",
      "timber",  "upland",  "valley", "willow",  "yonder",  "zephyr",
      "basin",   "crest",   "delta",  "estuary"};
  return kWords;
}

inline std::string make_sentence(std::mt19937_64& rng, std::size_t min_words,
                                 std::size_t max_words) {
  const auto& words = wordlist();
  const std::size_t n = pick_range(rng, min_words, max_words);
  std::string out;
  for (std::size_t i = 0; i < n; ++i) {
    if (i) out += ' ';
    out += words[pick(rng, words.size())];
  }
  return out;
}

}  // namespace detail

inline std::vector<std::string> sentences(std::size_t n, std::uint64_t seed,
                                          std::size_t min_words = 4,
                                          std::size_t max_words = 10) {
  std::mt19937_64 rng(seed);
  std::vector<std::string> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(detail::make_sentence(rng, min_words, max_words));
  }
  return out;
}

// Pairs whose gold score is the word-overlap fraction between the two sides.
inline std::vector<STSRecord> sts_pairs(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto& words = detail::wordlist();
  std::vector<STSRecord> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t len = 6;
    std::vector<std::string> a_words, b_words;
    for (std::size_t k = 0; k < len; ++k) {
      a_words.push_back(words[detail::pick(rng, words.size())]);
    }
    const double keep = detail::unit(rng);
    std::size_t shared = 0;
    for (std::size_t k = 0; k < len; ++k) {
      if (detail::unit(rng) < keep) {
        b_words.push_back(a_words[k]);
        ++shared;
      } else {
        b_words.push_back(words[detail::pick(rng, words.size())]);
      }
    }
    STSRecord rec;
    for (std::size_t k = 0; k < len; ++k) {
      if (k) {
        rec.text_a += ' ';
        rec.text_b += ' ';
      }
      rec.text_a += a_words[k];
      rec.text_b += b_words[k];
    }
    rec.gold = static_cast<double>(shared) / static_cast<double>(len);
    out.push_back(std::move(rec));
  }
  return out;
}

// Each query repeats the key sentence of its single relevant document. When
// doc_bytes > 0 every document is padded with filler words to that byte
// length, with the discriminative sentence planted at position 0.
inline RetrievalCorpus retrieval(std::size_t n_queries, std::size_t n_docs,
                                 std::uint64_t seed,
                                 std::size_t doc_bytes = 0) {
  if (n_queries > n_docs) throw Error("synthetic retrieval: queries > docs");
  std::mt19937_64 rng(seed);
  RetrievalCorpus corpus;
  std::vector<std::string> keys;
  for (std::size_t d = 0; d < n_docs; ++d) {
    std::string key = detail::make_sentence(rng, 5, 8);
    std::string text = key;
    if (doc_bytes > 0) {
      while (text.size() < doc_bytes) {
        text += ' ';
        text += detail::make_sentence(rng, 4, 9);
      }
      text.resize(doc_bytes);
    }
    const std::string id = "d" + std::to_string(d);
    corpus.docs[id] = text;
    keys.push_back(std::move(key));
  }
  for (std::size_t q = 0; q < n_queries; ++q) {
    const std::string qid = "q" + std::to_string(q);
    corpus.queries[qid] = keys[q];
    corpus.qrels[qid]["d" + std::to_string(q)] = 1;
  }
  return corpus;
}

// Suffix-determined classification: random letter words ending in a single
// digit character whose parity is the label. Only the tail byte carries the
// label, so positions late in the sequence must encode it.
inline std::vector<LabeledRecord> parity_task(std::size_t n_train,
                                              std::size_t n_val,
                                              std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<LabeledRecord> out;
  out.reserve(n_train + n_val);
  for (std::size_t i = 0; i < n_train + n_val; ++i) {
    LabeledRecord rec;
    const std::size_t n = detail::pick_range(rng, 4, 12);
    for (std::size_t k = 0; k < n; ++k) {
      rec.text.push_back(static_cast<char>('a' + detail::pick(rng, 26)));
    }
    const int d = static_cast<int>(detail::pick(rng, 10));
    rec.text.push_back(static_cast<char>('0' + d));
    rec.label = d % 2;
    rec.is_train = i < n_train;
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace synthetic
}  // namespace kvembed
