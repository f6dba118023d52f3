// kvembed: toy decoder-only transformer with final-token KV re-routing,
// ID-based layer selection, embedding strategies and the evaluation harness.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <optional>

#include "kvembed/io.hpp"

namespace {

using namespace kvembed;

struct ModelSource {
  std::string model_path;
  std::string config_path;
  std::uint64_t seed = 42;
};

ModelConfig config_from_json(const Json& j, const std::string& origin) {
  ModelConfig cfg;
  cfg.n_layers = j.value("n_layers", cfg.n_layers);
  cfg.d_model = j.value("d_model", cfg.d_model);
  cfg.n_heads = j.value("n_heads", cfg.n_heads);
  cfg.head_dim = j.value("head_dim", cfg.head_dim);
  cfg.d_ffn = j.value("d_ffn", cfg.d_ffn);
  cfg.vocab_size = j.value("vocab_size", cfg.vocab_size);
  cfg.max_seq = j.value("max_seq", cfg.max_seq);
  cfg.rope_theta = j.value("rope_theta", cfg.rope_theta);
  cfg.norm_eps = j.value("norm_eps", cfg.norm_eps);
  try {
    cfg.validate();
  } catch (const Error& e) {
    throw Error(origin + ": " + e.what());
  }
  return cfg;
}

Json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open: " + path);
  try {
    return Json::parse(in);
  } catch (const std::exception& e) {
    throw Error(path + ": invalid JSON: " + e.what());
  }
}

// Exactly one model source: a weight file, or a config (file or defaults)
// plus a seed for synthetic weights.
std::pair<ModelConfig, Weights> resolve_model(const ModelSource& src) {
  if (!src.model_path.empty() && !src.config_path.empty()) {
    throw Error("pass either --model or --model-config, not both");
  }
  if (!src.model_path.empty()) return load_weights(src.model_path);
  ModelConfig cfg;
  if (!src.config_path.empty()) {
    cfg = config_from_json(load_json_file(src.config_path), src.config_path);
  }
  return {cfg, random_init(cfg, src.seed)};
}

CLI::Option* add_model_flags(CLI::App* cmd, ModelSource& src) {
  cmd->add_option("--model", src.model_path, "weight file (.kvem)");
  cmd->add_option("--model-config", src.config_path,
                  "model config JSON for synthetic weights");
  return cmd->add_option("--seed", src.seed,
                         "seed for synthetic weights (default 42)");
}

void emit(const Json& j, const std::string& out_path) {
  if (out_path.empty()) {
    std::cout << j.dump(2) << "\n";
  } else {
    std::ofstream out(out_path, std::ios::trunc);
    if (!out) throw Error("cannot open for writing: " + out_path);
    out << j.dump(2) << "\n";
  }
}

void emit_lines(const std::vector<Json>& records, const std::string& out_path) {
  if (out_path.empty()) {
    for (const auto& j : records) std::cout << j.dump() << "\n";
  } else {
    std::ofstream out(out_path, std::ios::trunc);
    if (!out) throw Error("cannot open for writing: " + out_path);
    for (const auto& j : records) out << j.dump() << "\n";
  }
}

Strategy parse_strategy(const std::string& s) {
  if (s == "kv" || s == "kv_embedding") return Strategy::kv_embedding;
  if (s == "last_token") return Strategy::last_token;
  if (s == "mean") return Strategy::mean;
  if (s == "prompteol") return Strategy::prompteol;
  if (s == "echo") return Strategy::echo;
  throw Error("unknown strategy '" + s +
              "' (kv|last_token|mean|prompteol|echo)");
}

std::optional<Pooling> parse_pooling(const std::string& s) {
  if (s.empty()) return std::nullopt;
  if (s == "last") return Pooling::last;
  if (s == "mean") return Pooling::mean;
  if (s == "hybrid") return Pooling::hybrid;
  throw Error("unknown pooling '" + s + "' (last|mean|hybrid)");
}

Role parse_role(const std::string& s) {
  if (s == "query") return Role::query;
  if (s == "context") return Role::context;
  throw Error("unknown role '" + s + "' (query|context)");
}

// Layer flag: explicit "2,3,5", "auto:window" or "auto:multimin".
struct LayerChoice {
  std::vector<std::size_t> explicit_layers;
  bool is_explicit = false;
  SelectionStrategy auto_strategy = SelectionStrategy::window;
  bool is_auto = false;
};

LayerChoice parse_layers(const std::string& s) {
  LayerChoice out;
  if (s.empty()) return out;
  if (s == "auto:window") {
    out.is_auto = true;
    out.auto_strategy = SelectionStrategy::window;
    return out;
  }
  if (s == "auto:multimin") {
    out.is_auto = true;
    out.auto_strategy = SelectionStrategy::multimin;
    return out;
  }
  std::size_t pos = 0;
  while (pos < s.size()) {
    std::size_t comma = s.find(',', pos);
    if (comma == std::string::npos) comma = s.size();
    const std::string tok = s.substr(pos, comma - pos);
    try {
      out.explicit_layers.push_back(std::stoul(tok));
    } catch (const std::exception&) {
      throw Error("bad --layers entry '" + tok +
                  "' (expect indices, auto:window or auto:multimin)");
    }
    pos = comma + 1;
  }
  std::sort(out.explicit_layers.begin(), out.explicit_layers.end());
  out.explicit_layers.erase(
      std::unique(out.explicit_layers.begin(), out.explicit_layers.end()),
      out.explicit_layers.end());
  out.is_explicit = !out.explicit_layers.empty();
  return out;
}

// Explicit layers always win over auto selection.
std::vector<std::size_t> resolve_layers(const LayerChoice& choice,
                                        const Weights& w,
                                        const ModelConfig& cfg,
                                        const std::vector<std::string>& corpus,
                                        Role role) {
  if (choice.is_explicit) return choice.explicit_layers;
  if (!choice.is_auto) return {};
  const IDTrajectory traj = id_trajectory(w, cfg, corpus, role);
  const LayerSelection sel = choice.auto_strategy == SelectionStrategy::window
                                 ? select_layers_window(traj)
                                 : select_layers_multimin(traj);
  return sel.layers;
}

// Optional run-config JSON: file values fill in whatever the flags left at
// their defaults (flags always win).
struct RunFlags {
  std::string strategy = "kv";
  std::string pooling;
  std::string layers;
  double bias = 1.0;
  bool bias_set = false;
  bool strategy_set = false;
  bool pooling_set = false;
  bool layers_set = false;
};

void merge_run_config(const std::string& path, RunFlags& flags,
                      ModelSource& src, bool model_set, bool seed_set) {
  if (path.empty()) return;
  const Json j = load_json_file(path);
  if (!flags.strategy_set && j.contains("strategy")) {
    flags.strategy = j.at("strategy").get<std::string>();
  }
  if (!flags.pooling_set && j.contains("pooling")) {
    flags.pooling = j.at("pooling").get<std::string>();
  }
  if (!flags.layers_set && j.contains("layers")) {
    if (j.at("layers").is_string()) {
      flags.layers = j.at("layers").get<std::string>();
    } else {
      std::string joined;
      for (const auto& v : j.at("layers")) {
        if (!joined.empty()) joined += ',';
        joined += std::to_string(v.get<std::size_t>());
      }
      flags.layers = joined;
    }
  }
  if (!flags.bias_set && j.contains("bias")) {
    flags.bias = j.at("bias").get<double>();
  }
  if (!model_set && src.model_path.empty() && j.contains("model")) {
    src.model_path = j.at("model").get<std::string>();
  }
  if (!model_set && src.config_path.empty() && j.contains("model_config")) {
    src.config_path = j.at("model_config").get<std::string>();
  }
  if (!seed_set && j.contains("seed")) {
    src.seed = j.at("seed").get<std::uint64_t>();
  }
}

StrategySpec build_spec(const RunFlags& flags,
                        const std::vector<std::size_t>& layers) {
  StrategySpec spec;
  spec.strategy = parse_strategy(flags.strategy);
  spec.pooling = parse_pooling(flags.pooling);
  if (spec.strategy == Strategy::kv_embedding) {
    spec.reroute = RerouteConfig{layers, flags.bias, !layers.empty()};
  }
  return spec;
}

int run(int argc, char** argv) {
  CLI::App app{
      "kvembed: text embeddings from a toy decoder-only transformer via "
      "final-token KV re-routing"};
  app.require_subcommand(1);

  // ---- gen-model ----
  auto* gen = app.add_subcommand(
      "gen-model", "generate deterministic synthetic weights");
  std::string gen_config, gen_out;
  std::uint64_t gen_seed = 42;
  gen->add_option("--config", gen_config, "model config JSON");
  gen->add_option("--seed", gen_seed, "weight seed (default 42)");
  gen->add_option("--out", gen_out, "output weight file")->required();
  gen->callback([&] {
    ModelConfig cfg;
    if (!gen_config.empty()) {
      cfg = config_from_json(load_json_file(gen_config), gen_config);
    }
    const Weights w = random_init(cfg, gen_seed);
    save_weights(gen_out, cfg, w);
    Json j;
    j["out"] = gen_out;
    j["seed"] = gen_seed;
    j["n_layers"] = cfg.n_layers;
    j["d_model"] = cfg.d_model;
    j["n_heads"] = cfg.n_heads;
    emit(j, "");
    std::cerr << "wrote " << gen_out << "\n";
  });

  // ---- gen-corpus ----
  auto* genc = app.add_subcommand(
      "gen-corpus", "generate seeded synthetic corpora (no external data)");
  std::string genc_kind = "sentences", genc_out, genc_docs, genc_queries,
              genc_qrels;
  std::size_t genc_n = 1000, genc_nq = 8, genc_nd = 24, genc_bytes = 0;
  std::uint64_t genc_seed = 42;
  genc->add_option("--kind", genc_kind, "sentences|sts|retrieval|classify");
  genc->add_option("--n", genc_n, "record count (sentences/sts/classify)");
  genc->add_option("--queries", genc_nq, "retrieval: query count");
  genc->add_option("--docs", genc_nd, "retrieval: document count");
  genc->add_option("--doc-bytes", genc_bytes,
                   "retrieval: pad documents to this many bytes");
  genc->add_option("--seed", genc_seed, "corpus seed (default 42)");
  genc->add_option("--out", genc_out, "output path (JSONL, or lines for sentences)");
  genc->add_option("--out-docs", genc_docs, "retrieval: docs JSONL");
  genc->add_option("--out-queries", genc_queries, "retrieval: queries JSONL");
  genc->add_option("--out-qrels", genc_qrels, "retrieval: qrels TSV");
  genc->callback([&] {
    if (genc_kind == "sentences") {
      if (genc_out.empty()) throw Error("gen-corpus sentences: --out required");
      std::ofstream out(genc_out, std::ios::trunc);
      if (!out) throw Error("cannot open for writing: " + genc_out);
      for (const auto& s : synthetic::sentences(genc_n, genc_seed)) {
        out << s << "\n";
      }
    } else if (genc_kind == "sts") {
      if (genc_out.empty()) throw Error("gen-corpus sts: --out required");
      std::vector<Json> lines;
      for (const auto& r : synthetic::sts_pairs(genc_n, genc_seed)) {
        lines.push_back(
            {{"text_a", r.text_a}, {"text_b", r.text_b}, {"score", r.gold}});
      }
      emit_lines(lines, genc_out);
    } else if (genc_kind == "classify") {
      if (genc_out.empty()) throw Error("gen-corpus classify: --out required");
      std::vector<Json> lines;
      const std::size_t n_train = genc_n * 2 / 3;
      for (const auto& r :
           synthetic::parity_task(n_train, genc_n - n_train, genc_seed)) {
        lines.push_back({{"text", r.text},
                         {"label", r.label},
                         {"split", r.is_train ? "train" : "test"}});
      }
      emit_lines(lines, genc_out);
    } else if (genc_kind == "retrieval") {
      if (genc_docs.empty() || genc_queries.empty() || genc_qrels.empty()) {
        throw Error(
            "gen-corpus retrieval: --out-docs, --out-queries and --out-qrels "
            "are required");
      }
      const RetrievalCorpus corpus =
          synthetic::retrieval(genc_nq, genc_nd, genc_seed, genc_bytes);
      std::vector<Json> docs, queries;
      for (const auto& [id, text] : corpus.docs) {
        docs.push_back({{"id", id}, {"text", text}});
      }
      for (const auto& [id, text] : corpus.queries) {
        queries.push_back({{"id", id}, {"text", text}});
      }
      emit_lines(docs, genc_docs);
      emit_lines(queries, genc_queries);
      std::ofstream out(genc_qrels, std::ios::trunc);
      if (!out) throw Error("cannot open for writing: " + genc_qrels);
      for (const auto& [qid, rels] : corpus.qrels) {
        for (const auto& [did, grade] : rels) {
          out << qid << "\t" << did << "\t" << grade << "\n";
        }
      }
    } else {
      throw Error("unknown corpus kind '" + genc_kind + "'");
    }
    std::cerr << "generated " << genc_kind << " corpus\n";
  });

  // ---- embed ----
  auto* emb = app.add_subcommand("embed", "embed texts to JSONL");
  ModelSource emb_src;
  RunFlags emb_flags;
  std::string emb_input, emb_text, emb_role = "query", emb_out, emb_id_corpus,
              emb_run_config;
  CLI::Option* emb_seed_opt = add_model_flags(emb, emb_src);
  emb->add_option("--input", emb_input, "texts file (.jsonl {id,text} or lines)");
  emb->add_option("--text", emb_text, "embed a single inline text");
  auto* so = emb->add_option("--strategy", emb_flags.strategy,
                             "kv|last_token|mean|prompteol|echo");
  auto* po = emb->add_option("--pooling", emb_flags.pooling,
                             "last|mean|hybrid (default per strategy)");
  auto* lo = emb->add_option(
      "--layers", emb_flags.layers,
      "explicit list '2,3' or auto:window|auto:multimin (kv only)");
  auto* bo = emb->add_option("--bias", emb_flags.bias,
                             "virtual-prefix attention bias (default 1.0)");
  emb->add_option("--role", emb_role, "query|context (default query)");
  emb->add_option("--id-corpus", emb_id_corpus,
                  "texts used for auto layer selection (default: the inputs)");
  emb->add_option("--run-config", emb_run_config,
                  "JSON with strategy/pooling/layers/bias/model/seed defaults");
  emb->add_option("--out", emb_out, "output JSONL (default stdout)");
  emb->callback([&] {
    emb_flags.strategy_set = so->count() > 0;
    emb_flags.pooling_set = po->count() > 0;
    emb_flags.layers_set = lo->count() > 0;
    emb_flags.bias_set = bo->count() > 0;
    merge_run_config(emb_run_config, emb_flags, emb_src,
                     !emb_src.model_path.empty() || !emb_src.config_path.empty(),
                     emb_seed_opt->count() > 0);
    const auto [cfg, w] = resolve_model(emb_src);

    std::vector<io::TextRecord> records;
    if (!emb_text.empty()) {
      records.push_back({"0", emb_text});
    } else if (!emb_input.empty()) {
      records = io::read_text_corpus(emb_input);
    } else {
      throw Error("embed: pass --input or --text");
    }

    const Role role = parse_role(emb_role);
    const LayerChoice choice = parse_layers(emb_flags.layers);
    std::vector<std::string> selection_corpus;
    if (choice.is_auto) {
      if (!emb_id_corpus.empty()) {
        for (const auto& r : io::read_text_corpus(emb_id_corpus)) {
          selection_corpus.push_back(r.text);
        }
      } else {
        for (const auto& r : records) selection_corpus.push_back(r.text);
      }
    }
    const auto layers =
        resolve_layers(choice, w, cfg, selection_corpus, role);
    const StrategySpec spec = build_spec(emb_flags, layers);

    std::vector<EmbedRequest> reqs;
    for (const auto& r : records) {
      reqs.push_back(spec.request(r.id, r.text, role));
    }
    const auto batch = embed_batch(w, cfg, reqs);
    std::vector<Json> lines;
    std::size_t failures = 0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      if (batch[i].embedding) {
        lines.push_back(io::embedding_to_json(*batch[i].embedding));
      } else {
        ++failures;
        std::cerr << batch[i].error << "\n";
      }
    }
    emit_lines(lines, emb_out);
    std::cerr << "embedded " << lines.size() << " text(s)";
    if (!layers.empty()) {
      std::cerr << ", layers";
      for (auto l : layers) std::cerr << " " << l;
      std::cerr << ", bias " << emb_flags.bias;
    }
    std::cerr << "\n";
    if (failures) throw Error(std::to_string(failures) + " request(s) failed");
  });

  // ---- id-trace ----
  auto* idt = app.add_subcommand(
      "id-trace", "per-layer intrinsic dimension of final-position states");
  ModelSource idt_src;
  std::string idt_corpus, idt_role = "context", idt_out;
  double idt_trim = 0.10;
  add_model_flags(idt, idt_src);
  idt->add_option("--corpus", idt_corpus, "texts file")->required();
  idt->add_option("--role", idt_role, "prompt role (default context)");
  idt->add_option("--trim", idt_trim, "TwoNN trim fraction (default 0.1)");
  idt->add_option("--out", idt_out, "output JSON (default stdout)");
  idt->callback([&] {
    const auto [cfg, w] = resolve_model(idt_src);
    std::vector<std::string> corpus;
    for (const auto& r : io::read_text_corpus(idt_corpus)) {
      corpus.push_back(r.text);
    }
    TwoNNOptions opt;
    opt.trim_fraction = idt_trim;
    const auto detail =
        id_trajectory_detail(w, cfg, corpus, parse_role(idt_role), opt);
    emit(io::trajectory_report(detail), idt_out);
    std::cerr << "traced " << corpus.size() << " texts over "
              << cfg.n_layers + 1 << " layers\n";
  });

  // ---- select-layers ----
  auto* sel = app.add_subcommand("select-layers",
                                 "layer selection from a stored trajectory");
  std::string sel_traj, sel_strategy = "window", sel_out;
  sel->add_option("--trajectory", sel_traj,
                  "JSON file with a 'values' array (id-trace output works)")
      ->required();
  sel->add_option("--strategy", sel_strategy, "window|multimin");
  sel->add_option("--out", sel_out, "output JSON (default stdout)");
  sel->callback([&] {
    const Json j = load_json_file(sel_traj);
    IDTrajectory traj;
    if (!j.contains("values")) {
      throw Error(sel_traj + ": missing 'values' array");
    }
    traj.values = j.at("values").get<std::vector<double>>();
    traj.corpus_size = j.value("corpus_size", std::size_t{0});
    LayerSelection selection;
    if (sel_strategy == "window") {
      selection = select_layers_window(traj);
    } else if (sel_strategy == "multimin") {
      selection = select_layers_multimin(traj);
    } else {
      throw Error("unknown selection strategy '" + sel_strategy + "'");
    }
    emit(io::selection_to_json(selection), sel_out);
    std::cerr << "selected " << selection.layers.size() << " layer(s)\n";
  });

  // ---- probe ----
  auto* prb = app.add_subcommand(
      "probe", "position-wise KV probing with a logistic-regression probe");
  ModelSource prb_src;
  std::string prb_data, prb_out;
  std::size_t prb_layer = 0;
  double prb_train_frac = 2.0 / 3.0;
  add_model_flags(prb, prb_src);
  prb->add_option("--data", prb_data, "labeled JSONL {text,label}")->required();
  prb->add_option("--layer", prb_layer, "probed layer (default: final)");
  prb->add_option("--train-frac", prb_train_frac,
                  "leading fraction used for training (default 2/3)");
  prb->add_option("--out", prb_out, "output JSON (default stdout)");
  prb->callback([&] {
    const auto [cfg, w] = resolve_model(prb_src);
    const auto records = io::read_labeled(prb_data, false);
    std::vector<std::string> texts;
    std::vector<int> labels;
    for (const auto& r : records) {
      texts.push_back(r.text);
      labels.push_back(r.label);
    }
    if (prb_train_frac <= 0.0 || prb_train_frac >= 1.0) {
      throw Error("probe: --train-frac must be in (0,1)");
    }
    const auto n_train = static_cast<std::size_t>(
        prb_train_frac * static_cast<double>(texts.size()));
    const std::size_t layer = prb_layer == 0 ? cfg.n_layers : prb_layer;
    const auto report =
        probe_positions(w, cfg, texts, labels, n_train, layer);
    Json j;
    j["layer"] = report.layer;
    j["n_train"] = n_train;
    j["n_validation"] = texts.size() - n_train;
    for (const auto& e : report.entries) {
      j["positions"][to_string(e.position)] = {
          {"accuracy", e.accuracy}, {"l2", e.chosen_l2}};
    }
    emit(j, prb_out);
    std::cerr << "probed layer " << layer << " at 3 positions\n";
  });

  // ---- metrics ----
  auto* met = app.add_subcommand(
      "metrics", "alignment/uniformity over stored embeddings");
  std::string met_embeddings, met_pairs, met_out;
  double met_alpha = 2.0, met_t = 2.0;
  met->add_option("--embeddings", met_embeddings, "embedding JSONL")
      ->required();
  met->add_option("--pairs", met_pairs,
                  "positive pairs JSONL {id_a,id_b} for alignment");
  met->add_option("--alpha", met_alpha, "alignment exponent (default 2)");
  met->add_option("--t", met_t, "uniformity temperature (default 2)");
  met->add_option("--out", met_out, "output JSON (default stdout)");
  met->callback([&] {
    const auto embs = io::read_embeddings(met_embeddings);
    std::map<std::string, const Embedding*> by_id;
    std::vector<RealVector> points;
    for (const auto& e : embs) {
      by_id[e.id] = &e;
      points.push_back(e.vector);
    }
    MetricReport report;
    report.alpha = met_alpha;
    report.t = met_t;
    report.n_points = points.size();
    report.uniformity = uniformity(points, met_t);
    if (!met_pairs.empty()) {
      PairSet pairs;
      const auto lines = io::read_lines(met_pairs);
      for (std::size_t i = 0; i < lines.size(); ++i) {
        if (lines[i].empty()) continue;
        const Json j = io::parse_record(met_pairs, i + 1, lines[i]);
        const auto ida = io::field<std::string>(j, "id_a", met_pairs, i + 1);
        const auto idb = io::field<std::string>(j, "id_b", met_pairs, i + 1);
        if (!by_id.count(ida) || !by_id.count(idb)) {
          throw Error(met_pairs + ": record " + std::to_string(i + 1) +
                      " references unknown embedding id");
        }
        pairs.emplace_back(by_id.at(ida)->vector, by_id.at(idb)->vector);
      }
      report.alignment = alignment(pairs, met_alpha);
      report.n_pairs = pairs.size();
    }
    emit(io::metric_report_to_json(report), met_out);
    std::cerr << "metrics over " << points.size() << " embeddings\n";
  });

  // ---- eval ----
  auto* evl = app.add_subcommand("eval", "desk-scale strategy evaluation");
  ModelSource evl_src;
  RunFlags evl_flags;
  std::string evl_task, evl_data, evl_docs, evl_queries, evl_qrels, evl_out,
      evl_id_corpus, evl_run_config;
  std::size_t evl_k = 10;
  CLI::Option* evl_seed_opt = add_model_flags(evl, evl_src);
  evl->add_option("--task", evl_task, "sts|retrieval|classify")->required();
  evl->add_option("--data", evl_data, "sts/classify JSONL");
  evl->add_option("--docs", evl_docs, "retrieval docs JSONL");
  evl->add_option("--queries", evl_queries, "retrieval queries JSONL");
  evl->add_option("--qrels", evl_qrels, "retrieval qrels TSV");
  auto* eso = evl->add_option("--strategy", evl_flags.strategy,
                              "kv|last_token|mean|prompteol|echo");
  auto* epo = evl->add_option("--pooling", evl_flags.pooling,
                              "last|mean|hybrid");
  auto* elo = evl->add_option("--layers", evl_flags.layers,
                              "explicit list or auto:window|auto:multimin");
  auto* ebo = evl->add_option("--bias", evl_flags.bias, "attention bias");
  evl->add_option("--k", evl_k, "NDCG cutoff (default 10)");
  evl->add_option("--id-corpus", evl_id_corpus,
                  "texts for auto layer selection");
  evl->add_option("--run-config", evl_run_config, "run-config JSON defaults");
  evl->add_option("--out", evl_out, "output JSON (default stdout)");
  evl->callback([&] {
    evl_flags.strategy_set = eso->count() > 0;
    evl_flags.pooling_set = epo->count() > 0;
    evl_flags.layers_set = elo->count() > 0;
    evl_flags.bias_set = ebo->count() > 0;
    merge_run_config(evl_run_config, evl_flags, evl_src,
                     !evl_src.model_path.empty() || !evl_src.config_path.empty(),
                     evl_seed_opt->count() > 0);
    const auto [cfg, w] = resolve_model(evl_src);

    const LayerChoice choice = parse_layers(evl_flags.layers);
    std::vector<std::string> selection_corpus;
    if (choice.is_auto) {
      if (evl_id_corpus.empty()) {
        throw Error("eval: auto layer selection needs --id-corpus");
      }
      for (const auto& r : io::read_text_corpus(evl_id_corpus)) {
        selection_corpus.push_back(r.text);
      }
    }
    const auto layers =
        resolve_layers(choice, w, cfg, selection_corpus, Role::context);
    const StrategySpec spec = build_spec(evl_flags, layers);

    EvalReport report;
    if (evl_task == "sts") {
      if (evl_data.empty()) throw Error("eval sts: --data required");
      report = eval_sts(w, cfg, io::read_sts(evl_data), spec);
    } else if (evl_task == "retrieval") {
      if (evl_docs.empty() || evl_queries.empty() || evl_qrels.empty()) {
        throw Error("eval retrieval: --docs, --queries and --qrels required");
      }
      RetrievalCorpus corpus;
      corpus.docs = io::read_id_text(evl_docs);
      corpus.queries = io::read_id_text(evl_queries);
      corpus.qrels = io::read_qrels(evl_qrels);
      report = eval_retrieval(w, cfg, corpus, spec, evl_k);
    } else if (evl_task == "classify") {
      if (evl_data.empty()) throw Error("eval classify: --data required");
      report = eval_classify(w, cfg, io::read_labeled(evl_data, true), spec);
    } else {
      throw Error("unknown eval task '" + evl_task + "'");
    }
    emit(io::eval_report_to_json(report), evl_out);
    std::cerr << report.task << " " << report.metric << ": ";
    if (report.value) {
      std::cerr << *report.value << "\n";
    } else {
      std::cerr << "degenerate\n";
    }
  });

  // ---- attn-dump ----
  auto* atd = app.add_subcommand(
      "attn-dump", "post-softmax attention weights of one pass");
  ModelSource atd_src;
  std::string atd_text, atd_layers, atd_prompt_role = "none", atd_out;
  double atd_bias = 1.0;
  std::int64_t atd_layer = -1, atd_head = -1;
  add_model_flags(atd, atd_src);
  atd->add_option("--text", atd_text, "input text")->required();
  atd->add_option("--layers", atd_layers, "re-routed layers, e.g. '2,3'");
  atd->add_option("--bias", atd_bias, "attention bias (default 1.0)");
  atd->add_option("--prompt-role", atd_prompt_role,
                  "wrap text in the compression prompt: query|context|none");
  atd->add_option("--layer", atd_layer, "dump a single layer");
  atd->add_option("--head", atd_head, "dump a single head");
  atd->add_option("--out", atd_out, "output JSONL (default stdout)");
  atd->callback([&] {
    const auto [cfg, w] = resolve_model(atd_src);
    std::string text = atd_text;
    if (atd_prompt_role != "none") {
      text = apply_prompt(text, parse_role(atd_prompt_role));
    }
    const TokenSequence tokens = tokenize(text, cfg);
    const LayerChoice choice = parse_layers(atd_layers);
    if (choice.is_auto) {
      throw Error("attn-dump: --layers must be explicit");
    }
    RerouteConfig rc{choice.explicit_layers, atd_bias,
                     !choice.explicit_layers.empty()};
    std::optional<std::size_t> layer, head;
    if (atd_layer >= 0) layer = static_cast<std::size_t>(atd_layer);
    if (atd_head >= 0) head = static_cast<std::size_t>(atd_head);
    const auto dumps = collect_attention(w, cfg, tokens, rc, layer, head);
    std::vector<Json> lines;
    for (const auto& d : dumps) lines.push_back(io::dump_to_json(d));
    emit_lines(lines, atd_out);
    std::cerr << "dumped " << dumps.size() << " (layer, head) attention map(s)\n";
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;  // command-line misuse is an input error
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const kvembed::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
}
