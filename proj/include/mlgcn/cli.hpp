#pragma once

// Command-line entry point. Exit codes: 0 success, 1 domain error, 2 usage.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "CLI11.hpp"
#include "mlgcn/mlgcn.hpp"

namespace mlgcn::cli {

namespace detail {

inline std::ifstream open_in(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path + "' for reading");
  return in;
}

inline std::ofstream open_out(const std::string& path) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  return out;
}

inline void finish(std::ofstream& out, const std::string& path) {
  out.flush();
  if (!out) throw Error("write failed for '" + path + "'");
}

// Manifest echo for artifacts whose format has no room for one.
inline void write_sidecar(const std::string& path, const nlohmann::ordered_json& j) {
  auto out = open_out(path + ".json");
  out << j.dump(2) << '\n';
  finish(out, path + ".json");
}

inline Vocab load_vocab(const std::string& path) {
  auto in = open_in(path);
  return Vocab::load(in);
}

inline BipartiteGraph load_graph_file(const std::string& path) {
  auto in = open_in(path);
  return load_graph(in);
}

inline Checkpoint load_checkpoint_file(const std::string& path, const Vocab& vocab) {
  auto in = open_in(path);
  return load_checkpoint(in, vocab.content_hash());
}

inline EmbeddingIndex load_index_file(const std::string& path) {
  auto in = open_in(path);
  return load_index(in);
}

inline std::vector<LogRecord> load_logs(const std::string& path) {
  auto in = open_in(path);
  return ingest_logs(in);
}

inline std::vector<CatalogEntry> load_catalog(const std::string& path) {
  auto in = open_in(path);
  return read_catalog(in);
}

// `key=value` lines; blank lines and lines starting with '#' are ignored.
inline std::vector<std::pair<std::string, std::string>> read_config_file(const std::string& path) {
  auto in = open_in(path);
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto v = CLI::detail::trim_copy(std::string(strip_cr(line)));
    if (v.empty() || v[0] == '#') continue;
    const auto eq = v.find('=');
    if (eq == std::string::npos) throw CLI::ValidationError("--config", "line " + std::to_string(line_no) + ": expected key=value");
    out.emplace_back(CLI::detail::trim_copy(v.substr(0, eq)), CLI::detail::trim_copy(v.substr(eq + 1)));
  }
  return out;
}

inline std::vector<SynthLanguage> parse_languages(const std::string& spec) {
  std::vector<SynthLanguage> out;
  for (auto item : split_fields(spec, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string_view::npos) throw Error("language spec '" + std::string(item) + "' must be code:pairs");
    SynthLanguage l;
    l.code = std::string(item.substr(0, colon));
    l.pairs = mlgcn::detail::parse_number<std::size_t>("languages", item.substr(colon + 1));
    out.push_back(std::move(l));
  }
  return out;
}

// `name:key=value,key=value`
inline AblationArm parse_arm(const std::string& spec) {
  AblationArm arm;
  const auto colon = spec.find(':');
  arm.name = spec.substr(0, colon);
  if (arm.name.empty()) throw Error("arm spec '" + spec + "' has no name");
  if (colon == std::string::npos) return arm;
  for (auto kv : split_fields(std::string_view(spec).substr(colon + 1), ',')) {
    if (kv.empty()) continue;
    const auto eq = kv.find('=');
    if (eq == std::string_view::npos) throw Error("arm override '" + std::string(kv) + "' must be key=value");
    arm.overrides.emplace_back(std::string(kv.substr(0, eq)), std::string(kv.substr(eq + 1)));
  }
  return arm;
}

struct TrainFlags {
  std::map<std::string, std::string> values;

  void add_to(CLI::App& app) {
    static const std::vector<std::pair<std::string, std::string>> flags = {
        {"neg-mode", "negative mode: random, behavior, offline, online"},
        {"fusion", "unweight-separate, weight-mix, weight-separate"},
        {"smoothing", "language smoothing factor S in [0,1]"},
        {"warmup-frac", "fraction of batches trained with random negatives"},
        {"batch-size", "triplets per batch"},
        {"dim", "output embedding dimension"},
        {"embed-dim", "token embedding dimension"},
        {"total-batches", "number of training batches"},
        {"gcn", "use the graph-convolution layer (true/false)"},
        {"exclude-self-neighbor", "drop the training query from its product's neighbors"},
        {"lr", "Adam learning rate"},
        {"offline-refresh", "batches between offline hard-negative refreshes"},
        {"offline-window-lo", "first rank of the offline sampling window"},
        {"offline-window-hi", "last rank of the offline sampling window"},
        {"offline-per-query", "offline negatives kept per query"},
        {"online-pool", "online candidate pool size (0: batch size)"},
        {"online-batch-positives", "add the batch positives to the online pool"},
    };
    for (const auto& [name, help] : flags) app.add_option("--" + name, values[name], help);
  }

  TrainConfig resolve(CLI::App& app, std::uint64_t seed, std::size_t threads) const {
    TrainConfig c;
    c.seed = seed;
    c.threads = threads;
    for (const auto& [name, value] : values) {
      if (app.get_option("--" + name)->count() == 0) continue;
      apply_train_override(c, name, value);
    }
    c.warmup_batches();
    return c;
  }
};

}  // namespace detail

// Runs one command line. `out` receives data written to standard output,
// `err` receives logs.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Multilingual GCN two-tower product retrieval", "mlgcn"};
  app.require_subcommand(1);
  app.fallthrough();
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  std::string config_path;
  app.add_option("--seed", seed, "random seed")->capture_default_str();
  app.add_option("--threads", threads, "worker threads")->capture_default_str()->check(CLI::PositiveNumber);
  app.add_option("--config", config_path, "flat key=value file; flags override it");
  // Checked after the config file is merged, so files may supply them.
  std::vector<CLI::Option*> required;
  auto need = [&](CLI::Option* o) {
    o->description(o->get_description() + " (required)");
    required.push_back(o);
  };

  // synth
  auto* synth = app.add_subcommand("synth", "write a synthetic multilingual corpus");
  std::string synth_dir, synth_langs = "en:16000,es:2000,fr:1000,it:600,de:400";
  SynthConfig sc;
  need(synth->add_option("--out-dir", synth_dir, "output directory"));
  synth->add_option("--languages", synth_langs, "code:pairs list")->capture_default_str();
  synth->add_option("--gap-rate", sc.gap_rate, "share of synonym-only queries")->capture_default_str();
  synth->add_option("--concepts", sc.concepts, "latent product concepts")->capture_default_str();
  synth->add_option("--min-multiplicity", sc.min_multiplicity, "fewest queries per concept")->capture_default_str();
  synth->add_option("--max-multiplicity", sc.max_multiplicity, "most queries per concept")->capture_default_str();
  synth->add_option("--distractors", sc.distractors, "distractor products per language")->capture_default_str();
  synth->add_option("--eval-queries", sc.eval_queries, "held-out queries per language")->capture_default_str();

  // build-vocab
  auto* bv = app.add_subcommand("build-vocab", "build the word-piece vocabulary");
  std::string bv_logs, bv_catalog, bv_out;
  std::size_t vocab_size = 8192, min_freq = 2;
  need(bv->add_option("--logs", bv_logs, "behavior log TSV"));
  need(bv->add_option("--catalog", bv_catalog, "catalog TSV"));
  need(bv->add_option("--out", bv_out, "vocabulary file"));
  bv->add_option("--vocab-size", vocab_size, "maximum vocabulary size")->capture_default_str();
  bv->add_option("--min-freq", min_freq, "minimum whole-word frequency")->capture_default_str();

  // build-graph
  auto* bg = app.add_subcommand("build-graph", "build the query-product graph");
  std::string bg_logs, bg_catalog, bg_out, bg_signals = "purchase";
  std::uint32_t t_max = 25;
  need(bg->add_option("--logs", bg_logs, "behavior log TSV"));
  need(bg->add_option("--catalog", bg_catalog, "catalog TSV"));
  need(bg->add_option("--out", bg_out, "graph file"));
  bg->add_option("--t-max", t_max, "neighbor cap per product")->capture_default_str();
  bg->add_option("--positive-signals", bg_signals, "comma list of click, purchase")->capture_default_str();

  // train
  auto* tr = app.add_subcommand("train", "train the two-tower model");
  std::string tr_graph, tr_vocab, tr_logs, tr_out, tr_trace;
  std::size_t checkpoint_every = 0;
  detail::TrainFlags tr_flags;
  need(tr->add_option("--graph", tr_graph, "graph file"));
  need(tr->add_option("--vocab", tr_vocab, "vocabulary file"));
  tr->add_option("--logs", tr_logs, "behavior log TSV (behavior negatives)");
  need(tr->add_option("--out", tr_out, "checkpoint file"));
  tr->add_option("--trace", tr_trace, "loss trace TSV");
  tr->add_option("--checkpoint-every", checkpoint_every, "intermediate checkpoint cadence in batches");
  tr_flags.add_to(*tr);

  // grad-check
  auto* gc = app.add_subcommand("grad-check", "compare analytic and numeric gradients");
  double gc_h = 1e-5, gc_tol = 1e-4;
  std::size_t gc_coords = 210;
  gc->add_option("--step", gc_h, "central-difference step")->capture_default_str();
  gc->add_option("--coords", gc_coords, "sampled coordinates")->capture_default_str();
  gc->add_option("--tol", gc_tol, "maximum relative error")->capture_default_str();

  // embed
  auto* em = app.add_subcommand("embed", "precompute product embeddings");
  std::string em_graph, em_vocab, em_ckpt, em_out;
  need(em->add_option("--graph", em_graph, "graph file"));
  need(em->add_option("--vocab", em_vocab, "vocabulary file"));
  need(em->add_option("--checkpoint", em_ckpt, "checkpoint file"));
  need(em->add_option("--out", em_out, "raw embedding file (unnormalized index format)"));

  // index
  auto* ix = app.add_subcommand("index", "build the search index from embeddings");
  std::string ix_in, ix_out;
  bool ix_normalize = true;
  need(ix->add_option("--embeddings", ix_in, "output of embed"));
  need(ix->add_option("--out", ix_out, "index file"));
  ix->add_option("--normalize", ix_normalize, "L2-normalize rows")->capture_default_str();

  // search
  auto* se = app.add_subcommand("search", "retrieve the top-K products for a query");
  std::string se_index, se_vocab, se_ckpt, se_query, se_score = "cosine", se_lang;
  std::size_t topk = 10, shards = 1;
  need(se->add_option("--index", se_index, "index file"));
  need(se->add_option("--vocab", se_vocab, "vocabulary file"));
  need(se->add_option("--checkpoint", se_ckpt, "checkpoint file"));
  need(se->add_option("--query", se_query, "query text"));
  se->add_option("--topk", topk, "results to return")->capture_default_str()->check(CLI::PositiveNumber);
  se->add_option("--score", se_score, "cosine or inner")->capture_default_str()->check(CLI::IsMember({"cosine", "inner"}));
  se->add_option("--lang", se_lang, "restrict to one language");
  se->add_option("--shards", shards, "scan shards")->capture_default_str()->check(CLI::PositiveNumber);

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on held-out queries");
  std::string ev_graph, ev_vocab, ev_ckpt, ev_eval, ev_index, ev_out, ev_per_query, ev_arm = "model", ev_score = "cosine";
  std::size_t ev_topk = 10, corpus_size = 5000;
  need(ev->add_option("--graph", ev_graph, "graph file"));
  need(ev->add_option("--vocab", ev_vocab, "vocabulary file"));
  need(ev->add_option("--checkpoint", ev_ckpt, "checkpoint file"));
  need(ev->add_option("--eval", ev_eval, "held-out query TSV"));
  ev->add_option("--index", ev_index, "take corpus vectors from this index");
  need(ev->add_option("--out", ev_out, "metrics TSV"));
  ev->add_option("--per-query", ev_per_query, "per-query metrics TSV");
  ev->add_option("--arm", ev_arm, "arm label in the report")->capture_default_str();
  ev->add_option("--topk", ev_topk, "K for recall@K")->capture_default_str()->check(CLI::PositiveNumber);
  ev->add_option("--score", ev_score, "cosine or inner")->capture_default_str()->check(CLI::IsMember({"cosine", "inner"}));
  ev->add_option("--corpus-size", corpus_size, "eval corpus products per language")->capture_default_str();

  // ablate
  auto* ab = app.add_subcommand("ablate", "train and evaluate several configurations");
  std::string ab_graph, ab_vocab, ab_logs, ab_eval, ab_out, ab_long, ab_score = "cosine";
  std::vector<std::string> ab_arms;
  std::size_t ab_topk = 10, ab_corpus = 5000;
  detail::TrainFlags ab_flags;
  need(ab->add_option("--graph", ab_graph, "graph file"));
  need(ab->add_option("--vocab", ab_vocab, "vocabulary file"));
  ab->add_option("--logs", ab_logs, "behavior log TSV (behavior negatives)");
  need(ab->add_option("--eval", ab_eval, "held-out query TSV"));
  need(ab->add_option("--out", ab_out, "wide comparison TSV"));
  ab->add_option("--metrics-out", ab_long, "long-format metrics TSV for every arm");
  ab->add_option("--arm", ab_arms, "name:key=value,... (repeatable); default full and no-gcn");
  ab->add_option("--topk", ab_topk, "K for recall@K")->capture_default_str()->check(CLI::PositiveNumber);
  ab->add_option("--score", ab_score, "cosine or inner")->capture_default_str()->check(CLI::IsMember({"cosine", "inner"}));
  ab->add_option("--corpus-size", ab_corpus, "eval corpus products per language")->capture_default_str();
  ab_flags.add_to(*ab);

  CLI::App* sub = nullptr;
  try {
    app.parse(argc, argv);
    sub = app.get_subcommands().front();
    if (!config_path.empty()) {
      for (const auto& [key, value] : detail::read_config_file(config_path)) {
        CLI::Option* opt = sub->get_option_no_throw("--" + key);
        if (!opt) opt = app.get_option_no_throw("--" + key);
        if (!opt || key == "config") throw CLI::ExtrasError("unknown config key '" + key + "'", CLI::ExitCodes::ExtrasError);
        if (opt->count() > 0) continue;  // the command line wins
        opt->add_result(value);
        opt->run_callback();
      }
    }
    for (const auto* opt : required) {
      if (sub->get_option_no_throw(opt->get_name()) == opt && opt->count() == 0) {
        throw CLI::RequiredError(opt->get_name());
      }
    }
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n" << "run with --help for usage\n";
    return 2;
  } catch (const Error& e) {
    err << "usage error: " << e.what() << "\n";
    return 2;
  }

  const std::string stage = sub->get_name();
  try {
    for (const CLI::App* scope : {static_cast<const CLI::App*>(&app), static_cast<const CLI::App*>(sub)}) {
      for (const CLI::Option* opt : scope->get_options()) {
        if (opt->get_name() == "--help" || opt->get_name().empty()) continue;
        std::string value = opt->count() > 0 ? CLI::detail::join(opt->results(), ",") : opt->get_default_str();
        if (value.empty() && opt->count() == 0) value = "(unset)";
        err << "config: " << opt->get_name().substr(2) << '=' << value << '\n';
      }
    }

    if (sub == synth) {
      sc.seed = seed;
      sc.languages = detail::parse_languages(synth_langs);
      const auto corpus = generate_corpus(sc);
      const std::string dir = synth_dir.empty() ? "." : synth_dir;
      auto logs = detail::open_out(dir + "/logs.tsv");
      write_log_records(corpus.logs, logs);
      detail::finish(logs, dir + "/logs.tsv");
      auto cat = detail::open_out(dir + "/catalog.tsv");
      write_catalog(corpus.catalog, cat);
      detail::finish(cat, dir + "/catalog.tsv");
      auto evf = detail::open_out(dir + "/eval.tsv");
      write_eval_queries(corpus.eval, evf);
      detail::finish(evf, dir + "/eval.tsv");
      nlohmann::ordered_json m;
      m["seed"] = seed;
      m["languages"] = synth_langs;
      m["gap_rate"] = sc.gap_rate;
      m["concepts"] = sc.concepts;
      m["min_multiplicity"] = sc.min_multiplicity;
      m["max_multiplicity"] = sc.max_multiplicity;
      m["distractors"] = sc.distractors;
      m["eval_queries"] = sc.eval_queries;
      auto mf = detail::open_out(dir + "/synth.json");
      mf << m.dump(2) << '\n';
      detail::finish(mf, dir + "/synth.json");
      err << "synth: " << corpus.logs.size() << " log records, " << corpus.catalog.size() << " products, "
          << corpus.eval.size() << " held-out queries\n";
    } else if (sub == bv) {
      std::vector<std::string> lines;
      {
        auto in = detail::open_in(bv_logs);
        for_each_log_record(in, [&](LogRecord&& r) { lines.push_back(std::move(r.query)); });
      }
      for (auto& e : detail::load_catalog(bv_catalog)) lines.push_back(std::move(e.text));
      const Vocab vocab = build_vocab(lines, vocab_size, min_freq);
      auto o = detail::open_out(bv_out);
      vocab.save(o);
      detail::finish(o, bv_out);
      detail::write_sidecar(bv_out, {{"vocab_size", vocab_size},
                                     {"min_freq", min_freq},
                                     {"pieces", vocab.size()},
                                     {"hash", hex64(vocab.content_hash())}});
      err << "build-vocab: " << vocab.size() << " pieces\n";
    } else if (sub == bg) {
      GraphOptions go;
      go.t_max = t_max;
      go.positive_signals.clear();
      for (auto s : split_fields(bg_signals, ',')) {
        auto sig = parse_signal(s);
        if (!sig) throw Error("unknown signal '" + std::string(s) + "'");
        go.positive_signals.insert(*sig);
      }
      const auto graph = build_graph(detail::load_logs(bg_logs), detail::load_catalog(bg_catalog), go);
      auto o = detail::open_out(bg_out);
      save_graph(graph, o);
      detail::finish(o, bg_out);
      err << "build-graph: " << graph.products.size() << " products, " << graph.positives.size() << " queries\n";
    } else if (sub == tr) {
      const TrainConfig cfg = tr_flags.resolve(*tr, seed, threads);
      err << "config: train " << cfg.to_json().dump() << '\n';
      if (cfg.negative_mode == NegativeMode::kBehavior && tr_logs.empty()) {
        throw Error("behavior negatives need --logs");
      }
      const Vocab vocab = detail::load_vocab(tr_vocab);
      const auto graph = detail::load_graph_file(tr_graph);
      std::map<QueryKey, std::set<std::string>> behavior;
      if (!tr_logs.empty()) behavior = behavior_negatives(detail::load_logs(tr_logs));
      const TrainingCorpus corpus(graph, vocab, behavior);
      TrainConfig run_cfg = cfg;
      run_cfg.checkpoint_every = checkpoint_every;
      const auto manifest = [&] {
        return checkpoint_manifest({vocab.size(), cfg.embed_dim, cfg.dim, cfg.gcn}, cfg.seed, vocab.content_hash(),
                                   cfg.to_json());
      };
      const auto result = train(run_cfg, corpus, vocab.size(), [&](std::size_t done, const ModelParams<float>& p) {
        const std::string path = tr_out + "." + std::to_string(done);
        auto o = detail::open_out(path);
        save_checkpoint(p, manifest(), o);
        detail::finish(o, path);
      });
      auto o = detail::open_out(tr_out);
      save_checkpoint(result.params, manifest(), o);
      detail::finish(o, tr_out);
      if (!tr_trace.empty()) {
        auto t = detail::open_out(tr_trace);
        write_trace(result.trace, t);
        detail::finish(t, tr_trace);
        detail::write_sidecar(tr_trace, cfg.to_json());
      }
      err << "train: " << result.trace.size() << " batches, warm-up " << cfg.warmup_batches() << ", final loss "
          << (result.trace.empty() ? 0.0f : result.trace.back().loss) << '\n';
    } else if (sub == gc) {
      const auto fx = make_gradcheck_fixture(seed);
      const auto r = grad_check(fx.params, fx.batch, gc_h, gc_coords, seed);
      out << "max_rel_error\t" << r.max_rel_error << "\ncoordinates\t" << r.coordinates << '\n';
      for (std::size_t t = 0; t < kTensorCount; ++t) out << kTensorNames[t] << '\t' << r.per_tensor[t] << '\n';
      if (!(r.max_rel_error < gc_tol)) throw Error("max relative error " + std::to_string(r.max_rel_error) + " exceeds tolerance");
    } else if (sub == em) {
      const Vocab vocab = detail::load_vocab(em_vocab);
      const auto graph = detail::load_graph_file(em_graph);
      const auto ckpt = detail::load_checkpoint_file(em_ckpt, vocab);
      const auto pre = precompute_embeddings(graph, vocab, ckpt.params, {}, threads);
      auto index = build_index(rows_from_embeddings(graph, pre.embeddings), false, ckpt.params.shape.dim);
      index.set_params_hash(hex64(params_fingerprint(ckpt.params)));
      auto o = detail::open_out(em_out);
      save_index(index, o);
      detail::finish(o, em_out);
      err << "embed: " << pre.embeddings.size() << " products, " << pre.query_encodes << " unique queries encoded\n";
    } else if (sub == ix) {
      const auto raw = detail::load_index_file(ix_in);
      std::vector<EmbeddingRow> rows;
      rows.reserve(raw.size());
      for (std::size_t i = 0; i < raw.size(); ++i) {
        const auto r = raw.row(i);
        rows.push_back({raw.ids()[i], raw.languages()[i], {r.begin(), r.end()}});
      }
      auto index = build_index(rows, ix_normalize, raw.dim());
      index.set_params_hash(raw.params_hash());
      auto o = detail::open_out(ix_out);
      save_index(index, o);
      detail::finish(o, ix_out);
      err << "index: " << index.size() << " rows, " << index.zero_row_count() << " zero rows\n";
    } else if (sub == se) {
      const Vocab vocab = detail::load_vocab(se_vocab);
      const auto ckpt = detail::load_checkpoint_file(se_ckpt, vocab);
      const auto index = detail::load_index_file(se_index);
      SearchOptions so;
      so.score = parse_score_mode(se_score);
      so.language = se_lang;
      so.shards = shards;
      so.threads = threads;
      const auto res = search(se_query, vocab, ckpt.params, index, topk, so);
      if (res.zero_query) err << "warning: query embedding is zero; all scores are 0\n";
      out << "rank\tproduct_id\tscore\n";
      char buf[32];
      for (std::size_t i = 0; i < res.hits.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%.6f", res.hits[i].score);
        out << i + 1 << '\t' << res.hits[i].product_id << '\t' << buf << '\n';
      }
    } else if (sub == ev) {
      const Vocab vocab = detail::load_vocab(ev_vocab);
      const auto graph = detail::load_graph_file(ev_graph);
      const auto ckpt = detail::load_checkpoint_file(ev_ckpt, vocab);
      auto qin = detail::open_in(ev_eval);
      const auto es = build_eval_set(read_eval_queries(qin), graph, corpus_size, seed);
      EvalOptions eo;
      eo.k = ev_topk;
      eo.score = parse_score_mode(ev_score);
      eo.threads = threads;
      eo.keep_per_query = !ev_per_query.empty();
      MetricsReport rep = ev_index.empty()
                              ? evaluate(ckpt.params, vocab, graph, es, eo)
                              : evaluate_index(detail::load_index_file(ev_index), vocab, ckpt.params, es, eo);
      rep.config = {{"checkpoint", ckpt.manifest}, {"eval_seed", seed}, {"corpus_size", corpus_size}};
      auto o = detail::open_out(ev_out);
      write_metrics_tsv(rep, ev_arm, o);
      detail::finish(o, ev_out);
      detail::write_sidecar(ev_out, metrics_json(rep));
      if (!ev_per_query.empty()) {
        auto pq = detail::open_out(ev_per_query);
        write_per_query_tsv(rep, ev_arm, pq);
        detail::finish(pq, ev_per_query);
      }
      const auto& all = rep.row("all");
      err << "eval: recall@" << eo.k << " " << all.recall << ", mAP " << all.map << " over " << all.n_queries
          << " queries\n";
    } else if (sub == ab) {
      const TrainConfig base = ab_flags.resolve(*ab, seed, threads);
      err << "config: base " << base.to_json().dump() << '\n';
      std::vector<AblationArm> arms;
      for (const auto& s : ab_arms) arms.push_back(detail::parse_arm(s));
      if (arms.empty()) arms = {{"full", {}}, {"no-gcn", {{"gcn", "false"}}}};
      const Vocab vocab = detail::load_vocab(ab_vocab);
      const auto graph = detail::load_graph_file(ab_graph);
      std::map<QueryKey, std::set<std::string>> behavior;
      if (!ab_logs.empty()) behavior = behavior_negatives(detail::load_logs(ab_logs));
      const TrainingCorpus corpus(graph, vocab, behavior);
      auto qin = detail::open_in(ab_eval);
      const auto es = build_eval_set(read_eval_queries(qin), graph, ab_corpus, seed);
      EvalOptions eo;
      eo.k = ab_topk;
      eo.score = parse_score_mode(ab_score);
      eo.threads = threads;
      const auto table = run_ablation_grid(base, arms, corpus, vocab, graph, es, eo,
                                           [&](const AblationArm& arm, const TrainResult&, const MetricsReport& r) {
                                             err << "ablate: " << arm.name << " recall@" << eo.k << " "
                                                 << r.row("all").recall << '\n';
                                           });
      auto o = detail::open_out(ab_out);
      write_ablation_tsv(table, o);
      detail::finish(o, ab_out);
      nlohmann::ordered_json side;
      for (std::size_t i = 0; i < table.arms.size(); ++i) side[table.arms[i]] = table.configs[i].to_json();
      detail::write_sidecar(ab_out, side);
      if (!ab_long.empty()) {
        auto l = detail::open_out(ab_long);
        write_metrics_header(l);
        for (std::size_t i = 0; i < table.arms.size(); ++i) write_metrics_rows(table.reports[i], table.arms[i], l);
        detail::finish(l, ab_long);
      }
    }
  } catch (const std::exception& e) {
    err << "error: " << stage << ": " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace mlgcn::cli
