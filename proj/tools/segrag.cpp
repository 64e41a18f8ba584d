// segrag: clean -> pairs -> train -> chunk -> eval-retrieval / eval-generation, plus bench.

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include <segrag/segrag.hpp>

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace segrag;

namespace {

void emit(const ordered_json& j, const std::string& path = {}) {
  if (path.empty() || path == "-") {
    std::cout << j.dump() << '\n';
  } else {
    io::write_file_atomic(path, j.dump(2) + "\n");
  }
}

void warn(const std::string& message) {
  ordered_json j;
  j["warning"] = message;
  std::cerr << j.dump() << '\n';
}

int fail(ErrorKind kind, const std::string& message) {
  static constexpr const char* names[] = {"usage", "data", "divergence"};
  ordered_json j;
  j["error"] = names[static_cast<int>(kind)];
  j["message"] = message;
  std::cerr << j.dump() << '\n';
  return exit_code(kind);
}

void require_file(const std::string& path, const char* what) {
  if (!fs::is_regular_file(path)) throw DataError(std::string(what) + " not found: " + path);
}

std::vector<std::size_t> parse_ks(const std::string& s) {
  std::vector<std::size_t> ks;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    try {
      std::size_t pos = 0;
      const auto k = std::stoull(item, &pos);
      if (pos != item.size() || k == 0) throw std::invalid_argument(item);
      ks.push_back(k);
    } catch (const std::logic_error&) {
      throw ConfigError("bad --ks entry '" + item + "', expected positive integers");
    }
  }
  if (ks.empty()) throw ConfigError("--ks is empty");
  std::sort(ks.begin(), ks.end());
  ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
  return ks;
}

// ---------------------------------------------------------------------------

struct CleanArgs {
  std::string xml_dir, out;
};

void cmd_clean(const CleanArgs& a) {
  if (!fs::is_directory(a.xml_dir)) throw DataError("xml directory not found: " + a.xml_dir);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(a.xml_dir))
    if (e.is_regular_file() && e.path().extension() == ".xml") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw DataError("no .xml files in " + a.xml_dir);

  std::vector<std::optional<Document>> parsed(files.size());
  std::vector<std::string> empty(files.size());
  parallel::parallel_for(files.size(), [&](std::size_t i) {
    try {
      parsed[i] = corpus::clean_jats(io::read_file(files[i]), files[i].stem().string());
    } catch (const corpus::EmptyDocumentError& e) {
      empty[i] = files[i].filename().string() + ": " + e.what();
    }
  });
  std::vector<Document> docs;
  for (std::size_t i = 0; i < files.size(); ++i) {
    if (parsed[i]) docs.push_back(std::move(*parsed[i]));
    else warn("skipped " + empty[i]);
  }
  if (docs.empty()) throw DataError("no document in " + a.xml_dir + " produced any sentence");
  corpus::save_documents(docs, a.out);
  ordered_json j;
  j["documents"] = docs.size();
  j["skipped"] = files.size() - docs.size();
  emit(j);
}

struct PairsArgs {
  std::string docs, out;
  std::uint64_t seed = 42;
  double neg_ratio = 1.0;
};

void cmd_pairs(const PairsArgs& a) {
  require_file(a.docs, "documents file");
  const auto ds = pairgen::build_dataset(corpus::load_documents(a.docs), a.seed, a.neg_ratio);
  for (const auto& w : ds.warnings) warn(w);
  pairgen::save_pairs(ds.pairs, a.out);
  ordered_json j;
  j["pairs"] = ds.pairs.size();
  j["positives"] = ds.positives;
  j["negatives"] = ds.negatives;
  emit(j);
}

struct TrainArgs {
  std::string pairs, out, log, provider = "test:64:42", variant = "psc";
  boundary::TrainConfig cfg;
};

void cmd_train(const TrainArgs& a) {
  require_file(a.pairs, "pairs file");
  if (a.cfg.epochs < 0) throw ConfigError("--epochs must be >= 0");
  const auto variant = boundary::parse_variant(a.variant);
  const auto provider = embedding::make_provider(a.provider);
  const auto pairs = pairgen::load_pairs(a.pairs);
  const auto result = boundary::train(variant, pairs, *provider, a.cfg);
  boundary::save_model(result.model, a.out);
  if (!a.log.empty()) io::write_file_atomic(a.log, boundary::serialize_log(result.log));
  ordered_json j;
  j["variant"] = boundary::to_string(variant);
  j["d"] = result.model.d;
  j["best_epoch"] = result.best_epoch;
  if (!result.log.empty()) {
    const auto& best = result.log[static_cast<std::size_t>(std::max(result.best_epoch, 1) - 1)];
    j["holdout_acc"] = best.holdout_acc ? ordered_json(*best.holdout_acc) : ordered_json(nullptr);
  }
  emit(j);
}

struct ChunkArgs {
  std::string docs, out, model, provider = "test:64:42", kind = "fixed", unit = "token";
  chunkers::ChunkerConfig cfg;
};

void cmd_chunk(ChunkArgs a) {
  require_file(a.docs, "documents file");
  a.cfg.kind = chunkers::parse_kind(a.kind);
  a.cfg.unit = chunkers::parse_unit(a.kind == "char" ? std::string("character") : a.unit);
  if ((a.cfg.kind == chunkers::Kind::fixed || a.cfg.kind == chunkers::Kind::recursive) && a.cfg.overlap >= a.cfg.size)
    throw ConfigError("--overlap must be smaller than --size");
  if (a.cfg.kind == chunkers::Kind::sentence && a.cfg.window_overlap >= a.cfg.window)
    throw ConfigError("--window-overlap must be smaller than --window");
  if (a.cfg.kind == chunkers::Kind::cosine_semantic && !(a.cfg.percentile > 0.0 && a.cfg.percentile < 100.0))
    throw ConfigError("--percentile must be in (0, 100)");

  std::unique_ptr<embedding::EmbeddingProvider> provider;
  std::optional<boundary::BoundaryModel> model;
  chunkers::ChunkContext ctx;
  if (a.cfg.kind == chunkers::Kind::cosine_semantic || a.cfg.kind == chunkers::Kind::model) {
    provider = embedding::make_provider(a.provider);
    ctx.provider = provider.get();
  }
  if (a.cfg.kind == chunkers::Kind::model) {
    if (a.model.empty()) throw ConfigError("--kind model requires --model");
    require_file(a.model, "model file");
    model = boundary::load_model(a.model);
    if (model->d != provider->dimension()) throw DimensionError(model->d, provider->dimension());
    ctx.model = &*model;
  }

  const auto docs = corpus::load_documents(a.docs);
  std::vector<std::vector<chunkers::Chunk>> per_doc(docs.size());
  parallel::parallel_for(docs.size(), [&](std::size_t i) { per_doc[i] = chunkers::chunk_document(docs[i], a.cfg, ctx); });
  std::vector<chunkers::Chunk> chunks;
  for (auto& v : per_doc) chunks.insert(chunks.end(), std::make_move_iterator(v.begin()), std::make_move_iterator(v.end()));
  chunkers::save_chunks(chunks, a.out);
  ordered_json j;
  j["documents"] = docs.size();
  j["chunks"] = chunks.size();
  j["mean_tokens"] = chunkers::mean_token_length(chunks);
  emit(j);
}

struct RetrievalArgs {
  std::string chunks, qa, provider = "test:64:42", scope = "corpus", ks = "3,5", results, summary;
  std::size_t k = 5;
  bool no_timing = false;
};

struct Prepared {
  std::unique_ptr<embedding::EmbeddingProvider> provider;
  std::optional<retrieval::ChunkIndex> index;
  std::vector<QARecord> qa;
  retrieval::RunConfig run;
};

Prepared prepare(const RetrievalArgs& a) {
  require_file(a.chunks, "chunks file");
  require_file(a.qa, "QA file");
  if (a.k == 0) throw ConfigError("--k must be >= 1");
  Prepared p;
  p.run.k = a.k;
  p.run.scope = retrieval::parse_scope(a.scope);
  p.provider = embedding::make_provider(a.provider);
  p.qa = corpus::load_qa(a.qa, true);
  p.index = retrieval::build_index(chunkers::load_chunks(a.chunks), *p.provider);
  return p;
}

void cmd_eval_retrieval(const RetrievalArgs& a) {
  const auto ks = parse_ks(a.ks);
  if (ks.back() > a.k) throw ConfigError("--ks entries must not exceed --k");
  const auto p = prepare(a);
  const auto results = retrieval::run_queries(*p.index, p.qa, *p.provider, p.run);
  if (!a.results.empty()) {
    std::string out;
    for (const auto& r : results) out += retrieval::to_json(*p.index, r, !a.no_timing).dump() + "\n";
    io::write_file_atomic(a.results, out);
  }
  emit(retrieval::to_json(retrieval::evaluate(results, ks), !a.no_timing), a.summary);
}

struct BenchArgs {
  RetrievalArgs r;
  std::size_t repeats = 5;
};

void cmd_bench(const BenchArgs& a) {
  if (a.repeats == 0) throw ConfigError("--repeats must be >= 1");
  const auto p = prepare(a.r);
  std::vector<double> times;
  for (std::size_t rep = 0; rep < a.repeats; ++rep)
    for (const auto& r : retrieval::run_queries(*p.index, p.qa, *p.provider, p.run)) times.push_back(r.query_time_s);
  ordered_json j;
  j["index_size"] = p.index->size();
  j["dimension"] = p.index->dimension();
  j["queries"] = times.size();
  j["mean_query_time_s"] = stats::mean(times);
  j["median_query_time_s"] = stats::percentile(times, 50.0);
  j["p95_query_time_s"] = stats::percentile(times, 95.0);
  emit(j);
}

struct GenerationArgs {
  std::string answers, qa, out;
};

void cmd_eval_generation(const GenerationArgs& a) {
  require_file(a.answers, "answers file");
  require_file(a.qa, "QA file");
  const auto rep = metrics::score_answers(metrics::load_answers(a.answers), corpus::load_qa(a.qa));
  if (!rep.missing_answers.empty()) warn(std::to_string(rep.missing_answers.size()) + " QA record(s) have no answer");
  if (!rep.unknown_answers.empty()) warn(std::to_string(rep.unknown_answers.size()) + " answer(s) match no QA record");
  emit(metrics::to_json(rep), a.out);
}

struct CacheArgs {
  std::string docs, qa, chunks, out, provider = "test:64:42";
};

void cmd_cache(const CacheArgs& a) {
  if (a.docs.empty() && a.qa.empty() && a.chunks.empty()) throw ConfigError("give at least one of --docs, --qa, --chunks");
  std::vector<std::string> texts;
  if (!a.docs.empty()) {
    require_file(a.docs, "documents file");
    for (const auto& d : corpus::load_documents(a.docs)) {
      auto s = d.flat_sentences();
      texts.insert(texts.end(), s.begin(), s.end());
    }
  }
  if (!a.qa.empty()) {
    require_file(a.qa, "QA file");
    for (const auto& r : corpus::load_qa(a.qa)) texts.push_back(r.question);
  }
  if (!a.chunks.empty()) {
    require_file(a.chunks, "chunks file");
    for (const auto& c : chunkers::load_chunks(a.chunks)) texts.push_back(c.text);
  }
  const auto provider = embedding::make_provider(a.provider);
  const auto entries = embedding::compute_entries(*provider, texts);
  embedding::write_cache(a.out, provider->dimension(), entries);
  ordered_json j;
  j["texts"] = texts.size();
  j["dimension"] = provider->dimension();
  emit(j);
}

struct CompareArgs {
  std::string a, b;
};

std::vector<double> reciprocal_ranks(const std::string& path) {
  require_file(path, "results file");
  std::vector<double> out;
  io::for_each_line(io::read_file(path), [&](std::string_view line, std::size_t n) {
    const std::string where = path + " line " + std::to_string(n);
    const auto j = corpus::detail::parse_line(line, where);
    const auto& r = corpus::detail::field(j, "first_relevant_rank", where);
    if (r.is_null()) {
      out.push_back(0.0);
    } else if (r.is_number_unsigned() && r.get<std::size_t>() > 0) {
      out.push_back(1.0 / static_cast<double>(r.get<std::size_t>()));
    } else {
      throw ValidationError(where + ": field 'first_relevant_rank' must be null or a positive integer");
    }
  });
  return out;
}

void cmd_compare(const CompareArgs& a) {
  const auto ra = reciprocal_ranks(a.a), rb = reciprocal_ranks(a.b);
  const auto t = metrics::ttest_independent(ra, rb);
  ordered_json j;
  j["n_a"] = ra.size();
  j["n_b"] = rb.size();
  j["mrr_a"] = ra.empty() ? 0.0 : stats::mean(ra);
  j["mrr_b"] = rb.empty() ? 0.0 : stats::mean(rb);
  j["t"] = t.t;
  j["df"] = t.df;
  j["p"] = t.p;
  emit(j);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Trainable semantic chunking and retrieval evaluation."};
  app.require_subcommand(1);
  app.get_formatter()->column_width(34);

  CleanArgs clean;
  auto* c = app.add_subcommand("clean", "Parse a directory of JATS XML into documents JSONL");
  c->add_option("--xml-dir", clean.xml_dir, "Directory of .xml files")->required();
  c->add_option("--out", clean.out, "Output documents JSONL")->required();

  PairsArgs pairs;
  auto* p = app.add_subcommand("pairs", "Build labelled sentence pairs");
  p->add_option("--docs", pairs.docs, "Documents JSONL")->required();
  p->add_option("--out", pairs.out, "Output pairs JSONL")->required();
  p->add_option("--seed", pairs.seed, "Sampling seed")->capture_default_str();
  p->add_option("--neg-ratio", pairs.neg_ratio, "Negatives per positive")->capture_default_str();

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train a boundary model");
  t->add_option("--pairs", train.pairs, "Pairs JSONL")->required();
  t->add_option("--out", train.out, "Output model file")->required();
  t->add_option("--variant", train.variant, "psc or mfc")->capture_default_str();
  t->add_option("--provider", train.provider, "test:<d>:<seed> or cache:<path>")->capture_default_str();
  t->add_option("--epochs", train.cfg.epochs, "Training epochs")->capture_default_str();
  t->add_option("--lr", train.cfg.lr, "SGD learning rate")->capture_default_str();
  t->add_option("--batch", train.cfg.batch, "Mini-batch size")->capture_default_str();
  t->add_option("--seed", train.cfg.seed, "Initialization, holdout and shuffle seed")->capture_default_str();
  t->add_option("--holdout", train.cfg.holdout_fraction, "Held-out fraction")->capture_default_str();
  t->add_option("--threshold", train.cfg.threshold, "Same-section probability threshold")->capture_default_str();
  t->add_option("--log", train.log, "Per-epoch JSONL log");

  ChunkArgs chunk;
  auto* k = app.add_subcommand("chunk", "Chunk documents");
  k->add_option("--docs", chunk.docs, "Documents JSONL")->required();
  k->add_option("--out", chunk.out, "Output chunks JSONL")->required();
  k->add_option("--kind", chunk.kind, "fixed, sentence, recursive, cosine or model")->capture_default_str();
  k->add_option("--size", chunk.cfg.size, "fixed/recursive chunk size in --unit")->capture_default_str();
  k->add_option("--overlap", chunk.cfg.overlap, "fixed/recursive overlap in --unit")->capture_default_str();
  k->add_option("--unit", chunk.unit, "token or character")->capture_default_str();
  k->add_option("--window", chunk.cfg.window, "Sentences per window")->capture_default_str();
  k->add_option("--window-overlap", chunk.cfg.window_overlap, "Sentences shared by adjacent windows")
      ->capture_default_str();
  k->add_option("--percentile", chunk.cfg.percentile, "cosine breakpoint percentile")->capture_default_str();
  k->add_option("--model", chunk.model, "Boundary model file (kind model)");
  k->add_option("--provider", chunk.provider, "test:<d>:<seed> or cache:<path>")->capture_default_str();
  k->add_option("--threshold", chunk.cfg.threshold, "Same-section probability threshold")->capture_default_str();
  k->add_option("--max-sentences", chunk.cfg.max_sentences, "Force a boundary after this many sentences (0: off)")
      ->capture_default_str();

  RetrievalArgs ret;
  auto* r = app.add_subcommand("eval-retrieval", "Index chunks, run QA queries, report Hits@k and MRR");
  auto add_retrieval = [](CLI::App* sc, RetrievalArgs& a) {
    sc->add_option("--chunks", a.chunks, "Chunks JSONL")->required();
    sc->add_option("--qa", a.qa, "QA JSONL with gold_context")->required();
    sc->add_option("--provider", a.provider, "test:<d>:<seed> or cache:<path>")->capture_default_str();
    sc->add_option("--k", a.k, "Chunks retrieved per query")->capture_default_str();
    sc->add_option("--scope", a.scope, "corpus or document")->capture_default_str();
  };
  add_retrieval(r, ret);
  r->add_option("--ks", ret.ks, "Comma-separated Hits@k cutoffs")->capture_default_str();
  r->add_option("--results", ret.results, "Per-query results JSONL");
  r->add_option("--summary", ret.summary, "Summary JSON (default stdout)");
  r->add_flag("--no-timing", ret.no_timing, "Omit timing fields so reruns are byte-identical");

  BenchArgs bench;
  auto* b = app.add_subcommand("bench", "Query latency: mean, median and p95");
  add_retrieval(b, bench.r);
  b->add_option("--repeats", bench.repeats, "Passes over the QA file")->capture_default_str();

  GenerationArgs gen;
  auto* g = app.add_subcommand("eval-generation", "Score answers with BLEU and ROUGE");
  g->add_option("--answers", gen.answers, "Answers JSONL {qid, answer}")->required();
  g->add_option("--qa", gen.qa, "QA JSONL with long_answer")->required();
  g->add_option("--out", gen.out, "Report JSON (default stdout)");

  CacheArgs cache;
  auto* e = app.add_subcommand("cache", "Write an embedding cache for sentences, questions and chunks");
  e->add_option("--docs", cache.docs, "Documents JSONL");
  e->add_option("--qa", cache.qa, "QA JSONL");
  e->add_option("--chunks", cache.chunks, "Chunks JSONL");
  e->add_option("--out", cache.out, "Output cache file")->required();
  e->add_option("--provider", cache.provider, "test:<d>:<seed> or cache:<path>")->capture_default_str();

  CompareArgs cmp;
  auto* m = app.add_subcommand("compare", "Welch t-test on per-query reciprocal ranks of two result files");
  m->add_option("--a", cmp.a, "Results JSONL")->required();
  m->add_option("--b", cmp.b, "Results JSONL")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    if (err.get_exit_code() == 0) return app.exit(err);
    return fail(ErrorKind::usage, err.what());
  }

  try {
    if (*c) cmd_clean(clean);
    else if (*p) cmd_pairs(pairs);
    else if (*t) cmd_train(train);
    else if (*k) cmd_chunk(chunk);
    else if (*r) cmd_eval_retrieval(ret);
    else if (*b) cmd_bench(bench);
    else if (*g) cmd_eval_generation(gen);
    else if (*e) cmd_cache(cache);
    else if (*m) cmd_compare(cmp);
  } catch (const Error& err) {
    return fail(err.kind(), err.what());
  } catch (const std::exception& err) {
    return fail(ErrorKind::data, err.what());
  }
  return 0;
}
