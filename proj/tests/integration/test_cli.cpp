#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include <gtest/gtest.h>
#include <json.hpp>

#include <segrag/segrag.hpp>

namespace fs = std::filesystem;
using namespace segrag;

namespace {

const fs::path kFixture = fs::path(SEGRAG_TEST_DATA) / "fixture";

struct CliResult {
  int code = -1;
  std::string out, err;
};

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("segrag_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string p(const std::string& name) const { return (dir_ / name).string(); }

  CliResult run(const std::string& args, const std::string& env = {}) const {
    const std::string cmd = env + (env.empty() ? "" : " ") + std::string(SEGRAG_CLI) + " " + args + " > " + p("stdout") +
                            " 2> " + p("stderr");
    const int status = std::system(cmd.c_str());
    CliResult r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = io::read_file(p("stdout"));
    r.err = io::read_file(p("stderr"));
    return r;
  }

  void ok(const std::string& args, const std::string& env = {}) const {
    const auto r = run(args, env);
    ASSERT_EQ(r.code, 0) << args << "\n" << r.err;
  }

  // clean -> pairs -> train -> chunk (model) -> eval-retrieval into `tag`-prefixed files.
  void pipeline(const std::string& tag) const {
    ok("clean --xml-dir " + (kFixture / "xml").string() + " --out " + p(tag + "docs.jsonl"));
    ok("pairs --docs " + p(tag + "docs.jsonl") + " --out " + p(tag + "pairs.jsonl") + " --seed 42");
    ok("train --pairs " + p(tag + "pairs.jsonl") + " --out " + p(tag + "model.bin") +
       " --lr 0.5 --batch 32 --seed 42 --log " + p(tag + "log.jsonl"));
    ok("chunk --docs " + p(tag + "docs.jsonl") + " --kind model --model " + p(tag + "model.bin") + " --out " +
       p(tag + "chunks.jsonl"));
    ok("eval-retrieval --chunks " + p(tag + "chunks.jsonl") + " --qa " + (kFixture / "qa.jsonl").string() +
       " --no-timing --results " + p(tag + "results.jsonl") + " --summary " + p(tag + "summary.json"));
  }

  fs::path dir_;
};

std::vector<std::string> keys(const nlohmann::ordered_json& j) {
  std::vector<std::string> out;
  for (const auto& [k, v] : j.items()) out.push_back(k);
  return out;
}

}  // namespace

TEST_F(Cli, FullPipelineEmitsSummaryKeys) {
  pipeline("");
  const auto summary = nlohmann::ordered_json::parse(io::read_file(p("summary.json")));
  EXPECT_EQ(keys(summary), (std::vector<std::string>{"num_queries", "hits_at_3", "hits_at_5", "mrr"}));
  EXPECT_EQ(summary["num_queries"], 40);
  for (const char* k : {"hits_at_3", "hits_at_5", "mrr"}) {
    EXPECT_GE(summary[k].get<double>(), 0.0);
    EXPECT_LE(summary[k].get<double>(), 1.0);
  }
  EXPECT_LE(summary["hits_at_3"].get<double>(), summary["hits_at_5"].get<double>());

  const auto docs = corpus::load_documents(p("docs.jsonl"));
  EXPECT_EQ(docs.size(), 20u);
  EXPECT_EQ(boundary::load_model(p("model.bin")).d, 64u);
  EXPECT_EQ(io::read_file(p("log.jsonl")).find("\"holdout_acc\"") != std::string::npos, true);

  // Timing keys appear without --no-timing, after the frozen metric keys.
  const auto r = run("eval-retrieval --chunks " + p("chunks.jsonl") + " --qa " + (kFixture / "qa.jsonl").string());
  ASSERT_EQ(r.code, 0) << r.err;
  const auto timed = nlohmann::ordered_json::parse(r.out);
  EXPECT_EQ(keys(timed), (std::vector<std::string>{"num_queries", "hits_at_3", "hits_at_5", "mrr", "mean_query_time_s",
                                                   "median_query_time_s", "p95_query_time_s"}));
  EXPECT_EQ(timed["mrr"], summary["mrr"]);
}

TEST_F(Cli, PipelineIsByteIdenticalAcrossRuns) {
  pipeline("a_");
  pipeline("b_");
  for (const char* f : {"docs.jsonl", "pairs.jsonl", "model.bin", "log.jsonl", "chunks.jsonl", "results.jsonl",
                        "summary.json"})
    EXPECT_EQ(io::read_file(p(std::string("a_") + f)), io::read_file(p(std::string("b_") + f))) << f;
}

TEST_F(Cli, ThreadCountDoesNotChangeOutputs) {
  ok("clean --xml-dir " + (kFixture / "xml").string() + " --out " + p("one.jsonl"), "SEGRAG_THREADS=1");
  ok("clean --xml-dir " + (kFixture / "xml").string() + " --out " + p("four.jsonl"), "SEGRAG_THREADS=4");
  EXPECT_EQ(io::read_file(p("one.jsonl")), io::read_file(p("four.jsonl")));
  ok("chunk --docs " + p("one.jsonl") + " --kind cosine --out " + p("c1.jsonl"), "SEGRAG_THREADS=1");
  ok("chunk --docs " + p("one.jsonl") + " --kind cosine --out " + p("c4.jsonl"), "SEGRAG_THREADS=4");
  EXPECT_EQ(io::read_file(p("c1.jsonl")), io::read_file(p("c4.jsonl")));
}

TEST_F(Cli, ZeroEpochsWritesInitialModel) {
  ok("clean --xml-dir " + (kFixture / "xml").string() + " --out " + p("docs.jsonl"));
  ok("pairs --docs " + p("docs.jsonl") + " --out " + p("pairs.jsonl"));
  for (const char* variant : {"psc", "mfc"}) {
    ok("train --pairs " + p("pairs.jsonl") + " --out " + p("m.bin") + " --epochs 0 --seed 7 --variant " + variant +
       " --provider test:32:1");
    const auto expected = boundary::initial_model(boundary::parse_variant(variant), 32, hash::derive_seed(7, 1));
    EXPECT_EQ(io::read_file(p("m.bin")), boundary::encode_model(expected)) << variant;
  }
}

TEST_F(Cli, TwoChunkFilesGiveComparableSummaries) {
  ok("clean --xml-dir " + (kFixture / "xml").string() + " --out " + p("docs.jsonl"));
  ok("chunk --docs " + p("docs.jsonl") + " --kind fixed --out " + p("fixed.jsonl"));
  ok("chunk --docs " + p("docs.jsonl") + " --kind sentence --out " + p("sentence.jsonl"));
  std::vector<nlohmann::ordered_json> summaries;
  for (const char* f : {"fixed.jsonl", "sentence.jsonl"}) {
    const auto r = run("eval-retrieval --no-timing --chunks " + p(f) + " --qa " + (kFixture / "qa.jsonl").string() +
                       " --results " + p(std::string(f) + ".results"));
    ASSERT_EQ(r.code, 0) << r.err;
    summaries.push_back(nlohmann::ordered_json::parse(r.out));
  }
  EXPECT_EQ(keys(summaries[0]), keys(summaries[1]));
  const auto cmp = run("compare --a " + p("fixed.jsonl.results") + " --b " + p("sentence.jsonl.results"));
  ASSERT_EQ(cmp.code, 0) << cmp.err;
  const auto j = nlohmann::json::parse(cmp.out);
  EXPECT_EQ(j["n_a"], 40);
  EXPECT_DOUBLE_EQ(j["mrr_a"].get<double>(), summaries[0]["mrr"].get<double>());
  EXPECT_GE(j["p"].get<double>(), 0.0);
  EXPECT_LE(j["p"].get<double>(), 1.0);
}

TEST_F(Cli, GenerationScoresFixtureAnswers) {
  const auto r = run("eval-generation --answers " + (kFixture / "answers.jsonl").string() + " --qa " +
                     (kFixture / "qa.jsonl").string());
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j["per_query"].size(), 40u);
  for (const char* k : {"bleu", "rouge1", "rouge2", "rougeL"}) {
    EXPECT_GT(j["aggregate"][k].get<double>(), 0.5) << k;
    EXPECT_LT(j["aggregate"][k].get<double>(), 1.0) << k;
  }
}

TEST_F(Cli, BenchAndCache) {
  ok("clean --xml-dir " + (kFixture / "xml").string() + " --out " + p("docs.jsonl"));
  ok("chunk --docs " + p("docs.jsonl") + " --kind sentence --out " + p("chunks.jsonl"));
  ok("cache --qa " + (kFixture / "qa.jsonl").string() + " --chunks " + p("chunks.jsonl") + " --out " + p("c.bin"));
  const auto r = run("bench --repeats 2 --provider cache:" + p("c.bin") + " --chunks " + p("chunks.jsonl") + " --qa " +
                     (kFixture / "qa.jsonl").string());
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::ordered_json::parse(r.out);
  EXPECT_EQ(j["queries"], 80);
  EXPECT_LE(j["median_query_time_s"].get<double>(), j["p95_query_time_s"].get<double>());

  // Cached vectors equal the test encoder's, so summaries agree exactly.
  const std::string qa = " --no-timing --chunks " + p("chunks.jsonl") + " --qa " + (kFixture / "qa.jsonl").string();
  const auto cached = run("eval-retrieval --provider cache:" + p("c.bin") + qa);
  const auto direct = run("eval-retrieval" + qa);
  ASSERT_EQ(cached.code, 0) << cached.err;
  EXPECT_EQ(cached.out, direct.out);
}

TEST_F(Cli, ExitCodesAndErrorLines) {
  auto check = [&](const std::string& args, int code, const std::string& kind) {
    const auto r = run(args);
    EXPECT_EQ(r.code, code) << args << "\n" << r.err;
    const auto j = nlohmann::json::parse(r.err.substr(0, r.err.find('\n')));
    EXPECT_EQ(j["error"], kind) << args;
    EXPECT_TRUE(j["message"].is_string());
  };
  check("", 2, "usage");
  check("train --pairs x", 2, "usage");
  check("chunk --docs x --out y --bogus", 2, "usage");
  check("chunk --docs " + p("missing.jsonl") + " --out " + p("y"), 3, "data");
  io::write_file_atomic(p("bad.jsonl"), "{\"sections\":[]}\n");
  check("pairs --docs " + p("bad.jsonl") + " --out " + p("y"), 3, "data");
  check("train --pairs " + p("bad.jsonl") + " --out " + p("y") + " --variant xyz", 2, "usage");

  ok("clean --xml-dir " + (kFixture / "xml").string() + " --out " + p("docs.jsonl"));
  ok("pairs --docs " + p("docs.jsonl") + " --out " + p("pairs.jsonl"));
  check("train --pairs " + p("pairs.jsonl") + " --out " + p("m.bin") + " --lr 1e12 --batch 8", 4, "divergence");
  EXPECT_FALSE(fs::exists(p("m.bin")));
  check("chunk --docs " + p("docs.jsonl") + " --out " + p("c") + " --size 10 --overlap 10", 2, "usage");
  check("chunk --docs " + p("docs.jsonl") + " --out " + p("c") + " --kind model", 2, "usage");
  check("eval-retrieval --chunks " + p("docs.jsonl") + " --qa " + (kFixture / "qa.jsonl").string() + " --ks 3,9", 2,
        "usage");
}

TEST_F(Cli, HelpDocumentsEveryFlag) {
  const std::vector<std::pair<std::string, std::vector<std::string>>> expected = {
      {"clean", {"--xml-dir", "--out"}},
      {"pairs", {"--docs", "--out", "--seed", "--neg-ratio", "[42]", "[1]"}},
      {"train",
       {"--pairs", "--out", "--variant", "--provider", "--epochs", "--lr", "--batch", "--seed", "--holdout", "--log",
        "[psc]", "[5]", "[0.001]", "[256]", "[0.02]"}},
      {"chunk",
       {"--docs", "--out", "--kind", "--size", "--overlap", "--unit", "--window", "--window-overlap", "--percentile",
        "--model", "--provider", "--threshold", "--max-sentences", "[1000]", "[200]", "[3]", "[95]"}},
      {"eval-retrieval", {"--chunks", "--qa", "--provider", "--k", "--ks", "--scope", "--results", "--summary",
                          "--no-timing", "[3,5]", "[corpus]"}},
      {"eval-generation", {"--answers", "--qa", "--out"}},
      {"bench", {"--chunks", "--qa", "--repeats"}},
      {"cache", {"--docs", "--qa", "--chunks", "--out", "--provider"}},
      {"compare", {"--a", "--b"}},
  };
  for (const auto& [cmd, flags] : expected) {
    const auto r = run(cmd + " --help");
    EXPECT_EQ(r.code, 0) << cmd;
    for (const auto& f : flags) EXPECT_NE(r.out.find(f), std::string::npos) << cmd << " help lacks " << f;
  }
  const auto top = run("--help");
  EXPECT_EQ(top.code, 0);
  for (const auto& [cmd, flags] : expected) EXPECT_NE(top.out.find(cmd), std::string::npos) << cmd;
}
