#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mlgcn/eval.hpp"
#include "mlgcn/serve.hpp"

namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("mlgcn_cli_" + std::to_string(::getpid()) + "_" +
                                        ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  CliRun run(const std::string& args) const {
    const auto out = dir_ / "stdout.txt", err = dir_ / "stderr.txt";
    const std::string cmd = std::string(MLGCN_CLI_PATH) + " " + args + " >" + out.string() + " 2>" + err.string();
    const int status = std::system(cmd.c_str());
    CliRun r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(out);
    r.err = slurp(err);
    return r;
  }

  std::string p(const std::string& name) const { return (dir_ / name).string(); }

  // synth -> vocab -> graph on a small corpus.
  void prepare() {
    ASSERT_EQ(run("synth --out-dir " + p("") + " --languages en:300,de:60 --concepts 30 --distractors 60 "
                  "--eval-queries 10")
                  .code,
              0);
    ASSERT_EQ(run("build-vocab --logs " + p("logs.tsv") + " --catalog " + p("catalog.tsv") + " --out " + p("vocab.txt") +
                  " --min-freq 1")
                  .code,
              0);
    ASSERT_EQ(run("build-graph --logs " + p("logs.tsv") + " --catalog " + p("catalog.tsv") + " --out " + p("graph.bin"))
                  .code,
              0);
  }

  std::string train_args(const std::string& out, std::size_t threads = 1) const {
    return "--threads " + std::to_string(threads) + " train --graph " + p("graph.bin") + " --vocab " + p("vocab.txt") +
           " --logs " + p("logs.tsv") + " --out " + p(out) +
           " --total-batches 60 --batch-size 8 --dim 8 --embed-dim 8 --trace " + p(out + ".trace");
  }

  fs::path dir_;
};

}  // namespace

TEST_F(Cli, HelpExitsZero) {
  const auto r = run("--help");
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("build-graph"), std::string::npos);
}

TEST_F(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("frobnicate").code, 2);
  EXPECT_EQ(run("build-vocab --logs x").code, 2);
  EXPECT_EQ(run("search --index a --vocab b --checkpoint c --query q --score euclid").code, 2);
  const auto r = run("synth --out-dir " + p("") + " --bogus 1");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("usage error"), std::string::npos);
}

TEST_F(Cli, DomainErrorsExitOneWithStage) {
  const auto r = run("build-graph --logs " + p("missing.tsv") + " --catalog " + p("missing.tsv") + " --out " + p("g"));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("error: build-graph:"), std::string::npos) << r.err;
}

TEST_F(Cli, EndToEndPipeline) {
  prepare();
  auto r = run(train_args("model.ckpt"));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.err.find("config: total-batches=60"), std::string::npos) << r.err;
  const auto trace = slurp(p("model.ckpt.trace"));
  EXPECT_EQ(trace.rfind("batch\tlanguage\tmode\tloss\n", 0), 0u);
  EXPECT_EQ(std::count(trace.begin(), trace.end(), '\n'), 61);

  ASSERT_EQ(run("embed --graph " + p("graph.bin") + " --vocab " + p("vocab.txt") + " --checkpoint " + p("model.ckpt") +
                " --out " + p("emb.bin"))
                .code,
            0);
  ASSERT_EQ(run("index --embeddings " + p("emb.bin") + " --out " + p("index.bin")).code, 0);
  std::ifstream ixf(p("index.bin"), std::ios::binary);
  const auto ix = mlgcn::load_index(ixf);
  EXPECT_TRUE(ix.normalized());
  EXPECT_GT(ix.size(), 0u);

  r = run("eval --graph " + p("graph.bin") + " --vocab " + p("vocab.txt") + " --checkpoint " + p("model.ckpt") +
          " --eval " + p("eval.tsv") + " --index " + p("index.bin") + " --out " + p("metrics.tsv") + " --per-query " +
          p("pq.tsv"));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto metrics = slurp(p("metrics.tsv"));
  EXPECT_EQ(metrics.rfind("arm\tlanguage\trecall_at_k\tmap\tn_queries\n", 0), 0u);
  EXPECT_NE(metrics.find("\tall\t"), std::string::npos);
  EXPECT_TRUE(fs::exists(p("metrics.tsv.json")));

  std::ifstream evf(p("eval.tsv"));
  const auto queries = mlgcn::read_eval_queries(evf);
  ASSERT_FALSE(queries.empty());
  r = run("search --index " + p("index.bin") + " --vocab " + p("vocab.txt") + " --checkpoint " + p("model.ckpt") +
          " --query '" + queries[0].text + "' --topk 5 --lang " + queries[0].language);
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream lines(r.out);
  std::string line;
  int rows = 0;
  while (std::getline(lines, line)) {
    if (line.rfind("rank\t", 0) == 0) continue;
    ++rows;
    EXPECT_EQ(std::count(line.begin(), line.end(), '\t'), 2) << line;
  }
  EXPECT_EQ(rows, 5);
}

TEST_F(Cli, TrainingIsByteIdenticalAcrossThreads) {
  prepare();
  ASSERT_EQ(run(train_args("a.ckpt", 1)).code, 0);
  ASSERT_EQ(run(train_args("b.ckpt", 4)).code, 0);
  EXPECT_EQ(slurp(p("a.ckpt")), slurp(p("b.ckpt")));
  EXPECT_EQ(slurp(p("a.ckpt.trace")), slurp(p("b.ckpt.trace")));
}

TEST_F(Cli, ConfigFileSuppliesOptionsAndFlagsWin) {
  prepare();
  {
    std::ofstream cfg(p("train.cfg"));
    cfg << "# training\ngraph=" << p("graph.bin") << "\nvocab=" << p("vocab.txt") << "\nout=" << p("cfg.ckpt")
        << "\ntotal-batches=500\nbatch-size=8\ndim=8\nembed-dim=8\n";
  }
  const auto r = run("--config " + p("train.cfg") + " train --total-batches 20");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.err.find("config: total-batches=20"), std::string::npos) << r.err;
  EXPECT_TRUE(fs::exists(p("cfg.ckpt")));

  std::ofstream bad(p("bad.cfg"));
  bad << "no-such-key=1\n";
  bad.close();
  EXPECT_EQ(run("--config " + p("bad.cfg") + " synth --out-dir " + p("")).code, 2);
}

TEST_F(Cli, GradCheckCommand) {
  const auto r = run("grad-check");
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("max_rel_error"), std::string::npos) << r.out;
}

TEST_F(Cli, AblateWritesWideTable) {
  prepare();
  const auto r = run("ablate --graph " + p("graph.bin") + " --vocab " + p("vocab.txt") + " --eval " + p("eval.tsv") +
                     " --out " + p("ablate.tsv") + " --total-batches 30 --batch-size 8 --dim 8 --embed-dim 8" +
                     " --arm full: --arm flat:gcn=false");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto table = slurp(p("ablate.tsv"));
  EXPECT_EQ(table.rfind("arm\tde_recall\tde_map\ten_recall\ten_map\tall_recall\tall_map\n", 0), 0u) << table;
  EXPECT_NE(table.find("\nflat\t"), std::string::npos);
}
