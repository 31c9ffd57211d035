// End-to-end checks of the ringformer binary: exit codes, file outputs and
// agreement with the library.

#include <gtest/gtest.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "json.hpp"
#include "ringformer/ringformer.hpp"

using namespace ringformer;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() /
           ("ringformer_cli_" + std::to_string(::getpid()) + "_" + std::string(info->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  // Runs the binary inside the scratch directory; `env` is prefixed verbatim.
  CliResult run(const std::string& args, const std::string& env = "") const {
    const fs::path out = dir_ / "stdout.txt", err = dir_ / "stderr.txt";
    const std::string cmd = "cd '" + dir_.string() + "' && " + env + " '" + RINGFORMER_CLI_PATH + "' " + args +
                            " >'" + out.string() + "' 2>'" + err.string() + "'";
    const int status = std::system(cmd.c_str());
    CliResult r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(out);
    r.err = slurp(err);
    return r;
  }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }
  void write(const std::string& name, const std::string& text) const { std::ofstream(dir_ / name) << text; }

  fs::path dir_;
};

std::string config(const std::string& name) { return std::string(RINGFORMER_CONFIG_DIR) + "/" + name; }

// Tiny patch classifier used by the train and analyze tests.
const char* kTinyVit = R"([model]
arch = ringformer
mode = encoder_only
hidden = 8
ff = 16
levels = 2
heads = 2
rank = ratio:4
image_size = 8
patch_size = 2
classes = 3

[task]
kind = shapes_classify
classes = 3
image_size = 8
n_train = 64
n_eval = 16

[train]
total_steps = 6
warmup_steps = 2
batch_size = 4
eval_every = 3
)";

const char* kTinySeq = R"([model]
hidden = 8
ff = 16
levels = 2
heads = 2
rank = ratio:4
vocab = 12
max_seq_len = 12

[task]
kind = seq_reverse
vocab = 12
seq_len = 5
n_train = 64
n_eval = 8

[train]
total_steps = 4
warmup_steps = 1
batch_size = 4
eval_every = 2
)";

// "name value" rows of a params/flops table.
std::map<std::string, std::uint64_t> table_rows(const std::string& text) {
  std::map<std::string, std::uint64_t> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string name, value;
    if (!(ls >> name >> value) || value.find_first_not_of("0123456789") != std::string::npos) continue;
    rows[name] = std::stoull(value);
  }
  return rows;
}

double rel(double a, double b) { return std::abs(a - b) / std::abs(b); }

std::vector<double> mad_oracle(const Tensor<double>& map, std::size_t g, std::size_t p) {
  const std::size_t n = g * g + 1, heads = map.size() / (n * n);
  std::vector<double> out;
  for (std::size_t h = 0; h < heads; ++h) {
    double acc = 0;
    for (std::size_t qr = 0; qr < g; ++qr)
      for (std::size_t qc = 0; qc < g; ++qc) {
        double num = 0, den = 0;
        for (std::size_t kr = 0; kr < g; ++kr)
          for (std::size_t kc = 0; kc < g; ++kc) {
            const double w = map[h * n * n + (1 + qr * g + qc) * n + 1 + kr * g + kc];
            const double dy = double(qr) - double(kr), dx = double(qc) - double(kc);
            num += w * double(p) * std::sqrt(dy * dy + dx * dx);
            den += w;
          }
        acc += num / den;
      }
    out.push_back(acc / double(g * g));
  }
  return out;
}

}  // namespace

TEST_F(Cli, HelpAndUsageErrors) {
  EXPECT_EQ(run("--help").code, 0);
  EXPECT_EQ(run("train --help").code, 0);
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("params --bogus").code, 2);
  EXPECT_EQ(run("frobnicate").code, 2);
  EXPECT_EQ(run("params --config missing.ini").code, 2);
}

TEST_F(Cli, BadConfigIsLineAnchored) {
  write("bad.ini", "[model]\nhidden = 8\nwidth = 3\n");
  const CliResult r = run("train --config bad.ini");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("bad.ini:3"), std::string::npos) << r.err;
  EXPECT_EQ(run("params --set model.width=3").code, 2);
  EXPECT_EQ(run("params --set model.hidden=30").code, 2);  // not divisible by 4 heads
}

TEST_F(Cli, ZeroStepsWritesTheUntrainedModel) {
  write("vit.ini", kTinyVit);
  const CliResult r = run("train --config vit.ini --total-steps 0 --seed 5 --out run");
  ASSERT_EQ(r.code, 0) << r.err;
  const LoadedCheckpoint<double> ck = load_checkpoint<double>(path("run/final.ckpt"));
  EXPECT_EQ(ck.state.step, 0);
  RunConfig cfg = load_run_config(path("vit.ini"));
  Rng init = Rng::derive(5, 1);
  const Model<double> fresh = Model<double>::build(cfg.model, init);
  ASSERT_EQ(fresh.params().size(), ck.model.params().size());
  for (std::size_t i = 0; i < fresh.params().size(); ++i) {
    EXPECT_EQ(fresh.params().params()[i].var.value().values(), ck.model.params().params()[i].var.value().values());
  }
  EXPECT_NE(r.out.find("final: step 0"), std::string::npos) << r.out;
}

TEST_F(Cli, FlagsOverrideFileAndSetOverridesFile) {
  write("vit.ini", kTinyVit);
  ASSERT_EQ(run("train -c vit.ini --set train.total_steps=0 -o a").code, 0);
  EXPECT_EQ(load_checkpoint<double>(path("a/final.ckpt")).state.step, 0);
  ASSERT_EQ(run("train -c vit.ini --set train.total_steps=0 --total-steps 2 --warmup-steps 1 -o b").code, 0);
  EXPECT_EQ(load_checkpoint<double>(path("b/final.ckpt")).state.step, 2);
}

TEST_F(Cli, SameConfigTwiceGivesIdenticalMetrics) {
  write("seq.ini", kTinySeq);
  ASSERT_EQ(run("train -c seq.ini -o a").code, 0);
  ASSERT_EQ(run("train -c seq.ini -o b").code, 0);
  ASSERT_EQ(run("train -c seq.ini --seed 9 -o c").code, 0);
  const std::string a = slurp(dir_ / "a/metrics.csv");
  EXPECT_EQ(a, slurp(dir_ / "b/metrics.csv"));
  EXPECT_NE(a, slurp(dir_ / "c/metrics.csv"));
  EXPECT_EQ(slurp(dir_ / "a/final.ckpt"), slurp(dir_ / "b/final.ckpt"));
  EXPECT_EQ(a.substr(0, a.find('\n')), metrics_csv_header());
  EXPECT_EQ(std::count(a.begin(), a.end(), '\n'), 3);  // header + steps 2 and 4
}

TEST_F(Cli, ResumeMatchesUninterruptedRun) {
  write("seq.ini", kTinySeq);
  ASSERT_EQ(run("train -c seq.ini --checkpoint-every 2 -o full").code, 0);
  ASSERT_TRUE(fs::exists(dir_ / "full/step_2.ckpt"));
  EXPECT_EQ(load_checkpoint<double>(path("full/step_2.ckpt")).state.step, 2);
  const CliResult r = run("train -c seq.ini --resume full/step_2.ckpt -o resumed");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(slurp(dir_ / "resumed/final.ckpt"), slurp(dir_ / "full/final.ckpt"));
  const std::string full = slurp(dir_ / "full/metrics.csv"), resumed = slurp(dir_ / "resumed/metrics.csv");
  EXPECT_EQ(full.substr(full.rfind("\n4,")), resumed.substr(resumed.rfind("\n4,")));
}

TEST_F(Cli, ResumeWithDifferentModelIsConfigError) {
  write("seq.ini", kTinySeq);
  ASSERT_EQ(run("train -c seq.ini --total-steps 0 -o a").code, 0);
  EXPECT_EQ(run("train -c seq.ini --set model.levels=3 --resume a/final.ckpt -o b").code, 2);
  EXPECT_EQ(run("train -c seq.ini --resume nothing.ckpt -o b").code, 5);
}

TEST_F(Cli, DivergenceExitsThreeWithLastGoodCheckpoint) {
  write("vit.ini", kTinyVit);
  const CliResult r = run("train -c vit.ini --max-lr 1e300 --warmup-steps 0 --eval-every 1 -o run");
  EXPECT_EQ(r.code, 3) << r.out << r.err;
  EXPECT_NE(r.err.find("diverged"), std::string::npos) << r.err;
  const LoadedCheckpoint<double> ck = load_checkpoint<double>(path("run/last_good.ckpt"));
  for (const auto& p : ck.model.params().params())
    for (double v : p.var.value().values()) ASSERT_TRUE(std::isfinite(v)) << p.name;
}

TEST_F(Cli, DefaultOutputDirectoryComesFromEnvironment) {
  write("vit.ini", kTinyVit);
  ASSERT_EQ(run("train -c vit.ini --total-steps 0", "RINGFORMER_OUT_DIR=envout").code, 0);
  EXPECT_TRUE(fs::exists(dir_ / "envout/final.ckpt"));
  EXPECT_TRUE(fs::exists(dir_ / "envout/metrics.csv"));
}

TEST_F(Cli, ParamsReproduceTranslationCounts) {
  const std::map<std::string, double> expected = {
      {"translation_base_vanilla.ini", 44.05e6},  {"translation_base_owf.ini", 20.98e6},
      {"translation_base_universal.ini", 7.34e6}, {"translation_base_ringformer.ini", 8.94e6},
      {"translation_large_vanilla.ini", 176.18e6}, {"translation_large_owf.ini", 83.91e6},
      {"translation_large_universal.ini", 29.37e6}, {"translation_large_ringformer.ini", 35.71e6}};
  for (const auto& [file, want] : expected) {
    const CliResult r = run("params -c '" + config(file) + "'");
    ASSERT_EQ(r.code, 0) << file << r.err;
    EXPECT_LT(rel(double(table_rows(r.out).at("total")), want), 0.003) << file;
  }
}

TEST_F(Cli, ParamsJsonAgreesWithTable) {
  for (const std::string flags : {"", "--convention with_biases", "--include-embeddings"}) {
    const std::string base = "params -c '" + config("translation_base_ringformer.ini") + "' " + flags;
    const CliResult table = run(base), json = run(base + " --json");
    ASSERT_EQ(table.code, 0);
    ASSERT_EQ(json.code, 0);
    const auto j = nlohmann::json::parse(json.out);
    EXPECT_EQ(j.at("schema_version"), 1);
    EXPECT_EQ(j.at("kind"), "params");
    const auto rows = table_rows(table.out);
    std::uint64_t sum = 0;
    for (const auto& [name, value] : j.at("components").items()) {
      EXPECT_EQ(rows.at(name), value.get<std::uint64_t>()) << name;
      sum += value.get<std::uint64_t>();
    }
    EXPECT_EQ(sum, j.at("total").get<std::uint64_t>());
    EXPECT_EQ(rows.at("total"), j.at("total").get<std::uint64_t>());
  }
}

TEST_F(Cli, ParamsConventionsOrder) {
  const std::string base = "params --json -c '" + config("translation_base_vanilla.ini") + "'";
  auto total = [&](const std::string& flags) { return nlohmann::json::parse(run(base + flags).out).at("total"); };
  const std::uint64_t w = total(""), b = total(" --convention with_biases"), all = total(" --include-embeddings");
  EXPECT_LT(w, b);
  EXPECT_LT(w, all);
}

TEST_F(Cli, SingleLevelVanillaEqualsUniversal) {
  auto total = [&](const std::string& arch) {
    const CliResult r = run("params -c '" + config("translation_base_vanilla.ini") +
                      "' --set model.levels=1 --arch " + arch);
    return table_rows(r.out).at("total");
  };
  EXPECT_EQ(total("vanilla"), total("universal"));
}

TEST_F(Cli, FlopsReproduceVitBase) {
  const CliResult base = run("flops --json -c '" + config("vit_base_vanilla.ini") + "'");
  const CliResult ring = run("flops --json -c '" + config("vit_base_ringformer.ini") + "'");
  ASSERT_EQ(base.code, 0);
  ASSERT_EQ(ring.code, 0);
  const auto jb = nlohmann::json::parse(base.out), jr = nlohmann::json::parse(ring.out);
  EXPECT_EQ(jb.at("tokens"), 197);
  EXPECT_LT(rel(jb.at("total").get<double>(), 17.636e9), 0.015);
  EXPECT_LT(rel(jr.at("total").get<double>(), 19.03e9), 0.05);
  for (const auto& [name, value] : jb.at("components").items()) {
    if (name != "signals") {
      EXPECT_EQ(value, jr.at("components").at(name)) << name;
    }
  }
  EXPECT_EQ(jr.at("total").get<std::uint64_t>() - jb.at("total").get<std::uint64_t>(),
            jr.at("components").at("signals").get<std::uint64_t>());
  const auto rows = table_rows(run("flops -c '" + config("vit_base_ringformer.ini") + "'").out);
  EXPECT_EQ(rows.at("total"), jr.at("total").get<std::uint64_t>());
}

TEST_F(Cli, FlopsMoreThanDoubleWithTokens) {
  const std::string base = "flops --json -c '" + config("vit_base_ringformer.ini") + "'";
  const auto a = nlohmann::json::parse(run(base + " --tokens 197").out).at("total").get<std::uint64_t>();
  const auto b = nlohmann::json::parse(run(base + " --tokens 394").out).at("total").get<std::uint64_t>();
  EXPECT_GT(b, 2 * a);
}

TEST_F(Cli, CkaOfCheckpointAgainstItselfHasUnitDiagonal) {
  write("vit.ini", kTinyVit);
  ASSERT_EQ(run("train -c vit.ini -o run").code, 0);
  for (const std::string fmt : {"csv", "json"}) {
    const CliResult r = run("analyze --kind cka --format " + fmt + " --checkpoint run/final.ckpt -o cka." + fmt);
    ASSERT_EQ(r.code, 0) << r.err;
    const std::string text = slurp(dir_ / ("cka." + fmt));
    const CkaGrid g = fmt == "csv" ? cka_grid_from_csv(text) : cka_grid_from_json(nlohmann::json::parse(text));
    ASSERT_EQ(g.rows, 3u);
    ASSERT_EQ(g.cols, 3u);
    for (std::size_t i = 0; i < g.rows; ++i) {
      EXPECT_NEAR(g.at(i, i), 1.0, 1e-9);
      for (std::size_t j = 0; j < g.cols; ++j) {
        EXPECT_EQ(g.at(i, j), g.at(j, i));
        EXPECT_GE(g.at(i, j), 0.0);
        EXPECT_LE(g.at(i, j), 1.0 + 1e-9);
      }
    }
  }
}

TEST_F(Cli, CkaOfTwoSequenceModels) {
  write("seq.ini", kTinySeq);
  ASSERT_EQ(run("train -c seq.ini -o a").code, 0);
  ASSERT_EQ(run("train -c seq.ini --arch vanilla -o b").code, 0);
  const CliResult r = run("analyze --kind cka --checkpoint a/final.ckpt b/final.ckpt -c seq.ini -o grid.csv");
  ASSERT_EQ(r.code, 0) << r.err;
  const CkaGrid g = cka_grid_from_csv(slurp(dir_ / "grid.csv"));
  EXPECT_EQ(g.rows, 3u);
  EXPECT_EQ(g.cols, 3u);
  for (double v : g.values) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0 + 1e-9);
  }
}

TEST_F(Cli, MadMatchesBruteForceOnTheSameBatch) {
  write("vit.ini", kTinyVit);
  ASSERT_EQ(run("train -c vit.ini --total-steps 0 -o run").code, 0);
  const CliResult r = run("analyze --kind mad --format json --samples 5 --seed 3 -c vit.ini --checkpoint run/final.ckpt "
                    "-o mad.json");
  ASSERT_EQ(r.code, 0) << r.err;
  const AttentionDistanceReport rep = mad_report_from_json(nlohmann::json::parse(slurp(dir_ / "mad.json")));

  // rebuild the batch the command documents: the configured task's eval split
  const RunConfig cfg = load_run_config(path("vit.ini"));
  TaskSpec spec = cfg.task;
  spec.n_train = 0;
  spec.n_eval = 5;
  spec.seed = 3;
  const Dataset batch = generate_task(spec).eval;
  const Model<double> model = load_checkpoint<double>(path("run/final.ckpt")).model;
  std::vector<Tensor<double>> images;
  for (const auto& ex : batch.imgs) images.push_back(ex.image);
  ForwardTrace<double> trace;
  model.classify(images, {}, &trace);

  const PatchGeometry geo{4, 2, true};
  ASSERT_EQ(rep.values.size(), 2u);
  for (std::size_t level = 0; level < 2; ++level) {
    std::vector<double> mean(2, 0.0);
    for (const auto& map : trace.attn_maps[level]) {
      const auto v = mad_oracle(map, 4, 2);
      for (std::size_t h = 0; h < 2; ++h) mean[h] += v[h] / double(images.size());
    }
    ASSERT_EQ(rep.values[level].size(), 2u);
    for (std::size_t h = 0; h < 2; ++h) {
      EXPECT_NEAR(rep.values[level][h], mean[h], 1e-8 * mean[h]) << level << "/" << h;
      EXPECT_GE(rep.values[level][h], 0.0);
      EXPECT_LE(rep.values[level][h], geo.diameter());
    }
  }
}

TEST_F(Cli, AnalysisIncompatibilitiesExitFour) {
  write("vit.ini", kTinyVit);
  write("seq.ini", kTinySeq);
  ASSERT_EQ(run("train -c vit.ini --total-steps 0 -o vit").code, 0);
  ASSERT_EQ(run("train -c vit.ini --total-steps 0 --set model.image_size=12 --set task.image_size=12 -o big").code, 0);
  ASSERT_EQ(run("train -c seq.ini --total-steps 0 -o seq").code, 0);
  EXPECT_EQ(run("analyze --kind mad --checkpoint seq/final.ckpt -o m.csv").code, 4);
  EXPECT_EQ(run("analyze --kind cka --checkpoint vit/final.ckpt seq/final.ckpt -o c.csv").code, 4);
  EXPECT_EQ(run("analyze --kind cka --checkpoint vit/final.ckpt big/final.ckpt -o c.csv").code, 4);
  EXPECT_EQ(run("analyze --kind cka -o c.csv").code, 2);
  EXPECT_EQ(run("analyze --kind cka --checkpoint vit.ini -o c.csv").code, 5);
}

TEST_F(Cli, GenDataIsDeterministicUnderSeed) {
  ASSERT_EQ(run("gen-data --task seq_reverse --n-train 20 --seed 4 -o a.jsonl").code, 0);
  ASSERT_EQ(run("gen-data --task seq_reverse --n-train 20 --seed 4 -o b.jsonl").code, 0);
  ASSERT_EQ(run("gen-data --task seq_reverse --n-train 20 --seed 5 -o c.jsonl").code, 0);
  EXPECT_EQ(slurp(dir_ / "a.jsonl"), slurp(dir_ / "b.jsonl"));
  EXPECT_NE(slurp(dir_ / "a.jsonl"), slurp(dir_ / "c.jsonl"));
  ASSERT_EQ(run("gen-data --task shapes_classify --n-train 6 --seed 4 -o a.rft").code, 0);
  ASSERT_EQ(run("gen-data --task shapes_classify --n-train 6 --seed 4 -o b.rft").code, 0);
  EXPECT_EQ(slurp(dir_ / "a.rft"), slurp(dir_ / "b.rft"));
  EXPECT_EQ(load_dataset(path("a.rft")).size(), 6u);
}

TEST_F(Cli, GenDataWithNoExamplesWritesAValidHeader) {
  const CliResult r = run("gen-data --n-train 0 -o empty.jsonl");
  ASSERT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("0 seq_copy"), std::string::npos) << r.out;
  const std::string text = slurp(dir_ / "empty.jsonl");
  const auto header = nlohmann::json::parse(text.substr(0, text.find('\n')));
  EXPECT_EQ(header.at("count"), 0);
  EXPECT_EQ(header.at("format"), "ringformer-seq2seq");
  EXPECT_TRUE(load_dataset(path("empty.jsonl")).empty());
  ASSERT_EQ(run("gen-data --task shapes_classify --n-train 0 -o empty.rft").code, 0);
  const Dataset d = load_dataset(path("empty.rft"));
  EXPECT_TRUE(d.images);
  EXPECT_TRUE(d.empty());
}

TEST_F(Cli, GeneratedSortFilePassesVerification) {
  ASSERT_EQ(run("gen-data --task seq_sort --n-train 50 --seq-len 9 --eval-out eval.jsonl -o sort.jsonl").code, 0);
  for (const char* file : {"sort.jsonl", "eval.jsonl"}) {
    const Dataset d = load_dataset(path(file));
    ASSERT_FALSE(d.empty());
    for (const auto& ex : d.seqs) {
      ASSERT_EQ(ex.src.size(), ex.tgt.size());
      for (std::size_t i = 1; i < ex.tgt.size(); ++i) ASSERT_LE(ex.tgt[i - 1], ex.tgt[i]);
      // a permutation of the source: equal multisets
      std::vector<int> counts(64, 0);
      for (int t : ex.src) ++counts[t];
      for (int t : ex.tgt) --counts[t];
      for (int c : counts) ASSERT_EQ(c, 0);
    }
  }
}

TEST_F(Cli, UnwritablePathExitsFive) {
  EXPECT_EQ(run("gen-data -o /nonexistent/dir/data.jsonl").code, 5);
  write("blocker", "x");
  EXPECT_EQ(run("gen-data -o blocker/data.jsonl").code, 5);
  write("vit.ini", kTinyVit);
  EXPECT_EQ(run("train -c vit.ini --total-steps 0 -o blocker/run").code, 5);
}

TEST_F(Cli, GenDataFileTrainsThroughExternalTask) {
  ASSERT_EQ(run("gen-data --task seq_copy --vocab 12 --seq-len 5 --n-train 16 -o copy.jsonl").code, 0);
  write("seq.ini", kTinySeq);
  const CliResult r = run("train -c seq.ini --task external --set task.train_path=copy.jsonl -o ext");
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir_ / "ext/final.ckpt"));
}
