#include <gtest/gtest.h>
#include <sys/wait.h>

#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "aga/synth.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path kWork = fs::temp_directory_path() / "aga_cli_tests";

struct Result {
    int code = -1;
    std::string out, err;
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

Result run(const std::string& args) {
    const auto out = kWork / "stdout.txt", err = kWork / "stderr.txt";
    const auto cmd = std::string(AGA_BIN) + " " + args + " >" + out.string() + " 2>" + err.string();
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
}

const char* kSmallConfig =
    "# small world for fast CLI runs\n"
    "num_classes = 2\ngrid_rows = 4\ngrid_cols = 4\nregion_max = 2\nvocab = 32\n"
    "train_size = 12\nval_size = 2\ntest_size = 6\n"
    "epochs = 1\nbatch_size = 4\nhidden = 8\nembed_dim = 4\nprobe_iterations = 50\n";

class Cli : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        fs::remove_all(kWork);
        fs::create_directories(kWork);
        std::ofstream(kWork / "small.cfg") << kSmallConfig;
        ASSERT_EQ(run("gen --seed 3 --config " + cfg() + " --out " + (kWork / "corpus").string()).code, 0);
    }

    static std::string cfg() { return (kWork / "small.cfg").string(); }
    static std::string corpus() { return (kWork / "corpus" / "corpus.agac").string(); }
    static std::string dir(const std::string& name) { return (kWork / name).string(); }

    static Result train(const std::string& out, const std::string& extra = "") {
        return run("train --corpus " + corpus() + " --config " + cfg() + " --seed 5 --out " + dir(out) + " " + extra);
    }
};

}  // namespace

TEST_F(Cli, GenIsByteReproducibleAndWritesManifest) {
    ASSERT_EQ(run("gen --seed 3 --config " + cfg() + " --out " + dir("corpus2")).code, 0);
    EXPECT_EQ(slurp(corpus()), slurp(kWork / "corpus2" / "corpus.agac"));
    const auto m = nlohmann::json::parse(slurp(kWork / "corpus2" / "manifest.json"));
    for (const char* k : {"command_line", "config_hash", "seed", "started_at", "finished_at", "corpus_sha1", "outputs"})
        EXPECT_TRUE(m.contains(k)) << k;
    EXPECT_EQ(m["seed"], 3);
}

TEST_F(Cli, GenCountsMatchConfig) {
    const auto r = run("gen --seed 4 --config " + cfg() + " --set train_size=9 --out " + dir("corpus9"));
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("(9/2/6"), std::string::npos) << r.out;
    const auto c = aga::load_corpus((kWork / "corpus9" / "corpus.agac").string());
    EXPECT_EQ(c.train.size(), 9u);
    EXPECT_EQ(c.val.size(), 2u);
    EXPECT_EQ(c.test.size(), 6u);
    const auto m = nlohmann::json::parse(slurp(kWork / "corpus9" / "manifest.json"));
    EXPECT_EQ(m["counts"]["train"], 9);
}

TEST_F(Cli, UsageAndConfigErrorsExitTwo) {
    EXPECT_EQ(run("gen --seed 1").code, 2);
    EXPECT_EQ(run("").code, 2);
    std::ofstream(kWork / "bad.cfg") << "region_max = 9\n";
    const auto r = run("gen --config " + dir("bad.cfg") + " --out " + dir("bad"));
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("region_max"), std::string::npos) << r.err;
    const auto u = run("gen --set bogus=1 --out " + dir("bad"));
    EXPECT_EQ(u.code, 2);
    EXPECT_NE(u.err.find("bogus"), std::string::npos) << u.err;
}

TEST_F(Cli, UnreadableCorpusExitsTwo) {
    std::ofstream(kWork / "junk.agac") << "not a corpus";
    EXPECT_EQ(run("train --corpus " + dir("junk.agac") + " --out " + dir("junk_run")).code, 2);
    EXPECT_EQ(run("train --corpus " + dir("missing.agac") + " --out " + dir("junk_run")).code, 2);
    EXPECT_EQ(train("bad_variant", "--variant sideways").code, 2);
}

TEST_F(Cli, TrainIsReproducibleAndLogsAreWellFormed) {
    ASSERT_EQ(train("run_a").code, 0);
    ASSERT_EQ(train("run_b").code, 0);
    EXPECT_EQ(slurp(kWork / "run_a" / "metrics.jsonl"), slurp(kWork / "run_b" / "metrics.jsonl"));
    EXPECT_EQ(slurp(kWork / "run_a" / "gates.csv"), slurp(kWork / "run_b" / "gates.csv"));
    EXPECT_EQ(slurp(kWork / "run_a" / "checkpoint.agak"), slurp(kWork / "run_b" / "checkpoint.agak"));

    std::istringstream gates(slurp(kWork / "run_a" / "gates.csv"));
    std::string line;
    std::getline(gates, line);
    EXPECT_EQ(line, "step,sigma_tg,sigma_vg");
    long last = -1;
    std::size_t rows = 0;
    while (std::getline(gates, line)) {
        long step = 0;
        double tg = -1, vg = -1;
        ASSERT_EQ(std::sscanf(line.c_str(), "%ld,%lf,%lf", &step, &tg, &vg), 3) << line;
        EXPECT_GT(step, last);
        EXPECT_GE(tg, 0.0);
        EXPECT_LE(vg, 1.0);
        last = step;
        ++rows;
    }
    EXPECT_EQ(rows, 4u);  // step 0 plus three steps
}

TEST_F(Cli, GlobalOnlyLogsZeroGroupedLosses) {
    ASSERT_EQ(train("run_global", "--variant global-only").code, 0);
    std::istringstream in(slurp(kWork / "run_global" / "metrics.jsonl"));
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        const auto j = nlohmann::json::parse(line);
        for (const char* k : {"l_tf", "l_vf", "l_gla", "l_gva"}) EXPECT_EQ(j[k], 0.0) << k;
        ++n;
    }
    EXPECT_EQ(n, 3u);
}

TEST_F(Cli, ResumeAppendsToTheSameTrajectory) {
    ASSERT_EQ(train("run_full3", "--set epochs=3").code, 0);
    ASSERT_EQ(train("run_part", "--set epochs=1").code, 0);
    const auto r = train("run_part", "--set epochs=3 --resume " + dir("run_part/checkpoint.agak"));
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(slurp(kWork / "run_part" / "metrics.jsonl"), slurp(kWork / "run_full3" / "metrics.jsonl"));
    EXPECT_EQ(slurp(kWork / "run_part" / "checkpoint.agak"), slurp(kWork / "run_full3" / "checkpoint.agak"));
}

TEST_F(Cli, EvalIsReproducibleAndFollowsSchema) {
    ASSERT_EQ(train("run_eval").code, 0);
    const auto ck = dir("run_eval/checkpoint.agak");
    const auto a = run("eval --checkpoint " + ck + " --corpus " + corpus() + " --config " + cfg() + " --out " + dir("eval_a"));
    ASSERT_EQ(a.code, 0) << a.err;
    ASSERT_EQ(run("eval --checkpoint " + ck + " --corpus " + corpus() + " --config " + cfg() + " --out " + dir("eval_b")).code, 0);
    EXPECT_EQ(slurp(kWork / "eval_a" / "results.json"), slurp(kWork / "eval_b" / "results.json"));

    const auto j = nlohmann::json::parse(slurp(kWork / "eval_a" / "results.json"));
    EXPECT_EQ(j["variant"], "full");
    EXPECT_EQ(j["seed"], 5);
    for (const char* k : {"prec@1", "prec@5", "zero_shot", "probe", "fidelity"}) EXPECT_TRUE(j.contains(k)) << k;
    EXPECT_FALSE(j.contains("prec@10"));  // only 6 test candidates
    for (const char* k : {"acc", "f1", "roc"}) EXPECT_TRUE(j["zero_shot"].contains(k)) << k;
    for (const char* k : {"0.1", "0.5", "1"}) EXPECT_TRUE(j["probe"].contains(k)) << k;
    EXPECT_GE(j["fidelity"].get<double>(), 0.0);

    std::size_t pgm = 0, csv = 0;
    for (const auto& e : fs::directory_iterator(kWork / "eval_a" / "heatmaps")) {
        pgm += e.path().extension() == ".pgm";
        csv += e.path().extension() == ".csv";
    }
    EXPECT_GT(pgm, 0u);
    EXPECT_EQ(pgm, csv);
}

TEST_F(Cli, EvalDimensionMismatchNamesBothDims) {
    ASSERT_EQ(train("run_dims").code, 0);
    ASSERT_EQ(run("gen --seed 3 --config " + cfg() + " --set patch_features=6 --out " + dir("corpus_c6")).code, 0);
    const auto r = run("eval --checkpoint " + dir("run_dims/checkpoint.agak") + " --corpus " +
                       dir("corpus_c6/corpus.agac") + " --out " + dir("eval_dims"));
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("6"), std::string::npos) << r.err;
    EXPECT_NE(r.err.find("8"), std::string::npos) << r.err;
}

TEST_F(Cli, VerifyPassesFiltersAndCatchesInjectedFault) {
    const auto all = run("verify");
    EXPECT_EQ(all.code, 0) << all.out;
    EXPECT_EQ(all.out.find("FAIL"), std::string::npos) << all.out;

    const auto grouping = run("verify --filter grouping");
    EXPECT_EQ(grouping.code, 0);
    std::istringstream in(grouping.out);
    std::string line;
    std::size_t rows = 0;
    while (std::getline(in, line))
        if (line.rfind("PASS", 0) == 0 || line.rfind("FAIL", 0) == 0) {
            EXPECT_NE(line.find("grouping/"), std::string::npos) << line;
            ++rows;
        }
    EXPECT_GT(rows, 0u);

    const auto bad = run("verify --inject-fault");
    EXPECT_EQ(bad.code, 1);
    EXPECT_NE(bad.out.find("failing:"), std::string::npos) << bad.out;
}
