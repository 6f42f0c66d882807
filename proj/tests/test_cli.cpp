#include "cli.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

namespace fs = std::filesystem;

namespace {

struct Result {
    int code = 0;
    std::string out, err;
};

Result run(std::vector<std::string> args) {
    args.insert(args.begin(), "ionflux");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    Result r;
    r.code = ionflux::cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

std::string slurp(const fs::path& p) { return ionflux::io::read_file(p.string()); }

std::string data(const char* name) { return std::string(IONFLUX_DATA_DIR) + "/" + name; }

class CliTest : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = fs::temp_directory_path() /
               ("ionflux_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(dir_);
        fs::create_directories(dir_);
    }
    void TearDown() override { fs::remove_all(dir_); }
    std::string path(const char* name) const { return (dir_ / name).string(); }
    fs::path dir_;
};

}  // namespace

TEST_F(CliTest, SolveWritesCurve) {
    const auto r = run({"solve", "--membrane", data("membrane.json"), "--feed", data("feed_nacl.json"),
                        "--flux-grid", "5", "--out", path("curve.csv")});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto csv = slurp(path("curve.csv"));
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "jv_m_s,R_Na+,R_Cl-,C_Na+_mol_m3,C_Cl-_mol_m3");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 6);
    const auto manifest = nlohmann::json::parse(slurp(path("curve.csv") + ".manifest.json"));
    EXPECT_EQ(manifest.at("command"), "solve");
    EXPECT_TRUE(manifest.contains("inputs"));
}

TEST_F(CliTest, UsageErrorsExitTwo) {
    const auto unknown = run({"solve", "--bogus"});
    EXPECT_EQ(unknown.code, 2);
    EXPECT_FALSE(unknown.err.empty());
    EXPECT_EQ(run({"frobnicate"}).code, 2);
    EXPECT_EQ(run({}).code, 2);
    EXPECT_EQ(run({"solve", "--feed", path("missing.json"), "--out", path("x.csv")}).code, 2);
}

TEST_F(CliTest, HelpAndVersionExitZero) {
    EXPECT_EQ(run({"--help"}).code, 0);
    const auto v = run({"--version"});
    EXPECT_EQ(v.code, 0);
    EXPECT_EQ(v.out, "0.1.0\n");
}

TEST_F(CliTest, DomainErrorsExitOne) {
    {
        std::ofstream f(path("bad_feed.json"));
        f << R"({"Na+": 10, "Cl-": 20})";
    }
    const auto r = run({"solve", "--feed", path("bad_feed.json"), "--out", path("c.csv")});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("imbalance"), std::string::npos);
}

TEST_F(CliTest, PredictRejectsSpeciesOutsideModel) {
    ASSERT_EQ(run({"gen-data", "--species", "Na+,Cl-", "--count", "3", "--flux-grid", "3", "--out", path("sim.csv")})
                  .code,
              0);
    ASSERT_EQ(run({"pretrain", "--data", path("sim.csv"), "--width", "8", "--order", "2", "--epochs", "1", "--out",
                   path("m.json")})
                  .code,
              0);
    {
        std::ofstream f(path("kcl.json"));
        f << R"({"K+": 10, "Cl-": 10})";
    }
    const auto r = run({"predict", "--model", path("m.json"), "--feed", path("kcl.json")});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("K+"), std::string::npos);

    const auto ok = run({"predict", "--model", path("m.json"), "--feed", data("feed_nacl.json"), "--flux-grid", "4"});
    EXPECT_EQ(ok.code, 0);
    EXPECT_EQ(ok.out.substr(0, 6), "jv_m_s");
}

TEST_F(CliTest, GeneratedCorpusOf850Rows) {
    ASSERT_EQ(run({"gen-data", "--species", "Na+,Cl-", "--count", "25", "--flux-grid", "17", "--noise", "0.05",
                   "--seed", "3", "--out", path("corpus.csv")})
                  .code,
              0);
    const auto ds = ionflux::load_dataset(path("corpus.csv"));
    EXPECT_EQ(ds.size(), 850u);
    EXPECT_EQ(ds.experiments.size(), 25u);
    for (const auto& r : ds.records) EXPECT_EQ(r.provenance, "measured");
}

TEST_F(CliTest, RepeatedRunsAreByteIdentical) {
    const std::vector<std::string> gen{"gen-data", "--species", "Na+,Cl-,Mg2+,SO4_2-", "--count", "3",
                                       "--flux-grid", "3", "--noise", "0.05", "--seed", "9"};
    auto a = gen, b = gen;
    a.insert(a.end(), {"--out", path("a.csv")});
    b.insert(b.end(), {"--out", path("b.csv")});
    ASSERT_EQ(run(a).code, 0);
    ASSERT_EQ(run(b).code, 0);
    EXPECT_EQ(slurp(path("a.csv")), slurp(path("b.csv")));

    const std::vector<std::string> fit{"fit-membrane", "--data", path("a.csv"), "--seed", "7", "--budget", "15"};
    auto fa = fit, fb = fit;
    fa.insert(fa.end(), {"--out", path("fa.json")});
    fb.insert(fb.end(), {"--out", path("fb.json")});
    ASSERT_EQ(run(fa).code, 0);
    ASSERT_EQ(run(fb).code, 0);
    EXPECT_EQ(slurp(path("fa.json")), slurp(path("fb.json")));
}
