#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "helpers.hpp"
#include "pmae/cli.hpp"
#include "pmae/synthetic.hpp"

using namespace pmae;
using testing_support::TempDir;
using testing_support::tiny_config;

namespace {

struct Outcome {
    int code;
    std::string out;
    std::string err;
};

Outcome invoke(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = run(args, out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream f(p);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

// Writes a tiny dataset and a matching config; returns the config path.
std::filesystem::path setup(const TempDir& dir, ObjectiveVariant variant = ObjectiveVariant::mse) {
    write_synthetic_dataset(dir / "data" / "train", {2, 4, 16, 3});
    auto cfg = tiny_config(variant);
    cfg.epochs = 1;
    cfg.data.root = (dir / "data").string();
    const auto path = dir / "config.yaml";
    std::ofstream(path) << run_config_text(cfg);
    return path;
}

void expect_single_error_line(const Outcome& r, const std::string& category) {
    EXPECT_EQ(r.err.rfind("error: " + category + ": ", 0), 0u) << r.err;
    EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1) << r.err;
}

} // namespace

TEST(Cli, UsageErrors) {
    auto r = invoke({});
    EXPECT_EQ(r.code, 2);
    expect_single_error_line(r, "usage");
    r = invoke({"bogus"});
    EXPECT_EQ(r.code, 2);
    expect_single_error_line(r, "usage");
    r = invoke({"pretrain"});
    EXPECT_EQ(r.code, 2);
}

TEST(Cli, ValidateConfigCategories) {
    TempDir dir;
    const auto cfg = setup(dir);
    auto ok = invoke({"validate-config", "--config", cfg.string()});
    EXPECT_EQ(ok.code, 0) << ok.err;
    EXPECT_NE(ok.out.find("variant: mse"), std::string::npos);

    auto bad = invoke({"validate-config", "--config", cfg.string(), "--override", "optimizer.lr=-1"});
    EXPECT_EQ(bad.code, 2);
    expect_single_error_line(bad, "config");

    auto unknown = invoke({"validate-config", "--config", cfg.string(), "--override", "nonsense.key=1"});
    EXPECT_EQ(unknown.code, 2);
    expect_single_error_line(unknown, "config");

    auto msg = invoke({"validate-config", "--config", cfg.string(), "--override", "msg_enabled=true"});
    EXPECT_EQ(msg.code, 0) << msg.err;

    auto missing = invoke({"validate-config", "--config", (dir / "absent.yaml").string()});
    EXPECT_EQ(missing.code, 2);
}

TEST(Cli, MissingCheckpointIsIoError) {
    TempDir dir;
    auto r = invoke({"eval-recon", "--checkpoint", (dir / "nothing").string(), "--out", (dir / "o").string()});
    EXPECT_EQ(r.code, 1);
    expect_single_error_line(r, "io");
}

TEST(Cli, PretrainIsReproducibleAndFeedsOtherVerbs) {
    TempDir dir;
    const auto cfg = setup(dir, ObjectiveVariant::gan_perceptual);
    const auto a = dir / "a", b = dir / "b";
    ASSERT_EQ(invoke({"pretrain", "--config", cfg.string(), "--seed", "4", "--out", a.string()}).code, 0);
    ASSERT_EQ(invoke({"pretrain", "--config", cfg.string(), "--seed", "4", "--out", b.string()}).code, 0);
    EXPECT_EQ(slurp(a / "metrics.jsonl"), slurp(b / "metrics.jsonl"));
    EXPECT_EQ(slurp(a / "resolved_config.yaml"), slurp(b / "resolved_config.yaml"));
    EXPECT_NE(slurp(a / "resolved_config.yaml").find("seed: 4"), std::string::npos);

    const auto ck = (a / "checkpoint").string();
    auto e = invoke({"eval-recon", "--checkpoint", ck, "--out", (dir / "e").string(), "--count", "2"});
    ASSERT_EQ(e.code, 0) << e.err;
    EXPECT_TRUE(std::filesystem::exists(dir / "e" / "report.json"));
    EXPECT_TRUE(std::filesystem::exists(dir / "e" / "table.txt"));
    EXPECT_NE(e.out.find("PSNR"), std::string::npos);

    auto p = invoke({"probe", "--checkpoint", ck, "--out", (dir / "p").string(), "--epochs", "2"});
    ASSERT_EQ(p.code, 0) << p.err;
    EXPECT_NE(slurp(dir / "p" / "report.json").find("accuracy"), std::string::npos);

    auto r = invoke({"render", "--checkpoint", ck, "--out", (dir / "r").string(), "--count", "2"});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(std::filesystem::exists(dir / "r" / "recon_0.png"));
    EXPECT_TRUE(std::filesystem::exists(dir / "r" / "attention_1.png"));
}

TEST(Cli, OutputRootFromEnvironment) {
    TempDir dir;
    const auto cfg = setup(dir);
    ::setenv(kOutRootEnv, (dir / "root").c_str(), 1);
    auto r = invoke({"pretrain", "--config", cfg.string()});
    ::unsetenv(kOutRootEnv);
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(std::filesystem::exists(dir / "root" / "pretrain" / "checkpoint" / "manifest.json"));
}
