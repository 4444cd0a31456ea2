#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "json.hpp"

#include "dcv/checkpoint.hpp"
#include "dcv/encoder.hpp"
#include "dcv/netpbm.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
    int code;
    std::string out, err;
};

Result dcv_run(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = dcv::cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("dcv_cli_" + name);
    fs::remove_all(p);
    return p;
}

const std::vector<std::string> kTiny{"--layers", "1", "--heads", "2", "--width", "8", "--joint-dim", "8", "--text-layers", "1"};

// A small dataset and an untrained checkpoint shared by the tests below.
struct World {
    fs::path data = scratch("data");
    fs::path model = scratch("model");
    World() {
        if (dcv_run({"gen-data", "--n-per-class", "6", "--seed", "4", "--out", data.string()}).code != 0) std::abort();
        std::vector<std::string> a{"train", "--data", data.string(), "--out", model.string(), "--epochs", "0", "--seed", "11"};
        a.insert(a.end(), kTiny.begin(), kTiny.end());
        if (dcv_run(a).code != 0) std::abort();
    }
};

const World& world() {
    static const World w;
    return w;
}

std::string head(const fs::path& p, std::size_t n) {
    std::ifstream in(p, std::ios::binary);
    std::string s(n, '\0');
    in.read(s.data(), static_cast<std::streamsize>(n));
    return s;
}

} // namespace

TEST(Cli, ValidateOntologyOnShippedTrees) {
    auto r = dcv_run({"validate-ontology", DCV_DATA_DIR "/trees", "--out", scratch("vo").string()});
    EXPECT_EQ(r.code, 0);
    EXPECT_EQ(r.out, "2 valid, 0 invalid\n");
}

TEST(Cli, InvalidTreeExitsOne) {
    const auto dir = scratch("bad_tree");
    fs::create_directories(dir);
    std::ofstream(dir / "x.json") << R"({"nodes":[{"id":"A","depth":0}],"edges":[{"source":"A","target":"B","relation":"has"}]})";
    auto r = dcv_run({"validate-ontology", dir.string(), "--out", (dir / "o").string()});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.out.find("0 valid, 1 invalid"), std::string::npos);
}

TEST(Cli, UnknownFlagIsUsageError) {
    auto r = dcv_run({"train", "--bogus"});
    EXPECT_EQ(r.code, 1);
    EXPECT_FALSE(r.err.empty());
    EXPECT_EQ(dcv_run({}).code, 1);
}

TEST(Cli, HelpListsFlagsAndDefaults) {
    for (std::string sub : {"gen-data", "validate-ontology", "train", "profile", "explain", "eval-seg", "eval-disen",
                            "eval-zeroshot", "eval-probe", "eval-retrieval", "eval-rationale-pred", "retrieve"}) {
        auto r = dcv_run({sub, "--help"});
        EXPECT_EQ(r.code, 0) << sub;
        EXPECT_NE(r.out.find("--seed"), std::string::npos) << sub;
    }
    auto t = dcv_run({"train", "--help"});
    EXPECT_NE(t.out.find("--ablate-disen"), std::string::npos);
    EXPECT_NE(t.out.find("--epochs UINT [8]"), std::string::npos) << t.out;
}

TEST(Cli, TrainZeroEpochsWritesInitialCheckpoint) {
    const auto& w = world();
    const auto ck = dcv::load_checkpoint(w.model);
    dcv::Rng rng(11);
    const auto init = dcv::init_params(ck.params.config(), rng, 0.07);
    EXPECT_TRUE(ck.params.bitwise_equal(init));
    EXPECT_TRUE(fs::exists(w.model / "train_log.csv"));
    auto cfg = nlohmann::json::parse(dcv::read_text_file(w.model / "config.json"));
    EXPECT_EQ(cfg["command"], "train");
    EXPECT_EQ(cfg["epochs"], 0);
}

TEST(Cli, ConfigFileUnderFlags) {
    const auto& w = world();
    const auto dir = scratch("cfg");
    fs::create_directories(dir);
    std::ofstream(dir / "c.json") << R"({"epochs": 3, "lambda": 0.25, "split": "val"})";
    auto r = dcv_run({"eval-zeroshot", "--config", (dir / "c.json").string(), "--data", w.data.string(), "--checkpoint",
                      w.model.string(), "--out", (dir / "o").string(), "--split", "test"});
    ASSERT_EQ(r.code, 0) << r.err;
    auto cfg = nlohmann::json::parse(dcv::read_text_file(dir / "o" / "config.json"));
    EXPECT_EQ(cfg["epochs"], 3);
    EXPECT_EQ(cfg["lambda"], 0.25);
    EXPECT_EQ(cfg["split"], "test");
    std::ofstream(dir / "bad.json") << R"({"epoch": 3})";
    EXPECT_EQ(dcv_run({"eval-zeroshot", "--config", (dir / "bad.json").string()}).code, 1);
}

TEST(Cli, ExplainWritesHeatmapMaskAndValues) {
    const auto& w = world();
    const auto dir = scratch("explain");
    fs::create_directories(dir);
    dcv::Image img(32, 32, 3, 0.5);
    dcv::write_ppm(dir / "s.ppm", img);
    auto r = dcv_run({"explain", "--checkpoint", w.model.string(), "--image", (dir / "s.ppm").string(), "--rationale",
                      "Breast is Red", "--out", (dir / "o").string()});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(head(dir / "o" / "heatmap.pgm", 2), "P5");
    EXPECT_EQ(head(dir / "o" / "mask.pbm", 2), "P4");
    const std::string csv = dcv::read_text_file(dir / "o" / "values.csv");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 17);
    EXPECT_EQ(dcv::read_pbm(dir / "o" / "mask.pbm").height, 32u);
}

TEST(Cli, EvaluationsWriteReports) {
    const auto& w = world();
    const std::vector<std::vector<std::string>> cmds{{"eval-seg"}, {"eval-disen"}, {"eval-zeroshot"}, {"eval-probe"},
                                                     {"eval-retrieval", "--ks", "1,2"}, {"eval-rationale-pred"},
                                                     {"profile", "--fallback-uniform"}};
    for (const auto& c : cmds) {
        const auto out = scratch("eval_" + c[0]);
        std::vector<std::string> a = c;
        a.insert(a.end(), {"--data", w.data.string(), "--checkpoint", w.model.string(), "--out", out.string()});
        auto r = dcv_run(a);
        ASSERT_EQ(r.code, 0) << c[0] << ": " << r.err;
        if (c[0] == "profile") {
            EXPECT_TRUE(fs::exists(out / "ablation.csv"));
            EXPECT_TRUE(fs::exists(out / "profile.json"));
            EXPECT_TRUE(fs::exists(out / "profile.bin"));
            continue;
        }
        auto rep = nlohmann::json::parse(dcv::read_text_file(out / "report.json"));
        EXPECT_EQ(rep["config_hash"].get<std::string>().size(), 16u) << c[0];
        EXPECT_GT(rep["sample_count"].get<int>(), 0);
    }
}

TEST(Cli, RetrieveAndRationaleFileErrors) {
    const auto& w = world();
    const auto out = scratch("retrieve");
    auto r = dcv_run({"retrieve", "--data", w.data.string(), "--checkpoint", w.model.string(), "--out", out.string(),
                      "--rationale", "Crest is Red", "--k", "3"});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(fs::exists(out / "retrieval.json"));
    EXPECT_TRUE(fs::exists(out / "rank_3.ppm"));

    std::ofstream(out / "partial.json") << R"({"Auk": ["zq xv"]})";
    auto e = dcv_run({"eval-rationale-pred", "--data", w.data.string(), "--checkpoint", w.model.string(), "--out",
                      out.string(), "--rationale-file", (out / "partial.json").string()});
    EXPECT_EQ(e.code, 1);
    EXPECT_NE(e.err.find("Bittern"), std::string::npos);
    EXPECT_EQ(dcv_run({"eval-zeroshot", "--data", (out / "missing").string(), "--checkpoint", w.model.string(), "--out",
                       out.string()})
                  .code,
              1);
}
