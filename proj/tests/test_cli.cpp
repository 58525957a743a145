#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <map>

#include "habitat/cli.hpp"

#include "fixtures.hpp"
#include "test_util.hpp"

using namespace habitat;
namespace fs = std::filesystem;

#ifndef FIXTURES_DIR
#define FIXTURES_DIR "tests/fixtures"
#endif

namespace {

int run_cli(std::initializer_list<std::string> args) { return habitat::cli::run(std::vector<std::string>(args)); }

std::map<std::string, std::string> snapshot_dir(const fs::path& dir) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file()) out[fs::relative(e.path(), dir).generic_string()] = read_file(e.path());
    return out;
}

} // namespace

TEST_CASE("toydata / split / train / eval pipeline") {
    TempDir dir("cli_pipeline");
    const std::string data = (dir / "data").string();
    const std::string splitd = (dir / "split").string();
    const std::string traind = (dir / "train").string();
    const std::string evald = (dir / "eval").string();

    REQUIRE(run_cli({"toydata", "--classes", "2", "--per-class", "8", "--size", "32", "--difficulty", "separable", "--seed",
                 "5", "--out", data}) == 0);
    REQUIRE(fs::exists(dir / "data/manifest.csv"));
    REQUIRE(fs::exists(dir / "data/run_config.json"));

    REQUIRE(run_cli({"split", "--manifest", data + "/manifest.csv", "--min-test-count", "2", "--seed", "7", "--out",
                 splitd}) == 0);
    REQUIRE(fs::exists(dir / "split/split.csv"));

    REQUIRE(run_cli({"train", "--paradigm", "supervised", "--manifest", data + "/manifest.csv", "--split",
                 splitd + "/split.csv", "--preset", "toy", "--epochs", "6", "--lr", "0.005", "--resize", "32", "--crop",
                 "32", "--rotate-deg", "0", "--embed-dim", "16", "--patch", "8", "--seed", "11", "--out", traind}) == 0);
    REQUIRE(fs::exists(dir / "train/checkpoint_final.hbc"));
    REQUIRE(fs::exists(dir / "train/checkpoint_best.hbc"));
    REQUIRE(fs::exists(dir / "train/run_record.csv"));
    REQUIRE(fs::exists(dir / "train/curves.ppm"));
    REQUIRE(fs::exists(dir / "train/config.json"));

    REQUIRE(run_cli({"eval", "--checkpoint", traind + "/checkpoint_best.hbc", "--manifest", data + "/manifest.csv",
                 "--split", splitd + "/split.csv", "--subset", "test", "--out", evald}) == 0);
    REQUIRE(fs::exists(dir / "eval/metrics.json"));
    REQUIRE(fs::exists(dir / "eval/predictions.csv"));
    const auto metrics = read_file(dir / "eval/metrics.json");
    CHECK(metrics.find("\"top1\"") != std::string::npos);
    CHECK(metrics.find("\"mcc\"") != std::string::npos);

    SUBCASE("cm and cm-delta run over the produced predictions") {
        const std::string cmd = (dir / "cm").string();
        REQUIRE(run_cli({"cm", "--predictions", evald + "/predictions.csv", "--out", cmd}) == 0);
        REQUIRE(fs::exists(dir / "cm/cm_counts.csv"));
        REQUIRE(fs::exists(dir / "cm/cm_normalized.csv"));
        REQUIRE(fs::exists(dir / "cm/cm_heatmap.ppm"));

        const std::string deltad = (dir / "delta").string();
        REQUIRE(run_cli({"cm-delta", "--a", cmd + "/cm_normalized.csv", "--b", cmd + "/cm_normalized.csv", "--out",
                     deltad}) == 0);
        const auto delta = load_matrix_csv(dir / "delta/delta.csv");
        for (const auto& row : delta.values)
            for (double v : row) CHECK(v == 0.0);
        REQUIRE(fs::exists(dir / "delta/delta_heatmap.ppm"));
    }

    SUBCASE("embed and cluster-quality run over the trained encoder") {
        const std::string embedd = (dir / "embed").string();
        REQUIRE(run_cli({"embed", "--checkpoint", traind + "/checkpoint_best.hbc", "--manifest", data + "/manifest.csv",
                     "--split", splitd + "/split.csv", "--subset", "test", "--out", embedd}) == 0);
        REQUIRE(fs::exists(dir / "embed/embeddings.bin"));
        const std::string cqd = (dir / "cq").string();
        REQUIRE(run_cli({"cluster-quality", "--embeddings", embedd + "/embeddings.bin", "--out", cqd}) == 0);
        const auto cq = read_file(dir / "cq/cluster_quality.json");
        CHECK(cq.find("\"overall\"") != std::string::npos);
        CHECK(cq.find("ch_index") != std::string::npos);
        CHECK(cq.find("db_index") != std::string::npos);
    }

    SUBCASE("gradcam writes one overlay per image with stable names") {
        const auto manifest = load_manifest(dir / "data/manifest.csv");
        const std::string img0 = manifest.resolve(manifest.records[0]).string();
        const std::string img1 = manifest.resolve(manifest.records[1]).string();
        const std::string gcd = (dir / "gc").string();
        REQUIRE(run_cli({"gradcam", "--checkpoint", traind + "/checkpoint_best.hbc", "--image", img0, "--image", img1,
                     "--target-class", "improved_grassland", "--out", gcd}) == 0);
        CHECK(fs::exists(dir / "gc/overlay_000_0.ppm"));
        CHECK(fs::exists(dir / "gc/overlay_001_1.ppm"));
        CHECK(fs::exists(dir / "gc/grid_000_0.csv"));
        CHECK(fs::exists(dir / "gc/grid_001_1.csv"));
    }
}

TEST_CASE("eval on the golden predictions reproduces the golden report byte for byte") {
    TempDir dir("golden");
    const std::string out = (dir / "out").string();
    REQUIRE(run_cli({"eval", "--predictions", std::string(FIXTURES_DIR) + "/golden_predictions.csv", "--out", out}) == 0);
    const auto got = read_file(dir / "out/metrics.json");
    const auto want = read_file(std::string(FIXTURES_DIR) + "/golden_metrics.json");
    REQUIRE_FALSE(want.empty());
    CHECK(got == want);
}

TEST_CASE("replaying a persisted run config reproduces artifacts byte for byte") {
    TempDir dir("replay");
    const auto tax = default_taxonomy();
    const std::string data = (dir / "data").string();
    REQUIRE(run_cli({"toydata", "--classes", "2", "--per-class", "6", "--size", "16", "--difficulty", "separable", "--seed",
                 "3", "--out", data}) == 0);
    const std::string splitd = (dir / "split").string();
    REQUIRE(run_cli({"split", "--manifest", data + "/manifest.csv", "--min-test-count", "2", "--seed", "9", "--out",
                 splitd}) == 0);

    const auto first = snapshot_dir(dir / "split");
    const std::string config_copy = (dir / "rc.json").string();
    fs::copy_file(dir / "split/run_config.json", config_copy);
    fs::remove_all(dir / "split");

    REQUIRE(run_cli({"--config", config_copy}) == 0);
    const auto second = snapshot_dir(dir / "split");
    CHECK(first == second);

    SUBCASE("toydata replay is also byte-stable") {
        const auto data_first = snapshot_dir(dir / "data");
        const std::string data_rc = (dir / "data_rc.json").string();
        fs::copy_file(dir / "data/run_config.json", data_rc);
        fs::remove_all(dir / "data");
        REQUIRE(run_cli({"--config", data_rc}) == 0);
        CHECK(snapshot_dir(dir / "data") == data_first);
    }
}

TEST_CASE("validation diagnostics and exit codes") {
    TempDir dir("diags");

    SUBCASE("unknown subcommand fails") {
        CHECK(run_cli({"frobnicate"}) != 0);
    }

    SUBCASE("missing required flags fail") {
        CHECK(run_cli({"split", "--out", (dir / "x").string()}) != 0);
    }

    SUBCASE("supcon with tau 0 is rejected with a diagnostic") {
        CHECK(run_cli({"train", "--paradigm", "supcon", "--manifest", "m.csv", "--split", "s.csv", "--tau", "0", "--seed",
                   "1", "--out", (dir / "t").string(), "--validate-only"}) != 0);
    }

    SUBCASE("crop larger than resize is rejected") {
        CHECK(run_cli({"train", "--manifest", "m.csv", "--split", "s.csv", "--resize", "384", "--crop", "512", "--seed",
                   "1", "--out", (dir / "t").string(), "--validate-only"}) != 0);
    }

    SUBCASE("a valid config passes validation without touching the filesystem") {
        CHECK(run_cli({"train", "--manifest", "m.csv", "--split", "s.csv", "--preset", "full", "--seed", "1", "--out",
                   (dir / "t").string(), "--validate-only"}) == 0);
        CHECK_FALSE(fs::exists(dir / "t"));
    }

    SUBCASE("missing input files produce a nonzero exit") {
        CHECK(run_cli({"eval", "--predictions", "no_such_file.csv", "--out", (dir / "e").string()}) == 1);
    }
}

TEST_CASE("validate_config reports every diagnostic of a run config at once") {
    habitat::cli::RunConfig rc;
    rc.command = "train";
    rc.add("paradigm", "supcon");
    rc.add("manifest", "m.csv");
    rc.add("split", "s.csv");
    rc.add("tau", "0");
    rc.add("batch", "1");
    rc.add("resize", "384");
    rc.add("crop", "512");
    rc.has_seed = true;
    rc.seed = 1;
    rc.out_dir = "out";
    const auto diags = habitat::cli::validate_config(rc);
    CHECK(diags.size() >= 3); // tau, batch, crop each flagged in one pass

    habitat::cli::RunConfig ok;
    ok.command = "train";
    ok.add("paradigm", "supcon");
    ok.add("manifest", "m.csv");
    ok.add("split", "s.csv");
    ok.add("preset", "full");
    ok.has_seed = true;
    ok.seed = 1;
    ok.out_dir = "out";
    CHECK(habitat::cli::validate_config(ok).empty());
}

TEST_CASE("expert benchmark workflow through the CLI") {
    TempDir dir("cli_expert");
    const auto tax = default_taxonomy();

    // synthetic manifest + split + annotations
    const auto manifest = manifest_from_class_counts({{"bog", 20}, {"urban", 16}, {"bracken", 12}}, tax);
    save_manifest(dir / "manifest.csv", manifest);
    const auto split = stratified_split(manifest, tax, {0.75, 0.2, 0.25}, 4, 3);
    save_split(dir / "split.csv", split);

    const std::string subsetd = (dir / "subset").string();
    REQUIRE(run_cli({"expert-subset", "--manifest", (dir / "manifest.csv").string(), "--split", (dir / "split.csv").string(),
                 "--fraction", "1.0", "--seed", "2", "--out", subsetd}) == 0);
    const auto subset = load_manifest(dir / "subset/subset.csv");
    CHECK(subset.records.size() == split.count(Split::test));

    // two annotators: truth and a noisy one
    AnnotationSet truth_ann, noisy_ann;
    truth_ann.annotator_id = "expert_1";
    noisy_ann.annotator_id = "expert_2";
    bool flip = false;
    for (const auto& r : subset.records) {
        truth_ann.records[r.sample_id] = {r.l3_label};
        noisy_ann.records[r.sample_id] = {flip ? (r.l3_label == "bog" ? "urban" : "bog") : r.l3_label};
        flip = !flip;
    }
    save_annotations(dir / "expert1.csv", truth_ann);
    save_annotations(dir / "expert2.csv", noisy_ann);

    const std::string scored = (dir / "score").string();
    REQUIRE(run_cli({"expert-score", "--annotations", (dir / "expert1.csv").string(), "--subset",
                 (dir / "subset/subset.csv").string(), "--out", scored}) == 0);
    REQUIRE(fs::exists(dir / "score/metrics_expert_1.json"));
    REQUIRE(fs::exists(dir / "score/cm_expert_1.csv"));
    const auto metrics = read_file(dir / "score/metrics_expert_1.json");
    CHECK(metrics.find("\"top1\": 1.0") != std::string::npos);

    const std::string agreed = (dir / "agree").string();
    REQUIRE(run_cli({"agree", "--annotations", (dir / "expert1.csv").string(), "--annotations",
                 (dir / "expert2.csv").string(), "--subset", (dir / "subset/subset.csv").string(), "--out", agreed}) == 0);
    const auto agreement = read_file(dir / "agree/agreement.csv");
    CHECK(agreement.find("expert_1") != std::string::npos);
    CHECK(agreement.find("expert_2") != std::string::npos);
}

TEST_CASE("supcon training through the CLI produces the two-stage artifacts") {
    TempDir dir("cli_supcon");
    const std::string data = (dir / "data").string();
    REQUIRE(run_cli({"toydata", "--classes", "2", "--per-class", "6", "--size", "16", "--difficulty", "separable", "--seed",
                 "4", "--out", data}) == 0);
    const std::string splitd = (dir / "split").string();
    REQUIRE(run_cli({"split", "--manifest", data + "/manifest.csv", "--min-test-count", "2", "--seed", "5", "--out",
                 splitd}) == 0);
    const std::string traind = (dir / "train").string();
    REQUIRE(run_cli({"train", "--paradigm", "supcon", "--manifest", data + "/manifest.csv", "--split",
                 splitd + "/split.csv", "--epochs", "2", "--lr", "0.003", "--batch", "4", "--resize", "16", "--crop",
                 "16", "--rotate-deg", "0", "--embed-dim", "8", "--patch", "8", "--seed", "6", "--out", traind}) == 0);
    CHECK(fs::exists(dir / "train/encoder_pretrained.hbc"));
    CHECK(fs::exists(dir / "train/pretrain_record.csv"));
    CHECK(fs::exists(dir / "train/checkpoint_final.hbc"));
    CHECK(fs::exists(dir / "train/run_record.csv"));
}
