#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <sstream>

#include "test_util.hpp"
#include "transflower/cli.hpp"
#include "transflower/csv.hpp"
#include "transflower/pipeline.hpp"

using namespace transflower;
namespace fs = std::filesystem;

namespace {

struct Result {
    int code = -1;
    std::string out;
    std::string err;
};

Result run_cli(std::vector<std::string> args) {
    args.insert(args.begin(), "transflower");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    Result r;
    r.code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

// Data rows of a CSV file, header dropped.
std::vector<std::vector<std::string>> csv_rows(const fs::path& path) {
    const auto lines = csv::read_lines(path);
    std::vector<std::vector<std::string>> rows;
    for (std::size_t i = 1; i < lines.size(); ++i) rows.push_back(csv::split_line(lines[i]));
    return rows;
}

fs::path tmp_root() { return fs::path(TRANSFLOWER_TEST_TMP); }

std::string path_str(const fs::path& p) { return p.string(); }

std::vector<std::string> small_model_flags(const std::string& lr = "1e-3") {
    return {"--d-geo", "16", "--d-loc", "8", "--rle-hidden", "16", "--ffn-hidden", "16", "--n-heads", "2",
            "--n-layers", "1", "--max-epochs", "3", "--batch-origins", "16", "--max-destinations", "32",
            "--lr", lr};
}

std::vector<std::string> concat(std::vector<std::string> a, const std::vector<std::string>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
}

// Synthetic city shared by the tests below.
const fs::path& city() {
    static const fs::path dir = [] {
        const fs::path d = tmp_root() / "city";
        fs::remove_all(d);
        const Result r = run_cli({"synth", "--n-regions", "40", "--mean-outflow", "40", "--seed", "5", "--out",
                                  path_str(d)});
        REQUIRE(r.code == 0);
        return d;
    }();
    return dir;
}

fs::path train_variant(const std::string& variant) {
    const fs::path out = tmp_root() / ("train_" + variant);
    fs::remove_all(out);
    const Result r = run_cli(concat({"train", "--data", path_str(city()), "--out", path_str(out), "--variant", variant,
                                     "--threads", "2"},
                                    small_model_flags()));
    REQUIRE_MESSAGE(r.code == 0, r.err);
    return out;
}

std::map<std::string, double> sums_by_origin(const fs::path& predictions) {
    std::map<std::string, double> sums;
    for (const auto& row : csv_rows(predictions)) sums[row[0]] += std::stod(row[2]);
    return sums;
}

std::map<std::string, double> outflows() {
    std::map<std::string, double> sums;
    for (const auto& row : csv_rows(city() / "flows.csv")) sums[row[0]] += std::stod(row[2]);
    return sums;
}

}  // namespace

TEST_CASE("synth writes a reproducible city") {
    const fs::path a = tmp_root() / "synth_a", b = tmp_root() / "synth_b";
    fs::remove_all(a);
    fs::remove_all(b);
    for (const auto& d : {a, b})
        CHECK(run_cli({"synth", "--n-regions", "30", "--seed", "7", "--out", path_str(d)}).code == 0);
    for (const char* f : {"regions.csv", "flows.csv", "ground_truth.txt"}) {
        CHECK(fs::exists(a / f));
        CHECK(testutil::read_file(a / f) == testutil::read_file(b / f));
    }
    // The echo differs only in the output directory.
    KeyValues ea = load_kv(a / "run_config.txt"), eb = load_kv(b / "run_config.txt");
    CHECK(ea.at("out") != eb.at("out"));
    ea.erase("out");
    eb.erase("out");
    CHECK(ea == eb);
    const std::string regions = testutil::read_file(a / "regions.csv");
    CHECK(std::count(regions.begin(), regions.end(), '\n') == 31);

    CHECK(run_cli({"synth", "--n-regions", "2", "--out", path_str(tmp_root() / "synth_c")}).code == 2);
    CHECK(run_cli({"synth", "--no-such-flag"}).code == 2);
    CHECK(run_cli({}).code == 2);
    CHECK(run_cli({"--help"}).code == 0);
}

TEST_CASE("config file precedence and replay") {
    const fs::path dir = tmp_root() / "config";
    fs::remove_all(dir);
    testutil::write_file(dir / "run.cfg", "# city settings\nseed = 9\nsynth.n_regions = 50\nsynth.epsilon = 0.5\n");
    const fs::path out = dir / "first";
    CHECK(run_cli({"synth", "--config", path_str(dir / "run.cfg"), "--n-regions", "25", "--out", path_str(out)}).code ==
          0);
    const KeyValues echo = load_kv(out / "run_config.txt");
    CHECK(echo.at("seed") == "9");
    CHECK(echo.at("synth.n_regions") == "25");
    CHECK(echo.at("synth.epsilon") == "0.5");
    CHECK(echo.at("command") == "synth");

    // Feeding the echo back reproduces the outputs.
    const fs::path replay = dir / "replay";
    CHECK(run_cli({"synth", "--config", path_str(out / "run_config.txt"), "--out", path_str(replay)}).code == 0);
    CHECK(testutil::read_file(out / "flows.csv") == testutil::read_file(replay / "flows.csv"));
    CHECK(testutil::read_file(out / "regions.csv") == testutil::read_file(replay / "regions.csv"));

    testutil::write_file(dir / "bad.cfg", "no.such.key = 1\n");
    CHECK(run_cli({"synth", "--config", path_str(dir / "bad.cfg"), "--out", path_str(dir / "x")}).code == 2);
    CHECK(run_cli({"synth", "--config", path_str(dir / "missing.cfg"), "--out", path_str(dir / "x")}).code == 2);
}

TEST_CASE("split writes a manifest") {
    const fs::path out = tmp_root() / "split";
    fs::remove_all(out);
    CHECK(run_cli({"split", "--data", path_str(city()), "--out", path_str(out)}).code == 0);
    const SplitAssignment s = load_split(out / "split.csv");
    CHECK(s.train_origins.size() + s.val_origins.size() + s.test_origins.size() == outflows().size());
    CHECK(run_cli({"split", "--data", path_str(city()), "--train-ratio", "0.9", "--out", path_str(out)}).code == 2);
}

TEST_CASE("train, eval and explain") {
    const fs::path trained = train_variant("full");
    for (const char* f : {"checkpoint.tfw", "train_log.csv", "split.csv", "run_config.txt"}) CHECK(fs::exists(trained / f));
    const std::string log = testutil::read_file(trained / "train_log.csv");
    CHECK(std::count(log.begin(), log.end(), '\n') == 4);
    const std::string ck = path_str(trained / "checkpoint.tfw");

    const fs::path ev = tmp_root() / "eval";
    fs::remove_all(ev);
    Result r = run_cli({"eval", "--data", path_str(city()), "--checkpoint", ck, "--out", path_str(ev)});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    const std::string first = testutil::read_file(ev / "predictions.csv");
    CHECK(first.rfind("origin_id,dest_id,volume_pred,volume_real\n", 0) == 0);
    const auto totals = outflows();
    const auto sums = sums_by_origin(ev / "predictions.csv");
    CHECK(!sums.empty());
    for (const auto& [origin, s] : sums) CHECK(std::abs(s - totals.at(origin)) <= 1e-4 * totals.at(origin));

    CHECK(run_cli({"eval", "--data", path_str(city()), "--checkpoint", ck, "--out", path_str(ev)}).code == 0);
    CHECK(testutil::read_file(ev / "predictions.csv") == first);
    const std::string reports = testutil::read_file(ev / "reports.csv");
    CHECK(reports.rfind("model,dataset,split,cpc,mae,rmse,n_pairs\n", 0) == 0);
    CHECK(std::count(reports.begin(), reports.end(), '\n') == 3);

    CHECK(run_cli({"eval", "--data", path_str(city()), "--checkpoint", ck, "--variant", "no-rle", "--out",
                   path_str(ev)}).code == 2);
    CHECK(run_cli({"eval", "--data", path_str(city()), "--checkpoint", path_str(ev / "nope.tfw"), "--out",
                   path_str(ev)}).code == 2);

    const fs::path ex = tmp_root() / "explain";
    fs::remove_all(ex);
    const std::string origin = sums.begin()->first;
    r = run_cli({"explain", "attention", "--data", path_str(city()), "--checkpoint", ck, "--origin", origin, "--out",
                 path_str(ex), "--per-head"});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    const auto att = csv_rows(ex / ("attention_" + origin + ".csv"));
    std::map<std::string, double> rows;
    for (const auto& row : att) rows[row[0]] += std::stod(row[2]);
    for (const auto& [dest, s] : rows) CHECK(std::abs(s - 1.0) <= 1e-6);
    CHECK(fs::exists(ex / ("influencers_" + origin + ".csv")));
    CHECK(fs::exists(ex / ("attention_heads_" + origin + ".csv")));
    CHECK(run_cli({"explain", "attention", "--data", path_str(city()), "--checkpoint", ck, "--origin", "NOPE",
                   "--out", path_str(ex)}).code == 2);

    r = run_cli({"explain", "clusters", "--checkpoint", ck, "--out", path_str(ex)});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    CHECK(csv_rows(ex / "clusters.csv").size() == 10000);
    CHECK(fs::exists(ex / "clusters.svg"));

    r = run_cli({"explain", "residuals", "--data", path_str(city()), "--checkpoint", ck, "--out", path_str(ex)});
    CHECK(r.code == 0);
    CHECK(fs::exists(ex / "residuals.csv"));
}

TEST_CASE("variants and residual comparison") {
    const fs::path full = train_variant("full");
    const fs::path none = train_variant("no-rle");
    const fs::path prime = train_variant("rle-prime");
    CHECK(load_kv(none / "run_config.txt").at("variant") == "no-rle");
    CHECK(load_kv(prime / "run_config.txt").at("variant") == "rle-prime");
    CHECK(variant_name(load_model(none / "checkpoint.tfw").config) == "no-rle");
    CHECK(variant_name(load_model(prime / "checkpoint.tfw").config) == "rle-prime");
    CHECK(variant_name(load_model(full / "checkpoint.tfw").config) == "full");
    CHECK(testutil::read_file(none / "checkpoint.tfw") != testutil::read_file(prime / "checkpoint.tfw"));

    // Clustering needs an encoder.
    CHECK(run_cli({"explain", "clusters", "--checkpoint", path_str(none / "checkpoint.tfw"), "--out",
                   path_str(tmp_root() / "x")}).code == 2);

    const fs::path ab = tmp_root() / "cmp_ab", ba = tmp_root() / "cmp_ba";
    const std::string a = path_str(full / "checkpoint.tfw"), b = path_str(prime / "checkpoint.tfw");
    CHECK(run_cli({"explain", "residuals", "--data", path_str(city()), "--compare", a, b, "--out", path_str(ab)}).code ==
          0);
    CHECK(run_cli({"explain", "residuals", "--data", path_str(city()), "--compare", b, a, "--out", path_str(ba)}).code ==
          0);
    const auto dab = csv_rows(ab / "residual_diff.csv");
    const auto dba = csv_rows(ba / "residual_diff.csv");
    REQUIRE(dab.size() == dba.size());
    REQUIRE(dab.size() >= 10);
    for (std::size_t i = 0; i < 10; ++i) {
        CHECK(dab[i][0] == dba[i][0]);
        CHECK(std::stod(dab[i][4]) == -std::stod(dba[i][4]));
    }
}

TEST_CASE("baselines") {
    const fs::path g = tmp_root() / "gravity";
    fs::remove_all(g);
    Result r = run_cli({"baseline", "gravity", "--data", path_str(city()), "--out", path_str(g)});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    const KeyValues echo = load_kv(g / "run_config.txt");
    CHECK(echo.contains("result.gravity_beta"));
    CHECK(echo.contains("result.gravity_gamma"));

    const fs::path rad = tmp_root() / "radiation";
    fs::remove_all(rad);
    r = run_cli({"baseline", "radiation", "--data", path_str(city()), "--out", path_str(rad)});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    const auto totals = outflows();
    for (const fs::path& dir : {g, rad})
        for (const auto& [origin, s] : sums_by_origin(dir / "predictions.csv"))
            CHECK(std::abs(s - totals.at(origin)) <= 1e-4 * totals.at(origin));

    CHECK(run_cli({"baseline", "knn", "--data", path_str(city()), "--out", path_str(rad)}).code == 2);
}

TEST_CASE("input and numeric failures map to exit codes") {
    const fs::path empty = tmp_root() / "empty_data";
    fs::remove_all(empty);
    fs::create_directories(empty);
    fs::copy_file(city() / "regions.csv", empty / "regions.csv");
    CHECK(run_cli({"train", "--data", path_str(empty), "--out", path_str(tmp_root() / "x")}).code == 2);

    const fs::path out = tmp_root() / "blowup";
    const Result r =
        run_cli(concat({"train", "--data", path_str(city()), "--out", path_str(out)}, small_model_flags("1e300")));
    CHECK(r.code == 3);
    CHECK(r.err.find("epoch") != std::string::npos);
}
