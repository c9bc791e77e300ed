#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "mothello/util.hpp"

namespace fs = std::filesystem;
using mothello::read_text_file;

namespace {

std::string cli_path() {
    const char* env = std::getenv("MOTHELLO_CLI");
    REQUIRE_MESSAGE(env != nullptr, "MOTHELLO_CLI must point at the built binary");
    return env;
}

struct CliResult {
    int exit_code;
    std::string output;  // stdout + stderr
};

CliResult run_cli(const std::string& args) {
    static int counter = 0;
    const auto out = fs::temp_directory_path() / ("mothello_cli_out_" + std::to_string(counter++));
    const std::string cmd = cli_path() + " " + args + " > " + out.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    CliResult res;
    res.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    res.output = fs::exists(out) ? read_text_file(out) : "";
    fs::remove(out);
    return res;
}

fs::path temp_dir(const std::string& tag) {
    const auto dir = fs::temp_directory_path() / ("mothello_cli_test_" + tag);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

}  // namespace

TEST_CASE("usage errors exit 1 with usage text") {
    SUBCASE("no subcommand") {
        const auto res = run_cli("");
        CHECK(res.exit_code == 1);
    }
    SUBCASE("unknown subcommand") {
        const auto res = run_cli("frobnicate");
        CHECK(res.exit_code == 1);
        CHECK(res.output.find("help") != std::string::npos);  // usage pointer
    }
    SUBCASE("bad flag names the offender") {
        const auto res = run_cli("experiment smoke --wat 3");
        CHECK(res.exit_code == 1);
        CHECK(res.output.find("--wat") != std::string::npos);
    }
    SUBCASE("bad scale value") {
        const auto res = run_cli("experiment smoke --scale galactic");
        CHECK(res.exit_code == 1);
    }
}

TEST_CASE("gen-family and gen-corpus") {
    const auto dir = temp_dir("genfam");
    const auto family = dir / "family.json";
    auto res = run_cli("gen-family --languages 2 --variants atomic split --anchors 0:1:2 --seed 7 --out " +
                       family.string());
    CHECK(res.exit_code == 0);
    REQUIRE(fs::exists(family));
    CHECK(read_text_file(family).find("mothello-family") != std::string::npos);

    const auto corpus_dir = dir / "corpus";
    res = run_cli("gen-corpus --family " + family.string() + " --out " + corpus_dir.string() +
                  " --pretrain 50 --validation 10 --prefix-filtered --seed 3 --jobs 2");
    CHECK(res.exit_code == 0);
    REQUIRE(fs::exists(corpus_dir / "pretrain.txt"));
    std::ifstream in(corpus_dir / "pretrain.txt");
    std::string header;
    std::getline(in, header);
    CHECK(header.find("MOTHELLO-CORPUS v1") == 0);
    CHECK(header.find("pretrain 50") != std::string::npos);
    CHECK(fs::exists(corpus_dir / "manifest.json"));

    SUBCASE("illegal anchor spec") {
        const auto bad = run_cli("gen-family --languages 2 --anchors nonsense --out " +
                                 (dir / "x.json").string());
        CHECK(bad.exit_code == 1);
    }
    fs::remove_all(dir);
}

TEST_CASE("experiment, probing and report flow") {
    const auto runs = temp_dir("runs");
    const std::string base = "--runs-dir " + runs.string() + " ";

    auto res = run_cli(base + "experiment smoke --scale smoke --jobs 2");
    CHECK(res.exit_code == 0);

    // locate the run
    std::string run_id;
    for (const auto& e : fs::directory_iterator(runs))
        if (e.is_directory()) run_id = e.path().filename().string();
    REQUIRE_FALSE(run_id.empty());

    SUBCASE("report renders for the completed run") {
        res = run_cli(base + "report " + run_id);
        CHECK(res.exit_code == 0);
        CHECK(fs::exists(runs / run_id / "report.md"));
    }
    SUBCASE("report on a missing run exits 1 and names it") {
        res = run_cli(base + "report does-not-exist");
        CHECK(res.exit_code == 1);
        CHECK(res.output.find("does-not-exist") != std::string::npos);
    }
    SUBCASE("report on an incomplete run names the gap") {
        // fabricate an incomplete run dir
        const auto broken = runs / "broken-run";
        fs::create_directories(broken);
        mothello::write_text_file(broken / "manifest.json",
                                  "{\"format\":\"mothello-run-manifest\",\"version\":1,"
                                  "\"run_id\":\"broken-run\",\"status\":\"running\","
                                  "\"artifacts\":[]}");
        res = run_cli(base + "report broken-run");
        CHECK(res.exit_code == 1);
        CHECK(res.output.find("not complete") != std::string::npos);
    }
    SUBCASE("cross-probe runs against the smoke checkpoint") {
        res = run_cli(base + "cross-probe --run " + run_id +
                      " --checkpoint pretrained --src 0 --tgt 1 --layer 1 --games 40 --jobs 2");
        CHECK(res.exit_code == 0);
        CHECK(res.output.find("cross_probe_acc") != std::string::npos);
    }
    fs::remove_all(runs);
}
