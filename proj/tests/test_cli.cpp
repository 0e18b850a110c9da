#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string tmp_dir(const std::string& stem) {
    static int counter = 0;
    const fs::path dir =
        fs::temp_directory_path() / ("projprobe-cli-" + stem + "-" + std::to_string(counter++));
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir.string();
}

int run(const std::string& args) {
    const std::string cmd = std::string(CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
}

std::string write_config(const std::string& dir, const json& j) {
    static int counter = 0;
    const std::string path = dir + "/config-" + std::to_string(counter++) + ".json";
    std::ofstream os(path);
    os << j.dump(2);
    return path;
}

json train_config(int n = 64, int steps = 2) {
    return json{{"mode", "train"},
                {"name", "targets"},
                {"dataset", {{"seed", 1}, {"n", n}}},
                {"models",
                 {{{"id", "tq"}, {"projector", "compressed"}, {"head_variant", "A"},
                   {"steps", steps}, {"seed", 3}}}}};
}

std::string slurp(const std::string& path) {
    std::ifstream is(path);
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

}  // namespace

TEST_CASE("usage errors exit with code 2") {
    CHECK(run("--help") == 0);
    CHECK(run("definitely-not-a-verb") == 2);
    CHECK(run("train") == 2);  // --config is required
    const std::string dir = tmp_dir("usage");
    CHECK(run("train --config " + dir + "/nope.json --out " + dir) == 2);
}

TEST_CASE("config validation rejects unknown keys and wrong modes") {
    const std::string dir = tmp_dir("strict");
    json cfg = train_config();
    cfg["surprise"] = 1;
    CHECK(run("train --config " + write_config(dir, cfg) + " --out " + dir) == 2);

    cfg = train_config();
    cfg["models"][0]["unknown_knob"] = true;
    CHECK(run("train --config " + write_config(dir, cfg) + " --out " + dir) == 2);

    cfg = train_config();
    CHECK(run("attack --config " + write_config(dir, cfg) + " --out " + dir) == 2);

    std::ofstream(dir + "/broken.json") << "{oops";
    CHECK(run("train --config " + dir + "/broken.json --out " + dir) == 2);
}

TEST_CASE("dry runs validate without writing outputs") {
    const std::string dir = tmp_dir("dry");
    const std::string cfg = write_config(dir, train_config());
    CHECK(run("train --config " + cfg + " --out " + dir + "/out --dry-run") == 0);
    CHECK(run("verify --config " + cfg + " --out " + dir + "/out") == 0);
    CHECK_FALSE(fs::exists(dir + "/out/targets/records.jsonl"));
}

TEST_CASE("verify runs self-checks without a config") {
    CHECK(run("verify") == 0);
}

TEST_CASE("train / attack / report pipeline on a tiny budget") {
    const std::string dir = tmp_dir("pipeline");
    const std::string out = dir + "/out";
    CHECK(run("train --config " + write_config(dir, train_config(64, 5)) + " --out " + out) == 0);
    CHECK(fs::exists(out + "/targets/checkpoints/tq.ppck"));
    CHECK(fs::exists(out + "/targets/records.jsonl"));

    const json attack_cfg = {
        {"mode", "attack"},
        {"name", "wb"},
        {"dataset", {{"seed", 1}, {"n", 64}}},
        {"registry", out + "/targets/checkpoints"},
        {"experiment",
         {{"scenario", {{"kind", "white_box"}, {"target_id", "tq"}}},
          {"loss", "vlp"},
          {"attack", {{"method", "pgd"}, {"iterations", 2}}},
          {"attack_seeds", {0, 1}},
          {"attack_items", 4}}}};
    CHECK(run("attack --config " + write_config(dir, attack_cfg) + " --out " + out +
              " --jobs 2") == 0);
    CHECK(fs::exists(out + "/wb/records.jsonl"));

    const json report_cfg = {{"mode", "report"},
                             {"name", "wb"},
                             {"records", {out + "/wb/records.jsonl"}}};
    CHECK(run("report --config " + write_config(dir, report_cfg) + " --out " + out) == 0);
    const std::string csv = slurp(out + "/wb/tables/summary.csv");
    CHECK(csv.rfind("scenario,loss,axis,value,", 0) == 0);
    CHECK(csv.find("white_box,vlp") != std::string::npos);

    // attacking a model that does not exist is a lookup failure
    json missing = attack_cfg;
    missing["experiment"]["scenario"]["target_id"] = "ghost";
    missing["name"] = "ghost";
    CHECK(run("attack --config " + write_config(dir, missing) + " --out " + out) == 2);
}

TEST_CASE("retraining with the same seed yields byte-identical checkpoints") {
    const std::string dir = tmp_dir("repro");
    const std::string cfg = write_config(dir, train_config(48, 3));
    CHECK(run("train --config " + cfg + " --out " + dir + "/a") == 0);
    CHECK(run("train --config " + cfg + " --out " + dir + "/b") == 0);
    CHECK(slurp(dir + "/a/targets/checkpoints/tq.ppck") ==
          slurp(dir + "/b/targets/checkpoints/tq.ppck"));
    CHECK(slurp(dir + "/a/targets/checkpoints/tq.ppck.json") ==
          slurp(dir + "/b/targets/checkpoints/tq.ppck.json"));
}

TEST_CASE("PROJPROBE_OUT provides the default output root") {
    const std::string dir = tmp_dir("envout");
    const std::string cfg = write_config(dir, train_config(48, 1));
    const std::string cmd = "PROJPROBE_OUT=" + dir + "/envroot " + std::string(CLI_PATH) +
                            " train --config " + cfg + " >/dev/null 2>&1";
    CHECK(WEXITSTATUS(std::system(cmd.c_str())) == 0);
    CHECK(fs::exists(dir + "/envroot/targets/checkpoints/tq.ppck"));
}

TEST_CASE("sweep emits one group of records per axis value") {
    const std::string dir = tmp_dir("sweep");
    const std::string out = dir + "/out";
    CHECK(run("train --config " + write_config(dir, train_config(48, 2)) + " --out " + out) == 0);
    const json sweep_cfg = {
        {"mode", "sweep"},
        {"name", "betas"},
        {"dataset", {{"seed", 1}, {"n", 48}}},
        {"registry", out + "/targets/checkpoints"},
        {"experiment",
         {{"scenario", {{"kind", "white_box"}, {"target_id", "tq"}}},
          {"loss", "tcp"},
          {"attack", {{"method", "fgsm"}, {"iterations", 1}}},
          {"attack_seeds", {0}},
          {"attack_items", 2}}},
        {"axis", "beta"},
        {"values", {0.0, 1.0}}};
    CHECK(run("sweep --config " + write_config(dir, sweep_cfg) + " --out " + out) == 0);
    std::ifstream is(out + "/betas/records.jsonl");
    int lines = 0;
    std::string line;
    while (std::getline(is, line))
        if (!line.empty()) ++lines;
    CHECK(lines == 2);
}
