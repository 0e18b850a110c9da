#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "projprobe/checkpoint.hpp"
#include "projprobe/surrogates.hpp"

using namespace projprobe;
namespace fs = std::filesystem;

namespace {

std::string tmp_path(const std::string& stem) {
    static int counter = 0;
    const fs::path dir = fs::temp_directory_path() / "projprobe-ckpt-tests";
    fs::create_directories(dir);
    return (dir / (stem + "-" + std::to_string(counter++) + ".ppck")).string();
}

std::string file_bytes(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

}  // namespace

TEST_CASE("named arrays round-trip bit exactly") {
    Rng rng(1);
    const Mat a = rng.normal_mat(3, 5, 1.0);
    const Mat b = rng.normal_mat(1, 1, 2.0);
    const std::string path = tmp_path("arrays");
    save_arrays(path, {{"alpha", &a}, {"beta", &b}});
    const auto loaded = load_arrays(path);
    REQUIRE(loaded.size() == 2);
    CHECK(loaded.at("alpha").vec() == a.vec());
    CHECK(loaded.at("beta").vec() == b.vec());
    CHECK(loaded.at("alpha").rows() == 3);
    CHECK(loaded.at("alpha").cols() == 5);
}

TEST_CASE("full model round-trips with identical weights and architecture") {
    ModelSpec spec;
    spec.seed = 42;
    ToyLVLM m = make_toy_model(spec);
    const std::string path = tmp_path("model");
    save_model(m, path, {{"note", "roundtrip"}});

    ToyLVLM n = load_model(path);
    CHECK(n.compressed());
    CHECK(n.projector_tokens() == m.projector_tokens());
    bool all_equal = true;
    std::size_t arrays = 0;
    m.visit([&](const std::string& name, Mat& mat) {
        ++arrays;
        n.visit([&](const std::string& name2, Mat& mat2) {
            if (name == name2 && mat.vec() != mat2.vec()) all_equal = false;
        });
    });
    CHECK(arrays > 20);
    CHECK(all_equal);
}

TEST_CASE("uncompressed model round-trips too") {
    ModelSpec spec;
    spec.projector = "uncompressed";
    spec.pool_factor = 2;
    spec.seed = 9;
    ToyLVLM m = make_toy_model(spec);
    const std::string path = tmp_path("mlp-model");
    save_model(m, path, nlohmann::json::object());
    ToyLVLM n = load_model(path);
    CHECK_FALSE(n.compressed());
    CHECK(n.projector_tokens() == 4);
}

TEST_CASE("repeated saves are byte-identical (no timestamps)") {
    ModelSpec spec;
    spec.seed = 7;
    ToyLVLM m = make_toy_model(spec);
    const std::string p1 = tmp_path("bytes"), p2 = tmp_path("bytes");
    save_model(m, p1, {{"k", 1}});
    save_model(m, p2, {{"k", 1}});
    CHECK(file_bytes(p1) == file_bytes(p2));
    CHECK(file_bytes(p1 + ".json") == file_bytes(p2 + ".json"));
}

TEST_CASE("sidecar carries a parseable architecture description") {
    ModelSpec spec;
    ToyLVLM m = make_toy_model(spec);
    const std::string path = tmp_path("sidecar");
    save_model(m, path, {{"tag", "x"}});
    std::ifstream is(path + ".json");
    REQUIRE(is.good());
    nlohmann::json j;
    is >> j;
    CHECK(j.at("schema_version") == 1);
    CHECK(j.at("arch").at("projector").at("kind") == "compressed");
    CHECK(j.at("tag") == "x");
}

TEST_CASE("standalone projector save/load") {
    Rng rng(10);
    ProjectorParams p = UncompressedProjectorParams::init(2, 64, 128, 64, rng);
    const std::string path = tmp_path("proj");
    save_projector(p, path, nlohmann::json::object());
    ProjectorParams q = load_projector(path);
    const auto& u1 = std::get<UncompressedProjectorParams>(p);
    const auto& u2 = std::get<UncompressedProjectorParams>(q);
    CHECK(u1.w1.vec() == u2.w1.vec());
    CHECK(u2.pool_factor == 2);
}

TEST_CASE("loading a missing checkpoint fails cleanly") {
    CHECK_THROWS((void)load_model(tmp_path("missing-never-written")));
}
