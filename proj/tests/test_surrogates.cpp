#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "projprobe/surrogates.hpp"

using namespace projprobe;
namespace fs = std::filesystem;

namespace {

std::string tmp_dir(const std::string& stem) {
    static int counter = 0;
    const fs::path dir =
        fs::temp_directory_path() / ("projprobe-reg-" + stem + "-" + std::to_string(counter++));
    fs::remove_all(dir);
    return dir.string();
}

std::vector<const VQAItem*> items_of(const SyntheticVQADataset& ds) {
    std::vector<const VQAItem*> out;
    for (const auto& it : ds.items) out.push_back(&it);
    return out;
}

double window_mean(const std::vector<double>& v, std::size_t from, std::size_t to) {
    return std::accumulate(v.begin() + from, v.begin() + to, 0.0) / (to - from);
}

bool params_equal(CompressedProjectorParams& a, CompressedProjectorParams& b) {
    bool eq = true;
    a.visit("p", [&](const std::string& name, Mat& m) {
        b.visit("p", [&](const std::string& name2, Mat& m2) {
            if (name == name2 && m.vec() != m2.vec()) eq = false;
        });
    });
    return eq;
}

}  // namespace

TEST_CASE("model factory is deterministic and variant-sensitive") {
    ModelSpec s;
    s.seed = 3;
    ToyLVLM a = make_toy_model(s);
    ToyLVLM b = make_toy_model(s);
    CHECK(std::get<CompressedProjectorParams>(a.projector).queries.vec() ==
          std::get<CompressedProjectorParams>(b.projector).queries.vec());
    s.head_variant = "B";
    ToyLVLM c = make_toy_model(s);
    CHECK(c.head.mlp_hidden == 192);
    CHECK(a.head.mlp_hidden == 256);
    CHECK(a.head.w_cls.vec() != c.head.w_cls.vec());
    s.projector = "bogus";
    CHECK_THROWS_AS((void)make_toy_model(s), ValidationError);
}

TEST_CASE("adam minimizes a quadratic") {
    Mat x(1, 2, {5.0, -3.0});
    Adam opt(0.1);
    Mat g(1, 2);
    for (int i = 0; i < 300; ++i) {
        g(0, 0) = 2.0 * x(0, 0);
        g(0, 1) = 2.0 * x(0, 1);
        opt.step({{&x, &g}});
    }
    CHECK(std::fabs(x(0, 0)) < 1e-2);
    CHECK(std::fabs(x(0, 1)) < 1e-2);
}

TEST_CASE("gradient accumulation sums scaled tape gradients per parameter") {
    Mat w(1, 1, {2.0});
    Tape t;
    Bound bound;
    const int wid = t.leaf(w, true);
    bound.entries.push_back({&w, wid});
    const int wid2 = t.leaf(w, true);  // second use of the same parameter
    bound.entries.push_back({&w, wid2});
    t.backward(t.add(t.scale(wid, 3.0), t.scale(wid2, 4.0)));
    GradAccum acc;
    acc.add(bound, t, 0.5);
    const auto grads = acc.averaged();
    REQUIRE(grads.size() == 1);
    CHECK((*grads[0].second)(0, 0) == doctest::Approx(0.5 * (3.0 + 4.0)));
}

TEST_CASE("zero training steps return the seeded initialization") {
    const auto ds = make_synthetic_vqa(1, 8);
    ModelSpec ms;
    ms.seed = 5;
    ToyLVLM target = make_toy_model(ms);
    TrainConfig cfg;
    cfg.stage1_steps = 0;
    cfg.stage2_steps = 0;
    cfg.seed = 77;
    CompressedProjectorParams p1 =
        train_compressed_surrogate(items_of(ds), target.encoder, cfg, 32);
    Rng rng(seed_split(77, "qformer-init"));
    CompressedProjectorParams p2 =
        CompressedProjectorParams::init(4, 64, 64, 2, 4, 256, true, rng);
    CHECK(params_equal(p1, p2));
}

TEST_CASE("surrogate training leaves the frozen encoder untouched and moves the projector") {
    const auto ds = make_synthetic_vqa(2, 24);
    ModelSpec ms;
    ms.seed = 6;
    ToyLVLM target = make_toy_model(ms);
    const std::vector<double> enc_before = target.encoder.patch_w.vec();

    TrainConfig cfg;
    cfg.stage1_steps = 10;
    cfg.stage2_steps = 5;
    cfg.batch = 4;
    cfg.seed = 11;
    std::vector<double> curve;
    CompressedProjectorParams trained =
        train_compressed_surrogate(items_of(ds), target.encoder, cfg, 32, &curve);
    CHECK(target.encoder.patch_w.vec() == enc_before);
    CHECK(curve.size() == 15);
    for (double v : curve) CHECK(std::isfinite(v));

    Rng rng(seed_split(11, "qformer-init"));
    CompressedProjectorParams init =
        CompressedProjectorParams::init(4, 64, 64, 2, 4, 256, true, rng);
    CHECK_FALSE(params_equal(trained, init));

    // different training seeds give different surrogates
    cfg.seed = 12;
    CompressedProjectorParams other =
        train_compressed_surrogate(items_of(ds), target.encoder, cfg, 32);
    CHECK_FALSE(params_equal(trained, other));
}

TEST_CASE("stage-1 task loss decreases on a small training set") {
    const auto ds = make_synthetic_vqa(3, 48);
    ModelSpec ms;
    ms.seed = 7;
    ToyLVLM target = make_toy_model(ms);
    TrainConfig cfg;
    cfg.stage1_steps = 80;
    cfg.stage2_steps = 0;
    cfg.batch = 8;
    cfg.seed = 21;
    std::vector<double> curve;
    (void)train_compressed_surrogate(items_of(ds), target.encoder, cfg, 32, &curve);
    REQUIRE(curve.size() == 80);
    CHECK(window_mean(curve, 70, 80) < window_mean(curve, 0, 10));
}

TEST_CASE("alignment stage of the mlp surrogate cuts its loss by half") {
    const auto ds = make_synthetic_vqa(4, 48);
    ModelSpec ms;
    ms.seed = 8;
    ToyLVLM target = make_toy_model(ms);
    TrainConfig cfg;
    cfg.stage1_steps = 200;
    cfg.stage2_steps = 0;
    cfg.batch = 8;
    cfg.lr = 3e-3;
    cfg.seed = 31;
    std::vector<double> curve;
    (void)train_uncompressed_surrogate(items_of(ds), target.encoder, cfg, 32, 2, &curve);
    REQUIRE(curve.size() == 200);
    // duplicate question types inside a batch put a floor under the
    // contrastive loss, so expect a solid drop below the uninformative
    // ln(batch) plateau rather than convergence to 0
    const double late = window_mean(curve, 150, 200);
    CHECK(late < 0.9 * window_mean(curve, 0, 5));
    CHECK(late < std::log(8.0));
}

TEST_CASE("matched/mismatched discrimination is trainable on a tiny overfit set") {
    // 16 items = one per answer class, so all three question types appear
    const auto ds = make_synthetic_vqa(5, 16);
    ModelSpec ms;
    ms.seed = 9;
    ToyLVLM target = make_toy_model(ms);
    TrainConfig cfg;
    cfg.itc = true;
    cfg.itm = true;
    cfg.ic = false;
    cfg.stage1_steps = 250;
    cfg.stage2_steps = 0;
    cfg.batch = 16;
    cfg.lr = 2e-3;
    cfg.seed = 41;
    CompressedProjectorParams proj =
        train_compressed_surrogate(items_of(ds), target.encoder, cfg, 32);

    // fit a fresh matched/mismatched readout on the frozen trained projector,
    // pairing each item with the next one that asks a different question
    const auto items = items_of(ds);
    const int n = static_cast<int>(items.size());
    auto negative = [&](int i) {
        for (int off = 1; off < n; ++off)
            if (items[(i + off) % n]->instr_tokens != items[i]->instr_tokens)
                return (i + off) % n;
        return (i + 1) % n;
    };
    InstructionEmbedding emb;
    for (const auto* it : items)
        emb.items.push_back(embed_instruction(shared_instr_embedder(), {it->instr_tokens},
                                              {it->question_id})
                                .items[0]);
    const TokenTensor vis = encode_image(target.encoder, to_image_batch(items, 32));
    Rng rng(51);
    Mat w_itm = rng.normal_mat(64, 2, 0.1);
    Mat b_itm(1, 2);
    Adam opt(5e-3);
    for (int step = 0; step < 500; ++step) {
        Tape t;
        Bound bound;
        const int w = t.leaf(w_itm, true);
        const int b = t.leaf(b_itm, true);
        bound.entries.push_back({&w_itm, w});
        bound.entries.push_back({&b_itm, b});
        std::vector<int> rows, labels;
        for (int i = 0; i < n; ++i)
            for (int neg = 0; neg < 2; ++neg) {
                const int v = t.leaf(vis.items[i]);
                const int e = t.leaf(emb.items[neg ? negative(i) : i]);
                const int p = compressed_forward(t, proj, v, e);
                rows.push_back(t.add_rowvec(t.matmul(t.mean_rows(p), w), b));
                labels.push_back(neg ? 0 : 1);
            }
        const int loss = t.nll_rows(t.log_softmax_rows(t.concat_rows(rows)), labels);
        t.backward(loss);
        GradAccum acc;
        acc.add(bound, t, 1.0);
        opt.step(acc.averaged());
    }
    CHECK(itm_train_accuracy(proj, w_itm, b_itm, items, target.encoder, 32) >= 0.95);
}

TEST_CASE("target training reduces the answer loss") {
    const auto ds = make_synthetic_vqa(6, 48);
    ModelSpec ms;
    ms.seed = 10;
    ToyLVLM warm = make_toy_model(ms);
    const double early = train_target(warm, items_of(ds), 1, 1e-3, 8, 1);
    ToyLVLM fresh = make_toy_model(ms);
    const double late = train_target(fresh, items_of(ds), 120, 1e-3, 8, 1);
    CHECK(late < early);
}

TEST_CASE("training rejects configurations with no task enabled or no data") {
    TrainConfig cfg;
    cfg.itc = cfg.itm = cfg.ic = false;
    CHECK_THROWS_AS(cfg.validate_compressed(), ValidationError);
    ModelSpec ms;
    ToyLVLM m = make_toy_model(ms);
    TrainConfig ok;
    ok.stage1_steps = 1;
    ok.stage2_steps = 0;
    CHECK_THROWS_AS((void)train_compressed_surrogate({}, m.encoder, ok, 32), ValidationError);
}

TEST_CASE("registry stores, lists and audits models") {
    const std::string dir = tmp_dir("basic");
    Registry reg(dir);
    ModelSpec ms;
    ms.seed = 20;
    ToyLVLM m = make_toy_model(ms);
    CHECK_FALSE(reg.has("t1"));
    reg.put_model("t1", m, {{"role", "target"}});
    CHECK(reg.has("t1"));
    CHECK(reg.ids() == std::vector<std::string>{"t1"});
    CHECK(reg.meta("t1").at("role") == "target");
    CHECK(reg.meta("t1").at("arch").at("projector").at("kind") == "compressed");
    CHECK_THROWS_AS((void)reg.meta("nope"), LookupError);
    CHECK_THROWS_AS((void)reg.model("nope"), LookupError);

    CHECK(reg.projector_reads("t1") == 0);
    (void)reg.attack_projector("t1");
    (void)reg.attack_projector("t1");
    CHECK(reg.projector_reads("t1") == 2);
    reg.reset_audit();
    CHECK(reg.projector_reads("t1") == 0);

    // a second instance over the same directory sees the persisted index
    Registry reopened(dir);
    CHECK(reopened.has("t1"));
    ToyLVLM& loaded = reopened.model("t1");
    CHECK(loaded.projector_tokens() == 4);
}

TEST_CASE("scenario resolution honors the gray-box contract") {
    const std::string dir = tmp_dir("scenario");
    Registry reg(dir);
    ModelSpec tgt_spec;
    tgt_spec.seed = 30;
    tgt_spec.head_variant = "A";
    ToyLVLM target = make_toy_model(tgt_spec);
    reg.put_model("target", target, {});
    ModelSpec sib_spec;
    sib_spec.seed = 31;
    sib_spec.head_variant = "C";
    ToyLVLM sib = make_toy_model(sib_spec);
    reg.put_model("sibling", sib, {});

    const auto ds = make_synthetic_vqa(7, 16);
    const auto train = items_of(ds);

    SUBCASE("white box reads the target projector exactly once") {
        ScenarioSpec s;
        s.kind = ScenarioKind::white_box;
        s.target_id = "target";
        const SurrogateBundle b = resolve_scenario(s, reg, train, 32);
        CHECK(b.k() == 1);
        CHECK(reg.projector_reads("target") == 1);
    }

    SUBCASE("transfer uses sibling weights and never touches the target projector") {
        ScenarioSpec s;
        s.kind = ScenarioKind::transfer;
        s.target_id = "target";
        s.surrogate_ids = {"sibling"};
        const SurrogateBundle b = resolve_scenario(s, reg, train, 32);
        CHECK(b.k() == 1);
        CHECK(reg.projector_reads("target") == 0);
        CHECK(b.provenance[0] == "transfer:sibling");

        s.surrogate_ids = {};
        CHECK_THROWS_AS((void)resolve_scenario(s, reg, train, 32), ValidationError);
        s.surrogate_ids = {"target"};
        CHECK_THROWS_AS((void)resolve_scenario(s, reg, train, 32), ValidationError);
    }

    SUBCASE("scratch trains fresh projectors with zero target reads") {
        ScenarioSpec s;
        s.kind = ScenarioKind::scratch;
        s.target_id = "target";
        s.k = 2;
        s.train.stage1_steps = 4;
        s.train.stage2_steps = 2;
        s.train.batch = 4;
        s.train.head_variant = "B";  // differs from the target's "A"
        const SurrogateBundle b = resolve_scenario(s, reg, train, 32);
        CHECK(b.k() == 2);
        CHECK(reg.projector_reads("target") == 0);
        auto& p0 = std::get<CompressedProjectorParams>(*b.projectors[0]);
        auto& p1 = std::get<CompressedProjectorParams>(*b.projectors[1]);
        CHECK_FALSE(params_equal(p0, p1));

        s.train.head_variant = "A";  // same as target: forbidden
        CHECK_THROWS_AS((void)resolve_scenario(s, reg, train, 32), ValidationError);
    }

    SUBCASE("unknown target fails with a lookup error") {
        ScenarioSpec s;
        s.target_id = "ghost";
        CHECK_THROWS_AS((void)resolve_scenario(s, reg, train, 32), LookupError);
    }
}

TEST_CASE("scenario kind names round-trip") {
    for (auto k : {ScenarioKind::white_box, ScenarioKind::transfer, ScenarioKind::scratch})
        CHECK(scenario_kind_from_string(scenario_kind_name(k)) == k);
    CHECK_THROWS_AS((void)scenario_kind_from_string("gray"), ValidationError);
}
