#include <doctest.h>

#include <cmath>
#include <limits>

#include "projprobe/attacks.hpp"
#include "test_util.hpp"

using namespace projprobe;
using testutil::random_image;

namespace {

// 1x1 RGB image: three pixels, objective depends on pixel 0 only
ImageBatch tiny_image(double x0) {
    ImageBatch x;
    x.batch = 1;
    x.height = x.width = 1;
    x.pixels = {x0, 0.5, 0.5};
    return x;
}

// L(x) = -(x0 - target)^2, maximized exactly at x0 = target
LossFn peak_loss(double target) {
    return [target](const ImageBatch& x, std::vector<double>* g) {
        const double d = x.pixels[0] - target;
        if (g) *g = {-2.0 * d, 0.0, 0.0};
        return -d * d;
    };
}

// smooth pseudo-random linear objective for ball/containment properties
LossFn linear_loss(std::uint64_t seed, std::size_t n) {
    auto w = std::make_shared<std::vector<double>>(n);
    Rng rng(seed);
    for (double& v : *w) v = rng.normal(0.0, 1.0);
    return [w](const ImageBatch& x, std::vector<double>* g) {
        double s = 0.0;
        for (std::size_t i = 0; i < w->size(); ++i) s += (*w)[i] * x.pixels[i];
        if (g) *g = *w;
        return s;
    };
}

double grid_search_peak(const LossFn& f, double lo, double hi, double res) {
    double best_x = lo, best = -std::numeric_limits<double>::infinity();
    for (double v = lo; v <= hi + 1e-12; v += res) {
        const double val = f(tiny_image(v), nullptr);
        if (val > best) { best = val; best_x = v; }
    }
    return best_x;
}

}  // namespace

TEST_CASE("fgsm takes one signed step and respects the ball") {
    AttackConfig cfg;
    cfg.method = AttackMethod::fgsm;
    cfg.epsilon = 0.1;
    const auto r = fgsm(peak_loss(0.9), tiny_image(0.5), cfg);
    CHECK(r.x_adv.pixels[0] == doctest::Approx(0.6));   // gradient positive
    CHECK(r.x_adv.pixels[1] == doctest::Approx(0.5));   // sign(0) = 0: untouched
    CHECK(r.linf <= cfg.epsilon + 1e-12);
}

TEST_CASE("1-d PGD converges to the grid-search optimum") {
    AttackConfig cfg;
    cfg.method = AttackMethod::pgd;
    cfg.epsilon = 0.2;
    cfg.step_size = 0.05;
    cfg.iterations = 20;
    cfg.random_init = false;
    const LossFn f = peak_loss(0.4);
    const auto r = pgd_linf(f, tiny_image(0.5), cfg);
    const double want = grid_search_peak(f, 0.3, 0.7, 1e-4);
    CHECK(std::fabs(r.x_adv.pixels[0] - want) < 1e-3);
    CHECK(r.loss_trace.size() == 21);  // 20 iterate evaluations + final
    CHECK(r.loss_trace.back() >= r.loss_trace.front());
}

TEST_CASE("1-d CW ascent converges near the penalized optimum") {
    AttackConfig cfg;
    cfg.method = AttackMethod::cw;
    cfg.step_size = 0.01;
    cfg.cw_constant = 0.005;
    cfg.iterations = 400;
    cfg.random_init = false;
    const LossFn f = peak_loss(0.4);
    const auto r = cw_l2(f, tiny_image(0.5), cfg);
    // grid-search the penalized objective L(x) - c (x - x_clean)^2
    double best_x = 0.0, best = -1e300;
    for (double v = 0.0; v <= 1.0; v += 1e-4) {
        const double val = f(tiny_image(v), nullptr) - cfg.cw_constant * (v - 0.5) * (v - 0.5);
        if (val > best) { best = val; best_x = v; }
    }
    CHECK(std::fabs(r.x_adv.pixels[0] - best_x) < 1e-3);
}

TEST_CASE("mifgsm with zero momentum and no random init matches pgd bitwise") {
    const LossFn f = linear_loss(7, 3 * 4 * 4);
    const ImageBatch x = random_image(4, 8);
    AttackConfig cfg;
    cfg.epsilon = 0.05;
    cfg.step_size = 0.01;
    cfg.iterations = 10;
    cfg.random_init = false;
    cfg.momentum = 0.0;
    cfg.method = AttackMethod::pgd;
    const auto a = pgd_linf(f, x, cfg);
    cfg.method = AttackMethod::mifgsm;
    const auto b = mi_fgsm(f, x, cfg);
    REQUIRE(a.x_adv.pixels.size() == b.x_adv.pixels.size());
    for (std::size_t i = 0; i < a.x_adv.pixels.size(); ++i)
        CHECK(a.x_adv.pixels[i] == b.x_adv.pixels[i]);
}

TEST_CASE("randomized runs always stay inside the ball and pixel box") {
    Rng rng(99);
    for (int run = 0; run < 100; ++run) {
        AttackConfig cfg;
        const int m = rng.uniform_int(0, 2);
        cfg.method = m == 0 ? AttackMethod::pgd : m == 1 ? AttackMethod::fgsm
                                                         : AttackMethod::mifgsm;
        cfg.epsilon = rng.uniform(0.0, 0.3);
        cfg.step_size = rng.uniform(0.005, 0.1);
        cfg.iterations = rng.uniform_int(1, 8);
        cfg.random_init = rng.uniform_int(0, 1) == 1;
        cfg.seed = run;
        const ImageBatch x = random_image(4, 1000 + run);
        const auto r = run_attack(linear_loss(run, x.pixels.size()), x, cfg);
        CHECK(r.linf <= cfg.epsilon + 1e-9);
        for (std::size_t i = 0; i < r.x_adv.pixels.size(); ++i) {
            CHECK(r.x_adv.pixels[i] >= 0.0);
            CHECK(r.x_adv.pixels[i] <= 1.0);
            CHECK(std::fabs(r.x_adv.pixels[i] - x.pixels[i]) <= cfg.epsilon + 1e-9);
        }
    }
}

TEST_CASE("epsilon 0 returns the clean image exactly") {
    const ImageBatch x = random_image(4, 3);
    for (auto m : {AttackMethod::fgsm, AttackMethod::pgd, AttackMethod::mifgsm}) {
        AttackConfig cfg;
        cfg.method = m;
        cfg.epsilon = 0.0;
        cfg.iterations = 5;
        cfg.random_init = true;
        const auto r = run_attack(linear_loss(5, x.pixels.size()), x, cfg);
        for (std::size_t i = 0; i < x.pixels.size(); ++i)
            CHECK(r.x_adv.pixels[i] == x.pixels[i]);
    }
}

TEST_CASE("zero iterations without random init is the identity") {
    const ImageBatch x = random_image(4, 4);
    AttackConfig cfg;
    cfg.iterations = 0;
    cfg.random_init = false;
    const auto r = pgd_linf(linear_loss(6, x.pixels.size()), x, cfg);
    CHECK(r.x_adv.pixels == x.pixels);
    CHECK(r.linf == 0.0);
    CHECK(r.l2 == 0.0);
}

TEST_CASE("same seed reproduces the attack, different seeds diverge") {
    const ImageBatch x = random_image(4, 5);
    const LossFn f = linear_loss(9, x.pixels.size());
    AttackConfig cfg;
    cfg.random_init = true;
    cfg.iterations = 3;
    cfg.seed = 42;
    const auto a = pgd_linf(f, x, cfg);
    const auto b = pgd_linf(f, x, cfg);
    CHECK(a.x_adv.pixels == b.x_adv.pixels);
    cfg.seed = 43;
    const auto c = pgd_linf(f, x, cfg);
    CHECK(a.x_adv.pixels != c.x_adv.pixels);
}

TEST_CASE("non-finite gradients raise a numerical error") {
    const LossFn bad = [](const ImageBatch&, std::vector<double>* g) {
        if (g) *g = {std::numeric_limits<double>::quiet_NaN(), 0.0, 0.0};
        return 0.0;
    };
    AttackConfig cfg;
    cfg.iterations = 1;
    CHECK_THROWS_AS((void)pgd_linf(bad, tiny_image(0.5), cfg), NumericalError);
    cfg.method = AttackMethod::fgsm;
    CHECK_THROWS_AS((void)fgsm(bad, tiny_image(0.5), cfg), NumericalError);
}

TEST_CASE("invalid configurations are rejected") {
    AttackConfig cfg;
    cfg.epsilon = -0.1;
    CHECK_THROWS_AS(cfg.validate(), ValidationError);
    cfg = {};
    cfg.iterations = -1;
    CHECK_THROWS_AS(cfg.validate(), ValidationError);
    cfg = {};
    cfg.step_size = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ValidationError);
    CHECK_THROWS_AS((void)attack_method_from_string("bim"), ValidationError);
    CHECK(attack_method_from_string("pgd") == AttackMethod::pgd);
    CHECK(attack_method_name(AttackMethod::cw) == "cw");
}
