#include <doctest.h>

#include <cmath>
#include <memory>

#include "projprobe/losses.hpp"
#include "test_util.hpp"

using namespace projprobe;
using testutil::fd_pixel;
using testutil::random_image;
using testutil::rel_err;

namespace {

struct Fixture {
    std::shared_ptr<VisualEncoderParams> enc;
    std::vector<std::shared_ptr<ProjectorParams>> projs;
    InstructionEmbedding instr;

    explicit Fixture(int k = 3, std::uint64_t seed = 5) {
        Rng rng(seed);
        enc = std::make_shared<VisualEncoderParams>(
            VisualEncoderParams::init(16, 8, 16, 1, 2, 32, rng));
        for (int j = 0; j < k; ++j)
            projs.push_back(std::make_shared<ProjectorParams>(
                CompressedProjectorParams::init(2, 16, 16, 1, 2, 32, true, rng)));
        instr.items.push_back(rng.normal_mat(3, 16, 0.5));
        instr.question_ids.push_back(0);
    }

    SurrogateBundle bundle(int k) const {
        return build_bundle(enc,
                            {projs.begin(), projs.begin() + k},
                            std::vector<std::string>(k, "test"));
    }
};

}  // namespace

TEST_CASE("losses vanish on identical inputs") {
    Fixture f;
    const ImageBatch x = random_image(16, 1);
    CHECK(loss_ve(*f.enc, x, x) == 0.0);
    CHECK(loss_vlp(*f.enc, *f.projs[0], x, x, f.instr) == 0.0);
    CHECK(loss_tcp(f.bundle(3), x, x, f.instr, {0.3, 3}) == 0.0);
}

TEST_CASE("encoder-level loss matches a plain mean-squared-difference oracle") {
    Fixture f;
    const ImageBatch x = random_image(16, 2);
    ImageBatch xa = x;
    Rng rng(3);
    for (double& v : xa.pixels) v = std::clamp(v + rng.uniform(-0.03, 0.03), 0.0, 1.0);

    const TokenTensor a = encode_image(*f.enc, x);
    const TokenTensor b = encode_image(*f.enc, xa);
    double want = 0.0;
    for (std::size_t i = 0; i < a.items[0].size(); ++i) {
        const double d = a.items[0].vec()[i] - b.items[0].vec()[i];
        want += d * d;
    }
    want /= a.items[0].size();
    CHECK(rel_err(loss_ve(*f.enc, x, xa), want) < 1e-12);
}

TEST_CASE("combined loss equals its endpoints: beta=1 is VE, beta=0/K=1 is VLP") {
    Fixture f;
    for (std::uint64_t s = 0; s < 5; ++s) {
        const ImageBatch x = random_image(16, 100 + s);
        ImageBatch xa = random_image(16, 200 + s);
        CHECK(rel_err(loss_tcp(f.bundle(2), x, xa, f.instr, {1.0, 2}),
                      loss_ve(*f.enc, x, xa)) < 1e-12);
        CHECK(rel_err(loss_tcp(f.bundle(1), x, xa, f.instr, {0.0, 1}),
                      loss_vlp(*f.enc, *f.projs[0], x, xa, f.instr)) < 1e-12);
    }
}

TEST_CASE("combined loss is affine in beta") {
    Fixture f;
    const ImageBatch x = random_image(16, 11);
    const ImageBatch xa = random_image(16, 12);
    const double l0 = loss_tcp(f.bundle(3), x, xa, f.instr, {0.0, 3});
    const double l1 = loss_tcp(f.bundle(3), x, xa, f.instr, {1.0, 3});
    for (double beta : {0.1, 0.2, 0.3, 0.4}) {
        const double got = loss_tcp(f.bundle(3), x, xa, f.instr, {beta, 3});
        CHECK(rel_err(got, beta * l1 + (1.0 - beta) * l0) < 1e-11);
    }
}

TEST_CASE("surrogate-averaged term is invariant to projector order") {
    Fixture f;
    const ImageBatch x = random_image(16, 21);
    const ImageBatch xa = random_image(16, 22);
    SurrogateBundle fwd = f.bundle(3);
    SurrogateBundle rev = build_bundle(f.enc, {f.projs[2], f.projs[1], f.projs[0]},
                                       {"a", "b", "c"});
    CHECK(rel_err(loss_tcp(fwd, x, xa, f.instr, {0.3, 3}),
                  loss_tcp(rev, x, xa, f.instr, {0.3, 3})) < 1e-12);
}

TEST_CASE("analytic pixel gradients match finite differences") {
    Fixture f;
    const ImageBatch x = random_image(16, 31);
    const ImageBatch x0 = random_image(16, 32);
    Rng pick(33);

    const LossFn fns[] = {make_ve_loss(*f.enc, x0),
                          make_vlp_loss(*f.enc, *f.projs[0], x0, f.instr),
                          make_tcp_loss(f.bundle(3), x0, f.instr, {0.3, 3})};
    for (const LossFn& fn : fns) {
        std::vector<double> grad;
        fn(x, &grad);
        REQUIRE(grad.size() == x.pixels.size());
        for (int trial = 0; trial < 6; ++trial) {
            const std::size_t i = pick.uniform_int(0, static_cast<int>(grad.size()) - 1);
            const double fd = fd_pixel(fn, x, i);
            CHECK(std::fabs(grad[i] - fd) <= 1e-4 * std::max({1.0, std::fabs(fd)}));
        }
    }
}

TEST_CASE("batched loss is the mean of per-item losses") {
    Fixture f;
    ImageBatch x2 = random_image(16, 41, 2);
    ImageBatch xa2 = random_image(16, 42, 2);
    ImageBatch x1a = x2, x1b = x2, xa1a = xa2, xa1b = xa2;
    x1a.batch = x1b.batch = xa1a.batch = xa1b.batch = 1;
    x1a.pixels.assign(x2.pixels.begin(), x2.pixels.begin() + x2.item_size());
    x1b.pixels.assign(x2.pixels.begin() + x2.item_size(), x2.pixels.end());
    xa1a.pixels.assign(xa2.pixels.begin(), xa2.pixels.begin() + xa2.item_size());
    xa1b.pixels.assign(xa2.pixels.begin() + xa2.item_size(), xa2.pixels.end());
    const double joint = loss_ve(*f.enc, x2, xa2);
    const double split =
        0.5 * (loss_ve(*f.enc, x1a, xa1a) + loss_ve(*f.enc, x1b, xa1b));
    CHECK(rel_err(joint, split) < 1e-12);
}

TEST_CASE("invalid mixing parameters are rejected") {
    Fixture f;
    const ImageBatch x = random_image(16, 51);
    CHECK_THROWS_AS((void)loss_tcp(f.bundle(2), x, x, f.instr, {-0.1, 2}), ValidationError);
    CHECK_THROWS_AS((void)loss_tcp(f.bundle(2), x, x, f.instr, {1.1, 2}), ValidationError);
    CHECK_THROWS_AS((void)loss_tcp(f.bundle(2), x, x, f.instr, {0.5, 3}), ValidationError);
    CHECK_THROWS_AS(build_bundle(f.enc, {}, {}), ValidationError);
}
