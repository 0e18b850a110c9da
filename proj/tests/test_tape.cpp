#include <doctest.h>

#include <cmath>
#include <functional>

#include "projprobe/rng.hpp"
#include "projprobe/tape.hpp"

using namespace projprobe;

namespace {

// central finite differences on every entry of `input` through `build`,
// which must map a leaf id to a scalar (1x1) node
void check_grad(const Mat& input, const std::function<int(Tape&, int)>& build,
                double tol = 1e-6) {
    Tape t;
    const int x = t.leaf(input, true);
    const int root = build(t, x);
    REQUIRE(t.value(root).rows() == 1);
    REQUIRE(t.value(root).cols() == 1);
    t.backward(root);
    const Mat& g = t.grad(x);

    const double h = 1e-5;
    for (std::size_t i = 0; i < input.size(); ++i) {
        Mat up = input, dn = input;
        up.vec()[i] += h;
        dn.vec()[i] -= h;
        Tape tu, td;
        const double fu = tu.value(build(tu, tu.leaf(up, false)))(0, 0);
        const double fd = td.value(build(td, td.leaf(dn, false)))(0, 0);
        const double fd_grad = (fu - fd) / (2 * h);
        CHECK(std::fabs(g.vec()[i] - fd_grad) <=
              tol * std::max({1.0, std::fabs(g.vec()[i]), std::fabs(fd_grad)}));
    }
}

Mat rand_mat(int r, int c, std::uint64_t seed) {
    Rng rng(seed);
    return rng.normal_mat(r, c, 1.0);
}

}  // namespace

TEST_CASE("forward values: small hand oracles") {
    Tape t;
    const int a = t.leaf(Mat(1, 2, {1.0, 2.0}));
    const int b = t.leaf(Mat(1, 2, {0.0, 0.0}));
    CHECK(t.value(t.mse(a, b))(0, 0) == doctest::Approx(2.5));  // (1+4)/2
    CHECK(t.value(t.mean_all(a))(0, 0) == doctest::Approx(1.5));
    const int s = t.softmax_rows(t.leaf(Mat(1, 2, {0.0, 0.0})));
    CHECK(t.value(s)(0, 0) == doctest::Approx(0.5));

    const int mm = t.matmul(t.leaf(Mat(2, 2, {1, 2, 3, 4})), t.leaf(Mat(2, 1, {1, 1})));
    CHECK(t.value(mm)(0, 0) == doctest::Approx(3.0));
    CHECK(t.value(mm)(1, 0) == doctest::Approx(7.0));
}

TEST_CASE("mean_pool_grid: 2x2 block of (1,2,3,4) averages to 2.5") {
    Tape t;
    const int x = t.leaf(Mat(4, 1, {1.0, 2.0, 3.0, 4.0}));  // 2x2 grid, 1 feature
    const int p = t.mean_pool_grid(x, 2);
    REQUIRE(t.value(p).rows() == 1);
    CHECK(t.value(p)(0, 0) == doctest::Approx(2.5));
}

TEST_CASE("layernorm rows normalizes to zero mean / unit variance") {
    Tape t;
    const Mat x = rand_mat(3, 8, 11);
    const int g = t.leaf(Mat(1, 8, std::vector<double>(8, 1.0)));
    const int b = t.leaf(Mat(1, 8));
    const Mat& y = t.value(t.layernorm_rows(t.leaf(x), g, b));
    for (int r = 0; r < 3; ++r) {
        double mu = 0, var = 0;
        for (int c = 0; c < 8; ++c) mu += y(r, c) / 8;
        for (int c = 0; c < 8; ++c) var += (y(r, c) - mu) * (y(r, c) - mu) / 8;
        CHECK(mu == doctest::Approx(0.0).epsilon(1e-10));
        CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
    }
}

TEST_CASE("gradients match finite differences op by op") {
    const Mat x34 = rand_mat(3, 4, 1);
    const Mat w = rand_mat(4, 2, 2);
    const Mat y34 = rand_mat(3, 4, 3);

    check_grad(x34, [&](Tape& t, int x) { return t.mean_all(t.matmul(x, t.leaf(w))); });
    check_grad(x34, [&](Tape& t, int x) { return t.mse(x, t.leaf(y34)); });
    check_grad(x34, [&](Tape& t, int x) { return t.mean_all(t.gelu(x)); });
    check_grad(x34, [&](Tape& t, int x) { return t.mean_all(t.hadamard(x, t.leaf(y34))); });
    check_grad(x34, [&](Tape& t, int x) {
        return t.mean_all(t.add_rowvec(x, t.leaf(Mat(1, 4, {0.1, -0.2, 0.3, 0.4}))));
    });
    check_grad(x34, [&](Tape& t, int x) { return t.mse(t.softmax_rows(x), t.leaf(y34)); });
    check_grad(x34, [&](Tape& t, int x) {
        const int g = t.leaf(Mat(1, 4, {1.0, 1.2, 0.8, 1.1}));
        const int b = t.leaf(Mat(1, 4, {0.0, 0.1, -0.1, 0.2}));
        return t.mse(t.layernorm_rows(x, g, b), t.leaf(y34));
    });
    check_grad(x34, [&](Tape& t, int x) { return t.mean_all(t.normalize_rows(x)); });
    check_grad(x34, [&](Tape& t, int x) { return t.nll_rows(t.log_softmax_rows(x), {1, 0, 3}); });
    check_grad(x34, [&](Tape& t, int x) {
        return t.mean_all(t.slice_cols(t.transpose_op(x), 0, 2));
    });
    check_grad(x34, [&](Tape& t, int x) {
        return t.mean_all(t.concat_cols({x, t.scale(x, 2.0)}));
    });
    check_grad(x34, [&](Tape& t, int x) {
        return t.mean_all(t.concat_rows({x, t.sub(x, t.leaf(y34))}));
    });
    check_grad(x34, [&](Tape& t, int x) { return t.mean_all(t.mean_rows(x)); });

    const Mat grid = rand_mat(16, 3, 4);  // 4x4 grid
    check_grad(grid, [&](Tape& t, int x) { return t.mean_all(t.mean_pool_grid(x, 2)); });

    const Mat table = rand_mat(5, 3, 6);
    check_grad(table, [&](Tape& t, int x) {
        return t.mean_all(t.gather_rows(x, {0, 2, 2, 4}));
    });
}

TEST_CASE("grad pruning: constant-only subgraphs carry no gradient state") {
    Tape t;
    const int x = t.leaf(rand_mat(2, 2, 9), true);
    const int c = t.leaf(rand_mat(2, 2, 10), false);
    const int dead = t.matmul(c, c);  // constant subtree
    CHECK_FALSE(t.requires_grad(dead));
    const int root = t.mean_all(t.add(t.matmul(x, c), t.leaf(t.value(dead))));
    t.backward(root);
    CHECK(t.grad(x).all_finite());
    CHECK(t.grad(c).empty());
}

TEST_CASE("backward rejects non-scalar roots") {
    Tape t;
    const int x = t.leaf(rand_mat(2, 2, 12), true);
    CHECK_THROWS(t.backward(x));
}
