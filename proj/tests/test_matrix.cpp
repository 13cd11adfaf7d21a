#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "lateline/errors.hpp"
#include "lateline/matrix.hpp"
#include "lateline/rng.hpp"

using namespace lateline;

namespace {

Matrix make(int r, int c, std::initializer_list<double> vals) {
    Matrix m(r, c);
    auto it = vals.begin();
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) m.at(i, j) = *it++;
    return m;
}

}  // namespace

TEST_CASE("matmul matches the hand-computed 2x3 * 3x2 product") {
    const Matrix a = make(2, 3, {1, 2, 3, 4, 5, 6});
    const Matrix b = make(3, 2, {7, 8, 9, 10, 11, 12});
    const Matrix c = matmul(a, b);
    REQUIRE(c.rows() == 2);
    REQUIRE(c.cols() == 2);
    CHECK(c.at(0, 0) == 58.0);
    CHECK(c.at(0, 1) == 64.0);
    CHECK(c.at(1, 0) == 139.0);
    CHECK(c.at(1, 1) == 154.0);
}

TEST_CASE("matmul rejects mismatched inner dimensions") {
    const Matrix a(2, 3);
    const Matrix b(2, 2);
    CHECK_THROWS_AS(matmul(a, b), ShapeError);
}

TEST_CASE("matmul_nt equals matmul against the explicit transpose") {
    Rng rng(42);
    const Matrix a = Matrix::gaussian(4, 6, rng);
    const Matrix b = Matrix::gaussian(5, 6, rng);
    const Matrix direct = matmul_nt(a, b);
    const Matrix ref = matmul(a, transpose(b));
    REQUIRE(direct.same_shape(ref));
    for (int i = 0; i < ref.rows(); ++i)
        for (int j = 0; j < ref.cols(); ++j) CHECK(direct.at(i, j) == ref.at(i, j));
}

TEST_CASE("matmul_tn equals matmul of the explicit transpose") {
    Rng rng(43);
    const Matrix a = Matrix::gaussian(6, 4, rng);
    const Matrix b = Matrix::gaussian(6, 5, rng);
    const Matrix direct = matmul_tn(a, b);
    const Matrix ref = matmul(transpose(a), b);
    REQUIRE(direct.same_shape(ref));
    for (int i = 0; i < ref.rows(); ++i)
        for (int j = 0; j < ref.cols(); ++j) CHECK(direct.at(i, j) == ref.at(i, j));
}

TEST_CASE("transpose is an involution and swaps shape") {
    const Matrix a = make(2, 3, {1, 2, 3, 4, 5, 6});
    const Matrix t = transpose(a);
    REQUIRE(t.rows() == 3);
    REQUIRE(t.cols() == 2);
    CHECK(t.at(0, 1) == 4.0);
    CHECK(t.at(2, 0) == 3.0);
    CHECK(transpose(t) == a);
}

TEST_CASE("l2_normalize_rows produces unit rows and zeroes tiny rows") {
    const Matrix a = make(2, 2, {3, 4, 0, 0});
    const Matrix n = l2_normalize_rows(a);
    CHECK(n.at(0, 0) == doctest::Approx(0.6).epsilon(1e-15));
    CHECK(n.at(0, 1) == doctest::Approx(0.8).epsilon(1e-15));
    CHECK(n.at(1, 0) == 0.0);
    CHECK(n.at(1, 1) == 0.0);
}

TEST_CASE("softmax_rows: uniform on equal logits, 1:3 odds at log-gap ln 3") {
    Matrix a(2, 2);
    a.at(0, 0) = 0.0;
    a.at(0, 1) = 0.0;
    a.at(1, 0) = 0.0;
    a.at(1, 1) = std::log(3.0);
    const Matrix s = softmax_rows(a);
    CHECK(s.at(0, 0) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(s.at(1, 0) == doctest::Approx(0.25).epsilon(1e-14));
    CHECK(s.at(1, 1) == doctest::Approx(0.75).epsilon(1e-14));
}

TEST_CASE("softmax_rows stays finite and normalized under huge logits") {
    Matrix a(1, 3);
    a.at(0, 0) = 1e8;
    a.at(0, 1) = 0.0;
    a.at(0, 2) = -1e8;
    const Matrix s = softmax_rows(a);
    REQUIRE(s.all_finite());
    double sum = 0.0;
    for (int j = 0; j < 3; ++j) sum += s.at(0, j);
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(s.at(0, 0) == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("softmax rows sum to one on random input") {
    Rng rng(7);
    const Matrix a = Matrix::gaussian(10, 8, rng, 3.0);
    const Matrix s = softmax_rows(a);
    for (int i = 0; i < s.rows(); ++i) {
        double sum = 0.0;
        for (int j = 0; j < s.cols(); ++j) {
            CHECK(s.at(i, j) >= 0.0);
            sum += s.at(i, j);
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("in-place helpers: add, scale, axpy") {
    Matrix a = make(1, 3, {1, 2, 3});
    const Matrix b = make(1, 3, {10, 20, 30});
    add_inplace(a, b);
    CHECK(a.at(0, 2) == 33.0);
    scale_inplace(a, 0.5);
    CHECK(a.at(0, 0) == 5.5);
    axpy_inplace(a, 2.0, b);
    CHECK(a.at(0, 1) == 11.0 + 40.0);
    CHECK_THROWS_AS(add_inplace(a, Matrix(2, 2)), ShapeError);
}

TEST_CASE("dot and frobenius_norm_sq hand values") {
    const double x[3] = {1, 2, 3};
    const double y[3] = {4, 5, 6};
    CHECK(dot(x, y, 3) == 32.0);
    const Matrix a = make(2, 2, {1, 2, 3, 4});
    CHECK(frobenius_norm_sq(a) == 30.0);
}

TEST_CASE("identity matrix") {
    const Matrix i = Matrix::identity(3);
    CHECK(i.at(0, 0) == 1.0);
    CHECK(i.at(0, 1) == 0.0);
    const Matrix a = make(3, 2, {1, 2, 3, 4, 5, 6});
    CHECK(matmul(i, a) == a);
}

TEST_CASE("gaussian init is seed-deterministic and scale is a pure factor") {
    Rng r1(99), r2(99), r3(100);
    const Matrix a = Matrix::gaussian(5, 4, r1);
    const Matrix b = Matrix::gaussian(5, 4, r2);
    const Matrix c = Matrix::gaussian(5, 4, r3);
    CHECK(a == b);
    CHECK_FALSE(a == c);

    Rng r4(99);
    const Matrix scaled = Matrix::gaussian(5, 4, r4, 2.5);
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 4; ++j) CHECK(scaled.at(i, j) == 2.5 * a.at(i, j));
}

TEST_CASE("all_finite flags inf and nan") {
    Matrix a(2, 2, 1.0);
    CHECK(a.all_finite());
    a.at(0, 1) = std::numeric_limits<double>::infinity();
    CHECK_FALSE(a.all_finite());
    a.at(0, 1) = std::numeric_limits<double>::quiet_NaN();
    CHECK_FALSE(a.all_finite());
}

TEST_CASE("rng primitives: determinism, range, and hash oracles") {
    Rng a(5), b(5);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    Rng c(6);
    for (int i = 0; i < 1000; ++i) {
        const double d = c.next_double();
        CHECK(d >= 0.0);
        CHECK(d < 1.0);
        CHECK(c.next_below(17) < 17u);
    }
    // FNV-1a 64 reference values computed from the published offset/prime.
    CHECK(fnv1a64("hello", 5) == 11831194018420276491ULL);
    CHECK(fnv1a64("world", 5) == 5717881983045765875ULL);
    CHECK(fnv1a64("a", 1) == 12638187200555641996ULL);
    CHECK(mix_seed(1, 2) == mix_seed(1, 2));
    CHECK(mix_seed(1, 2) != mix_seed(2, 1));
}

TEST_CASE("gaussian draws have roughly standard moments") {
    Rng rng(123);
    const int n = 20000;
    double sum = 0.0, sq = 0.0;
    for (int i = 0; i < n; ++i) {
        const double g = rng.next_gaussian();
        sum += g;
        sq += g * g;
    }
    const double mean = sum / n;
    const double var = sq / n - mean * mean;
    CHECK(std::fabs(mean) < 0.05);
    CHECK(std::fabs(var - 1.0) < 0.05);
}
