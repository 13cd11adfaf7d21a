#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "lateline/errors.hpp"
#include "lateline/late_interaction.hpp"
#include "lateline/rng.hpp"

using namespace lateline;
namespace fs = std::filesystem;

namespace {

Matrix make(int r, int c, std::initializer_list<double> vals) {
    Matrix m(r, c);
    auto it = vals.begin();
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) m.at(i, j) = *it++;
    return m;
}

TokenMatrix random_tm(int rows, int d, Rng& rng, int inactive_prefix = 0) {
    TokenMatrix t;
    t.embeddings = Matrix::gaussian(rows, d, rng);
    t.active.assign(static_cast<std::size_t>(rows), 1);
    for (int i = 0; i < inactive_prefix; ++i) t.active[static_cast<std::size_t>(i)] = 0;
    return t;
}

fs::path temp_dir() {
    const fs::path p = fs::temp_directory_path() / "lateline_li_test";
    fs::create_directories(p);
    return p;
}

}  // namespace

TEST_CASE("relevance sums per-query-row maxima: hand example") {
    TokenMatrix q = TokenMatrix::all_active(make(2, 2, {1, 0, 0, 1}));
    TokenMatrix d = TokenMatrix::all_active(make(2, 2, {1, 0, 0.5, 0.5}));
    // row0: max(1.0, 0.5) = 1.0 ; row1: max(0.0, 0.5) = 0.5
    CHECK(relevance(q, d) == 1.5);
}

TEST_CASE("masked rows carry no weight even with garbage values") {
    TokenMatrix q = TokenMatrix::all_active(make(2, 2, {1, 0, 0, 1}));
    TokenMatrix d = TokenMatrix::all_active(make(2, 2, {1, 0, 0.5, 0.5}));
    q.active[1] = 0;
    q.embeddings.at(1, 0) = 1e9;
    CHECK(relevance(q, d) == 1.0);
    q.active[1] = 1;
    q.embeddings.at(1, 0) = 0.0;
    d.active[0] = 0;
    d.embeddings.at(0, 1) = -1e9;
    // both query rows now take doc row 1: 0.5 + 0.5
    CHECK(relevance(q, d) == 1.0);
}

TEST_CASE("relevance requires an active row on each side") {
    TokenMatrix q = TokenMatrix::all_active(make(1, 2, {1, 0}));
    TokenMatrix d = TokenMatrix::all_active(make(1, 2, {1, 0}));
    TokenMatrix none = q;
    none.active[0] = 0;
    CHECK_THROWS_AS(relevance(none, d), InputError);
    CHECK_THROWS_AS(relevance(q, none), InputError);
}

TEST_CASE("relevance rejects dimension mismatches") {
    TokenMatrix q = TokenMatrix::all_active(Matrix(1, 3, 1.0));
    TokenMatrix d = TokenMatrix::all_active(Matrix(1, 4, 1.0));
    CHECK_THROWS_AS(relevance(q, d), ShapeError);
}

TEST_CASE("batch scoring is bit-identical to the scalar loop") {
    Rng rng(21);
    std::vector<TokenMatrix> qs, ds;
    for (int i = 0; i < 4; ++i) qs.push_back(random_tm(3 + i, 6, rng, i % 2));
    for (int j = 0; j < 5; ++j) ds.push_back(random_tm(2 + j, 6, rng));
    const ScoreMatrix s = relevance_batch(qs, ds);
    REQUIRE(s.values.rows() == 4);
    REQUIRE(s.values.cols() == 5);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 5; ++j) CHECK(s.values.at(i, j) == relevance(qs[i], ds[j]));
}

TEST_CASE("gradient routes each active query row to its argmax doc row") {
    TokenMatrix q = TokenMatrix::all_active(make(2, 2, {1, 0, 0, 1}));
    TokenMatrix d = TokenMatrix::all_active(make(2, 2, {1, 0, 0.5, 0.5}));
    const auto [dq, dd] = relevance_gradient(q, d);
    // d relevance / d q_row = winning doc row; d/d d_row accumulates winning q rows
    CHECK(dq.at(0, 0) == 1.0);
    CHECK(dq.at(0, 1) == 0.0);
    CHECK(dq.at(1, 0) == 0.5);
    CHECK(dq.at(1, 1) == 0.5);
    CHECK(dd.at(0, 0) == 1.0);
    CHECK(dd.at(0, 1) == 0.0);
    CHECK(dd.at(1, 0) == 0.0);
    CHECK(dd.at(1, 1) == 1.0);
}

TEST_CASE("score ties break toward the lowest doc row index") {
    TokenMatrix q = TokenMatrix::all_active(make(1, 2, {1, 0}));
    TokenMatrix d = TokenMatrix::all_active(make(3, 2, {0.5, 0, 1, 0, 1, 0}));
    // rows 1 and 2 tie at dot 1.0; the subgradient must pick row 1
    const auto [dq, dd] = relevance_gradient(q, d);
    CHECK(dd.at(1, 0) == 1.0);
    CHECK(dd.at(2, 0) == 0.0);
}

TEST_CASE("masked rows receive zero gradient") {
    Rng rng(31);
    TokenMatrix q = random_tm(4, 5, rng, 2);
    TokenMatrix d = random_tm(3, 5, rng);
    const auto [dq, dd] = relevance_gradient(q, d);
    for (int c = 0; c < 5; ++c) {
        CHECK(dq.at(0, c) == 0.0);
        CHECK(dq.at(1, c) == 0.0);
    }
}

TEST_CASE("gradient matches central finite differences at a tie-free point") {
    Rng rng(77);
    TokenMatrix q = random_tm(3, 4, rng);
    TokenMatrix d = random_tm(5, 4, rng, 1);
    const auto [dq, dd] = relevance_gradient(q, d);
    const double h = 1e-6;
    for (int r = 0; r < q.embeddings.rows(); ++r) {
        for (int c = 0; c < q.embeddings.cols(); ++c) {
            TokenMatrix qp = q, qm = q;
            qp.embeddings.at(r, c) += h;
            qm.embeddings.at(r, c) -= h;
            const double fd = (relevance(qp, d) - relevance(qm, d)) / (2 * h);
            CHECK(dq.at(r, c) == doctest::Approx(fd).epsilon(1e-7));
        }
    }
    for (int r = 0; r < d.embeddings.rows(); ++r) {
        for (int c = 0; c < d.embeddings.cols(); ++c) {
            TokenMatrix dp = d, dm = d;
            dp.embeddings.at(r, c) += h;
            dm.embeddings.at(r, c) -= h;
            const double fd = (relevance(q, dp) - relevance(q, dm)) / (2 * h);
            CHECK(dd.at(r, c) == doctest::Approx(fd).epsilon(1e-7));
        }
    }
}

TEST_CASE("n_active counts flags and all_active sets every row") {
    TokenMatrix t = TokenMatrix::all_active(Matrix(4, 2, 1.0));
    CHECK(t.n_active() == 4);
    t.active[0] = 0;
    t.active[3] = 0;
    CHECK(t.n_active() == 2);
}

TEST_CASE("token matrix files round-trip with the inactive prefix") {
    Rng rng(55);
    TokenMatrix t = random_tm(5, 3, rng, 2);
    const fs::path dir = temp_dir();
    const std::string path = (dir / "t.llm").string();
    save_token_matrix(path, t);
    const TokenMatrix r = load_token_matrix(path);
    CHECK(r.embeddings == quantize_f32(t.embeddings));
    REQUIRE(r.active.size() == 5);
    CHECK(r.active[0] == 0);
    CHECK(r.active[1] == 0);
    CHECK(r.active[2] == 1);
    CHECK(r.n_active() == 3);
}

TEST_CASE("saving a non-prefix active pattern is rejected") {
    Rng rng(56);
    TokenMatrix t = random_tm(4, 3, rng);
    t.active[2] = 0;  // hole in the middle
    const std::string path = (temp_dir() / "bad_pattern.llm").string();
    CHECK_THROWS_AS(save_token_matrix(path, t), InputError);
}

TEST_CASE("token matrix loader names the offending byte on bad magic") {
    const fs::path dir = temp_dir();
    const std::string path = (dir / "garbage.llm").string();
    std::ofstream(path, std::ios::binary) << "XXXXGARBAGEGARBAGEGARBAGE";
    try {
        load_token_matrix(path);
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("byte 0") != std::string::npos);
    }
}

TEST_CASE("quantize_f32 rounds exactly to float precision") {
    Matrix m(1, 2);
    m.at(0, 0) = 0.1;  // not representable in f32
    m.at(0, 1) = 0.5;  // exactly representable
    const Matrix q = quantize_f32(m);
    CHECK(q.at(0, 0) == static_cast<double>(static_cast<float>(0.1)));
    CHECK(q.at(0, 0) != 0.1);
    CHECK(q.at(0, 1) == 0.5);
    CHECK(quantize_f32(q) == q);
}
