#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "doctest.h"
#include "lateline/errors.hpp"
#include "lateline/plaid.hpp"
#include "lateline/rng.hpp"

using namespace lateline;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
    const fs::path p = fs::temp_directory_path() / "lateline_plaid_test";
    fs::create_directories(p);
    return p;
}

TokenMatrix unit_rows(Matrix m) { return TokenMatrix::all_active(l2_normalize_rows(m)); }

std::vector<std::pair<std::string, TokenMatrix>> random_corpus(int n_docs, int rows, int d,
                                                               std::uint64_t seed) {
    Rng rng(seed);
    std::vector<std::pair<std::string, TokenMatrix>> docs;
    for (int i = 0; i < n_docs; ++i) {
        char id[16];
        std::snprintf(id, sizeof id, "d%04d", i);
        docs.emplace_back(id, unit_rows(Matrix::gaussian(rows, d, rng)));
    }
    return docs;
}

TokenMatrix random_query(int rows, int d, std::uint64_t seed) {
    Rng rng(seed);
    return unit_rows(Matrix::gaussian(rows, d, rng));
}

}  // namespace

TEST_CASE("centroid count heuristic: 4*sqrt(tokens) clamped to the token count") {
    CHECK(default_centroid_count(100) == 40);
    CHECK(default_centroid_count(10000) == 400);
    CHECK(default_centroid_count(5) == 5);   // clamp
    CHECK(default_centroid_count(1) == 1);
    CHECK(default_centroid_count(101) == 41);  // ceil
}

TEST_CASE("every active token lands in exactly one posting list") {
    const auto docs = random_corpus(12, 5, 8, 3);
    const PlaidIndex idx = build_index(docs, 6, 3);
    REQUIRE(idx.n_centroids() == 6);
    std::map<std::pair<std::uint32_t, std::uint16_t>, int> seen;
    long long total = 0;
    for (const auto& plist : idx.postings) {
        for (const Posting& p : plist) {
            ++seen[{p.doc, p.row}];
            ++total;
        }
    }
    CHECK(total == 12 * 5);
    for (const auto& [key, count] : seen) CHECK(count == 1);
    // centroids are unit rows
    for (int k = 0; k < idx.centroids.rows(); ++k) {
        double norm = 0.0;
        for (int c = 0; c < idx.centroids.cols(); ++c)
            norm += idx.centroids.at(k, c) * idx.centroids.at(k, c);
        CHECK(norm == doctest::Approx(1.0).epsilon(1e-5));
    }
}

TEST_CASE("docs are stored sorted by id and quantized to float32") {
    auto docs = random_corpus(5, 3, 6, 4);
    std::swap(docs[0], docs[4]);  // present out of order
    const PlaidIndex idx = build_index(docs, 3, 4);
    REQUIRE(idx.doc_ids.size() == 5);
    for (std::size_t i = 1; i < idx.doc_ids.size(); ++i) CHECK(idx.doc_ids[i - 1] < idx.doc_ids[i]);
    for (const auto& d : idx.doc_store) CHECK(quantize_f32(d.embeddings) == d.embeddings);
    CHECK(idx.find("d0003") == &idx.doc_store[3]);
    CHECK(idx.find("zzz") == nullptr);
}

TEST_CASE("probing every centroid is exhaustive: search equals exact_search") {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const auto docs = random_corpus(30, 4, 8, seed);
        const PlaidIndex idx = build_index(docs, 8, seed);
        const TokenMatrix q = random_query(3, 8, seed + 100);
        SearchParams p;
        p.k = 10;
        p.nprobe = idx.n_centroids();
        const auto approx = search(idx, q, p);
        const auto exact = exact_search(idx, q, 10);
        REQUIRE(approx.size() == exact.size());
        for (std::size_t i = 0; i < exact.size(); ++i) {
            CHECK(approx[i].doc_id == exact[i].doc_id);
            CHECK(approx[i].score == exact[i].score);
        }
    }
}

TEST_CASE("identical docs tie and order by ascending doc id") {
    Rng rng(9);
    const Matrix rows = l2_normalize_rows(Matrix::gaussian(3, 6, rng));
    std::vector<std::pair<std::string, TokenMatrix>> docs{
        {"dup_b", TokenMatrix::all_active(rows)},
        {"dup_a", TokenMatrix::all_active(rows)},
        {"other", random_query(3, 6, 10)},
    };
    const PlaidIndex idx = build_index(docs, 2, 5);
    const TokenMatrix q = random_query(2, 6, 11);
    const auto hits = exact_search(idx, q, 3);
    REQUIRE(hits.size() == 3);
    // the two duplicates score identically; id breaks the tie
    int a = -1, b = -1;
    for (int i = 0; i < 3; ++i) {
        if (hits[static_cast<std::size_t>(i)].doc_id == "dup_a") a = i;
        if (hits[static_cast<std::size_t>(i)].doc_id == "dup_b") b = i;
    }
    REQUIRE(a >= 0);
    REQUIRE(b >= 0);
    CHECK(hits[static_cast<std::size_t>(a)].score == hits[static_cast<std::size_t>(b)].score);
    CHECK(a < b);
}

TEST_CASE("orthogonal token directions cluster exactly at K = direction count") {
    // 4 axis directions, each appearing in several single-row docs
    std::vector<std::pair<std::string, TokenMatrix>> docs;
    for (int i = 0; i < 12; ++i) {
        Matrix m(1, 4);
        m.at(0, i % 4) = 1.0;
        char id[8];
        std::snprintf(id, sizeof id, "d%02d", i);
        docs.emplace_back(id, TokenMatrix::all_active(m));
    }
    const PlaidIndex idx = build_index(docs, 4, 21);
    REQUIRE(idx.n_centroids() == 4);
    std::set<int> matched_axes;
    for (int k = 0; k < 4; ++k) {
        int axis = -1;
        for (int c = 0; c < 4; ++c) {
            if (std::fabs(idx.centroids.at(k, c) - 1.0) < 1e-6) axis = c;
        }
        REQUIRE(axis >= 0);  // every centroid sits exactly on one axis
        matched_axes.insert(axis);
    }
    CHECK(matched_axes.size() == 4);
    // each posting list holds exactly the 3 tokens of its axis
    for (const auto& plist : idx.postings) CHECK(plist.size() == 3);
}

TEST_CASE("candidate caps trade recall for work but keep the contract") {
    const auto docs = random_corpus(40, 4, 8, 30);
    const PlaidIndex idx = build_index(docs, 10, 30);
    const TokenMatrix q = random_query(3, 8, 31);
    SearchParams capped;
    capped.k = 5;
    capped.nprobe = 2;
    capped.candidate_cap = 1;
    const auto one = search(idx, q, capped);
    REQUIRE(one.size() == 1);  // only one candidate survives the cap
    SearchParams uncapped = capped;
    uncapped.candidate_cap = 0;
    SearchParams huge = capped;
    huge.candidate_cap = 1000000;
    const auto a = search(idx, q, uncapped);
    const auto b = search(idx, q, huge);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].doc_id == b[i].doc_id);
        CHECK(a[i].score == b[i].score);
    }
}

TEST_CASE("index searches validate their parameters and inputs") {
    const auto docs = random_corpus(6, 3, 8, 40);
    const PlaidIndex idx = build_index(docs, 3, 40);
    const TokenMatrix q = random_query(2, 8, 41);
    SearchParams p;
    p.nprobe = 0;
    CHECK_THROWS_AS(search(idx, q, p), ConfigError);
    p.nprobe = idx.n_centroids() + 1;
    CHECK_THROWS_AS(search(idx, q, p), ConfigError);
    p.nprobe = 1;
    p.k = 0;
    CHECK_THROWS_AS(search(idx, q, p), ConfigError);
    p.k = 3;
    p.candidate_cap = -1;
    CHECK_THROWS_AS(search(idx, q, p), ConfigError);

    const TokenMatrix wrong_dim = random_query(2, 9, 42);
    CHECK_THROWS_AS(exact_search(idx, wrong_dim, 3), ShapeError);
    TokenMatrix inactive = q;
    inactive.active.assign(inactive.active.size(), 0);
    CHECK_THROWS_AS(exact_search(idx, inactive, 3), InputError);
}

TEST_CASE("index construction rejects bad corpora") {
    CHECK_THROWS_AS(build_index({}, 2, 1), ConfigError);
    auto docs = random_corpus(4, 3, 8, 50);
    docs.emplace_back("d0001", docs[0].second);  // duplicate id
    CHECK_THROWS_AS(build_index(docs, 2, 1), InputError);
    auto mixed = random_corpus(3, 3, 8, 51);
    mixed[1].second = random_query(3, 9, 52);  // dimension mismatch
    CHECK_THROWS_AS(build_index(mixed, 2, 1), ShapeError);
    auto masked = random_corpus(3, 3, 8, 53);
    masked[2].second.active.assign(3, 0);  // nothing active
    CHECK_THROWS_AS(build_index(masked, 2, 1), InputError);
    CHECK_THROWS_AS(build_index(random_corpus(3, 3, 8, 54), 100, 1), ConfigError);
}

TEST_CASE("index files round-trip bit-exactly, including search behavior") {
    const auto docs = random_corpus(20, 4, 8, 60);
    const PlaidIndex idx = build_index(docs, 6, 60, 8);
    const fs::path dir = temp_dir();
    const std::string path = (dir / "t.llix").string();
    save_index(path, idx);
    const PlaidIndex r = load_index(path);
    CHECK(r.centroids == idx.centroids);
    CHECK(r.doc_ids == idx.doc_ids);
    CHECK(r.seed == idx.seed);
    CHECK(r.kmeans_iters == idx.kmeans_iters);
    REQUIRE(r.postings.size() == idx.postings.size());
    for (std::size_t k = 0; k < idx.postings.size(); ++k) {
        REQUIRE(r.postings[k].size() == idx.postings[k].size());
        for (std::size_t i = 0; i < idx.postings[k].size(); ++i) {
            CHECK(r.postings[k][i].doc == idx.postings[k][i].doc);
            CHECK(r.postings[k][i].row == idx.postings[k][i].row);
        }
    }
    REQUIRE(r.doc_store.size() == idx.doc_store.size());
    for (std::size_t i = 0; i < idx.doc_store.size(); ++i) {
        CHECK(r.doc_store[i].embeddings == idx.doc_store[i].embeddings);
        CHECK(r.doc_store[i].active == idx.doc_store[i].active);
    }
    const TokenMatrix q = random_query(3, 8, 61);
    SearchParams p;
    p.k = 7;
    p.nprobe = 3;
    const auto before = search(idx, q, p);
    const auto after = search(r, q, p);
    REQUIRE(before.size() == after.size());
    for (std::size_t i = 0; i < before.size(); ++i) {
        CHECK(before[i].doc_id == after[i].doc_id);
        CHECK(before[i].score == after[i].score);
    }

    // and the file bytes themselves are reproducible
    const std::string path2 = (dir / "t2.llix").string();
    save_index(path2, idx);
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    const std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    const std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);
}

TEST_CASE("index loader rejects corrupted files") {
    const fs::path dir = temp_dir();
    const std::string bad = (dir / "bad.llix").string();
    std::ofstream(bad, std::ios::binary) << "NOTANINDEXATALL_________";
    CHECK_THROWS_AS(load_index(bad), FormatError);
    CHECK_THROWS_AS(load_index((dir / "absent.llix").string()), IoError);

    // truncate a valid file
    const auto docs = random_corpus(5, 3, 6, 70);
    const PlaidIndex idx = build_index(docs, 2, 70);
    const std::string good = (dir / "good.llix").string();
    save_index(good, idx);
    std::ifstream in(good, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    bytes.resize(bytes.size() / 2);
    const std::string trunc = (dir / "trunc.llix").string();
    std::ofstream(trunc, std::ios::binary) << bytes;
    CHECK_THROWS_AS(load_index(trunc), FormatError);
}

TEST_CASE("exact_search scores match the scalar relevance loop bit-exactly") {
    const auto docs = random_corpus(15, 4, 8, 95);
    const PlaidIndex idx = build_index(docs, 5, 95);
    const TokenMatrix q = random_query(3, 8, 96);
    const auto hits = exact_search(idx, q, 15);
    REQUIRE(hits.size() == 15);
    for (const auto& h : hits) {
        const TokenMatrix* stored = idx.find(h.doc_id);
        REQUIRE(stored != nullptr);
        CHECK(h.score == relevance(q, *stored));
    }
    // k exceeding the corpus clamps to the whole corpus, still ranked
    const auto all = exact_search(idx, q, 9999);
    CHECK(all.size() == 15);
    for (std::size_t i = 1; i < all.size(); ++i) CHECK(all[i - 1].score >= all[i].score);

    // singleton corpus
    const auto single = build_index(random_corpus(1, 3, 8, 97), 1, 97);
    const auto one = exact_search(single, random_query(2, 8, 98), 5);
    REQUIRE(one.size() == 1);
    CHECK(one[0].doc_id == "d0000");
}

TEST_CASE("half-depth probing keeps recall@5 at 0.95 against exact search") {
    const int trials = 20;
    int found = 0, total = 0;
    for (std::uint64_t seed = 1; seed <= trials; ++seed) {
        const auto docs = random_corpus(100, 4, 16, seed * 1000);
        const PlaidIndex idx = build_index(docs, 0, seed);  // heuristic K
        SearchParams p;
        p.k = 5;
        p.nprobe = std::max(1, idx.n_centroids() / 2);
        const TokenMatrix q = random_query(4, 16, seed * 1000 + 7);
        const auto approx = search(idx, q, p);
        const auto exact = exact_search(idx, q, 5);
        std::set<std::string> approx_ids;
        for (const auto& h : approx) approx_ids.insert(h.doc_id);
        for (const auto& h : exact) {
            ++total;
            if (approx_ids.count(h.doc_id)) ++found;
        }
    }
    CHECK(total == trials * 5);
    CHECK(static_cast<double>(found) / total >= 0.95);
}

TEST_CASE("approximate search finds near-duplicate targets at low nprobe") {
    // one doc is nearly identical to the query; probing its centroid suffices
    Rng rng(80);
    Matrix target = l2_normalize_rows(Matrix::gaussian(4, 8, rng));
    std::vector<std::pair<std::string, TokenMatrix>> docs;
    docs.emplace_back("target", TokenMatrix::all_active(target));
    for (int i = 0; i < 20; ++i) {
        char id[8];
        std::snprintf(id, sizeof id, "n%03d", i);
        docs.emplace_back(id, random_query(4, 8, 90 + static_cast<std::uint64_t>(i)));
    }
    const PlaidIndex idx = build_index(docs, 8, 81);
    TokenMatrix q = TokenMatrix::all_active(target);
    SearchParams p;
    p.k = 1;
    p.nprobe = 2;
    const auto hits = search(idx, q, p);
    REQUIRE(hits.size() == 1);
    CHECK(hits[0].doc_id == "target");
    CHECK(hits[0].score == doctest::Approx(4.0).epsilon(1e-5));
}
