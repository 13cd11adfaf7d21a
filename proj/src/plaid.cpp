#include "lateline/plaid.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include "lateline/errors.hpp"
#include "lateline/io.hpp"
#include "lateline/rng.hpp"

namespace lateline {

namespace {

constexpr char kIndexMagic[4] = {'L', 'L', 'I', 'X'};
constexpr std::uint32_t kIndexVersion = 1;

struct Point {
    std::uint32_t doc;
    std::uint16_t row;
};

// Assignment by max dot product, ties toward the lowest centroid index.
int nearest_centroid(const Matrix& centroids, const double* v, int d) {
    int best = 0;
    double best_dot = dot(centroids.row(0), v, d);
    for (int c = 1; c < centroids.rows(); ++c) {
        const double s = dot(centroids.row(c), v, d);
        if (s > best_dot) {
            best_dot = s;
            best = c;
        }
    }
    return best;
}

Matrix kmeans(const std::vector<const double*>& points, int d, int K, std::uint64_t seed,
              int iters, std::vector<int>& assign) {
    const std::size_t n = points.size();
    Rng rng(seed);
    Matrix centroids(K, d);

    // k-means++ seeding on the sphere: weights are max(0, 2 - 2*best_dot),
    // the squared euclidean distance for unit vectors.
    std::vector<double> best_dot(n, -std::numeric_limits<double>::infinity());
    for (int c = 0; c < K; ++c) {
        std::size_t pick;
        if (c == 0) {
            pick = static_cast<std::size_t>(rng.next_below(n));
        } else {
            double total = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                total += std::max(0.0, 2.0 - 2.0 * best_dot[i]);
            }
            if (total <= 0.0) {
                pick = static_cast<std::size_t>(rng.next_below(n));
            } else {
                const double r = rng.next_double() * total;
                double cum = 0.0;
                pick = n - 1;
                for (std::size_t i = 0; i < n; ++i) {
                    cum += std::max(0.0, 2.0 - 2.0 * best_dot[i]);
                    if (r < cum) {
                        pick = i;
                        break;
                    }
                }
            }
        }
        double* dst = centroids.row(c);
        std::memcpy(dst, points[pick], sizeof(double) * static_cast<std::size_t>(d));
        for (std::size_t i = 0; i < n; ++i) {
            best_dot[i] = std::max(best_dot[i], dot(dst, points[i], d));
        }
    }

    assign.assign(n, -1);
    for (int it = 0; it < iters; ++it) {
        bool changed = false;
        for (std::size_t i = 0; i < n; ++i) {
            const int c = nearest_centroid(centroids, points[i], d);
            if (c != assign[i]) {
                assign[i] = c;
                changed = true;
            }
        }
        if (!changed && it > 0) break;
        Matrix sums(K, d);
        std::vector<int> counts(static_cast<std::size_t>(K), 0);
        for (std::size_t i = 0; i < n; ++i) {
            double* dst = sums.row(assign[i]);
            const double* src = points[i];
            for (int k = 0; k < d; ++k) dst[k] += src[k];
            ++counts[static_cast<std::size_t>(assign[i])];
        }
        for (int c = 0; c < K; ++c) {
            if (counts[static_cast<std::size_t>(c)] == 0) continue;  // keep previous row
            double norm_sq = 0.0;
            const double* src = sums.row(c);
            for (int k = 0; k < d; ++k) norm_sq += src[k] * src[k];
            const double norm = std::sqrt(norm_sq);
            if (norm < 1e-12) continue;
            double* dst = centroids.row(c);
            for (int k = 0; k < d; ++k) dst[k] = src[k] / norm;
        }
    }
    return centroids;
}

void sort_hits(std::vector<std::pair<double, int>>& scored) {
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
}

std::vector<SearchHit> take_top(const PlaidIndex& idx,
                                std::vector<std::pair<double, int>>& scored, int k) {
    sort_hits(scored);
    const std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(k), scored.size());
    std::vector<SearchHit> out;
    out.reserve(take);
    for (std::size_t i = 0; i < take; ++i) {
        out.push_back({idx.doc_ids[static_cast<std::size_t>(scored[i].second)], scored[i].first});
    }
    return out;
}

}  // namespace

const TokenMatrix* PlaidIndex::find(const std::string& doc_id) const {
    auto it = by_id.find(doc_id);
    return it == by_id.end() ? nullptr : &doc_store[static_cast<std::size_t>(it->second)];
}

int default_centroid_count(long long total_tokens) {
    if (total_tokens < 1) throw ConfigError("index needs at least one token");
    const long long k = static_cast<long long>(
        std::ceil(4.0 * std::sqrt(static_cast<double>(total_tokens))));
    return static_cast<int>(std::min(k, total_tokens));
}

PlaidIndex build_index(const std::vector<std::pair<std::string, TokenMatrix>>& docs, int K,
                       std::uint64_t seed, int iters) {
    if (docs.empty()) throw ConfigError("cannot build an index from zero documents");
    if (iters < 1) throw ConfigError("kmeans iterations must be >= 1");

    PlaidIndex idx;
    idx.seed = seed;
    idx.kmeans_iters = iters;

    std::vector<std::size_t> order(docs.size());
    for (std::size_t i = 0; i < docs.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return docs[a].first < docs[b].first;
    });

    const int d = docs[order[0]].second.dim();
    long long total_tokens = 0;
    for (std::size_t oi = 0; oi < order.size(); ++oi) {
        const auto& [id, m] = docs[order[oi]];
        if (oi > 0 && docs[order[oi - 1]].first == id) {
            throw InputError("duplicate doc id '" + id + "'");
        }
        if (m.dim() != d) {
            throw ShapeError("doc '" + id + "' has dim " + std::to_string(m.dim()) +
                             ", expected " + std::to_string(d));
        }
        if (m.n_active() == 0) throw InputError("doc '" + id + "' has no active rows");
        if (m.n_rows() > 65535) throw InputError("doc '" + id + "' exceeds 65535 rows");
        total_tokens += m.n_active();
        idx.doc_ids.push_back(id);
        TokenMatrix q;
        q.embeddings = quantize_f32(m.embeddings);
        q.active = m.active;
        idx.doc_store.push_back(std::move(q));
        idx.by_id[id] = static_cast<int>(idx.doc_ids.size()) - 1;
    }

    if (K == 0) K = default_centroid_count(total_tokens);
    if (K < 1) throw ConfigError("centroid count must be >= 1");
    if (static_cast<long long>(K) > total_tokens) {
        throw ConfigError("centroid count " + std::to_string(K) + " exceeds token count " +
                          std::to_string(total_tokens));
    }

    std::vector<Point> where;
    std::vector<const double*> points;
    where.reserve(static_cast<std::size_t>(total_tokens));
    points.reserve(static_cast<std::size_t>(total_tokens));
    for (std::size_t di = 0; di < idx.doc_store.size(); ++di) {
        const TokenMatrix& m = idx.doc_store[di];
        for (int r = 0; r < m.n_rows(); ++r) {
            if (!m.active[static_cast<std::size_t>(r)]) continue;
            where.push_back({static_cast<std::uint32_t>(di), static_cast<std::uint16_t>(r)});
            points.push_back(m.embeddings.row(r));
        }
    }

    std::vector<int> assign;
    Matrix centroids = kmeans(points, d, K, seed, iters, assign);
    idx.centroids = quantize_f32(centroids);

    // final assignment against the stored (quantized) centroids
    idx.postings.resize(static_cast<std::size_t>(K));
    for (std::size_t i = 0; i < points.size(); ++i) {
        const int c = nearest_centroid(idx.centroids, points[i], d);
        idx.postings[static_cast<std::size_t>(c)].push_back({where[i].doc, where[i].row});
    }
    return idx;
}

std::vector<SearchHit> search(const PlaidIndex& idx, const TokenMatrix& query,
                              const SearchParams& p) {
    if (idx.doc_count() == 0) throw InputError("search: index is empty");
    if (query.dim() != idx.dim()) {
        throw ShapeError("search: query dim " + std::to_string(query.dim()) +
                         " != index dim " + std::to_string(idx.dim()));
    }
    if (query.n_active() == 0) throw InputError("search: query has no active rows");
    if (p.k < 1) throw ConfigError("k must be >= 1");
    if (p.nprobe < 1 || p.nprobe > idx.n_centroids()) {
        throw ConfigError("nprobe must be in [1, " + std::to_string(idx.n_centroids()) +
                          "], got " + std::to_string(p.nprobe));
    }
    if (p.candidate_cap < 0) throw ConfigError("candidate_cap must be >= 0");

    const int K = idx.n_centroids();
    const int d = idx.dim();
    const std::size_t n_docs = idx.doc_store.size();
    const double neg_inf = -std::numeric_limits<double>::infinity();

    std::vector<double> approx(n_docs, 0.0);
    std::vector<std::uint8_t> is_candidate(n_docs, 0);
    std::vector<double> row_best(n_docs, neg_inf);
    std::vector<std::uint32_t> touched;
    std::vector<std::pair<double, int>> cdots(static_cast<std::size_t>(K));

    for (int qi = 0; qi < query.n_rows(); ++qi) {
        if (!query.active[static_cast<std::size_t>(qi)]) continue;
        const double* qrow = query.embeddings.row(qi);
        for (int c = 0; c < K; ++c) {
            cdots[static_cast<std::size_t>(c)] = {dot(idx.centroids.row(c), qrow, d), c};
        }
        std::partial_sort(cdots.begin(), cdots.begin() + p.nprobe, cdots.end(),
                          [](const auto& a, const auto& b) {
                              if (a.first != b.first) return a.first > b.first;
                              return a.second < b.second;
                          });
        touched.clear();
        for (int pi = 0; pi < p.nprobe; ++pi) {
            const double cdot = cdots[static_cast<std::size_t>(pi)].first;
            const int c = cdots[static_cast<std::size_t>(pi)].second;
            for (const Posting& post : idx.postings[static_cast<std::size_t>(c)]) {
                double& rb = row_best[post.doc];
                if (rb == neg_inf) {
                    touched.push_back(post.doc);
                    rb = cdot;
                } else if (cdot > rb) {
                    rb = cdot;
                }
            }
        }
        for (std::uint32_t docid : touched) {
            approx[docid] += row_best[docid];
            is_candidate[docid] = 1;
            row_best[docid] = neg_inf;
        }
    }

    std::vector<int> candidates;
    for (std::size_t i = 0; i < n_docs; ++i) {
        if (is_candidate[i]) candidates.push_back(static_cast<int>(i));
    }
    if (p.candidate_cap > 0 &&
        static_cast<long long>(candidates.size()) > p.candidate_cap) {
        std::sort(candidates.begin(), candidates.end(), [&](int a, int b) {
            const double sa = approx[static_cast<std::size_t>(a)];
            const double sb = approx[static_cast<std::size_t>(b)];
            if (sa != sb) return sa > sb;
            return a < b;
        });
        candidates.resize(static_cast<std::size_t>(p.candidate_cap));
    }

    std::vector<std::pair<double, int>> scored;
    scored.reserve(candidates.size());
    for (int docid : candidates) {
        scored.emplace_back(relevance(query, idx.doc_store[static_cast<std::size_t>(docid)]),
                            docid);
    }
    return take_top(idx, scored, p.k);
}

std::vector<SearchHit> exact_search(const PlaidIndex& idx, const TokenMatrix& query, int k) {
    if (idx.doc_count() == 0) throw InputError("exact_search: index is empty");
    if (k < 1) throw ConfigError("k must be >= 1");
    std::vector<std::pair<double, int>> scored;
    scored.reserve(idx.doc_store.size());
    for (std::size_t i = 0; i < idx.doc_store.size(); ++i) {
        scored.emplace_back(relevance(query, idx.doc_store[i]), static_cast<int>(i));
    }
    return take_top(idx, scored, k);
}

void save_index(const std::string& path, const PlaidIndex& idx) {
    if (idx.doc_count() == 0) throw InputError("save_index: index is empty");
    if (idx.postings.size() != static_cast<std::size_t>(idx.n_centroids())) {
        throw InputError("save_index: postings/centroid count mismatch");
    }
    BinaryWriter out(path);
    out.bytes(kIndexMagic, 4);
    out.u32(kIndexVersion);
    out.u32(static_cast<std::uint32_t>(idx.n_centroids()));
    out.u32(static_cast<std::uint32_t>(idx.dim()));
    out.u32(static_cast<std::uint32_t>(idx.doc_count()));
    out.u64(idx.seed);
    out.u32(static_cast<std::uint32_t>(idx.kmeans_iters));
    for (int c = 0; c < idx.centroids.rows(); ++c) {
        const double* src = idx.centroids.row(c);
        for (int k = 0; k < idx.centroids.cols(); ++k) out.f32(static_cast<float>(src[k]));
    }
    for (const auto& list : idx.postings) {
        out.varint(list.size());
        for (const Posting& post : list) {
            out.varint(post.doc);
            out.u16(post.row);
        }
    }
    for (std::size_t i = 0; i < idx.doc_store.size(); ++i) {
        out.str(idx.doc_ids[i]);
        write_token_matrix(out, idx.doc_store[i]);
    }
    out.close();
}

PlaidIndex load_index(const std::string& path) {
    BinaryReader in(path);
    char magic[4];
    in.bytes(magic, 4);
    if (std::memcmp(magic, kIndexMagic, 4) != 0) {
        throw FormatError(path + ": bad magic at byte 0");
    }
    const std::uint32_t version = in.u32();
    if (version != kIndexVersion) {
        throw FormatError(path + ": unsupported version " + std::to_string(version));
    }
    const std::uint32_t K = in.u32();
    const std::uint32_t d = in.u32();
    const std::uint32_t n_docs = in.u32();
    if (K == 0 || d == 0 || n_docs == 0 || K > (1u << 24) || d > (1u << 20)) {
        throw FormatError(path + ": bad header fields at byte 8");
    }
    PlaidIndex idx;
    idx.seed = in.u64();
    idx.kmeans_iters = static_cast<int>(in.u32());
    idx.centroids = Matrix(static_cast<int>(K), static_cast<int>(d));
    for (std::uint32_t c = 0; c < K; ++c) {
        double* dst = idx.centroids.row(static_cast<int>(c));
        for (std::uint32_t k = 0; k < d; ++k) dst[k] = static_cast<double>(in.f32());
    }
    idx.postings.resize(K);
    for (std::uint32_t c = 0; c < K; ++c) {
        const std::uint64_t n = in.varint();
        if (n > (1ull << 32)) {
            throw FormatError(path + ": posting list too long at byte " +
                              std::to_string(in.offset()));
        }
        idx.postings[c].reserve(static_cast<std::size_t>(n));
        for (std::uint64_t e = 0; e < n; ++e) {
            Posting post;
            const std::uint64_t docid = in.varint();
            if (docid >= n_docs) {
                throw FormatError(path + ": posting doc " + std::to_string(docid) +
                                  " out of range at byte " + std::to_string(in.offset()));
            }
            post.doc = static_cast<std::uint32_t>(docid);
            post.row = in.u16();
            idx.postings[c].push_back(post);
        }
    }
    std::string prev_id;
    for (std::uint32_t i = 0; i < n_docs; ++i) {
        std::string id = in.str();
        if (i > 0 && id <= prev_id) {
            throw FormatError(path + ": doc ids out of order at byte " +
                              std::to_string(in.offset()));
        }
        TokenMatrix m = read_token_matrix(in);
        if (m.dim() != static_cast<int>(d)) {
            throw FormatError(path + ": doc '" + id + "' dim " + std::to_string(m.dim()) +
                              " != index dim " + std::to_string(d));
        }
        idx.by_id[id] = static_cast<int>(i);
        prev_id = id;
        idx.doc_ids.push_back(std::move(id));
        idx.doc_store.push_back(std::move(m));
    }
    in.expect_eof();
    for (const auto& list : idx.postings) {
        for (const Posting& post : list) {
            const TokenMatrix& m = idx.doc_store[post.doc];
            if (post.row >= m.n_rows()) {
                throw FormatError(path + ": posting row " + std::to_string(post.row) +
                                  " out of range for doc '" + idx.doc_ids[post.doc] + "'");
            }
        }
    }
    return idx;
}

}  // namespace lateline
