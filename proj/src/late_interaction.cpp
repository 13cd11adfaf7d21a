#include "lateline/late_interaction.hpp"

#include <cstring>

#include "lateline/embeddings.hpp"
#include "lateline/errors.hpp"
#include "lateline/io.hpp"

namespace lateline {

int TokenMatrix::n_active() const {
    int n = 0;
    for (auto a : active) n += a != 0;
    return n;
}

TokenMatrix TokenMatrix::all_active(Matrix m) {
    TokenMatrix t;
    t.active.assign(static_cast<std::size_t>(m.rows()), 1);
    t.embeddings = std::move(m);
    return t;
}

namespace {

void check_pair(const TokenMatrix& query, const TokenMatrix& doc) {
    if (query.dim() != doc.dim()) {
        throw ShapeError("relevance: query dim " + std::to_string(query.dim()) +
                         " != doc dim " + std::to_string(doc.dim()));
    }
    if (query.n_active() == 0) throw InputError("relevance: query has no active rows");
    if (doc.n_active() == 0) throw InputError("relevance: document has no active rows");
}

}  // namespace

double relevance(const TokenMatrix& query, const TokenMatrix& doc) {
    check_pair(query, doc);
    const int d = query.dim();
    double score = 0.0;
    for (int i = 0; i < query.n_rows(); ++i) {
        if (!query.active[i]) continue;
        const double* q = query.embeddings.row(i);
        bool seen = false;
        double best = 0.0;
        for (int j = 0; j < doc.n_rows(); ++j) {
            if (!doc.active[j]) continue;
            const double v = dot(q, doc.embeddings.row(j), d);
            if (!seen || v > best) {
                best = v;
                seen = true;
            }
        }
        score += best;
    }
    return score;
}

ScoreMatrix relevance_batch(const std::vector<TokenMatrix>& queries,
                            const std::vector<TokenMatrix>& docs) {
    ScoreMatrix s;
    s.values = Matrix(static_cast<int>(queries.size()), static_cast<int>(docs.size()));
    for (std::size_t i = 0; i < queries.size(); ++i)
        for (std::size_t j = 0; j < docs.size(); ++j)
            s.values.at(static_cast<int>(i), static_cast<int>(j)) = relevance(queries[i], docs[j]);
    return s;
}

std::pair<Matrix, Matrix> relevance_gradient(const TokenMatrix& query, const TokenMatrix& doc) {
    check_pair(query, doc);
    const int d = query.dim();
    Matrix dq(query.n_rows(), d);
    Matrix dd(doc.n_rows(), d);
    for (int i = 0; i < query.n_rows(); ++i) {
        if (!query.active[i]) continue;
        const double* q = query.embeddings.row(i);
        int best_j = -1;
        double best = 0.0;
        for (int j = 0; j < doc.n_rows(); ++j) {
            if (!doc.active[j]) continue;
            const double v = dot(q, doc.embeddings.row(j), d);
            if (best_j < 0 || v > best) {  // strict > keeps the lowest tied index
                best = v;
                best_j = j;
            }
        }
        const double* drow = doc.embeddings.row(best_j);
        double* dqrow = dq.row(i);
        double* ddrow = dd.row(best_j);
        for (int c = 0; c < d; ++c) {
            dqrow[c] += drow[c];
            ddrow[c] += q[c];
        }
    }
    return {std::move(dq), std::move(dd)};
}

void write_token_matrix(BinaryWriter& out, const TokenMatrix& m) {
    // the formats store an inactive prefix length, so validate the shape
    int inactive_prefix = 0;
    while (inactive_prefix < m.n_rows() && !m.active[inactive_prefix]) ++inactive_prefix;
    for (int i = inactive_prefix; i < m.n_rows(); ++i) {
        if (!m.active[i]) {
            throw InputError("write_token_matrix: inactive rows must form a prefix");
        }
    }
    out.bytes(kFeatureMagic, 4);
    out.u8(kKindTokenMatrix);
    out.u32(static_cast<std::uint32_t>(m.embeddings.rows()));
    out.u32(static_cast<std::uint32_t>(m.embeddings.cols()));
    out.u32(static_cast<std::uint32_t>(inactive_prefix));
    for (int r = 0; r < m.embeddings.rows(); ++r) {
        const double* src = m.embeddings.row(r);
        for (int c = 0; c < m.embeddings.cols(); ++c) out.f32(static_cast<float>(src[c]));
    }
}

TokenMatrix read_token_matrix(BinaryReader& in) {
    const std::uint64_t start = in.offset();
    char magic[4];
    in.bytes(magic, 4);
    if (std::memcmp(magic, kFeatureMagic, 4) != 0) {
        throw FormatError(in.path() + ": bad magic at byte " + std::to_string(start));
    }
    const std::uint8_t kind = in.u8();
    if (kind != kKindTokenMatrix) {
        throw FormatError(in.path() + ": expected token matrix kind, got " +
                          std::to_string(kind));
    }
    const std::uint32_t rows = in.u32();
    const std::uint32_t cols = in.u32();
    const std::uint32_t inactive_prefix = in.u32();
    if (rows == 0 || cols == 0 || inactive_prefix > rows) {
        throw FormatError(in.path() + ": bad header fields at byte " + std::to_string(start + 5));
    }
    TokenMatrix m;
    m.embeddings = Matrix(static_cast<int>(rows), static_cast<int>(cols));
    for (std::uint32_t r = 0; r < rows; ++r) {
        double* dst = m.embeddings.row(static_cast<int>(r));
        for (std::uint32_t c = 0; c < cols; ++c) dst[c] = static_cast<double>(in.f32());
    }
    m.active.assign(rows, 1);
    for (std::uint32_t r = 0; r < inactive_prefix; ++r) m.active[r] = 0;
    return m;
}

void save_token_matrix(const std::string& path, const TokenMatrix& m) {
    BinaryWriter out(path);
    write_token_matrix(out, m);
    out.close();
}

TokenMatrix load_token_matrix(const std::string& path) {
    BinaryReader in(path);
    TokenMatrix m = read_token_matrix(in);
    in.expect_eof();
    return m;
}

Matrix quantize_f32(const Matrix& m) {
    Matrix out(m.rows(), m.cols());
    const double* src = m.data();
    double* dst = out.data();
    for (std::size_t i = 0; i < m.size(); ++i) dst[i] = static_cast<double>(static_cast<float>(src[i]));
    return out;
}

}  // namespace lateline
