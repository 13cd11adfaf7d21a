#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "lateline/matrix.hpp"

namespace lateline {

/// Per-token embeddings plus an active-row mask. Masked rows are excluded
/// from scoring entirely; their values do not matter.
struct TokenMatrix {
    Matrix embeddings;            // L x d
    std::vector<std::uint8_t> active;  // length L, 1 = participates in scoring

    int n_rows() const { return embeddings.rows(); }
    int dim() const { return embeddings.cols(); }
    int n_active() const;

    static TokenMatrix all_active(Matrix m);
};

/// Sum over active query rows of the maximum dot product against active
/// document rows. Throws InputError when either side has no active row.
double relevance(const TokenMatrix& query, const TokenMatrix& doc);

struct ScoreMatrix {
    Matrix values;  // n_queries x n_docs
};

/// values[i][j] = relevance(queries[i], docs[j]); plain loop, bit-identical
/// to the scalar call.
ScoreMatrix relevance_batch(const std::vector<TokenMatrix>& queries,
                            const std::vector<TokenMatrix>& docs);

/// Subgradient of relevance: each active query row routes its gradient to
/// the argmax document row, ties broken toward the lowest row index.
/// Masked rows on either side receive zero gradient.
std::pair<Matrix, Matrix> relevance_gradient(const TokenMatrix& query, const TokenMatrix& doc);

// Token matrix file I/O (feature format kind 2). The inactive rows of every
// matrix produced in this codebase form a prefix, so the header's length
// field stores the inactive prefix size. Payload is float32.
void save_token_matrix(const std::string& path, const TokenMatrix& m);
TokenMatrix load_token_matrix(const std::string& path);

// Stream forms, used when a token matrix is embedded inside a larger file
// (same byte layout as the standalone file).
class BinaryWriter;
class BinaryReader;
void write_token_matrix(BinaryWriter& out, const TokenMatrix& m);
TokenMatrix read_token_matrix(BinaryReader& in);

/// Rounds every entry through float32, the value precision used by index
/// and feature files.
Matrix quantize_f32(const Matrix& m);

}  // namespace lateline
