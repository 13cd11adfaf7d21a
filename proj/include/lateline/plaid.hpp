#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "lateline/late_interaction.hpp"

namespace lateline {

struct Posting {
    std::uint32_t doc = 0;  // dense index into doc_ids
    std::uint16_t row = 0;
};

/// Two-phase retrieval index: token-level centroids route each query row to
/// candidate documents, exact relevance re-ranks them. Documents are stored
/// in doc-id order; all embeddings (docs and centroids) are rounded through
/// float32 at build so a saved index searches identically after reload.
struct PlaidIndex {
    Matrix centroids;                            // K x d_h, unit rows
    std::vector<std::vector<Posting>> postings;  // one list per centroid
    std::vector<std::string> doc_ids;            // ascending
    std::vector<TokenMatrix> doc_store;          // parallel to doc_ids
    std::map<std::string, int> by_id;
    std::uint64_t seed = 0;
    int kmeans_iters = 0;

    int n_centroids() const { return centroids.rows(); }
    int doc_count() const { return static_cast<int>(doc_ids.size()); }
    int dim() const { return centroids.cols(); }
    const TokenMatrix* find(const std::string& doc_id) const;
};

struct SearchParams {
    int k = 10;
    int nprobe = 2;                // centroids scanned per active query row
    long long candidate_cap = 0;   // max docs re-ranked; 0 = no cap
};

struct SearchHit {
    std::string doc_id;
    double score = 0.0;
};

/// Centroid count heuristic: ceil(4 * sqrt(total active tokens)), clamped to
/// the token count.
int default_centroid_count(long long total_tokens);

/// Builds the index with spherical k-means over all active doc token rows:
/// k-means++ seeding, Lloyd refinement, assignment by max dot product.
/// Deterministic given the seed. K = 0 picks default_centroid_count(tokens).
PlaidIndex build_index(const std::vector<std::pair<std::string, TokenMatrix>>& docs, int K = 0,
                       std::uint64_t seed = 1, int iters = 10);

/// Stage A: per active query row, probe the top-nprobe centroids by dot
/// product and union their posting lists; if candidate_cap is set, keep the
/// best docs by the probed-centroid score surrogate. Stage B: exact
/// relevance on the candidates. Sorted by (score desc, doc id asc).
std::vector<SearchHit> search(const PlaidIndex& idx, const TokenMatrix& query,
                              const SearchParams& p);

/// Brute-force relevance over the whole store; same ordering rule as search.
std::vector<SearchHit> exact_search(const PlaidIndex& idx, const TokenMatrix& query, int k);

void save_index(const std::string& path, const PlaidIndex& idx);
PlaidIndex load_index(const std::string& path);

}  // namespace lateline
