#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "lateline/dataset.hpp"
#include "lateline/mapping.hpp"

namespace lateline {

/// Generator settings for a retrieval task with a planted optimum: each
/// query's image (and question) carries a latent tied to its gold document's
/// entity token, mixed with `noise` parts of seeded Gaussian noise.
struct SyntheticSpec {
    std::string name = "synth";
    int n_docs = 100;
    int n_queries = 50;  // training split
    int n_val = 0;       // held-out split; n_queries + n_val <= n_docs
    int n_corpora = 2;
    int n_patches = 4;
    int n_filler_tokens = 6;  // noise tokens per document
    double noise = 0.0;       // [0, 1)
    double share_i2t = 0.0;
    double share_q2t = 0.0;
    double share_iq2t = 1.0;
    std::uint64_t seed = 1;
    EncoderConfig enc;
    std::vector<std::string> instruction_templates;  // empty = generic defaults
};

/// Builds the task under out_dir (manifest + JSONL + image feature files) and
/// returns the loaded dataset. Gold assignment is a bijection from queries
/// onto distinct documents spread over n_corpora corpora; same seed, same
/// bytes.
Dataset generate(const SyntheticSpec& spec, const std::string& out_dir);

/// The fixed mixing matrices (d_L x d_V) that embed a document entity's token
/// table row into image cls / patch space.
Matrix planted_cls_mixer(const SyntheticSpec& spec);
Matrix planted_patch_mixer(const SyntheticSpec& spec);

/// Overwrites the vision head with the closed-form optimum for the planted
/// structure: the MLP inverts the cls mixer and applies the document
/// projection, the transformer output is zeroed. Requires d_V >= d_L,
/// N_vt >= 2, and a freshly initialized (zero-bias) document projection.
void plant_optimal_mapping(Model& m, const SyntheticSpec& spec);

/// Expected R@1 of a uniformly random ranking on the dataset's evaluation
/// split: mean over queries of 1/corpus size.
double chance_rate(const Dataset& ds);

/// Two tasks over one shared corpus whose gold conventions conflict: task A
/// pairs each image with its own entity's document, task B with the next
/// entity's document. With distinct_instructions the two tasks carry
/// different instruction texts (the only signal separating them); without,
/// both use the same generic instruction.
struct ConflictSpec {
    int n_docs = 30;
    int n_train = 24;
    int n_val = 6;
    int n_patches = 4;
    int n_filler_tokens = 4;
    double noise = 0.05;
    std::uint64_t seed = 1;
    EncoderConfig enc;
    bool distinct_instructions = true;
};

std::pair<Dataset, Dataset> generate_conflicting_pair(const ConflictSpec& spec,
                                                      const std::string& out_dir);

}  // namespace lateline
