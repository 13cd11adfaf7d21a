#pragma once

#include <optional>
#include <string>
#include <vector>

#include "lateline/embeddings.hpp"
#include "lateline/late_interaction.hpp"
#include "lateline/matrix.hpp"

namespace lateline {

// Exact GELU and its derivative, shared by the heads and by test oracles.
double gelu(double x);
double gelu_prime(double x);

inline constexpr double kLayerNormEps = 1e-5;

/// Affine map out = x * W + b, with b stored as a 1 x cols matrix.
struct Affine {
    Matrix W;
    Matrix b;
};

/// Two-layer head turning the vision [CLS] vector into N_vt visual token
/// embeddings: d_V -> N_vt*d_h/2 -> N_vt*d_h, GELU between, reshaped.
struct MlpHeadParams {
    Matrix W1;  // d_V x N_vt*d_h/2
    Matrix b1;  // 1 x N_vt*d_h/2
    Matrix W2;  // N_vt*d_h/2 x N_vt*d_h
    Matrix b2;  // 1 x N_vt*d_h
};

/// One pre-norm cross-attention layer. Queries come from the patch stream,
/// keys/values from the raw text features; no biases on the projections.
struct CrossAttnLayerParams {
    Matrix ln1_scale, ln1_shift;  // 1 x d_L
    Matrix Wq, Wk, Wv, Wo;        // d_L x d_L
    Matrix ln2_scale, ln2_shift;  // 1 x d_L
    Matrix Wff1;                  // d_L x 4*d_L
    Matrix Wff2;                  // 4*d_L x d_L
};

struct MappingParams {
    MlpHeadParams mlp;
    std::vector<CrossAttnLayerParams> tr_layers;
    Affine fv;      // patch adapter, d_V -> d_L
    Affine tr_out;  // transformer head output projection, d_L -> d_h
    Affine fl;      // text projection, d_L -> d_h
};

/// Gradient accumulator, shape-congruent with MappingParams.
struct ParamGradients {
    MlpHeadParams mlp;
    std::vector<CrossAttnLayerParams> tr_layers;
    Affine fv;
    Affine tr_out;
    Affine fl;
};

struct MappingDims {
    int d_V = 0;
    int d_L = 0;
    int d_h = 0;
    int n_vt = 0;
    int n_tr = 0;
};

MappingDims dims_of(const MappingParams& p);

/// Seeded Gaussian init (scale 1/sqrt(fan_in)), zero biases, identity layer
/// norms. Throws ConfigError when n_vt*d_h is odd or any dim < 1.
MappingParams init_mapping(const MappingDims& dims, Rng& rng);

ParamGradients zero_gradients(const MappingParams& p);

// ---- forward tapes -------------------------------------------------------

struct LayerNormTape {
    Matrix xhat;
    std::vector<double> inv_std;
};

struct MlpTape {
    Matrix cls;
    Matrix h1;   // pre-GELU
    Matrix g1;   // post-GELU
};

struct AttnLayerTape {
    Matrix x_in;
    LayerNormTape ln1;
    Matrix xn;         // post ln1
    Matrix q, k, v;    // projected streams
    Matrix attn;       // softmax weights, N_V x N_q
    Matrix av;         // attn * v
    Matrix x_mid;      // after attention residual
    LayerNormTape ln2;
    Matrix xn2;
    Matrix ff_pre;     // pre-GELU
    Matrix ff_act;     // post-GELU
};

struct CrossAttnTape {
    Matrix patches;
    Matrix text;
    Matrix x0;  // after fv
    std::vector<AttnLayerTape> layers;
    Matrix x_final;
};

struct QueryTape {
    Matrix text_raw;   // N_q x d_L toy-encoder output
    Matrix fl_pre;     // text rows before row normalization
    MlpTape mlp;
    Matrix mlp_pre;
    CrossAttnTape tr;
    Matrix tr_pre;
};

struct DocTape {
    Matrix text_raw;
    Matrix pre;
};

// ---- forward passes ------------------------------------------------------

/// cls (1 x d_V) through both affine layers with GELU between, reshaped to
/// n_vt x d_h where d_h = W2.cols / n_vt.
Matrix mlp_head_forward(const MlpHeadParams& p, const Matrix& cls, int n_vt,
                        MlpTape* tape = nullptr);

/// Patch stream adapted to d_L, N_TR pre-norm cross-attention + feed-forward
/// layers over the text keys, then projected to d_h. Throws InputError when
/// the text has no tokens.
Matrix cross_attn_forward(const MappingParams& p, const Matrix& patches, const Matrix& text,
                          CrossAttnTape* tape = nullptr);

/// Assembles [Q_q | Q_mlp | Q_tr]: fl-projected text rows, MLP-head rows,
/// transformer-head rows, each row L2-normalized. The active mask clears the
/// instruction prefix always, and every text row under stage1_text_mask; the
/// cross-attention keys still cover the full text either way.
TokenMatrix assemble_query(const MappingParams& p, const TextFeatures& txt,
                           const ImageFeatures& img, bool stage1_text_mask = false,
                           QueryTape* tape = nullptr);

TokenMatrix project_document(const Affine& fl, const TextFeatures& doc_txt,
                             DocTape* tape = nullptr);
TokenMatrix project_document(const MappingParams& p, const TextFeatures& doc_txt,
                             DocTape* tape = nullptr);

// ---- backward passes -----------------------------------------------------

struct QueryBackward {
    ParamGradients grads;
    Matrix dtext;     // gradient into the raw text features (both fl and key/value paths)
    Matrix dcls;
    Matrix dpatches;
};

/// Reverse-mode gradients for a recorded assemble_query call. upstream is the
/// loss gradient w.r.t. the assembled (normalized) embedding rows.
QueryBackward assemble_backward(const MappingParams& p, const QueryTape& tape,
                                const Matrix& upstream);

struct DocBackward {
    Affine grad_fl;
    Matrix dtext;
};

DocBackward project_backward(const Affine& fl, const DocTape& tape, const Matrix& upstream);

// ---- model bundle and checkpoints ----------------------------------------

/// Everything trainable plus the encoder settings. The document side keeps
/// its own fl projection and token table; training keeps them bit-identical
/// to the query side until a stage unties them.
struct Model {
    MappingDims dims;
    EncoderConfig enc;
    MappingParams map;
    Affine fl_doc;
    Matrix enc_table_q;  // vocab x d_L
    Matrix enc_table_d;
};

Model init_model(const MappingDims& dims, const EncoderConfig& enc);

void save_checkpoint(const std::string& path, const Model& m);
Model load_checkpoint(const std::string& path);

}  // namespace lateline
