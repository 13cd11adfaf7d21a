#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "lateline/matrix.hpp"

namespace lateline {

/// Configuration of the frozen toy encoders. Real encoder outputs can be
/// substituted at any point through the feature file loader; everything
/// downstream only ever sees the feature matrices.
struct EncoderConfig {
    int d_text = 64;           // hidden size of the text encoder
    int d_vision = 96;         // hidden size of the vision encoder
    int vocab_size = 8192;
    std::uint64_t seed = 1;
    int max_tokens = 512;      // truncation length for text sequences

    bool operator==(const EncoderConfig&) const = default;
};

/// Per-token embeddings for one text sequence: instruction tokens first,
/// then question tokens. `token_ids` is populated by the toy encoder and
/// empty for features loaded from file.
struct TextFeatures {
    std::vector<std::uint32_t> token_ids;
    Matrix embeddings;     // N_q x d_text
    int instruction_len = 0;

    int n_tokens() const { return embeddings.rows(); }
};

/// [CLS] vector plus patch grid from the vision encoder.
struct ImageFeatures {
    Matrix cls;      // 1 x d_vision
    Matrix patches;  // N_V x d_vision
    bool is_blank = false;

    int n_patches() const { return patches.rows(); }
};

using Features = std::variant<TextFeatures, ImageFeatures>;

/// Whitespace + lowercase tokenizer; token id = FNV-1a hash mod vocab.
std::vector<std::string> tokenize(const std::string& text);
std::uint32_t token_id(const EncoderConfig& cfg, const std::string& token);

/// The fixed random projection table realizing the toy text encoder:
/// vocab_size x d_text, fully determined by (cfg.seed, cfg.d_text).
Matrix make_text_table(const EncoderConfig& cfg);

/// Embeds instruction + optional question against an explicit table. Used
/// directly by the trainer once the table becomes a parameter group.
TextFeatures encode_text_with_table(const Matrix& table, const EncoderConfig& cfg,
                                    const std::string& instruction,
                                    const std::optional<std::string>& question);

/// Deterministic toy text encoder over the canonical table.
TextFeatures toy_text_encode(const EncoderConfig& cfg, const std::string& instruction,
                             const std::optional<std::string>& question = std::nullopt);

/// Document text against an explicit table: plain content tokens only,
/// instruction_len stays 0.
TextFeatures encode_doc_with_table(const Matrix& table, const EncoderConfig& cfg,
                                   const std::string& text);

/// Deterministic toy vision encoder: a rolling hash of the image bytes
/// seeds the projection of cls and every patch row.
ImageFeatures toy_vision_encode(const EncoderConfig& cfg, const std::string& image_bytes,
                                int n_patches);

/// All-zero image features, the canonical "no image" input.
ImageFeatures blank_image(const EncoderConfig& cfg, int n_patches);

// Binary feature file: magic "LLE1", u8 kind (0=text, 1=image, 2=token
// matrix), u32 rows, u32 cols, u32 instruction_len (or inactive-prefix
// length for kind 2, zero otherwise), rows*cols float32 LE row-major.
// Image kind stores cls as the first row, patches after.
inline constexpr char kFeatureMagic[4] = {'L', 'L', 'E', '1'};
inline constexpr std::uint8_t kKindText = 0;
inline constexpr std::uint8_t kKindImage = 1;
inline constexpr std::uint8_t kKindTokenMatrix = 2;

void save_features(const std::string& path, const TextFeatures& f);
void save_features(const std::string& path, const ImageFeatures& f);
Features load_features(const std::string& path);

}  // namespace lateline
