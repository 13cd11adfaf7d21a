#include "lateline/embeddings.hpp"

#include <cctype>
#include <cmath>
#include <cstring>

#include "lateline/errors.hpp"
#include "lateline/io.hpp"

namespace lateline {

namespace {

constexpr std::uint64_t kTextTableSalt = 0x74657874ULL;   // per-stream salts
constexpr std::uint64_t kVisionClsSalt = 0x76636c73ULL;
constexpr std::uint64_t kVisionPatchSalt = 0x76706174ULL;

Matrix matrix_from_rows_f32(BinaryReader& in, int rows, int cols) {
    Matrix m(rows, cols);
    for (int r = 0; r < rows; ++r) {
        double* dst = m.row(r);
        for (int c = 0; c < cols; ++c) dst[c] = static_cast<double>(in.f32());
    }
    return m;
}

void write_matrix_f32(BinaryWriter& out, const Matrix& m) {
    for (int r = 0; r < m.rows(); ++r) {
        const double* src = m.row(r);
        for (int c = 0; c < m.cols(); ++c) out.f32(static_cast<float>(src[c]));
    }
}

void write_header(BinaryWriter& out, std::uint8_t kind, int rows, int cols, int instr_len) {
    out.bytes(kFeatureMagic, 4);
    out.u8(kind);
    out.u32(static_cast<std::uint32_t>(rows));
    out.u32(static_cast<std::uint32_t>(cols));
    out.u32(static_cast<std::uint32_t>(instr_len));
}

}  // namespace

std::vector<std::string> tokenize(const std::string& text) {
    std::vector<std::string> tokens;
    std::string cur;
    for (unsigned char ch : text) {
        if (std::isspace(ch)) {
            if (!cur.empty()) tokens.push_back(std::move(cur)), cur.clear();
        } else {
            cur.push_back(static_cast<char>(std::tolower(ch)));
        }
    }
    if (!cur.empty()) tokens.push_back(std::move(cur));
    return tokens;
}

std::uint32_t token_id(const EncoderConfig& cfg, const std::string& token) {
    return static_cast<std::uint32_t>(fnv1a64(token.data(), token.size()) %
                                      static_cast<std::uint64_t>(cfg.vocab_size));
}

Matrix make_text_table(const EncoderConfig& cfg) {
    Rng rng(mix_seed(cfg.seed, kTextTableSalt));
    return Matrix::gaussian(cfg.vocab_size, cfg.d_text, rng, 1.0 / std::sqrt(cfg.d_text));
}

TextFeatures encode_text_with_table(const Matrix& table, const EncoderConfig& cfg,
                                    const std::string& instruction,
                                    const std::optional<std::string>& question) {
    const auto instr_tokens = tokenize(instruction);
    if (instr_tokens.empty()) throw InputError("toy_text_encode: instruction is empty");

    std::vector<std::string> tokens = instr_tokens;
    if (question) {
        auto q = tokenize(*question);
        tokens.insert(tokens.end(), q.begin(), q.end());
    }
    if (static_cast<int>(tokens.size()) > cfg.max_tokens) tokens.resize(cfg.max_tokens);

    TextFeatures f;
    f.instruction_len = static_cast<int>(std::min(instr_tokens.size(), tokens.size()));
    f.embeddings = Matrix(static_cast<int>(tokens.size()), cfg.d_text);
    f.token_ids.reserve(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const std::uint32_t id = token_id(cfg, tokens[i]);
        f.token_ids.push_back(id);
        const double* src = table.row(static_cast<int>(id));
        double* dst = f.embeddings.row(static_cast<int>(i));
        for (int c = 0; c < cfg.d_text; ++c) dst[c] = src[c];
    }
    return f;
}

TextFeatures toy_text_encode(const EncoderConfig& cfg, const std::string& instruction,
                             const std::optional<std::string>& question) {
    return encode_text_with_table(make_text_table(cfg), cfg, instruction, question);
}

TextFeatures encode_doc_with_table(const Matrix& table, const EncoderConfig& cfg,
                                   const std::string& text) {
    auto tokens = tokenize(text);
    if (tokens.empty()) throw InputError("encode_doc_with_table: document text is empty");
    if (static_cast<int>(tokens.size()) > cfg.max_tokens) tokens.resize(cfg.max_tokens);

    TextFeatures f;
    f.instruction_len = 0;
    f.embeddings = Matrix(static_cast<int>(tokens.size()), cfg.d_text);
    f.token_ids.reserve(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const std::uint32_t id = token_id(cfg, tokens[i]);
        f.token_ids.push_back(id);
        const double* src = table.row(static_cast<int>(id));
        double* dst = f.embeddings.row(static_cast<int>(i));
        for (int c = 0; c < cfg.d_text; ++c) dst[c] = src[c];
    }
    return f;
}

ImageFeatures toy_vision_encode(const EncoderConfig& cfg, const std::string& image_bytes,
                                int n_patches) {
    if (n_patches < 1) throw InputError("toy_vision_encode: n_patches must be >= 1");
    const std::uint64_t content = fnv1a64(image_bytes.data(), image_bytes.size());
    const double scale = 1.0 / std::sqrt(cfg.d_vision);

    ImageFeatures f;
    Rng cls_rng(mix_seed(cfg.seed ^ content, kVisionClsSalt));
    f.cls = Matrix::gaussian(1, cfg.d_vision, cls_rng, scale);
    f.patches = Matrix(n_patches, cfg.d_vision);
    for (int p = 0; p < n_patches; ++p) {
        Rng patch_rng(mix_seed(cfg.seed ^ content, kVisionPatchSalt + static_cast<std::uint64_t>(p)));
        double* dst = f.patches.row(p);
        for (int c = 0; c < cfg.d_vision; ++c) dst[c] = patch_rng.next_gaussian() * scale;
    }
    f.is_blank = false;
    return f;
}

ImageFeatures blank_image(const EncoderConfig& cfg, int n_patches) {
    ImageFeatures f;
    f.cls = Matrix(1, cfg.d_vision);
    f.patches = Matrix(n_patches < 1 ? 1 : n_patches, cfg.d_vision);
    f.is_blank = true;
    return f;
}

void save_features(const std::string& path, const TextFeatures& f) {
    BinaryWriter out(path);
    write_header(out, kKindText, f.embeddings.rows(), f.embeddings.cols(), f.instruction_len);
    write_matrix_f32(out, f.embeddings);
    out.close();
}

void save_features(const std::string& path, const ImageFeatures& f) {
    BinaryWriter out(path);
    write_header(out, kKindImage, 1 + f.patches.rows(), f.patches.cols(), 0);
    write_matrix_f32(out, f.cls);
    write_matrix_f32(out, f.patches);
    out.close();
}

Features load_features(const std::string& path) {
    BinaryReader in(path);
    char magic[4];
    in.bytes(magic, 4);
    if (std::memcmp(magic, kFeatureMagic, 4) != 0) {
        throw FormatError(path + ": bad magic at byte 0");
    }
    const std::uint8_t kind = in.u8();
    const std::uint32_t rows = in.u32();
    const std::uint32_t cols = in.u32();
    const std::uint32_t instr_len = in.u32();
    constexpr std::uint32_t kDimLimit = 1u << 24;
    if (rows == 0 || cols == 0 || rows > kDimLimit || cols > kDimLimit) {
        throw FormatError(path + ": implausible dimensions " + std::to_string(rows) + "x" +
                          std::to_string(cols) + " in header at byte 5");
    }

    if (kind == kKindText) {
        if (instr_len > rows) {
            throw FormatError(path + ": instruction_len " + std::to_string(instr_len) +
                              " exceeds row count at byte 13");
        }
        TextFeatures f;
        f.embeddings = matrix_from_rows_f32(in, static_cast<int>(rows), static_cast<int>(cols));
        f.instruction_len = static_cast<int>(instr_len);
        in.expect_eof();
        return f;
    }
    if (kind == kKindImage) {
        if (rows < 2) {
            throw FormatError(path + ": image features need cls plus at least one patch row");
        }
        ImageFeatures f;
        f.cls = matrix_from_rows_f32(in, 1, static_cast<int>(cols));
        f.patches = matrix_from_rows_f32(in, static_cast<int>(rows) - 1, static_cast<int>(cols));
        in.expect_eof();
        bool all_zero = true;
        for (std::size_t i = 0; i < f.cls.size() && all_zero; ++i) all_zero = f.cls.data()[i] == 0.0;
        for (std::size_t i = 0; i < f.patches.size() && all_zero; ++i) all_zero = f.patches.data()[i] == 0.0;
        f.is_blank = all_zero;
        return f;
    }
    throw FormatError(path + ": unknown feature kind " + std::to_string(kind) + " at byte 4");
}

}  // namespace lateline
