#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lateline/embeddings.hpp"

namespace lateline {

enum class Task { I2T, Q2T, IQ2T };

std::string to_string(Task t);
Task parse_task(const std::string& s);

struct ImageRef {
    enum class Kind { Blank, Path } kind = Kind::Blank;
    std::string path;
    bool blank() const { return kind == Kind::Blank; }
};

/// One benchmark query. Task invariants: I2T carries no question, Q2T a blank
/// image, IQ2T both a question and a real image.
struct QueryInput {
    std::string query_id;
    std::string dataset;
    Task task = Task::IQ2T;
    std::string instruction;  // instruction text proper, question kept separate
    std::optional<std::string> question;
    ImageRef image;
    std::vector<std::string> gold_doc_ids;
    std::vector<std::string> gold_answers;
    std::string corpus_id;
};

struct CorpusDoc {
    std::string doc_id;
    std::string text;
};

struct Corpus {
    std::string corpus_id;
    std::vector<CorpusDoc> docs;
    std::map<std::string, int> by_id;
    const CorpusDoc* find(const std::string& doc_id) const;
};

struct Dataset {
    std::string name;
    std::vector<QueryInput> queries;
    std::vector<QueryInput> queries_val;
    std::map<std::string, Corpus> corpora;
    std::vector<std::string> instruction_templates;  // manifest override, may be empty
    int n_patches = 4;
};

/// Per-dataset instruction template lists; <Question> marks where the
/// question is appended.
struct InstructionRegistry {
    std::map<std::string, std::vector<std::string>> templates;
    static const InstructionRegistry& builtin();
    const std::vector<std::string>& list_for(const std::string& dataset) const;
};

inline constexpr const char* kQuestionPlaceholder = "<Question>";

/// Seeded uniform template pick for a dataset (raw template, placeholder intact).
std::string pick_template(const std::vector<std::string>& templates, std::uint64_t seed);

/// Template pick with the <Question> placeholder substituted when a question
/// exists; without one the template comes back unchanged.
std::string sample_instruction(const InstructionRegistry& reg, const std::string& dataset,
                               const std::optional<std::string>& question, std::uint64_t seed);

/// The instruction part of a template: everything before the <Question>
/// placeholder, trimmed; the whole template when there is no placeholder.
std::string instruction_prefix(const std::string& tpl);

/// Loads a dataset manifest (JSON) plus its query/corpus JSONL files.
/// Instructions are sampled per query from the manifest override or the
/// built-in registry, seeded by (seed, query_id). Schema violations raise
/// FormatError naming the file, line, and field.
Dataset load_m2kr(const std::string& manifest_path, std::uint64_t seed = 1);

/// Writes manifest + JSONL files under dir so load_m2kr round-trips.
void write_m2kr(const std::string& dir, const Dataset& ds);

// ---- feature bridging ------------------------------------------------------

/// Instruction + question tokens through the trainable token table; the
/// instruction span is recorded for masking.
TextFeatures query_text_features(const Matrix& table, const EncoderConfig& cfg,
                                 const QueryInput& q);

/// Blank queries get zero features; a path is loaded as a stored feature file
/// when it carries the feature magic, otherwise hashed through the toy vision
/// encoder.
ImageFeatures query_image_features(const EncoderConfig& cfg, const QueryInput& q, int n_patches);

// ---- contamination ---------------------------------------------------------

struct Collision {
    std::string digest;
    std::vector<std::string> train_refs;
    std::vector<std::string> test_refs;
};

std::string md5_hex_file(const std::string& path);

/// MD5 digest per image file; reports every digest appearing on both sides.
std::vector<Collision> contamination_check(const std::vector<std::string>& train_image_refs,
                                           const std::vector<std::string>& test_image_refs);

}  // namespace lateline
