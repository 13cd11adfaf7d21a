#include "lateline/dataset.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cctype>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "lateline/errors.hpp"
#include "lateline/log.hpp"
#include "lateline/rng.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace lateline {

std::string to_string(Task t) {
    switch (t) {
        case Task::I2T: return "I2T";
        case Task::Q2T: return "Q2T";
        case Task::IQ2T: return "IQ2T";
    }
    return "IQ2T";
}

Task parse_task(const std::string& s) {
    if (s == "I2T") return Task::I2T;
    if (s == "Q2T") return Task::Q2T;
    if (s == "IQ2T") return Task::IQ2T;
    throw FormatError("unknown task '" + s + "', expected I2T, Q2T, or IQ2T");
}

const CorpusDoc* Corpus::find(const std::string& doc_id) const {
    auto it = by_id.find(doc_id);
    return it == by_id.end() ? nullptr : &docs[static_cast<std::size_t>(it->second)];
}

const InstructionRegistry& InstructionRegistry::builtin() {
    static const InstructionRegistry reg = [] {
        InstructionRegistry r;
        const std::vector<std::string> wit = {
            "Identify the document that is connected to this image.",
            "Provide information about the document linked to this image.",
            "Please describe the document that corresponds to this image.",
            "What is the document that this image is related to?",
            "Could you elucidate the document associated with this image?",
            "Describe the document that accompanies this image.",
            "Please give information on the document that goes with this image.",
            "What document is represented by this image?",
            "Identify the document that this image pertains to.",
        };
        r.templates["wit"] = wit;
        r.templates["iglue"] = wit;
        r.templates["kvqa"] = {
            "Provide a brief description of the image and the relevant details of the person "
            "in the image.",
        };
        r.templates["cc3m"] = {
            "Describe the image concisely.",
            "Provide a brief description of the given image.",
            "Offer a succinct explanation of the picture presented.",
            "Summarize the visual content of the image.",
            "Give a short and clear explanation of the subsequent image.",
            "Share a concise interpretation of the image provided.",
            "Present a compact description of the photo's key features.",
            "Relay a brief, clear account of the picture shown.",
            "Render a clear and concise summary of the photo.",
            "Write a terse but informative summary of the picture.",
            "Create a compact narrative representing the image presented.",
        };
        r.templates["msmarco"] = {
            "Retrieve the document that answers this question. <Question>",
            "Find the document that is most relevant to the question. <Question>",
            "Obtain the document that resolves this query. <Question>",
            "Acquire the document that elucidates this question. <Question>",
            "Choose the document most relevant to the query. <Question>",
            "Identify the document most applicable to the question. <Question>",
            "Extract the document that answers this query. <Question>",
            "Locate the document that addresses the query. <Question>",
        };
        r.templates["llava"] = {
            "Provide a brief description of the image along with the following question: "
            "<Question>",
            "Provide a concise explanation of the image along with the following question: "
            "<Question>",
        };
        const std::vector<std::string> kbvqa = {
            "Using the provided image, obtain documents that address the subsequent question: "
            "<Question>",
            "Retrieve documents that provide an answer to the question alongside the image: "
            "<Question>",
            "Extract documents linked to the question provided in conjunction with the image: "
            "<Question>",
            "Utilizing the given image, obtain documents that respond to the following "
            "question: <Question>",
            "Using the given image, access documents that provide insights into the following "
            "question: <Question>",
            "Obtain documents that correspond to the inquiry alongside the provided image: "
            "<Question>",
            "With the provided image, gather documents that offer a solution to the question: "
            "<Question>",
            "Utilizing the given image, obtain documents that respond to the following "
            "question: <Question>",
        };
        r.templates["oven"] = kbvqa;
        r.templates["infoseek"] = kbvqa;
        r.templates["evqa"] = kbvqa;
        r.templates["okvqa"] = kbvqa;
        return r;
    }();
    return reg;
}

const std::vector<std::string>& InstructionRegistry::list_for(const std::string& dataset) const {
    auto it = templates.find(dataset);
    if (it == templates.end() || it->second.empty()) {
        throw InputError("no instruction templates registered for dataset '" + dataset + "'");
    }
    return it->second;
}

std::string pick_template(const std::vector<std::string>& templates, std::uint64_t seed) {
    if (templates.empty()) throw InputError("pick_template: empty template list");
    Rng rng(seed);
    return templates[static_cast<std::size_t>(rng.next_below(templates.size()))];
}

std::string sample_instruction(const InstructionRegistry& reg, const std::string& dataset,
                               const std::optional<std::string>& question, std::uint64_t seed) {
    std::string tpl = pick_template(reg.list_for(dataset), seed);
    if (question) {
        const auto pos = tpl.find(kQuestionPlaceholder);
        if (pos != std::string::npos) {
            tpl = tpl.substr(0, pos) + *question + tpl.substr(pos + std::strlen(kQuestionPlaceholder));
        }
    }
    return tpl;
}

std::string instruction_prefix(const std::string& tpl) {
    std::string out = tpl;
    const auto pos = out.find(kQuestionPlaceholder);
    if (pos != std::string::npos) out = out.substr(0, pos);
    while (!out.empty() && (out.back() == ' ' || out.back() == '\t')) out.pop_back();
    return out;
}

namespace {

std::string locate(const std::string& file, int line) {
    return file + " line " + std::to_string(line);
}

const json& require_field(const json& j, const char* field, const std::string& where) {
    auto it = j.find(field);
    if (it == j.end()) {
        throw FormatError(where + ": missing field '" + field + "'");
    }
    return *it;
}

std::string require_string(const json& j, const char* field, const std::string& where) {
    const json& v = require_field(j, field, where);
    if (!v.is_string() || v.get<std::string>().empty()) {
        throw FormatError(where + ": field '" + field + "' must be a non-empty string");
    }
    return v.get<std::string>();
}

std::vector<std::string> require_string_array(const json& j, const char* field,
                                              const std::string& where) {
    const json& v = require_field(j, field, where);
    if (!v.is_array()) throw FormatError(where + ": field '" + field + "' must be an array");
    std::vector<std::string> out;
    for (const auto& e : v) {
        if (!e.is_string()) {
            throw FormatError(where + ": field '" + field + "' must contain only strings");
        }
        out.push_back(e.get<std::string>());
    }
    return out;
}

bool whitespace_only(const std::string& s) {
    return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); });
}

QueryInput parse_query_record(const json& j, const std::string& where, const fs::path& root) {
    QueryInput q;
    q.query_id = require_string(j, "query_id", where);
    try {
        q.task = parse_task(require_string(j, "task", where));
    } catch (const FormatError& e) {
        const std::string msg = e.what();
        if (msg.rfind(where, 0) == 0) throw;
        throw FormatError(where + ": " + msg);
    }
    q.dataset = require_string(j, "dataset", where);
    q.corpus_id = require_string(j, "corpus_id", where);
    q.gold_doc_ids = require_string_array(j, "gold_doc_ids", where);
    q.gold_answers = require_string_array(j, "gold_answers", where);

    if (auto it = j.find("question"); it != j.end() && !it->is_null()) {
        if (!it->is_string()) throw FormatError(where + ": field 'question' must be a string");
        q.question = it->get<std::string>();
    }
    if (auto it = j.find("image"); it != j.end() && !it->is_null()) {
        const json& img = *it;
        if (!img.is_object()) throw FormatError(where + ": field 'image' must be an object");
        if (img.contains("path")) {
            if (!img["path"].is_string()) {
                throw FormatError(where + ": field 'image.path' must be a string");
            }
            q.image.kind = ImageRef::Kind::Path;
            q.image.path = (root / img["path"].get<std::string>()).string();
        } else if (img.value("blank", false)) {
            q.image.kind = ImageRef::Kind::Blank;
        } else {
            throw FormatError(where + ": field 'image' needs \"path\" or \"blank\": true");
        }
    }

    switch (q.task) {
        case Task::I2T:
            if (q.question) throw FormatError(where + ": I2T record must not carry 'question'");
            if (q.image.blank()) throw FormatError(where + ": I2T record needs an image path");
            break;
        case Task::Q2T:
            if (!q.question) throw FormatError(where + ": Q2T record needs 'question'");
            if (!q.image.blank()) {
                throw FormatError(where + ": Q2T record must not carry an image path");
            }
            break;
        case Task::IQ2T:
            if (!q.question) throw FormatError(where + ": IQ2T record needs 'question'");
            if (q.image.blank()) throw FormatError(where + ": IQ2T record needs an image path");
            break;
    }
    return q;
}

std::vector<QueryInput> load_query_file(const fs::path& path, const fs::path& root) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open query file " + path.string());
    std::vector<QueryInput> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (whitespace_only(line)) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw FormatError(locate(path.string(), lineno) + ": " + e.what());
        }
        out.push_back(parse_query_record(j, locate(path.string(), lineno), root));
    }
    return out;
}

Corpus load_corpus_file(const std::string& corpus_id, const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open corpus file " + path.string());
    Corpus c;
    c.corpus_id = corpus_id;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (whitespace_only(line)) continue;
        const std::string where = locate(path.string(), lineno);
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw FormatError(where + ": " + e.what());
        }
        CorpusDoc doc;
        doc.doc_id = require_string(j, "doc_id", where);
        doc.text = require_string(j, "text", where);
        if (whitespace_only(doc.text)) {
            throw FormatError(where + ": field 'text' must contain at least one token");
        }
        if (c.by_id.count(doc.doc_id)) {
            throw FormatError(where + ": duplicate doc_id '" + doc.doc_id + "'");
        }
        c.by_id[doc.doc_id] = static_cast<int>(c.docs.size());
        c.docs.push_back(std::move(doc));
    }
    return c;
}

void fill_instructions(Dataset& ds, std::vector<QueryInput>& queries, std::uint64_t seed) {
    const InstructionRegistry& builtin = InstructionRegistry::builtin();
    for (auto& q : queries) {
        const std::vector<std::string>* list = nullptr;
        if (!ds.instruction_templates.empty()) {
            list = &ds.instruction_templates;
        } else {
            list = &builtin.list_for(q.dataset);
        }
        const std::string tpl = pick_template(*list, mix_seed(seed, fnv1a64(q.query_id.data(),
                                                                            q.query_id.size())));
        q.instruction = instruction_prefix(tpl);
        if (q.instruction.empty()) {
            throw FormatError("dataset " + ds.name + ": template '" + tpl +
                              "' leaves query " + q.query_id + " without instruction text");
        }
    }
}

}  // namespace

Dataset load_m2kr(const std::string& manifest_path, std::uint64_t seed) {
    std::ifstream in(manifest_path);
    if (!in) throw IoError("cannot open manifest " + manifest_path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw FormatError(manifest_path + ": " + e.what());
    }
    const fs::path root = fs::path(manifest_path).parent_path();
    Dataset ds;
    ds.name = require_string(j, "dataset", manifest_path);
    if (auto it = j.find("n_patches"); it != j.end()) {
        if (!it->is_number_integer() || it->get<int>() < 1) {
            throw FormatError(manifest_path + ": field 'n_patches' must be a positive integer");
        }
        ds.n_patches = it->get<int>();
    }
    if (auto it = j.find("instructions"); it != j.end()) {
        if (!it->is_array() || it->empty()) {
            throw FormatError(manifest_path + ": field 'instructions' must be a non-empty array");
        }
        for (const auto& t : *it) {
            if (!t.is_string()) {
                throw FormatError(manifest_path + ": field 'instructions' must contain strings");
            }
            ds.instruction_templates.push_back(t.get<std::string>());
        }
    }
    const json& corpora = require_field(j, "corpora", manifest_path);
    if (!corpora.is_object() || corpora.empty()) {
        throw FormatError(manifest_path + ": field 'corpora' must be a non-empty object");
    }
    for (const auto& [cid, rel] : corpora.items()) {
        if (!rel.is_string()) {
            throw FormatError(manifest_path + ": corpus '" + cid + "' must map to a file path");
        }
        ds.corpora[cid] = load_corpus_file(cid, root / rel.get<std::string>());
    }
    ds.queries = load_query_file(root / require_string(j, "queries", manifest_path), root);
    if (auto it = j.find("queries_val"); it != j.end() && !it->is_null()) {
        if (!it->is_string()) {
            throw FormatError(manifest_path + ": field 'queries_val' must be a string");
        }
        ds.queries_val = load_query_file(root / it->get<std::string>(), root);
    }

    auto check_refs = [&](const std::vector<QueryInput>& qs, const char* which) {
        for (const auto& q : qs) {
            auto cit = ds.corpora.find(q.corpus_id);
            if (cit == ds.corpora.end()) {
                throw FormatError("dataset " + ds.name + ": " + which + " query " + q.query_id +
                                  " names unknown corpus '" + q.corpus_id + "'");
            }
            for (const auto& gid : q.gold_doc_ids) {
                if (!cit->second.find(gid)) {
                    throw FormatError("dataset " + ds.name + ": " + which + " query " +
                                      q.query_id + " gold doc '" + gid +
                                      "' missing from corpus '" + q.corpus_id + "'");
                }
            }
        }
    };
    check_refs(ds.queries, "train");
    check_refs(ds.queries_val, "val");

    fill_instructions(ds, ds.queries, seed);
    fill_instructions(ds, ds.queries_val, mix_seed(seed, 0x76616cULL));
    log_debug("loaded dataset " + ds.name + ": " + std::to_string(ds.queries.size()) +
              " queries, " + std::to_string(ds.corpora.size()) + " corpora");
    return ds;
}

namespace {

json query_to_json(const QueryInput& q) {
    json j;
    j["query_id"] = q.query_id;
    j["task"] = to_string(q.task);
    j["dataset"] = q.dataset;
    if (q.question) j["question"] = *q.question;
    if (!q.image.blank()) {
        j["image"] = {{"path", q.image.path}};
    } else if (q.task != Task::Q2T) {
        j["image"] = {{"blank", true}};
    }
    j["gold_doc_ids"] = q.gold_doc_ids;
    j["gold_answers"] = q.gold_answers;
    j["corpus_id"] = q.corpus_id;
    return j;
}

void write_jsonl(const fs::path& path, const std::vector<json>& records) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    for (const auto& r : records) out << r.dump() << "\n";
    if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace

void write_m2kr(const std::string& dir, const Dataset& ds) {
    const fs::path root(dir);
    std::error_code ec;
    fs::create_directories(root, ec);

    json manifest;
    manifest["dataset"] = ds.name;
    manifest["queries"] = "queries.jsonl";
    manifest["n_patches"] = ds.n_patches;
    if (!ds.instruction_templates.empty()) manifest["instructions"] = ds.instruction_templates;

    std::vector<json> qrecs;
    for (const auto& q : ds.queries) qrecs.push_back(query_to_json(q));
    write_jsonl(root / "queries.jsonl", qrecs);
    if (!ds.queries_val.empty()) {
        manifest["queries_val"] = "queries_val.jsonl";
        std::vector<json> vrecs;
        for (const auto& q : ds.queries_val) vrecs.push_back(query_to_json(q));
        write_jsonl(root / "queries_val.jsonl", vrecs);
    }
    json corpora = json::object();
    for (const auto& [cid, corpus] : ds.corpora) {
        const std::string rel = "corpus_" + cid + ".jsonl";
        corpora[cid] = rel;
        std::vector<json> drecs;
        for (const auto& d : corpus.docs) {
            drecs.push_back(json{{"doc_id", d.doc_id}, {"text", d.text}});
        }
        write_jsonl(root / rel, drecs);
    }
    manifest["corpora"] = corpora;

    std::ofstream out(root / "manifest.json");
    if (!out) throw IoError("cannot write " + (root / "manifest.json").string());
    out << manifest.dump(2) << "\n";
    if (!out) throw IoError("write failed for " + (root / "manifest.json").string());
}

TextFeatures query_text_features(const Matrix& table, const EncoderConfig& cfg,
                                 const QueryInput& q) {
    return encode_text_with_table(table, cfg, q.instruction, q.question);
}

ImageFeatures query_image_features(const EncoderConfig& cfg, const QueryInput& q, int n_patches) {
    if (q.image.blank()) return blank_image(cfg, n_patches);
    std::ifstream in(q.image.path, std::ios::binary);
    if (!in) throw IoError("cannot open image " + q.image.path + " for query " + q.query_id);
    std::ostringstream buf;
    buf << in.rdbuf();
    const std::string bytes = buf.str();
    if (bytes.size() >= 4 && std::memcmp(bytes.data(), kFeatureMagic, 4) == 0) {
        Features f = load_features(q.image.path);
        auto* img = std::get_if<ImageFeatures>(&f);
        if (!img) {
            throw FormatError("image ref " + q.image.path + " holds text features, not image");
        }
        if (img->cls.cols() != cfg.d_vision) {
            throw ShapeError("image features " + q.image.path + " have dim " +
                             std::to_string(img->cls.cols()) + ", encoder expects " +
                             std::to_string(cfg.d_vision));
        }
        return *img;
    }
    return toy_vision_encode(cfg, bytes, n_patches);
}

std::string md5_hex_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read image ref " + path);
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    if (!ctx || EVP_DigestInit_ex(ctx, EVP_md5(), nullptr) != 1) {
        if (ctx) EVP_MD_CTX_free(ctx);
        throw IoError("md5 init failed");
    }
    char buf[1 << 14];
    while (in) {
        in.read(buf, sizeof buf);
        const std::streamsize got = in.gcount();
        if (got > 0) EVP_DigestUpdate(ctx, buf, static_cast<std::size_t>(got));
    }
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx, digest, &len);
    EVP_MD_CTX_free(ctx);
    static const char* hex = "0123456789abcdef";
    std::string out;
    out.reserve(2 * len);
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 0xf]);
    }
    return out;
}

std::vector<Collision> contamination_check(const std::vector<std::string>& train_image_refs,
                                           const std::vector<std::string>& test_image_refs) {
    std::map<std::string, std::vector<std::string>> train_by_digest, test_by_digest;
    for (const auto& ref : train_image_refs) train_by_digest[md5_hex_file(ref)].push_back(ref);
    for (const auto& ref : test_image_refs) test_by_digest[md5_hex_file(ref)].push_back(ref);
    std::vector<Collision> out;
    for (const auto& [digest, trains] : train_by_digest) {
        auto it = test_by_digest.find(digest);
        if (it == test_by_digest.end()) continue;
        Collision c;
        c.digest = digest;
        c.train_refs = trains;
        c.test_refs = it->second;
        out.push_back(std::move(c));
    }
    return out;
}

}  // namespace lateline
