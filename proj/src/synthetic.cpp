#include "lateline/synthetic.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <set>

#include "lateline/errors.hpp"
#include "lateline/rng.hpp"

namespace fs = std::filesystem;

namespace lateline {

namespace {

constexpr std::uint64_t kClsMixSalt = 0x636c736d6978ULL;
constexpr std::uint64_t kPatchMixSalt = 0x706174636d7860ULL;
constexpr std::uint64_t kDocSalt = 0x646f63746f6bULL;
constexpr std::uint64_t kPickSalt = 0x656e7470636bULL;
constexpr std::uint64_t kTaskSalt = 0x7461736b6d78ULL;
constexpr std::uint64_t kImageSalt = 0x696d676e6f69ULL;
constexpr std::uint64_t kTextSalt = 0x7478746e6f69ULL;

constexpr const char* kFillerWords[] = {
    "amber",  "basalt", "cedar",  "dune",   "ember",  "fjord",  "garnet", "heath",
    "indigo", "juniper", "kelp",  "lichen", "marble", "nickel", "onyx",   "pumice",
    "quartz", "reed",   "slate",  "topaz",  "umber",  "vellum", "willow", "xenon",
    "yarrow", "zircon", "birch",  "copper", "delta",  "ochre",  "raffia", "tundra",
};
constexpr int kNumFillers = 32;

constexpr const char* kQuestionScaffold = "which entry matches";

std::vector<std::string> default_templates() {
    return {"Retrieve the entry that answers this query. <Question>",
            "Find the entry this refers to. <Question>",
            "Identify the matching entry. <Question>"};
}

std::string pad_id(const char* prefix, int i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s%06d", prefix, i);
    return buf;
}

struct TokenPool {
    const EncoderConfig* enc;
    std::set<std::uint32_t> used;

    void reserve_words(const std::string& text) {
        for (const auto& t : tokenize(text)) used.insert(token_id(*enc, t));
    }
    // Probe suffixes must vary by more than one repeated byte: the token id
    // keeps only the low hash bits, and the FNV step for a constant byte is a
    // bijection on those bits, so "x", "xx", ... walks a fixed short cycle of
    // buckets and can spin forever once that cycle is fully occupied.
    std::string unique(const std::string& base) {
        if (used.size() >= static_cast<std::size_t>(enc->vocab_size)) {
            throw ConfigError("token vocabulary exhausted; raise vocab_size or shrink the task");
        }
        std::string cand = base;
        for (int salt = 2; used.count(token_id(*enc, cand)); ++salt) {
            cand = base + "x" + std::to_string(salt);
        }
        used.insert(token_id(*enc, cand));
        return cand;
    }
};

std::string make_doc_text(const std::string& entity_token, int n_filler, Rng& rng) {
    std::string text = entity_token;
    for (int i = 0; i < n_filler; ++i) {
        text += " ";
        text += kFillerWords[rng.next_below(kNumFillers)];
    }
    return text;
}

void mix_row(double* dst, const double* signal, int d, double noise, double inv_sqrt_d,
             Rng& rng) {
    for (int j = 0; j < d; ++j) {
        dst[j] = (1.0 - noise) * signal[j] + noise * rng.next_gaussian() * inv_sqrt_d;
    }
}

ImageFeatures synth_image(const Matrix& table, std::uint32_t tok, const Matrix& g_cls,
                          const Matrix& g_patch, double noise, int n_patches, Rng& rng) {
    const int d_L = table.cols();
    const int d_V = g_cls.cols();
    Matrix t(1, d_L);
    const double* src = table.row(static_cast<int>(tok));
    for (int j = 0; j < d_L; ++j) t.at(0, j) = src[j];
    const Matrix sig_cls = matmul(t, g_cls);
    const Matrix sig_patch = matmul(t, g_patch);
    const double inv = 1.0 / std::sqrt(static_cast<double>(d_V));
    ImageFeatures img;
    img.is_blank = false;
    img.cls = Matrix(1, d_V);
    mix_row(img.cls.row(0), sig_cls.row(0), d_V, noise, inv, rng);
    img.patches = Matrix(n_patches, d_V);
    for (int p = 0; p < n_patches; ++p) {
        mix_row(img.patches.row(p), sig_patch.row(0), d_V, noise, inv, rng);
    }
    return img;
}

std::array<int, 3> mix_counts(int n, double s0, double s1, double s2) {
    const double total = s0 + s1 + s2;
    if (s0 < 0 || s1 < 0 || s2 < 0 || total <= 0) {
        throw ConfigError("task mix shares must be nonnegative and sum above zero");
    }
    const std::array<double, 3> share = {s0 / total, s1 / total, s2 / total};
    std::array<int, 3> out{};
    std::array<double, 3> frac{};
    int assigned = 0;
    for (int i = 0; i < 3; ++i) {
        const double exact = share[i] * n;
        out[i] = static_cast<int>(std::floor(exact));
        frac[i] = exact - out[i];
        assigned += out[i];
    }
    std::array<int, 3> order = {0, 1, 2};
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (frac[a] != frac[b]) return frac[a] > frac[b];
        return a < b;
    });
    for (int r = 0; r < n - assigned; ++r) ++out[order[r % 3]];
    return out;
}

void shuffle_ints(std::vector<int>& v, Rng& rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        const auto j = rng.next_below(i);
        std::swap(v[i - 1], v[static_cast<std::size_t>(j)]);
    }
}

Matrix mixer(const SyntheticSpec& spec, std::uint64_t salt) {
    Rng rng(mix_seed(spec.seed, salt));
    return Matrix::gaussian(spec.enc.d_text, spec.enc.d_vision, rng,
                            1.0 / std::sqrt(static_cast<double>(spec.enc.d_vision)));
}

// Solves A X = B in place (partial pivoting); A is square.
Matrix solve_linear(Matrix a, Matrix b) {
    const int n = a.rows();
    if (a.cols() != n || b.rows() != n) throw ShapeError("solve_linear: shape mismatch");
    for (int col = 0; col < n; ++col) {
        int pivot = col;
        double best = std::fabs(a.at(col, col));
        for (int r = col + 1; r < n; ++r) {
            const double v = std::fabs(a.at(r, col));
            if (v > best) {
                best = v;
                pivot = r;
            }
        }
        if (best < 1e-12) throw InputError("solve_linear: singular system");
        if (pivot != col) {
            for (int c = 0; c < n; ++c) std::swap(a.at(col, c), a.at(pivot, c));
            for (int c = 0; c < b.cols(); ++c) std::swap(b.at(col, c), b.at(pivot, c));
        }
        const double inv = 1.0 / a.at(col, col);
        for (int r = 0; r < n; ++r) {
            if (r == col) continue;
            const double f = a.at(r, col) * inv;
            if (f == 0.0) continue;
            for (int c = col; c < n; ++c) a.at(r, c) -= f * a.at(col, c);
            for (int c = 0; c < b.cols(); ++c) b.at(r, c) -= f * b.at(col, c);
        }
    }
    for (int r = 0; r < n; ++r) {
        const double inv = 1.0 / a.at(r, r);
        for (int c = 0; c < b.cols(); ++c) b.at(r, c) *= inv;
    }
    return b;
}

void validate_spec(const SyntheticSpec& spec) {
    if (spec.name.empty()) throw ConfigError("synthetic task needs a name");
    if (spec.n_docs < 1) throw ConfigError("n_docs must be >= 1");
    if (spec.n_queries < 1) throw ConfigError("n_queries must be >= 1");
    if (spec.n_val < 0) throw ConfigError("n_val must be >= 0");
    if (spec.n_queries + spec.n_val > spec.n_docs) {
        throw ConfigError("n_queries + n_val must not exceed n_docs (gold docs are distinct)");
    }
    if (spec.n_corpora < 2) throw ConfigError("need at least two corpora");
    if (spec.n_corpora > spec.n_docs) throw ConfigError("more corpora than documents");
    if (spec.noise < 0.0 || spec.noise >= 1.0) throw ConfigError("noise must be in [0, 1)");
    if (spec.n_patches < 1) throw ConfigError("n_patches must be >= 1");
    if (spec.n_filler_tokens < 0) throw ConfigError("n_filler_tokens must be >= 0");
}

}  // namespace

Matrix planted_cls_mixer(const SyntheticSpec& spec) { return mixer(spec, kClsMixSalt); }
Matrix planted_patch_mixer(const SyntheticSpec& spec) { return mixer(spec, kPatchMixSalt); }

Dataset generate(const SyntheticSpec& spec, const std::string& out_dir) {
    validate_spec(spec);
    const fs::path root(out_dir);
    std::error_code ec;
    fs::create_directories(root / "features", ec);

    const Matrix table = make_text_table(spec.enc);
    const Matrix g_cls = planted_cls_mixer(spec);
    const Matrix g_patch = planted_patch_mixer(spec);

    TokenPool pool{&spec.enc, {}};
    const std::vector<std::string> templates =
        spec.instruction_templates.empty() ? default_templates() : spec.instruction_templates;
    for (const auto& tpl : templates) pool.reserve_words(tpl);
    pool.reserve_words(kQuestionScaffold);
    for (const char* w : kFillerWords) pool.used.insert(token_id(spec.enc, w));

    Dataset ds;
    ds.name = spec.name;
    ds.n_patches = spec.n_patches;
    ds.instruction_templates = templates;

    std::vector<std::string> dtok(static_cast<std::size_t>(spec.n_docs));
    for (int e = 0; e < spec.n_docs; ++e) {
        dtok[static_cast<std::size_t>(e)] = pool.unique("dent" + std::to_string(e));
    }
    auto corpus_of = [&](int e) { return "c" + std::to_string(e % spec.n_corpora); };
    auto doc_id_of = [&](int e) { return pad_id("d", e); };
    for (int c = 0; c < spec.n_corpora; ++c) {
        Corpus& corpus = ds.corpora["c" + std::to_string(c)];
        corpus.corpus_id = "c" + std::to_string(c);
    }
    for (int e = 0; e < spec.n_docs; ++e) {
        Rng rng(mix_seed(mix_seed(spec.seed, kDocSalt), static_cast<std::uint64_t>(e)));
        CorpusDoc doc;
        doc.doc_id = doc_id_of(e);
        doc.text = make_doc_text(dtok[static_cast<std::size_t>(e)], spec.n_filler_tokens, rng);
        Corpus& corpus = ds.corpora[corpus_of(e)];
        corpus.by_id[doc.doc_id] = static_cast<int>(corpus.docs.size());
        corpus.docs.push_back(std::move(doc));
    }

    std::vector<int> perm(static_cast<std::size_t>(spec.n_docs));
    for (int e = 0; e < spec.n_docs; ++e) perm[static_cast<std::size_t>(e)] = e;
    Rng pick_rng(mix_seed(spec.seed, kPickSalt));
    shuffle_ints(perm, pick_rng);

    auto emit_split = [&](std::vector<QueryInput>& out, int offset, int count,
                          const char* prefix, std::uint64_t split_salt) {
        const auto counts = mix_counts(count, spec.share_i2t, spec.share_q2t, spec.share_iq2t);
        std::vector<int> task_of;
        for (int i = 0; i < counts[0]; ++i) task_of.push_back(0);
        for (int i = 0; i < counts[1]; ++i) task_of.push_back(1);
        for (int i = 0; i < counts[2]; ++i) task_of.push_back(2);
        Rng task_rng(mix_seed(mix_seed(spec.seed, kTaskSalt), split_salt));
        shuffle_ints(task_of, task_rng);

        for (int i = 0; i < count; ++i) {
            const int e = perm[static_cast<std::size_t>(offset + i)];
            QueryInput q;
            q.query_id = pad_id(prefix, i);
            q.dataset = spec.name;
            q.task = task_of[static_cast<std::size_t>(i)] == 0   ? Task::I2T
                     : task_of[static_cast<std::size_t>(i)] == 1 ? Task::Q2T
                                                                 : Task::IQ2T;
            q.corpus_id = corpus_of(e);
            q.gold_doc_ids = {doc_id_of(e)};
            q.gold_answers = {dtok[static_cast<std::size_t>(e)]};
            const std::uint64_t qhash = fnv1a64(q.query_id.data(), q.query_id.size());
            if (q.task != Task::Q2T) {
                Rng rq(mix_seed(mix_seed(spec.seed, kImageSalt), qhash));
                const std::uint32_t tok =
                    token_id(spec.enc, dtok[static_cast<std::size_t>(e)]);
                const ImageFeatures img =
                    synth_image(table, tok, g_cls, g_patch, spec.noise, spec.n_patches, rq);
                const std::string rel = "features/" + q.query_id + ".lle";
                save_features((root / rel).string(), img);
                q.image.kind = ImageRef::Kind::Path;
                q.image.path = rel;
            }
            if (q.task != Task::I2T) {
                Rng rt(mix_seed(mix_seed(spec.seed, kTextSalt), qhash));
                std::string tok = pool.unique("qent" + std::to_string(e));
                if (rt.next_double() < spec.noise) {
                    tok = kFillerWords[rt.next_below(kNumFillers)];
                }
                q.question = std::string(kQuestionScaffold) + " " + tok;
            }
            out.push_back(std::move(q));
        }
    };
    emit_split(ds.queries, 0, spec.n_queries, "q", 1);
    if (spec.n_val > 0) emit_split(ds.queries_val, spec.n_queries, spec.n_val, "v", 2);

    write_m2kr(out_dir, ds);
    return load_m2kr((root / "manifest.json").string(), spec.seed);
}

void plant_optimal_mapping(Model& m, const SyntheticSpec& spec) {
    if (m.dims.d_V < m.dims.d_L) {
        throw ConfigError("planted mapping needs d_V >= d_L to invert the cls mixer");
    }
    if (m.dims.n_vt < 2) throw ConfigError("planted mapping needs N_vt >= 2");
    if (m.enc.seed != spec.enc.seed || m.enc.d_text != spec.enc.d_text ||
        m.enc.d_vision != spec.enc.d_vision || m.enc.vocab_size != spec.enc.vocab_size) {
        throw ConfigError("generator and model encoder configs differ");
    }
    if (frobenius_norm_sq(m.fl_doc.b) != 0.0) {
        throw ConfigError("planted mapping needs a zero document projection bias");
    }

    const Matrix g = planted_cls_mixer(spec);       // d_L x d_V
    const Matrix gram = matmul_nt(g, g);            // d_L x d_L
    const Matrix x = solve_linear(gram, g);         // d_L x d_V
    const Matrix pinv = transpose(x);               // d_V x d_L, g-row-space inverse
    const Matrix target = matmul(pinv, m.fl_doc.W); // d_V x d_h

    const int d_h = m.dims.d_h;
    const int n_vt = m.dims.n_vt;
    const int hidden = m.map.mlp.W1.cols();
    const double offset = 8.0;  // keeps GELU in its identity regime

    m.map.mlp.W1 = Matrix(m.map.mlp.W1.rows(), hidden);
    for (int r = 0; r < target.rows(); ++r) {
        for (int c = 0; c < d_h; ++c) m.map.mlp.W1.at(r, c) = target.at(r, c);
    }
    m.map.mlp.b1 = Matrix(1, hidden);
    for (int c = 0; c < hidden; ++c) m.map.mlp.b1.at(0, c) = offset;
    m.map.mlp.W2 = Matrix(hidden, n_vt * d_h);
    for (int v = 0; v < n_vt; ++v) {
        for (int r = 0; r < d_h; ++r) m.map.mlp.W2.at(r, v * d_h + r) = 1.0;
    }
    m.map.mlp.b2 = Matrix(1, n_vt * d_h);
    for (int c = 0; c < n_vt * d_h; ++c) m.map.mlp.b2.at(0, c) = -offset;

    m.map.tr_out.W = Matrix(m.map.tr_out.W.rows(), m.map.tr_out.W.cols());
    m.map.tr_out.b = Matrix(1, m.map.tr_out.b.cols());
}

double chance_rate(const Dataset& ds) {
    const std::vector<QueryInput>& queries =
        ds.queries_val.empty() ? ds.queries : ds.queries_val;
    if (queries.empty()) throw InputError("dataset has no queries");
    double total = 0.0;
    for (const auto& q : queries) {
        const auto it = ds.corpora.find(q.corpus_id);
        if (it == ds.corpora.end() || it->second.docs.empty()) {
            throw InputError("query " + q.query_id + " references corpus '" + q.corpus_id +
                             "' with no documents");
        }
        total += 1.0 / static_cast<double>(it->second.docs.size());
    }
    return total / static_cast<double>(queries.size());
}

std::pair<Dataset, Dataset> generate_conflicting_pair(const ConflictSpec& spec,
                                                      const std::string& out_dir) {
    if (spec.n_docs < 2) throw ConfigError("conflict task needs at least two documents");
    if (spec.n_train < 1 || spec.n_val < 0 || spec.n_train + spec.n_val > spec.n_docs) {
        throw ConfigError("conflict splits must fit into n_docs");
    }
    if (spec.noise < 0.0 || spec.noise >= 1.0) throw ConfigError("noise must be in [0, 1)");

    SyntheticSpec proxy;
    proxy.seed = spec.seed;
    proxy.enc = spec.enc;
    const Matrix table = make_text_table(spec.enc);
    const Matrix g_cls = planted_cls_mixer(proxy);
    const Matrix g_patch = planted_patch_mixer(proxy);

    const std::string instr_shared = "Retrieve a relevant entry for the image.";
    const std::string instr_a = spec.distinct_instructions
                                    ? "Retrieve the entry shown in the image."
                                    : instr_shared;
    const std::string instr_b = spec.distinct_instructions
                                    ? "Retrieve the entry that follows the one shown."
                                    : instr_shared;

    TokenPool pool{&spec.enc, {}};
    pool.reserve_words(instr_a);
    pool.reserve_words(instr_b);
    for (const char* w : kFillerWords) pool.used.insert(token_id(spec.enc, w));

    std::vector<std::string> dtok(static_cast<std::size_t>(spec.n_docs));
    for (int e = 0; e < spec.n_docs; ++e) {
        dtok[static_cast<std::size_t>(e)] = pool.unique("dent" + std::to_string(e));
    }
    Corpus shared;
    shared.corpus_id = "cshare";
    for (int e = 0; e < spec.n_docs; ++e) {
        Rng rng(mix_seed(mix_seed(spec.seed, kDocSalt), static_cast<std::uint64_t>(e)));
        CorpusDoc doc;
        doc.doc_id = pad_id("d", e);
        doc.text = make_doc_text(dtok[static_cast<std::size_t>(e)], spec.n_filler_tokens, rng);
        shared.by_id[doc.doc_id] = static_cast<int>(shared.docs.size());
        shared.docs.push_back(std::move(doc));
    }

    std::vector<int> perm(static_cast<std::size_t>(spec.n_docs));
    for (int e = 0; e < spec.n_docs; ++e) perm[static_cast<std::size_t>(e)] = e;
    Rng pick_rng(mix_seed(spec.seed, kPickSalt));
    shuffle_ints(perm, pick_rng);

    const fs::path root(out_dir);
    std::pair<Dataset, Dataset> out;
    for (int side = 0; side < 2; ++side) {
        Dataset ds;
        ds.name = side == 0 ? "taska" : "taskb";
        ds.n_patches = spec.n_patches;
        ds.instruction_templates = {side == 0 ? instr_a : instr_b};
        ds.corpora["cshare"] = shared;

        std::error_code ec;
        fs::create_directories(root / ds.name / "features", ec);
        auto emit = [&](std::vector<QueryInput>& dst, int offset, int count,
                        const char* prefix) {
            for (int i = 0; i < count; ++i) {
                const int e = perm[static_cast<std::size_t>(offset + i)];
                const int gold = side == 0 ? e : (e + 1) % spec.n_docs;
                QueryInput q;
                q.query_id = ds.name + "_" + pad_id(prefix, i);
                q.dataset = ds.name;
                q.task = Task::I2T;
                q.corpus_id = "cshare";
                q.gold_doc_ids = {pad_id("d", gold)};
                q.gold_answers = {dtok[static_cast<std::size_t>(gold)]};
                Rng rq(mix_seed(mix_seed(spec.seed, kImageSalt),
                                fnv1a64(q.query_id.data(), q.query_id.size())));
                const std::uint32_t tok =
                    token_id(spec.enc, dtok[static_cast<std::size_t>(e)]);
                const ImageFeatures img = synth_image(table, tok, g_cls, g_patch, spec.noise,
                                                      spec.n_patches, rq);
                const std::string rel = "features/" + q.query_id + ".lle";
                save_features((root / ds.name / rel).string(), img);
                q.image.kind = ImageRef::Kind::Path;
                q.image.path = rel;
                dst.push_back(std::move(q));
            }
        };
        emit(ds.queries, 0, spec.n_train, "q");
        if (spec.n_val > 0) emit(ds.queries_val, spec.n_train, spec.n_val, "v");

        write_m2kr((root / ds.name).string(), ds);
        Dataset loaded = load_m2kr((root / ds.name / "manifest.json").string(), spec.seed);
        if (side == 0) out.first = std::move(loaded);
        else out.second = std::move(loaded);
    }
    return out;
}

}  // namespace lateline
