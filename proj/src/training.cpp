#include "lateline/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include <nlohmann/json.hpp>

#include "lateline/errors.hpp"
#include "lateline/late_interaction.hpp"
#include "lateline/log.hpp"

using json = nlohmann::json;

namespace lateline {

namespace {

constexpr std::uint64_t kSubsampleSalt = 0x73756273616d70ULL;
constexpr std::uint64_t kPickSalt = 0x7069636b6c697374ULL;
constexpr std::uint64_t kBatchSalt = 0x626174636873656cULL;
constexpr std::uint64_t kValSalt = 0x76616c6e656773ULL;

std::string fmt_double(double v) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

}  // namespace

TrainExample make_train_example(const QueryInput& q, int n_patches) {
    if (q.gold_doc_ids.empty()) {
        throw InputError("query " + q.query_id + " has no gold documents");
    }
    TrainExample e;
    e.query = q;
    e.gold_doc_ids.insert(q.gold_doc_ids.begin(), q.gold_doc_ids.end());
    e.corpus_id = q.corpus_id;
    e.n_patches = n_patches;
    return e;
}

LossResult contrastive_loss(const std::vector<double>& pos_scores,
                            const std::vector<std::vector<double>>& neg_scores) {
    if (pos_scores.size() != neg_scores.size()) {
        throw ShapeError("contrastive_loss: " + std::to_string(pos_scores.size()) +
                         " positives vs " + std::to_string(neg_scores.size()) +
                         " negative lists");
    }
    LossResult out;
    out.dpos.resize(pos_scores.size());
    out.dneg.resize(pos_scores.size());
    for (std::size_t e = 0; e < pos_scores.size(); ++e) {
        const double pos = pos_scores[e];
        const auto& negs = neg_scores[e];
        if (negs.empty()) {
            throw InputError("contrastive_loss: example " + std::to_string(e) +
                             " has no negatives");
        }
        double m = pos;
        for (double v : negs) m = std::max(m, v);
        double sum = std::exp(pos - m);
        for (double v : negs) sum += std::exp(v - m);
        const double lse = m + std::log(sum);
        out.loss += lse - pos;
        out.dpos[e] = std::exp(pos - lse) - 1.0;
        out.dneg[e].resize(negs.size());
        for (std::size_t j = 0; j < negs.size(); ++j) {
            out.dneg[e][j] = std::exp(negs[j] - lse);
        }
    }
    return out;
}

Batch build_batch(const std::vector<TrainExample>& examples, const std::vector<int>& picked,
                  const std::map<std::string, const Corpus*>& corpora, int n_random_negatives,
                  std::uint64_t seed) {
    if (n_random_negatives < 0) throw ConfigError("n_random_negatives must be >= 0");
    Batch b;
    b.examples = picked;
    b.rows.resize(picked.size());
    std::map<std::pair<std::string, std::string>, int> index;
    auto add = [&](const std::string& cid, const std::string& did) {
        auto [it, inserted] = index.emplace(std::make_pair(cid, did),
                                            static_cast<int>(b.pool.size()));
        if (inserted) b.pool.emplace_back(cid, did);
        return it->second;
    };

    for (std::size_t i = 0; i < picked.size(); ++i) {
        const TrainExample& e = examples[static_cast<std::size_t>(picked[i])];
        auto cit = corpora.find(e.corpus_id);
        if (cit == corpora.end()) {
            throw ConfigError("build_batch: unknown corpus '" + e.corpus_id + "'");
        }
        const Corpus& corpus = *cit->second;
        const long long non_gold =
            static_cast<long long>(corpus.docs.size()) -
            static_cast<long long>(e.gold_doc_ids.size());
        if (non_gold <= n_random_negatives) {
            throw ConfigError("corpus '" + e.corpus_id + "' has " + std::to_string(non_gold) +
                              " non-gold docs, need more than " +
                              std::to_string(n_random_negatives));
        }
        b.rows[i].pos = add(e.corpus_id, e.query.gold_doc_ids.front());
        Rng rng(mix_seed(seed, static_cast<std::uint64_t>(i)));
        std::set<std::string> drawn;
        while (static_cast<int>(drawn.size()) < n_random_negatives) {
            const auto idx = rng.next_below(corpus.docs.size());
            const std::string& did = corpus.docs[static_cast<std::size_t>(idx)].doc_id;
            if (e.gold_doc_ids.count(did) || drawn.count(did)) continue;
            drawn.insert(did);
            add(e.corpus_id, did);
        }
    }

    for (std::size_t i = 0; i < picked.size(); ++i) {
        const TrainExample& e = examples[static_cast<std::size_t>(picked[i])];
        for (std::size_t p = 0; p < b.pool.size(); ++p) {
            const auto& [cid, did] = b.pool[p];
            if (cid != e.corpus_id) continue;
            if (e.gold_doc_ids.count(did)) continue;
            b.rows[i].negatives.push_back(static_cast<int>(p));
        }
        if (b.rows[i].negatives.empty()) {
            throw ConfigError("example " + e.query.query_id +
                              " sees no negatives; raise n_random_negatives or batch size");
        }
    }
    return b;
}

std::vector<TensorSlot> model_slots(Model& m) {
    std::vector<TensorSlot> s;
    auto add = [&](std::string name, Matrix& t, ParamGroup g) {
        s.push_back({std::move(name), &t, g});
    };
    add("mlp.W1", m.map.mlp.W1, ParamGroup::Mapping);
    add("mlp.b1", m.map.mlp.b1, ParamGroup::Mapping);
    add("mlp.W2", m.map.mlp.W2, ParamGroup::Mapping);
    add("mlp.b2", m.map.mlp.b2, ParamGroup::Mapping);
    for (std::size_t i = 0; i < m.map.tr_layers.size(); ++i) {
        auto& l = m.map.tr_layers[i];
        const std::string pre = "tr" + std::to_string(i) + ".";
        add(pre + "ln1_scale", l.ln1_scale, ParamGroup::Mapping);
        add(pre + "ln1_shift", l.ln1_shift, ParamGroup::Mapping);
        add(pre + "Wq", l.Wq, ParamGroup::Mapping);
        add(pre + "Wk", l.Wk, ParamGroup::Mapping);
        add(pre + "Wv", l.Wv, ParamGroup::Mapping);
        add(pre + "Wo", l.Wo, ParamGroup::Mapping);
        add(pre + "ln2_scale", l.ln2_scale, ParamGroup::Mapping);
        add(pre + "ln2_shift", l.ln2_shift, ParamGroup::Mapping);
        add(pre + "Wff1", l.Wff1, ParamGroup::Mapping);
        add(pre + "Wff2", l.Wff2, ParamGroup::Mapping);
    }
    add("fv.W", m.map.fv.W, ParamGroup::Mapping);
    add("fv.b", m.map.fv.b, ParamGroup::Mapping);
    add("tr_out.W", m.map.tr_out.W, ParamGroup::Mapping);
    add("tr_out.b", m.map.tr_out.b, ParamGroup::Mapping);
    add("fl.W", m.map.fl.W, ParamGroup::FlQuery);
    add("fl.b", m.map.fl.b, ParamGroup::FlQuery);
    add("fl_doc.W", m.fl_doc.W, ParamGroup::FlDoc);
    add("fl_doc.b", m.fl_doc.b, ParamGroup::FlDoc);
    add("enc_table_q", m.enc_table_q, ParamGroup::ToyEncoders);
    add("enc_table_d", m.enc_table_d, ParamGroup::ToyEncoders);
    return s;
}

AdamState AdamState::init(const std::vector<TensorSlot>& slots) {
    AdamState st;
    st.m1.reserve(slots.size());
    st.m2.reserve(slots.size());
    for (const auto& s : slots) {
        st.m1.emplace_back(s.tensor->rows(), s.tensor->cols());
        st.m2.emplace_back(s.tensor->rows(), s.tensor->cols());
    }
    return st;
}

void adam_step(AdamState& st, const std::vector<TensorSlot>& slots,
               const std::vector<Matrix>& grads, const std::map<ParamGroup, double>& lr_by_group) {
    if (slots.size() != grads.size() || slots.size() != st.m1.size()) {
        throw ShapeError("adam_step: slot/gradient/moment counts disagree");
    }
    ++st.step;
    const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
    for (std::size_t i = 0; i < slots.size(); ++i) {
        auto lr_it = lr_by_group.find(slots[i].group);
        const double lr = lr_it == lr_by_group.end() ? 0.0 : lr_it->second;
        if (lr == 0.0) continue;
        Matrix& p = *slots[i].tensor;
        const Matrix& g = grads[i];
        if (!p.same_shape(g)) {
            throw ShapeError("adam_step: gradient shape mismatch for " + slots[i].name);
        }
        Matrix& m1 = st.m1[i];
        Matrix& m2 = st.m2[i];
        double* pd = p.data();
        const double* gd = g.data();
        double* m1d = m1.data();
        double* m2d = m2.data();
        for (std::size_t k = 0; k < p.size(); ++k) {
            m1d[k] = st.beta1 * m1d[k] + (1.0 - st.beta1) * gd[k];
            m2d[k] = st.beta2 * m2d[k] + (1.0 - st.beta2) * gd[k] * gd[k];
            const double mhat = m1d[k] / bc1;
            const double vhat = m2d[k] / bc2;
            pd[k] -= lr * mhat / (std::sqrt(vhat) + st.eps);
        }
    }
}

double clip_global_norm(const std::vector<Matrix*>& grads, double max_norm) {
    double sq = 0.0;
    for (const Matrix* g : grads) sq += frobenius_norm_sq(*g);
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const double s = max_norm / norm;
        for (Matrix* g : grads) scale_inplace(*g, s);
    }
    return norm;
}

TrainableFlags default_trainable(int stage) {
    TrainableFlags f;
    switch (stage) {
        case 1:
            f.mapping = true;
            break;
        case 2:
            f.mapping = f.fl_query = f.fl_doc = f.toy_encoders = true;
            break;
        case 3:
            f.mapping = f.fl_query = f.fl_doc = f.toy_encoders = true;
            break;
        default:
            throw ConfigError("stage must be 1, 2, or 3, got " + std::to_string(stage));
    }
    return f;
}

void validate_stage_config(const StageConfig& cfg) {
    if (cfg.stage < 1 || cfg.stage > 3) {
        throw ConfigError("stage must be 1, 2, or 3, got " + std::to_string(cfg.stage));
    }
    if (cfg.stage == 1) {
        if (!cfg.trainable.mapping || cfg.trainable.fl_query || cfg.trainable.fl_doc ||
            cfg.trainable.toy_encoders) {
            throw ConfigError("stage 1 trains the mapping group only");
        }
    }
    if (cfg.stage != 3 && cfg.trainable.fl_query != cfg.trainable.fl_doc) {
        throw ConfigError("below stage 3 the text projection trains tied; "
                          "fl_query and fl_doc flags must match");
    }
    if (cfg.datasets.empty()) throw ConfigError("stage config needs at least one dataset");
    std::set<std::string> seen;
    for (const auto& [id, budget] : cfg.datasets) {
        if (budget < 1) throw ConfigError("dataset '" + id + "' budget must be >= 1");
        if (!seen.insert(id).second) throw ConfigError("dataset '" + id + "' listed twice");
    }
    if (cfg.batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (cfg.grad_accum < 1) throw ConfigError("grad_accum must be >= 1");
    if (cfg.max_steps < 1) throw ConfigError("max_steps must be >= 1");
    if (cfg.n_random_negatives < 0) throw ConfigError("n_random_negatives must be >= 0");
    if (cfg.batch_size == 1 && cfg.n_random_negatives == 0) {
        throw ConfigError("batch_size 1 with no random negatives leaves nothing to contrast");
    }
    if (cfg.val_interval < 0) throw ConfigError("val_interval must be >= 0");
    if (cfg.val_interval > 0 && cfg.val_negatives < 1) {
        throw ConfigError("val_negatives must be >= 1 when validation is on");
    }
    if (cfg.patience < 1) throw ConfigError("patience must be >= 1");
    if (cfg.clip_norm <= 0) throw ConfigError("clip_norm must be > 0");
    if (cfg.lr_mapping < 0 || cfg.lr_other < 0) throw ConfigError("learning rates must be >= 0");
    for (const auto& w : cfg.watch) {
        if (!seen.count(w)) {
            throw ConfigError("watch dataset '" + w + "' is not in the stage's dataset list");
        }
    }
}

StageConfig load_stage_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open stage config " + path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw FormatError(path + ": " + e.what());
    }
    StageConfig cfg;
    try {
        cfg.stage = j.value("stage", 1);
        cfg.trainable = default_trainable(cfg.stage);
        if (j.contains("trainable")) {
            const json& t = j.at("trainable");
            cfg.trainable.mapping = t.value("mapping", cfg.trainable.mapping);
            cfg.trainable.fl_query = t.value("fl_query", cfg.trainable.fl_query);
            cfg.trainable.fl_doc = t.value("fl_doc", cfg.trainable.fl_doc);
            cfg.trainable.toy_encoders = t.value("toy_encoders", cfg.trainable.toy_encoders);
        }
        if (!j.contains("datasets")) throw FormatError(path + ": missing field 'datasets'");
        for (const json& d : j.at("datasets")) {
            cfg.datasets.emplace_back(d.at("id").get<std::string>(),
                                      d.at("budget").get<long long>());
        }
        cfg.n_random_negatives = j.value("n_random_negatives", cfg.n_random_negatives);
        cfg.lr_mapping = j.value("lr_mapping", cfg.lr_mapping);
        cfg.lr_other = j.value("lr_other", cfg.lr_other);
        cfg.max_steps = j.value("max_steps", cfg.max_steps);
        cfg.seed = j.value("seed", cfg.seed);
        cfg.batch_size = j.value("batch_size", cfg.batch_size);
        cfg.grad_accum = j.value("grad_accum", cfg.grad_accum);
        cfg.val_interval = j.value("val_interval", cfg.val_interval);
        cfg.val_negatives = j.value("val_negatives", cfg.val_negatives);
        cfg.val_max_queries = j.value("val_max_queries", cfg.val_max_queries);
        if (j.contains("watch")) {
            for (const json& w : j.at("watch")) cfg.watch.push_back(w.get<std::string>());
        }
        cfg.patience = j.value("patience", cfg.patience);
        cfg.clip_norm = j.value("clip_norm", cfg.clip_norm);
    } catch (const json::exception& e) {
        throw FormatError(path + ": " + e.what());
    }
    validate_stage_config(cfg);
    return cfg;
}

namespace {

struct StageData {
    std::vector<TrainExample> examples;
    std::map<std::string, const Corpus*> corpora;
    std::vector<std::string> dataset_ids;
};

void shuffle_ints(std::vector<int>& v, Rng& rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        const auto j = rng.next_below(i);
        std::swap(v[i - 1], v[static_cast<std::size_t>(j)]);
    }
}

bool same_corpus_content(const Corpus& a, const Corpus& b) {
    if (a.corpus_id != b.corpus_id || a.docs.size() != b.docs.size()) return false;
    for (std::size_t i = 0; i < a.docs.size(); ++i) {
        if (a.docs[i].doc_id != b.docs[i].doc_id || a.docs[i].text != b.docs[i].text) {
            return false;
        }
    }
    return true;
}

StageData prepare_stage_data(const StageConfig& cfg,
                             const std::map<std::string, Dataset>& datasets) {
    StageData data;
    for (const auto& [id, budget] : cfg.datasets) {
        auto it = datasets.find(id);
        if (it == datasets.end()) throw ConfigError("stage config names unknown dataset '" + id + "'");
        const Dataset& ds = it->second;
        if (ds.queries.empty()) throw ConfigError("dataset '" + id + "' has no training queries");
        for (const auto& [cid, corpus] : ds.corpora) {
            auto [mit, inserted] = data.corpora.emplace(cid, &corpus);
            if (!inserted && mit->second != &corpus &&
                !same_corpus_content(*mit->second, corpus)) {
                throw ConfigError("corpus id '" + cid +
                                  "' appears in two datasets with different contents");
            }
        }
        const int n = static_cast<int>(ds.queries.size());
        std::vector<int> order(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
        Rng rng(mix_seed(mix_seed(cfg.seed, kSubsampleSalt),
                         fnv1a64(id.data(), id.size())));
        shuffle_ints(order, rng);
        for (long long i = 0; i < budget; ++i) {
            const int qi = order[static_cast<std::size_t>(i % n)];
            data.examples.push_back(
                make_train_example(ds.queries[static_cast<std::size_t>(qi)], ds.n_patches));
        }
        data.dataset_ids.push_back(id);
    }
    return data;
}

std::vector<int> pick_examples(std::size_t n_examples, int batch_size, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<int> picked;
    picked.reserve(static_cast<std::size_t>(batch_size));
    if (static_cast<std::size_t>(batch_size) >= n_examples) {
        for (int i = 0; i < batch_size; ++i) {
            picked.push_back(static_cast<int>(rng.next_below(n_examples)));
        }
        return picked;
    }
    std::set<int> taken;
    while (static_cast<int>(picked.size()) < batch_size) {
        const int i = static_cast<int>(rng.next_below(n_examples));
        if (taken.insert(i).second) picked.push_back(i);
    }
    return picked;
}

void accumulate(ParamGradients& a, const ParamGradients& b) {
    add_inplace(a.mlp.W1, b.mlp.W1);
    add_inplace(a.mlp.b1, b.mlp.b1);
    add_inplace(a.mlp.W2, b.mlp.W2);
    add_inplace(a.mlp.b2, b.mlp.b2);
    for (std::size_t i = 0; i < a.tr_layers.size(); ++i) {
        add_inplace(a.tr_layers[i].ln1_scale, b.tr_layers[i].ln1_scale);
        add_inplace(a.tr_layers[i].ln1_shift, b.tr_layers[i].ln1_shift);
        add_inplace(a.tr_layers[i].Wq, b.tr_layers[i].Wq);
        add_inplace(a.tr_layers[i].Wk, b.tr_layers[i].Wk);
        add_inplace(a.tr_layers[i].Wv, b.tr_layers[i].Wv);
        add_inplace(a.tr_layers[i].Wo, b.tr_layers[i].Wo);
        add_inplace(a.tr_layers[i].ln2_scale, b.tr_layers[i].ln2_scale);
        add_inplace(a.tr_layers[i].ln2_shift, b.tr_layers[i].ln2_shift);
        add_inplace(a.tr_layers[i].Wff1, b.tr_layers[i].Wff1);
        add_inplace(a.tr_layers[i].Wff2, b.tr_layers[i].Wff2);
    }
    add_inplace(a.fv.W, b.fv.W);
    add_inplace(a.fv.b, b.fv.b);
    add_inplace(a.tr_out.W, b.tr_out.W);
    add_inplace(a.tr_out.b, b.tr_out.b);
    add_inplace(a.fl.W, b.fl.W);
    add_inplace(a.fl.b, b.fl.b);
}

void scatter_rows(Matrix& table_grad, const Matrix& dtext,
                  const std::vector<std::uint32_t>& ids) {
    for (int t = 0; t < dtext.rows(); ++t) {
        double* dst = table_grad.row(static_cast<int>(ids[static_cast<std::size_t>(t)]));
        const double* src = dtext.row(t);
        for (int c = 0; c < dtext.cols(); ++c) dst[c] += src[c];
    }
}

// Gradients laid out parallel to model_slots().
std::vector<Matrix> collect_slot_grads(const ParamGradients& g, const Affine& gfl_doc,
                                       const Matrix& genc_q, const Matrix& genc_d) {
    std::vector<Matrix> out;
    out.push_back(g.mlp.W1);
    out.push_back(g.mlp.b1);
    out.push_back(g.mlp.W2);
    out.push_back(g.mlp.b2);
    for (const auto& l : g.tr_layers) {
        out.push_back(l.ln1_scale);
        out.push_back(l.ln1_shift);
        out.push_back(l.Wq);
        out.push_back(l.Wk);
        out.push_back(l.Wv);
        out.push_back(l.Wo);
        out.push_back(l.ln2_scale);
        out.push_back(l.ln2_shift);
        out.push_back(l.Wff1);
        out.push_back(l.Wff2);
    }
    out.push_back(g.fv.W);
    out.push_back(g.fv.b);
    out.push_back(g.tr_out.W);
    out.push_back(g.tr_out.b);
    out.push_back(g.fl.W);
    out.push_back(g.fl.b);
    out.push_back(gfl_doc.W);
    out.push_back(gfl_doc.b);
    out.push_back(genc_q);
    out.push_back(genc_d);
    return out;
}

struct ScoredBatch {
    std::vector<TextFeatures> qtxt;
    std::vector<QueryTape> qtape;
    std::vector<TokenMatrix> queries;
    std::vector<TextFeatures> dtxt;
    std::vector<DocTape> dtape;
    std::vector<TokenMatrix> docs;
    std::vector<double> pos;
    std::vector<std::vector<double>> neg;
};

ScoredBatch score_batch(const Model& model, const std::vector<TrainExample>& examples,
                        const Batch& batch, const std::map<std::string, const Corpus*>& corpora,
                        bool stage1_mask, bool with_tapes) {
    ScoredBatch sb;
    const std::size_t nq = batch.examples.size();
    sb.qtxt.reserve(nq);
    sb.queries.reserve(nq);
    if (with_tapes) sb.qtape.resize(nq);
    for (std::size_t i = 0; i < nq; ++i) {
        const TrainExample& e = examples[static_cast<std::size_t>(batch.examples[i])];
        sb.qtxt.push_back(query_text_features(model.enc_table_q, model.enc, e.query));
        const ImageFeatures img = query_image_features(model.enc, e.query, e.n_patches);
        sb.queries.push_back(assemble_query(model.map, sb.qtxt.back(), img, stage1_mask,
                                            with_tapes ? &sb.qtape[i] : nullptr));
    }
    const std::size_t nd = batch.pool.size();
    sb.dtxt.reserve(nd);
    sb.docs.reserve(nd);
    if (with_tapes) sb.dtape.resize(nd);
    for (std::size_t p = 0; p < nd; ++p) {
        const auto& [cid, did] = batch.pool[p];
        const CorpusDoc* doc = corpora.at(cid)->find(did);
        sb.dtxt.push_back(encode_doc_with_table(model.enc_table_d, model.enc, doc->text));
        sb.docs.push_back(project_document(model.fl_doc, sb.dtxt.back(),
                                           with_tapes ? &sb.dtape[p] : nullptr));
    }
    sb.pos.resize(nq);
    sb.neg.resize(nq);
    for (std::size_t i = 0; i < nq; ++i) {
        const BatchRow& row = batch.rows[i];
        sb.pos[i] = relevance(sb.queries[i], sb.docs[static_cast<std::size_t>(row.pos)]);
        sb.neg[i].reserve(row.negatives.size());
        for (int p : row.negatives) {
            sb.neg[i].push_back(relevance(sb.queries[i], sb.docs[static_cast<std::size_t>(p)]));
        }
    }
    return sb;
}

double validation_nll(const Model& model, const Dataset& ds, const StageConfig& cfg) {
    if (ds.queries_val.empty()) {
        throw ConfigError("dataset '" + ds.name + "' has no validation queries");
    }
    std::size_t n = ds.queries_val.size();
    if (cfg.val_max_queries > 0) n = std::min(n, static_cast<std::size_t>(cfg.val_max_queries));
    const bool mask = cfg.stage == 1;
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const QueryInput& q = ds.queries_val[i];
        if (q.gold_doc_ids.empty()) {
            throw ConfigError("validation query " + q.query_id + " has no gold documents");
        }
        const Corpus& corpus = ds.corpora.at(q.corpus_id);
        const std::set<std::string> gold(q.gold_doc_ids.begin(), q.gold_doc_ids.end());
        const long long non_gold = static_cast<long long>(corpus.docs.size()) -
                                   static_cast<long long>(gold.size());
        const int want = static_cast<int>(
            std::min<long long>(cfg.val_negatives, non_gold));
        if (want < 1) {
            throw ConfigError("corpus '" + q.corpus_id + "' leaves no negatives for query " +
                              q.query_id);
        }
        Rng rng(mix_seed(mix_seed(cfg.seed, kValSalt),
                         fnv1a64(q.query_id.data(), q.query_id.size())));
        std::vector<std::string> negs;
        std::set<std::string> drawn;
        while (static_cast<int>(negs.size()) < want) {
            const auto idx = rng.next_below(corpus.docs.size());
            const std::string& did = corpus.docs[static_cast<std::size_t>(idx)].doc_id;
            if (gold.count(did) || drawn.count(did)) continue;
            drawn.insert(did);
            negs.push_back(did);
        }
        const TextFeatures txt = query_text_features(model.enc_table_q, model.enc, q);
        const ImageFeatures img = query_image_features(model.enc, q, ds.n_patches);
        const TokenMatrix Q = assemble_query(model.map, txt, img, mask);
        auto score_doc = [&](const std::string& did) {
            const CorpusDoc* doc = corpus.find(did);
            const TextFeatures dt = encode_doc_with_table(model.enc_table_d, model.enc,
                                                          doc->text);
            return relevance(Q, project_document(model.fl_doc, dt));
        };
        std::vector<std::vector<double>> neg_scores(1);
        for (const auto& did : negs) neg_scores[0].push_back(score_doc(did));
        const std::vector<double> pos_scores = {score_doc(q.gold_doc_ids.front())};
        total += contrastive_loss(pos_scores, neg_scores).loss;
    }
    return total / static_cast<double>(n);
}

}  // namespace

StageResult run_stage(const StageConfig& cfg, Model& model,
                      const std::map<std::string, Dataset>& datasets) {
    validate_stage_config(cfg);
    StageData data = prepare_stage_data(cfg, datasets);
    auto slots = model_slots(model);
    AdamState st = AdamState::init(slots);
    const bool tied = cfg.stage != 3;
    const bool stage1_mask = cfg.stage == 1;

    std::map<ParamGroup, double> lr;
    lr[ParamGroup::Mapping] = cfg.trainable.mapping ? cfg.lr_mapping : 0.0;
    lr[ParamGroup::FlQuery] = cfg.trainable.fl_query ? cfg.lr_other : 0.0;
    const bool fl_doc_on = tied ? cfg.trainable.fl_query : cfg.trainable.fl_doc;
    lr[ParamGroup::FlDoc] = fl_doc_on ? cfg.lr_other : 0.0;
    lr[ParamGroup::ToyEncoders] = cfg.trainable.toy_encoders ? cfg.lr_other : 0.0;

    StageResult result;
    const double inv_total = 1.0 / (static_cast<double>(cfg.batch_size) *
                                    static_cast<double>(cfg.grad_accum));
    std::map<std::string, double> prev_watch_nll;
    std::map<std::string, int> watch_streak;

    for (int step = 1; step <= cfg.max_steps; ++step) {
        ParamGradients agg = zero_gradients(model.map);
        Affine gfl_doc{Matrix(model.fl_doc.W.rows(), model.fl_doc.W.cols()),
                       Matrix(model.fl_doc.b.rows(), model.fl_doc.b.cols())};
        Matrix genc_q(model.enc_table_q.rows(), model.enc_table_q.cols());
        Matrix genc_d(model.enc_table_d.rows(), model.enc_table_d.cols());
        double step_loss = 0.0;

        for (int micro = 0; micro < cfg.grad_accum; ++micro) {
            const std::uint64_t tick =
                static_cast<std::uint64_t>(step) * 8192 + static_cast<std::uint64_t>(micro);
            const std::vector<int> picked =
                pick_examples(data.examples.size(), cfg.batch_size,
                              mix_seed(mix_seed(cfg.seed, kPickSalt), tick));
            const Batch batch = build_batch(data.examples, picked, data.corpora,
                                            cfg.n_random_negatives,
                                            mix_seed(mix_seed(cfg.seed, kBatchSalt), tick));
            ScoredBatch sb = score_batch(model, data.examples, batch, data.corpora,
                                         stage1_mask, true);
            const LossResult loss = contrastive_loss(sb.pos, sb.neg);
            if (!std::isfinite(loss.loss)) {
                throw TrainingError("loss is not finite at step " + std::to_string(step));
            }
            step_loss += loss.loss;

            std::vector<Matrix> ddoc;
            ddoc.reserve(sb.docs.size());
            for (const auto& d : sb.docs) {
                ddoc.emplace_back(d.embeddings.rows(), d.embeddings.cols());
            }
            for (std::size_t i = 0; i < batch.rows.size(); ++i) {
                const BatchRow& row = batch.rows[i];
                Matrix dq(sb.queries[i].embeddings.rows(), sb.queries[i].embeddings.cols());
                auto add_pair = [&](int pool_idx, double w) {
                    auto [gq, gd] = relevance_gradient(
                        sb.queries[i], sb.docs[static_cast<std::size_t>(pool_idx)]);
                    axpy_inplace(dq, w, gq);
                    axpy_inplace(ddoc[static_cast<std::size_t>(pool_idx)], w, gd);
                };
                add_pair(row.pos, loss.dpos[i] * inv_total);
                for (std::size_t j = 0; j < row.negatives.size(); ++j) {
                    add_pair(row.negatives[j], loss.dneg[i][j] * inv_total);
                }
                QueryBackward qb = assemble_backward(model.map, sb.qtape[i], dq);
                accumulate(agg, qb.grads);
                scatter_rows(genc_q, qb.dtext, sb.qtxt[i].token_ids);
            }
            for (std::size_t p = 0; p < sb.docs.size(); ++p) {
                DocBackward db = project_backward(model.fl_doc, sb.dtape[p], ddoc[p]);
                add_inplace(gfl_doc.W, db.grad_fl.W);
                add_inplace(gfl_doc.b, db.grad_fl.b);
                scatter_rows(genc_d, db.dtext, sb.dtxt[p].token_ids);
            }
        }

        if (tied) {
            // one logical parameter per side pair: summed gradient, mirrored update
            add_inplace(agg.fl.W, gfl_doc.W);
            add_inplace(agg.fl.b, gfl_doc.b);
            gfl_doc.W = agg.fl.W;
            gfl_doc.b = agg.fl.b;
            add_inplace(genc_q, genc_d);
            genc_d = genc_q;
        }
        std::vector<Matrix> grads = collect_slot_grads(agg, gfl_doc, genc_q, genc_d);
        std::vector<Matrix*> trainable;
        for (std::size_t i = 0; i < slots.size(); ++i) {
            if (lr[slots[i].group] != 0.0) trainable.push_back(&grads[i]);
        }
        clip_global_norm(trainable, cfg.clip_norm);
        adam_step(st, slots, grads, lr);

        result.loss_curve.emplace_back(step, step_loss * inv_total);
        result.steps_run = step;

        const bool validate_now =
            cfg.val_interval > 0 && (step % cfg.val_interval == 0 || step == cfg.max_steps);
        if (validate_now) {
            bool stop = false;
            for (const auto& id : data.dataset_ids) {
                const double nll = validation_nll(model, datasets.at(id), cfg);
                result.val_curve.push_back({step, id, nll});
                auto [it, inserted] = result.min_val_nll.emplace(id, nll);
                if (!inserted && nll < it->second) it->second = nll;
                log_info("stage " + std::to_string(cfg.stage) + " step " +
                         std::to_string(step) + " val " + id + " nll " + fmt_double(nll));
                if (std::find(cfg.watch.begin(), cfg.watch.end(), id) != cfg.watch.end()) {
                    auto pit = prev_watch_nll.find(id);
                    if (pit != prev_watch_nll.end() && nll > pit->second) {
                        if (++watch_streak[id] >= cfg.patience) stop = true;
                    } else {
                        watch_streak[id] = 0;
                    }
                    prev_watch_nll[id] = nll;
                }
            }
            if (stop) {
                result.early_stopped = true;
                log_info("early stop at step " + std::to_string(step));
                break;
            }
        }
    }
    return result;
}

void write_loss_curve_csv(const std::string& path, const StageResult& r) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write loss curve " + path);
    out << "step,dataset,loss\n";
    for (const auto& [step, loss] : r.loss_curve) {
        out << step << ",train," << fmt_double(loss) << "\n";
    }
    for (const auto& v : r.val_curve) {
        out << v.step << "," << v.dataset << "," << fmt_double(v.nll) << "\n";
    }
    if (!out) throw IoError("write failed for " + path);
}

std::vector<GainRow> intermediate_gain(const Model& base, const StageConfig& stage2_cfg,
                                       const StageConfig& stage3_cfg,
                                       const std::map<std::string, Dataset>& datasets,
                                       const std::vector<int>& n_inter_grid) {
    if (stage2_cfg.stage != 2) throw ConfigError("intermediate stage config must be stage 2");
    if (stage3_cfg.stage != 3) throw ConfigError("finetune stage config must be stage 3");
    if (stage3_cfg.val_interval < 1) {
        throw ConfigError("finetune stage needs val_interval > 0 to track validation NLL");
    }
    if (n_inter_grid.empty()) throw ConfigError("empty n_inter grid");
    for (int n : n_inter_grid) {
        if (n < 0) throw ConfigError("n_inter must be >= 0");
    }

    Model baseline = base;
    const StageResult r0 = run_stage(stage3_cfg, baseline, datasets);
    const std::map<std::string, double>& h0 = r0.min_val_nll;
    if (h0.empty()) throw ConfigError("finetune stage produced no validation NLL");

    std::vector<GainRow> rows;
    for (int n : n_inter_grid) {
        GainRow row;
        row.n_inter = n;
        if (n == 0) {
            row.min_nll = h0;  // shared baseline run: differences are exactly zero
        } else {
            Model m = base;
            StageConfig s2 = stage2_cfg;
            s2.max_steps = n;
            run_stage(s2, m, datasets);
            row.min_nll = run_stage(stage3_cfg, m, datasets).min_val_nll;
        }
        for (const auto& [id, h] : h0) {
            auto it = row.min_nll.find(id);
            if (it == row.min_nll.end()) {
                throw ConfigError("dataset '" + id + "' missing from a grid run");
            }
            row.gain[id] = h - it->second;
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

const std::map<std::string, long long>& stage3_policy() {
    static const std::map<std::string, long long> policy = {
        {"wit", 140000},   {"kvqa", 6500},      {"cc3m", 29800},
        {"msmarco", 40000}, {"oven", 33900},    {"llava", 35100},
        {"okvqa", 90000},  {"infoseek", 50000}, {"evqa", 167000},
    };
    return policy;
}

std::map<std::string, BalanceEntry> balance_datasets(
    const std::map<std::string, long long>& raw_sizes,
    const std::map<std::string, long long>& policy) {
    std::map<std::string, BalanceEntry> out;
    for (const auto& [id, raw] : raw_sizes) {
        auto it = policy.find(id);
        if (it == policy.end()) throw InputError("no balance policy for dataset '" + id + "'");
        if (raw < 1) throw InputError("dataset '" + id + "' has no examples");
        BalanceEntry e;
        e.budget = it->second;
        e.repeat = static_cast<int>((it->second + raw - 1) / raw);
        if (e.repeat < 1) e.repeat = 1;
        out[id] = e;
    }
    return out;
}

void load_pretrained_text_table(Model& m, const std::string& token_matrix_path) {
    const TokenMatrix t = load_token_matrix(token_matrix_path);
    if (t.embeddings.rows() != m.enc.vocab_size || t.embeddings.cols() != m.dims.d_L) {
        throw ShapeError("pretrained table is " + std::to_string(t.embeddings.rows()) + "x" +
                         std::to_string(t.embeddings.cols()) + ", model expects " +
                         std::to_string(m.enc.vocab_size) + "x" + std::to_string(m.dims.d_L));
    }
    m.enc_table_q = t.embeddings;
    m.enc_table_d = t.embeddings;
}

}  // namespace lateline
