#include "lateline/eval.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>

#include <nlohmann/json.hpp>

#include "lateline/errors.hpp"
#include "lateline/log.hpp"

using json = nlohmann::json;

namespace lateline {

std::string to_string(const Metric& m) {
    std::string head;
    switch (m.kind) {
        case MetricKind::Recall: head = "R"; break;
        case MetricKind::PseudoRecall: head = "PR"; break;
        case MetricKind::MRR: head = "MRR"; break;
    }
    return head + "@" + std::to_string(m.k);
}

Metric parse_metric(const std::string& s) {
    const auto at = s.find('@');
    if (at == std::string::npos) {
        throw ConfigError("metric '" + s + "' is not of the form NAME@K");
    }
    const std::string head = s.substr(0, at);
    Metric m;
    if (head == "R") m.kind = MetricKind::Recall;
    else if (head == "PR") m.kind = MetricKind::PseudoRecall;
    else if (head == "MRR") m.kind = MetricKind::MRR;
    else throw ConfigError("unknown metric '" + head + "', expected R, PR, or MRR");
    try {
        m.k = std::stoi(s.substr(at + 1));
    } catch (const std::exception&) {
        throw ConfigError("metric '" + s + "' has a non-numeric K");
    }
    if (m.k < 1) throw ConfigError("metric K must be >= 1");
    return m;
}

Metric default_metric(const std::string& dataset) {
    if (dataset == "wit" || dataset == "msmarco") return {MetricKind::Recall, 10};
    if (dataset == "llava" || dataset == "iglue") return {MetricKind::Recall, 1};
    if (dataset == "infoseek" || dataset == "evqa" || dataset == "okvqa") {
        return {MetricKind::PseudoRecall, 5};
    }
    return {MetricKind::Recall, 5};
}

int recall_at_k(const std::vector<std::string>& ranked, const std::set<std::string>& gold,
                int k) {
    if (k < 1) throw ConfigError("k must be >= 1");
    const std::size_t top = std::min<std::size_t>(static_cast<std::size_t>(k), ranked.size());
    for (std::size_t i = 0; i < top; ++i) {
        if (gold.count(ranked[i])) return 1;
    }
    return 0;
}

std::string normalize_answer_text(const std::string& s) {
    std::string out;
    std::size_t i = 0;
    const auto is_space = [](unsigned char c) { return std::isspace(c) != 0; };
    const auto is_punct = [](unsigned char c) { return std::ispunct(c) != 0; };
    while (i < s.size()) {
        while (i < s.size() && is_space(static_cast<unsigned char>(s[i]))) ++i;
        std::size_t j = i;
        while (j < s.size() && !is_space(static_cast<unsigned char>(s[j]))) ++j;
        std::size_t a = i;
        std::size_t b = j;
        while (a < b && is_punct(static_cast<unsigned char>(s[a]))) ++a;
        while (b > a && is_punct(static_cast<unsigned char>(s[b - 1]))) --b;
        if (b > a) {
            if (!out.empty()) out.push_back(' ');
            for (std::size_t t = a; t < b; ++t) {
                out.push_back(static_cast<char>(
                    std::tolower(static_cast<unsigned char>(s[t]))));
            }
        }
        i = j;
    }
    return out;
}

int pseudo_recall_at_k(const std::vector<std::string>& ranked_texts,
                       const std::vector<std::string>& answers, int k) {
    if (k < 1) throw ConfigError("k must be >= 1");
    if (answers.empty()) throw InputError("pseudo recall needs at least one answer string");
    std::vector<std::string> norm_answers;
    for (const auto& a : answers) {
        std::string n = normalize_answer_text(a);
        if (!n.empty()) norm_answers.push_back(std::move(n));
    }
    const std::size_t top =
        std::min<std::size_t>(static_cast<std::size_t>(k), ranked_texts.size());
    for (std::size_t i = 0; i < top; ++i) {
        const std::string text = normalize_answer_text(ranked_texts[i]);
        for (const auto& a : norm_answers) {
            if (text.find(a) != std::string::npos) return 1;
        }
    }
    return 0;
}

double mrr_at_k(const std::vector<std::string>& ranked, const std::set<std::string>& gold,
                int k) {
    if (k < 1) throw ConfigError("k must be >= 1");
    const std::size_t top = std::min<std::size_t>(static_cast<std::size_t>(k), ranked.size());
    for (std::size_t i = 0; i < top; ++i) {
        if (gold.count(ranked[i])) return 1.0 / static_cast<double>(i + 1);
    }
    return 0.0;
}

std::map<std::string, double> average_rank(
    const std::map<std::string, std::map<std::string, double>>& results) {
    if (results.empty()) throw InputError("average_rank: no models");
    std::set<std::string> tasks;
    for (const auto& [model, per_task] : results) {
        for (const auto& [task, value] : per_task) tasks.insert(task);
    }
    if (tasks.empty()) throw InputError("average_rank: no tasks");
    for (const auto& [model, per_task] : results) {
        for (const auto& task : tasks) {
            if (!per_task.count(task)) {
                throw InputError("model '" + model + "' is missing task '" + task + "'");
            }
        }
    }
    std::map<std::string, double> rank_sum;
    for (const auto& task : tasks) {
        std::vector<std::pair<double, std::string>> order;
        for (const auto& [model, per_task] : results) {
            order.emplace_back(per_task.at(task), model);
        }
        std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first > b.first;
            return a.second < b.second;
        });
        std::size_t i = 0;
        while (i < order.size()) {
            std::size_t j = i;
            while (j + 1 < order.size() && order[j + 1].first == order[i].first) ++j;
            const double shared = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
            for (std::size_t t = i; t <= j; ++t) rank_sum[order[t].second] += shared;
            i = j + 1;
        }
    }
    std::map<std::string, double> out;
    for (auto& [model, sum] : rank_sum) {
        out[model] = sum / static_cast<double>(tasks.size());
    }
    return out;
}

namespace {

std::string fmt_value(double v) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

// Doc store without centroids, for brute-force evaluation.
PlaidIndex make_plain_store(std::vector<std::pair<std::string, TokenMatrix>>& docs) {
    PlaidIndex idx;
    std::sort(docs.begin(), docs.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    for (auto& [id, m] : docs) {
        TokenMatrix q;
        q.embeddings = quantize_f32(m.embeddings);
        q.active = m.active;
        idx.by_id[id] = static_cast<int>(idx.doc_ids.size());
        idx.doc_ids.push_back(id);
        idx.doc_store.push_back(std::move(q));
    }
    return idx;
}

double score_record(const std::vector<SearchHit>& hits, const QueryInput& q,
                    const Metric& metric) {
    if (q.gold_doc_ids.empty()) {
        throw InputError(to_string(metric) + " needs gold documents");
    }
    std::vector<std::string> ranked;
    ranked.reserve(hits.size());
    for (const auto& h : hits) ranked.push_back(h.doc_id);
    const std::set<std::string> gold(q.gold_doc_ids.begin(), q.gold_doc_ids.end());
    if (metric.kind == MetricKind::MRR) return mrr_at_k(ranked, gold, metric.k);
    return recall_at_k(ranked, gold, metric.k);
}

}  // namespace

BenchReport run_benchmark(const Model& model, const std::map<std::string, Dataset>& datasets,
                          const BenchConfig& cfg) {
    if (datasets.empty()) throw ConfigError("run_benchmark: no datasets");
    BenchReport report;
    report.model_id = cfg.model_id;
    report.checkpoint = cfg.checkpoint;
    report.seed = cfg.seed;
    report.index_nprobe = cfg.exhaustive ? 0 : cfg.search.nprobe;

    for (const auto& [name, ds] : datasets) {
        const std::vector<QueryInput>& queries =
            ds.queries_val.empty() ? ds.queries : ds.queries_val;
        if (queries.empty()) {
            throw InputError("dataset '" + name + "' has no queries to evaluate");
        }
        const Metric metric =
            cfg.metric_override ? *cfg.metric_override : default_metric(name);

        // one retrieval structure per corpus
        std::map<std::string, PlaidIndex> per_corpus;
        for (const auto& [cid, corpus] : ds.corpora) {
            std::vector<std::pair<std::string, TokenMatrix>> docs;
            docs.reserve(corpus.docs.size());
            for (const auto& doc : corpus.docs) {
                const TextFeatures dt =
                    encode_doc_with_table(model.enc_table_d, model.enc, doc.text);
                docs.emplace_back(doc.doc_id, project_document(model.fl_doc, dt));
            }
            if (cfg.exhaustive) {
                per_corpus.emplace(cid, make_plain_store(docs));
            } else {
                per_corpus.emplace(cid, build_index(docs, 0, cfg.seed));
            }
        }

        double total = 0.0;
        for (const QueryInput& q : queries) {
            try {
                const PlaidIndex& idx = per_corpus.at(q.corpus_id);
                const TextFeatures txt = query_text_features(model.enc_table_q, model.enc, q);
                const ImageFeatures img = query_image_features(model.enc, q, ds.n_patches);
                const TokenMatrix Q = assemble_query(model.map, txt, img, cfg.stage1_mask);
                const int want = std::max(cfg.search.k, metric.k);
                std::vector<SearchHit> hits;
                if (cfg.exhaustive) {
                    hits = exact_search(idx, Q, want);
                } else {
                    SearchParams p = cfg.search;
                    p.k = want;
                    p.nprobe = std::max(1, std::min(p.nprobe, idx.n_centroids()));
                    hits = search(idx, Q, p);
                }
                if (metric.kind == MetricKind::PseudoRecall) {
                    if (q.gold_answers.empty()) {
                        throw InputError("pseudo recall needs gold answers");
                    }
                    std::vector<std::string> texts;
                    texts.reserve(hits.size());
                    const Corpus& corpus = ds.corpora.at(q.corpus_id);
                    for (const auto& h : hits) texts.push_back(corpus.find(h.doc_id)->text);
                    total += pseudo_recall_at_k(texts, q.gold_answers, metric.k);
                } else {
                    total += score_record(hits, q, metric);
                }
            } catch (const std::exception& e) {
                throw InputError("dataset '" + name + "' query '" + q.query_id +
                                 "': " + e.what());
            }
        }
        TaskReport tr;
        tr.dataset = name;
        tr.metric = metric;
        tr.value = total / static_cast<double>(queries.size());
        tr.n_queries = static_cast<int>(queries.size());
        report.tasks.push_back(tr);
        log_info("benchmark " + name + " " + to_string(metric) + " = " + fmt_value(tr.value));
    }
    return report;
}

void write_report_json(const std::string& path, const BenchReport& r) {
    json j;
    j["model"] = r.model_id;
    j["checkpoint"] = r.checkpoint;
    j["seed"] = r.seed;
    j["nprobe"] = r.index_nprobe;
    j["tasks"] = json::array();
    for (const auto& t : r.tasks) {
        j["tasks"].push_back({{"dataset", t.dataset},
                              {"metric", to_string(t.metric)},
                              {"value", t.value},
                              {"n_queries", t.n_queries}});
    }
    std::ofstream out(path);
    if (!out) throw IoError("cannot write report " + path);
    out << j.dump(2) << "\n";
    if (!out) throw IoError("write failed for " + path);
}

BenchReport load_report_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open report " + path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw FormatError(path + ": " + e.what());
    }
    BenchReport r;
    try {
        r.model_id = j.at("model").get<std::string>();
        r.checkpoint = j.value("checkpoint", std::string());
        r.seed = j.value("seed", std::uint64_t{1});
        r.index_nprobe = j.value("nprobe", 0);
        for (const json& t : j.at("tasks")) {
            TaskReport tr;
            tr.dataset = t.at("dataset").get<std::string>();
            tr.metric = parse_metric(t.at("metric").get<std::string>());
            tr.value = t.at("value").get<double>();
            tr.n_queries = t.value("n_queries", 0);
            r.tasks.push_back(tr);
        }
    } catch (const json::exception& e) {
        throw FormatError(path + ": " + e.what());
    }
    return r;
}

void write_report_csv(const std::string& path, const std::vector<BenchReport>& reports) {
    if (reports.empty()) throw InputError("no reports to merge");
    std::map<std::string, std::map<std::string, double>> results;
    std::map<std::string, std::map<std::string, std::string>> metrics;
    for (const auto& r : reports) {
        if (results.count(r.model_id)) {
            throw InputError("duplicate model id '" + r.model_id + "' across reports");
        }
        for (const auto& t : r.tasks) {
            results[r.model_id][t.dataset] = t.value;
            metrics[r.model_id][t.dataset] = to_string(t.metric);
        }
    }
    const std::map<std::string, double> ar = average_rank(results);
    std::ofstream out(path);
    if (!out) throw IoError("cannot write report CSV " + path);
    out << "model,task,metric,value,A.R.\n";
    for (const auto& [model, per_task] : results) {
        for (const auto& [task, value] : per_task) {
            out << model << "," << task << "," << metrics[model][task] << ","
                << fmt_value(value) << "," << fmt_value(ar.at(model)) << "\n";
        }
    }
    if (!out) throw IoError("write failed for " + path);
}

}  // namespace lateline
