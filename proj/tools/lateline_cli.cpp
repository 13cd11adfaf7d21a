// Operator CLI: encode / index / search / eval / train / report / synth.
// Exit codes: 0 ok, 1 runtime failure, 2 usage or config error.
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "lateline/dataset.hpp"
#include "lateline/errors.hpp"
#include "lateline/eval.hpp"
#include "lateline/late_interaction.hpp"
#include "lateline/log.hpp"
#include "lateline/mapping.hpp"
#include "lateline/plaid.hpp"
#include "lateline/synthetic.hpp"
#include "lateline/training.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace lateline;

namespace {

std::string utc_timestamp() {
    std::time_t t = std::time(nullptr);
    if (const char* env = std::getenv("SOURCE_DATE_EPOCH")) {
        t = static_cast<std::time_t>(std::strtoll(env, nullptr, 10));
    }
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

struct RunManifest {
    std::string command;
    std::string config;
    std::uint64_t seed = 0;
    std::vector<std::string> inputs;
    std::vector<std::string> outputs;  // files produced; each gets hashed
};

void write_run_manifest(const fs::path& path, const RunManifest& m) {
    json j;
    j["command"] = m.command;
    j["config"] = m.config;
    j["seed"] = m.seed;
    j["inputs"] = m.inputs;
    j["outputs"] = m.outputs;
    j["timestamp"] = utc_timestamp();
    json hashes = json::object();
    for (const auto& out : m.outputs) hashes[out] = md5_hex_file(out);
    j["artifacts"] = std::move(hashes);
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << j.dump(2) << "\n";
}

void check_artifact_name(const std::string& id) {
    if (id.empty() || id.front() == '.' || id.find('/') != std::string::npos ||
        id.find('\\') != std::string::npos) {
        throw InputError("id '" + id + "' is not usable as a file name");
    }
}

json load_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw FormatError(path + ": " + e.what());
    }
}

// ---- encode ----------------------------------------------------------------

struct EncodeArgs {
    std::string data, checkpoint, out;
    std::uint64_t seed = 1;
    bool stage1_mask = false;
};

void cmd_encode(const EncodeArgs& a) {
    const Dataset ds = load_m2kr(a.data, a.seed);
    const Model model = load_checkpoint(a.checkpoint);
    const fs::path root(a.out);
    fs::create_directories(root / "queries");
    RunManifest man{"encode", "", a.seed, {a.data, a.checkpoint}, {}};

    auto encode_query = [&](const QueryInput& q) {
        check_artifact_name(q.query_id);
        const TextFeatures txt = query_text_features(model.enc_table_q, model.enc, q);
        const ImageFeatures img = query_image_features(model.enc, q, ds.n_patches);
        const TokenMatrix qm = assemble_query(model.map, txt, img, a.stage1_mask);
        const std::string path = (root / "queries" / (q.query_id + ".llm")).string();
        save_token_matrix(path, qm);
        man.outputs.push_back(path);
    };
    for (const auto& q : ds.queries) encode_query(q);
    for (const auto& q : ds.queries_val) encode_query(q);

    for (const auto& [cid, corpus] : ds.corpora) {
        check_artifact_name(cid);
        fs::create_directories(root / "docs" / cid);
        for (const auto& doc : corpus.docs) {
            check_artifact_name(doc.doc_id);
            const TextFeatures txt = encode_doc_with_table(model.enc_table_d, model.enc, doc.text);
            const TokenMatrix dm = project_document(model.fl_doc, txt);
            const std::string path = (root / "docs" / cid / (doc.doc_id + ".llm")).string();
            save_token_matrix(path, dm);
            man.outputs.push_back(path);
        }
    }
    write_run_manifest(root / "run_manifest.json", man);
    std::printf("encoded %zu queries, %zu corpora -> %s\n",
                ds.queries.size() + ds.queries_val.size(), ds.corpora.size(), a.out.c_str());
}

// ---- index -----------------------------------------------------------------

struct IndexArgs {
    std::string docs, out;
    int centroids = 0;  // 0 = heuristic
    std::uint64_t seed = 1;
    int iters = 10;
};

void cmd_index(const IndexArgs& a) {
    std::vector<std::pair<std::string, TokenMatrix>> docs;
    std::vector<std::string> files;
    for (const auto& entry : fs::directory_iterator(a.docs)) {
        if (entry.path().extension() == ".llm") files.push_back(entry.path().string());
    }
    if (files.empty()) throw InputError("no .llm files under " + a.docs);
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
        docs.emplace_back(fs::path(f).stem().string(), load_token_matrix(f));
    }
    const PlaidIndex idx = build_index(docs, a.centroids, a.seed, a.iters);
    save_index(a.out, idx);
    RunManifest man{"index", "", a.seed, files, {a.out}};
    write_run_manifest(fs::path(a.out).string() + ".run.json", man);
    std::printf("indexed %zu docs into %d centroids -> %s\n", docs.size(), idx.n_centroids(),
                a.out.c_str());
}

// ---- search ----------------------------------------------------------------

struct SearchArgs {
    std::string index, query, out;
    int k = 10;
    int nprobe = 2;
    bool exact = false;
};

void cmd_search(const SearchArgs& a) {
    const PlaidIndex idx = load_index(a.index);
    const TokenMatrix q = load_token_matrix(a.query);
    std::vector<SearchHit> hits;
    if (a.exact) {
        hits = exact_search(idx, q, a.k);
    } else {
        SearchParams p;
        p.k = a.k;
        p.nprobe = a.nprobe;
        hits = search(idx, q, p);
    }
    std::string tsv;
    for (std::size_t i = 0; i < hits.size(); ++i) {
        char line[256];
        std::snprintf(line, sizeof line, "%zu\t%s\t%.6f\n", i + 1, hits[i].doc_id.c_str(),
                      hits[i].score);
        tsv += line;
    }
    std::fputs(tsv.c_str(), stdout);
    if (!a.out.empty()) {
        std::ofstream out(a.out);
        if (!out) throw IoError("cannot write " + a.out);
        out << tsv;
        out.close();
        RunManifest man{"search", "", 0, {a.index, a.query}, {a.out}};
        write_run_manifest(fs::path(a.out).string() + ".run.json", man);
    }
}

// ---- eval ------------------------------------------------------------------

struct EvalArgs {
    std::string config, out;
    int k = 0;             // >0 overrides config
    int nprobe = 0;        // >0 overrides config
    std::string metric;    // non-empty overrides config
    std::uint64_t seed = 0;  // >0 overrides config
};

void cmd_eval(const EvalArgs& a) {
    const json j = load_json_file(a.config);
    BenchConfig cfg;
    std::map<std::string, Dataset> datasets;
    std::vector<std::string> inputs{a.config};
    try {
        cfg.model_id = j.value("model_id", cfg.model_id);
        cfg.checkpoint = j.at("checkpoint").get<std::string>();
        cfg.search.k = j.value("k", cfg.search.k);
        cfg.search.nprobe = j.value("nprobe", cfg.search.nprobe);
        cfg.search.candidate_cap = j.value("candidate_cap", cfg.search.candidate_cap);
        cfg.exhaustive = j.value("exhaustive", cfg.exhaustive);
        cfg.stage1_mask = j.value("stage1_mask", cfg.stage1_mask);
        cfg.seed = j.value("seed", cfg.seed);
        if (j.contains("metric")) {
            cfg.metric_override = parse_metric(j.at("metric").get<std::string>());
        }
        if (!j.contains("data") || !j.at("data").is_object() || j.at("data").empty()) {
            throw ConfigError(a.config + ": needs a non-empty 'data' object (name -> manifest)");
        }
        for (const auto& [name, path] : j.at("data").items()) {
            inputs.push_back(path.get<std::string>());
        }
    } catch (const json::exception& e) {
        throw FormatError(a.config + ": " + e.what());
    }
    if (a.k > 0) cfg.search.k = a.k;
    if (a.nprobe > 0) cfg.search.nprobe = a.nprobe;
    if (!a.metric.empty()) cfg.metric_override = parse_metric(a.metric);
    if (a.seed > 0) cfg.seed = a.seed;
    for (const auto& [name, path] : j.at("data").items()) {
        datasets.emplace(name, load_m2kr(path.get<std::string>(), cfg.seed));
    }

    const Model model = load_checkpoint(cfg.checkpoint);
    inputs.push_back(cfg.checkpoint);
    const BenchReport report = run_benchmark(model, datasets, cfg);

    const fs::path root(a.out);
    fs::create_directories(root);
    const std::string report_json = (root / "report.json").string();
    const std::string report_csv = (root / "report.csv").string();
    write_report_json(report_json, report);
    write_report_csv(report_csv, {report});
    RunManifest man{"eval", a.config, cfg.seed, inputs, {report_json, report_csv}};
    write_run_manifest(root / "run_manifest.json", man);
    std::ifstream echo(report_csv);
    std::cout << echo.rdbuf();
}

// ---- train -----------------------------------------------------------------

struct TrainArgs {
    std::string config, out;
    std::uint64_t seed = 0;  // >0 overrides config
};

void cmd_train(const TrainArgs& a) {
    StageConfig cfg = load_stage_config(a.config);
    if (a.seed > 0) cfg.seed = a.seed;
    const json j = load_json_file(a.config);
    std::vector<std::string> inputs{a.config};

    Model model = [&]() {
        if (j.contains("checkpoint")) {
            const std::string path = j.at("checkpoint").get<std::string>();
            inputs.push_back(path);
            return load_checkpoint(path);
        }
        if (!j.contains("model")) {
            throw ConfigError(a.config + ": needs 'checkpoint' or a 'model' dims object");
        }
        const json& m = j.at("model");
        MappingDims dims;
        try {
            dims.d_V = m.at("d_V").get<int>();
            dims.d_L = m.at("d_L").get<int>();
            dims.d_h = m.at("d_h").get<int>();
            dims.n_vt = m.at("n_vt").get<int>();
            dims.n_tr = m.at("n_tr").get<int>();
        } catch (const json::exception& e) {
            throw FormatError(a.config + ": " + e.what());
        }
        EncoderConfig enc;
        enc.d_text = dims.d_L;
        enc.d_vision = dims.d_V;
        if (m.contains("enc")) {
            const json& je = m.at("enc");
            enc.d_text = je.value("d_text", enc.d_text);
            enc.d_vision = je.value("d_vision", enc.d_vision);
            enc.vocab_size = je.value("vocab_size", enc.vocab_size);
            enc.seed = je.value("seed", enc.seed);
        }
        return init_model(dims, enc);
    }();

    if (!j.contains("data") || !j.at("data").is_object()) {
        throw ConfigError(a.config + ": needs a 'data' object (dataset id -> manifest path)");
    }
    std::map<std::string, Dataset> datasets;
    for (const auto& [name, path] : j.at("data").items()) {
        inputs.push_back(path.get<std::string>());
        datasets.emplace(name, load_m2kr(path.get<std::string>(), cfg.seed));
    }

    const StageResult result = run_stage(cfg, model, datasets);

    const fs::path root(a.out);
    fs::create_directories(root);
    const std::string ckpt = (root / "model.llck").string();
    const std::string curve = (root / "loss_curve.csv").string();
    const std::string summary_path = (root / "stage_result.json").string();
    save_checkpoint(ckpt, model);
    write_loss_curve_csv(curve, result);
    json summary;
    summary["steps_run"] = result.steps_run;
    summary["early_stopped"] = result.early_stopped;
    summary["min_val_nll"] = result.min_val_nll;
    {
        std::ofstream out(summary_path);
        if (!out) throw IoError("cannot write " + summary_path);
        out << summary.dump(2) << "\n";
    }
    RunManifest man{"train", a.config, cfg.seed, inputs, {ckpt, curve, summary_path}};
    write_run_manifest(root / "run_manifest.json", man);
    std::printf("stage %d ran %d steps%s -> %s\n", cfg.stage, result.steps_run,
                result.early_stopped ? " (early stop)" : "", ckpt.c_str());
}

// ---- report ----------------------------------------------------------------

struct ReportArgs {
    std::vector<std::string> runs;
    std::string out;
};

void cmd_report(const ReportArgs& a) {
    std::vector<BenchReport> reports;
    for (const auto& path : a.runs) reports.push_back(load_report_json(path));
    write_report_csv(a.out, reports);
    RunManifest man{"report", "", 0, a.runs, {a.out}};
    write_run_manifest(fs::path(a.out).string() + ".run.json", man);
    std::ifstream echo(a.out);
    std::cout << echo.rdbuf();
}

// ---- synth -----------------------------------------------------------------

struct SynthArgs {
    std::string config, out;
    std::uint64_t seed = 0;  // >0 overrides config
};

void cmd_synth(const SynthArgs& a) {
    const json j = load_json_file(a.config);
    const std::string kind = j.value("kind", std::string("planted"));
    RunManifest man{"synth", a.config, 0, {a.config}, {}};
    try {
        if (kind == "planted") {
            SyntheticSpec spec;
            spec.name = j.value("name", spec.name);
            spec.n_docs = j.value("n_docs", spec.n_docs);
            spec.n_queries = j.value("n_queries", spec.n_queries);
            spec.n_val = j.value("n_val", spec.n_val);
            spec.n_corpora = j.value("n_corpora", spec.n_corpora);
            spec.n_patches = j.value("n_patches", spec.n_patches);
            spec.n_filler_tokens = j.value("n_filler_tokens", spec.n_filler_tokens);
            spec.noise = j.value("noise", spec.noise);
            spec.share_i2t = j.value("share_i2t", spec.share_i2t);
            spec.share_q2t = j.value("share_q2t", spec.share_q2t);
            spec.share_iq2t = j.value("share_iq2t", spec.share_iq2t);
            spec.seed = j.value("seed", spec.seed);
            if (a.seed > 0) spec.seed = a.seed;
            if (j.contains("enc")) {
                const json& je = j.at("enc");
                spec.enc.d_text = je.value("d_text", spec.enc.d_text);
                spec.enc.d_vision = je.value("d_vision", spec.enc.d_vision);
                spec.enc.vocab_size = je.value("vocab_size", spec.enc.vocab_size);
                spec.enc.seed = je.value("seed", spec.enc.seed);
            }
            if (j.contains("instruction_templates")) {
                for (const json& t : j.at("instruction_templates")) {
                    spec.instruction_templates.push_back(t.get<std::string>());
                }
            }
            const Dataset ds = generate(spec, a.out);
            man.seed = spec.seed;
            man.outputs.push_back((fs::path(a.out) / "manifest.json").string());
            std::printf("generated '%s': %zu train / %zu val queries over %zu corpora -> %s\n",
                        ds.name.c_str(), ds.queries.size(), ds.queries_val.size(),
                        ds.corpora.size(), a.out.c_str());
        } else if (kind == "conflict") {
            ConflictSpec spec;
            spec.n_docs = j.value("n_docs", spec.n_docs);
            spec.n_train = j.value("n_train", spec.n_train);
            spec.n_val = j.value("n_val", spec.n_val);
            spec.n_patches = j.value("n_patches", spec.n_patches);
            spec.n_filler_tokens = j.value("n_filler_tokens", spec.n_filler_tokens);
            spec.noise = j.value("noise", spec.noise);
            spec.seed = j.value("seed", spec.seed);
            spec.distinct_instructions = j.value("distinct_instructions", spec.distinct_instructions);
            if (a.seed > 0) spec.seed = a.seed;
            if (j.contains("enc")) {
                const json& je = j.at("enc");
                spec.enc.d_text = je.value("d_text", spec.enc.d_text);
                spec.enc.d_vision = je.value("d_vision", spec.enc.d_vision);
                spec.enc.vocab_size = je.value("vocab_size", spec.enc.vocab_size);
                spec.enc.seed = je.value("seed", spec.enc.seed);
            }
            const auto pair = generate_conflicting_pair(spec, a.out);
            man.seed = spec.seed;
            man.outputs.push_back((fs::path(a.out) / pair.first.name / "manifest.json").string());
            man.outputs.push_back((fs::path(a.out) / pair.second.name / "manifest.json").string());
            std::printf("generated conflicting pair '%s'/'%s' over a shared corpus -> %s\n",
                        pair.first.name.c_str(), pair.second.name.c_str(), a.out.c_str());
        } else {
            throw ConfigError(a.config + ": unknown kind '" + kind + "'");
        }
    } catch (const json::exception& e) {
        throw FormatError(a.config + ": " + e.what());
    }
    write_run_manifest(fs::path(a.out) / "run_manifest.json", man);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"late-interaction retrieval pipeline"};
    app.require_subcommand(1);

    EncodeArgs enc;
    auto* c_enc = app.add_subcommand("encode", "embed a dataset's queries and corpus docs");
    c_enc->add_option("--data", enc.data, "dataset manifest")->required()->check(CLI::ExistingFile);
    c_enc->add_option("--checkpoint", enc.checkpoint, "model checkpoint")
        ->required()
        ->check(CLI::ExistingFile);
    c_enc->add_option("--out", enc.out, "output directory")->required();
    c_enc->add_option("--seed", enc.seed, "instruction sampling seed");
    c_enc->add_flag("--stage1-mask", enc.stage1_mask, "mask query text rows");

    IndexArgs idx;
    auto* c_idx = app.add_subcommand("index", "build a two-phase index over encoded docs");
    c_idx->add_option("--docs", idx.docs, "directory of encoded docs (*.llm)")
        ->required()
        ->check(CLI::ExistingDirectory);
    c_idx->add_option("--out", idx.out, "index file")->required();
    c_idx->add_option("--centroids", idx.centroids, "centroid count (0 = heuristic)");
    c_idx->add_option("--seed", idx.seed, "clustering seed");
    c_idx->add_option("--iters", idx.iters, "clustering iterations");

    SearchArgs srch;
    auto* c_srch = app.add_subcommand("search", "query an index, print rank/doc/score TSV");
    c_srch->add_option("--index", srch.index, "index file")->required()->check(CLI::ExistingFile);
    c_srch->add_option("--query", srch.query, "encoded query (.llm)")
        ->required()
        ->check(CLI::ExistingFile);
    c_srch->add_option("--k", srch.k, "results to return");
    c_srch->add_option("--nprobe", srch.nprobe, "centroids probed per query row");
    c_srch->add_flag("--exact", srch.exact, "brute-force scoring instead of the index");
    c_srch->add_option("--out", srch.out, "also write the TSV here");

    EvalArgs ev;
    auto* c_ev = app.add_subcommand("eval", "run the benchmark suite from a config");
    c_ev->add_option("--config", ev.config, "benchmark config JSON")
        ->required()
        ->check(CLI::ExistingFile);
    c_ev->add_option("--out", ev.out, "output directory")->required();
    c_ev->add_option("--k", ev.k, "override: results per query");
    c_ev->add_option("--nprobe", ev.nprobe, "override: centroids probed");
    c_ev->add_option("--metric", ev.metric, "override: metric for every task (e.g. R@5)");
    c_ev->add_option("--seed", ev.seed, "override: run seed");

    TrainArgs tr;
    auto* c_tr = app.add_subcommand("train", "run one training stage from a config");
    c_tr->add_option("--config", tr.config, "stage config JSON")
        ->required()
        ->check(CLI::ExistingFile);
    c_tr->add_option("--out", tr.out, "output directory")->required();
    c_tr->add_option("--seed", tr.seed, "override: run seed");

    ReportArgs rep;
    auto* c_rep = app.add_subcommand("report", "merge benchmark reports into a ranking CSV");
    c_rep->add_option("runs", rep.runs, "report.json files")
        ->required()
        ->check(CLI::ExistingFile);
    c_rep->add_option("--out", rep.out, "merged CSV path")->required();

    SynthArgs syn;
    auto* c_syn = app.add_subcommand("synth", "generate a ground-truth retrieval task");
    c_syn->add_option("--config", syn.config, "generator spec JSON")
        ->required()
        ->check(CLI::ExistingFile);
    c_syn->add_option("--out", syn.out, "output directory")->required();
    c_syn->add_option("--seed", syn.seed, "override: generator seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);  // prints the message
        return 2;
    }

    try {
        if (c_enc->parsed()) cmd_encode(enc);
        if (c_idx->parsed()) cmd_index(idx);
        if (c_srch->parsed()) cmd_search(srch);
        if (c_ev->parsed()) cmd_eval(ev);
        if (c_tr->parsed()) cmd_train(tr);
        if (c_rep->parsed()) cmd_report(rep);
        if (c_syn->parsed()) cmd_synth(syn);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
