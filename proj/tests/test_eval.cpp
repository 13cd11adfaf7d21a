#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "lateline/errors.hpp"
#include "lateline/eval.hpp"
#include "lateline/synthetic.hpp"

using namespace lateline;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / "lateline_eval_test" / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

EncoderConfig tiny_enc() {
    EncoderConfig enc;
    enc.d_text = 12;
    enc.d_vision = 16;
    enc.vocab_size = 2048;
    enc.seed = 9;
    return enc;
}

Dataset tiny_task(const std::string& dirname, std::uint64_t seed) {
    SyntheticSpec spec;
    spec.name = "toy";
    spec.n_docs = 18;
    spec.n_queries = 10;
    spec.n_val = 6;
    spec.n_corpora = 2;
    spec.noise = 0.1;
    spec.seed = seed;
    spec.enc = tiny_enc();
    return generate(spec, fresh_dir(dirname).string());
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("metric strings round-trip and malformed ones are rejected") {
    CHECK(to_string(Metric{MetricKind::Recall, 10}) == "R@10");
    CHECK(to_string(Metric{MetricKind::PseudoRecall, 5}) == "PR@5");
    CHECK(to_string(Metric{MetricKind::MRR, 10}) == "MRR@10");

    for (const char* s : {"R@1", "R@10", "PR@5", "MRR@10", "MRR@1"}) {
        const Metric m = parse_metric(s);
        CHECK(to_string(m) == s);
    }
    CHECK(parse_metric("R@3").kind == MetricKind::Recall);
    CHECK(parse_metric("R@3").k == 3);
    CHECK(parse_metric("PR@7").kind == MetricKind::PseudoRecall);
    CHECK(parse_metric("MRR@2").kind == MetricKind::MRR);

    CHECK_THROWS_AS(parse_metric("R"), ConfigError);
    CHECK_THROWS_AS(parse_metric("recall@5"), ConfigError);
    CHECK_THROWS_AS(parse_metric("X@5"), ConfigError);
    CHECK_THROWS_AS(parse_metric("R@"), ConfigError);
    CHECK_THROWS_AS(parse_metric("R@x"), ConfigError);
    CHECK_THROWS_AS(parse_metric("R@0"), ConfigError);
    CHECK_THROWS_AS(parse_metric("R@-1"), ConfigError);
    CHECK_THROWS_AS(parse_metric(""), ConfigError);
}

TEST_CASE("per-dataset metric defaults") {
    CHECK(to_string(default_metric("wit")) == "R@10");
    CHECK(to_string(default_metric("msmarco")) == "R@10");
    CHECK(to_string(default_metric("llava")) == "R@1");
    CHECK(to_string(default_metric("iglue")) == "R@1");
    CHECK(to_string(default_metric("infoseek")) == "PR@5");
    CHECK(to_string(default_metric("evqa")) == "PR@5");
    CHECK(to_string(default_metric("okvqa")) == "PR@5");
    CHECK(to_string(default_metric("kvqa")) == "R@5");
    CHECK(to_string(default_metric("oven")) == "R@5");
    CHECK(to_string(default_metric("anything_else")) == "R@5");
}

TEST_CASE("recall and reciprocal rank hand values") {
    const std::vector<std::string> ranked = {"a", "b", "c"};
    const std::set<std::string> gold = {"b"};
    CHECK(recall_at_k(ranked, gold, 1) == 0);
    CHECK(recall_at_k(ranked, gold, 2) == 1);
    CHECK(recall_at_k(ranked, gold, 3) == 1);
    CHECK(recall_at_k(ranked, gold, 50) == 1);  // k beyond the list clamps
    CHECK(recall_at_k(ranked, {"z"}, 3) == 0);
    CHECK(recall_at_k({}, gold, 3) == 0);

    CHECK(mrr_at_k(ranked, gold, 1) == 0.0);
    CHECK(mrr_at_k(ranked, gold, 2) == 0.5);
    CHECK(mrr_at_k(ranked, gold, 3) == 0.5);
    CHECK(mrr_at_k(ranked, {"a"}, 3) == 1.0);
    CHECK(mrr_at_k(ranked, {"c"}, 3) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    CHECK(mrr_at_k(ranked, {"z"}, 3) == 0.0);
    // first gold wins even when a later-ranked doc is also gold
    CHECK(mrr_at_k(ranked, {"a", "c"}, 3) == 1.0);

    CHECK_THROWS_AS(recall_at_k(ranked, gold, 0), ConfigError);
    CHECK_THROWS_AS(mrr_at_k(ranked, gold, 0), ConfigError);
    CHECK_THROWS_AS(pseudo_recall_at_k({"x"}, {"x"}, 0), ConfigError);
}

TEST_CASE("answer normalization lowercases and strips token-edge punctuation") {
    CHECK(normalize_answer_text("Most cats have 26 deciduous teeth.") ==
          "most cats have 26 deciduous teeth");
    CHECK(normalize_answer_text("  Don't   STOP -- now!  ") == "don't stop now");
    CHECK(normalize_answer_text("(hello)") == "hello");
    CHECK(normalize_answer_text("...") == "");
    CHECK(normalize_answer_text("") == "");
    CHECK(normalize_answer_text("a,b") == "a,b");  // inner punctuation survives
    CHECK(normalize_answer_text("TaBs\tand\nnewlines") == "tabs and newlines");
}

TEST_CASE("pseudo recall is a substring match on normalized text") {
    const std::vector<std::string> texts = {"Most cats have 26 deciduous teeth."};
    CHECK(pseudo_recall_at_k(texts, {"26"}, 1) == 1);
    CHECK(pseudo_recall_at_k(texts, {"27"}, 1) == 0);
    CHECK(pseudo_recall_at_k(texts, {"TEETH"}, 1) == 1);
    CHECK(pseudo_recall_at_k(texts, {"teeth."}, 1) == 1);
    CHECK(pseudo_recall_at_k(texts, {"cats have 26"}, 1) == 1);
    CHECK(pseudo_recall_at_k(texts, {"dogs", "26"}, 1) == 1);  // any answer suffices

    // only the top k texts are searched
    const std::vector<std::string> two = {"nothing here", "the answer is 42"};
    CHECK(pseudo_recall_at_k(two, {"42"}, 1) == 0);
    CHECK(pseudo_recall_at_k(two, {"42"}, 2) == 1);
    CHECK(pseudo_recall_at_k(two, {"42"}, 99) == 1);

    CHECK_THROWS_AS(pseudo_recall_at_k(texts, {}, 1), InputError);
}

TEST_CASE("metric values never decrease as k grows") {
    Rng rng(77);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<std::string> ranked;
        for (int i = 0; i < 8; ++i) ranked.push_back("d" + std::to_string(i));
        const std::set<std::string> gold = {"d" + std::to_string(rng.next_below(10))};
        std::vector<std::string> texts;
        for (const auto& id : ranked) texts.push_back("text of " + id);
        const std::vector<std::string> answers = {"of d" + std::to_string(rng.next_below(10))};
        for (int k = 1; k < 10; ++k) {
            CHECK(recall_at_k(ranked, gold, k) <= recall_at_k(ranked, gold, k + 1));
            CHECK(mrr_at_k(ranked, gold, k) <= mrr_at_k(ranked, gold, k + 1));
            CHECK(pseudo_recall_at_k(texts, answers, k) <=
                  pseudo_recall_at_k(texts, answers, k + 1));
        }
    }
}

TEST_CASE("average rank orders models per task and splits ties") {
    std::map<std::string, std::map<std::string, double>> results;
    results["m1"] = {{"ta", 0.9}, {"tb", 0.5}};
    results["m2"] = {{"ta", 0.8}, {"tb", 0.5}};
    results["m3"] = {{"ta", 0.7}, {"tb", 0.2}};
    const auto ar = average_rank(results);
    REQUIRE(ar.size() == 3);
    CHECK(ar.at("m1") == doctest::Approx(1.25).epsilon(1e-15));
    CHECK(ar.at("m2") == doctest::Approx(1.75).epsilon(1e-15));
    CHECK(ar.at("m3") == doctest::Approx(3.0).epsilon(1e-15));

    // ranks depend only on per-task order, not on the raw values
    std::map<std::string, std::map<std::string, double>> rescaled;
    for (const auto& [m, tasks] : results) {
        for (const auto& [t, v] : tasks) rescaled[m][t] = 2.0 * v - 0.3;
    }
    const auto ar2 = average_rank(rescaled);
    for (const auto& [m, v] : ar) CHECK(ar2.at(m) == doctest::Approx(v).epsilon(1e-15));

    // all tied on one task
    std::map<std::string, std::map<std::string, double>> tied;
    tied["a"] = {{"t", 0.4}};
    tied["b"] = {{"t", 0.4}};
    tied["c"] = {{"t", 0.4}};
    const auto ar3 = average_rank(tied);
    CHECK(ar3.at("a") == doctest::Approx(2.0).epsilon(1e-15));
    CHECK(ar3.at("b") == doctest::Approx(2.0).epsilon(1e-15));
    CHECK(ar3.at("c") == doctest::Approx(2.0).epsilon(1e-15));
}

TEST_CASE("average rank requires full task coverage") {
    std::map<std::string, std::map<std::string, double>> results;
    results["m1"] = {{"ta", 0.9}, {"tb", 0.5}};
    results["m2"] = {{"ta", 0.8}};
    try {
        average_rank(results);
        FAIL("expected InputError");
    } catch (const InputError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("m2") != std::string::npos);
        CHECK(msg.find("tb") != std::string::npos);
    }
    CHECK_THROWS_AS(average_rank({}), InputError);
}

TEST_CASE("benchmark agrees between exhaustive and saturated probing") {
    std::map<std::string, Dataset> datasets;
    datasets.emplace("toy", tiny_task("bench_a", 21));
    const Model m = init_model(MappingDims{16, 12, 8, 2, 1}, tiny_enc());

    BenchConfig ex;
    ex.exhaustive = true;
    ex.seed = 5;
    const BenchReport re = run_benchmark(m, datasets, ex);
    REQUIRE(re.tasks.size() == 1);
    CHECK(re.index_nprobe == 0);
    CHECK(re.tasks[0].dataset == "toy");
    CHECK(to_string(re.tasks[0].metric) == "R@5");  // "toy" falls to the generic default
    CHECK(re.tasks[0].n_queries == 6);              // held-out split
    CHECK(re.tasks[0].value >= 0.0);
    CHECK(re.tasks[0].value <= 1.0);

    BenchConfig ix;
    ix.exhaustive = false;
    ix.seed = 5;
    ix.search.nprobe = 1000000;  // clamped to each corpus's centroid count
    const BenchReport ri = run_benchmark(m, datasets, ix);
    REQUIRE(ri.tasks.size() == 1);
    CHECK(ri.index_nprobe == 1000000);
    CHECK(ri.tasks[0].value == re.tasks[0].value);
    CHECK(ri.tasks[0].n_queries == re.tasks[0].n_queries);

    // the override replaces the per-dataset default everywhere
    BenchConfig ov = ex;
    ov.metric_override = Metric{MetricKind::MRR, 3};
    const BenchReport ro = run_benchmark(m, datasets, ov);
    CHECK(to_string(ro.tasks[0].metric) == "MRR@3");
    CHECK(ro.tasks[0].value >= 0.0);
    CHECK(ro.tasks[0].value <= 1.0);

    // masking text rows still yields a well-formed run
    BenchConfig mask = ex;
    mask.stage1_mask = true;
    const BenchReport rm = run_benchmark(m, datasets, mask);
    CHECK(rm.tasks[0].value >= 0.0);
    CHECK(rm.tasks[0].value <= 1.0);

    CHECK_THROWS_AS(run_benchmark(m, {}, ex), ConfigError);
}

TEST_CASE("benchmark failures name the dataset and query") {
    std::map<std::string, Dataset> datasets;
    datasets.emplace("evqa", tiny_task("bench_fail", 22));  // PR@5 default
    // strip the gold answers so pseudo recall cannot run
    for (auto& q : datasets.at("evqa").queries_val) q.gold_answers.clear();
    const Model m = init_model(MappingDims{16, 12, 8, 2, 1}, tiny_enc());
    BenchConfig cfg;
    cfg.exhaustive = true;
    try {
        run_benchmark(m, datasets, cfg);
        FAIL("expected InputError");
    } catch (const InputError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("evqa") != std::string::npos);
        CHECK(msg.find("q") != std::string::npos);
    }
}

TEST_CASE("report JSON round-trips") {
    const fs::path dir = fresh_dir("report_json");
    BenchReport r;
    r.model_id = "probe";
    r.checkpoint = "ck.llck";
    r.seed = 42;
    r.index_nprobe = 3;
    r.tasks.push_back({"wit", Metric{MetricKind::Recall, 10}, 0.125, 4});
    r.tasks.push_back({"evqa", Metric{MetricKind::PseudoRecall, 5}, 0.75, 8});
    const std::string path = (dir / "report.json").string();
    write_report_json(path, r);
    const BenchReport l = load_report_json(path);
    CHECK(l.model_id == r.model_id);
    CHECK(l.checkpoint == r.checkpoint);
    CHECK(l.seed == r.seed);
    CHECK(l.index_nprobe == r.index_nprobe);
    REQUIRE(l.tasks.size() == 2);
    CHECK(l.tasks[0].dataset == "wit");
    CHECK(to_string(l.tasks[0].metric) == "R@10");
    CHECK(l.tasks[0].value == r.tasks[0].value);
    CHECK(l.tasks[0].n_queries == 4);
    CHECK(l.tasks[1].dataset == "evqa");
    CHECK(to_string(l.tasks[1].metric) == "PR@5");

    CHECK_THROWS_AS(load_report_json((dir / "missing.json").string()), IoError);
    std::ofstream(dir / "junk.json") << "not json";
    CHECK_THROWS_AS(load_report_json((dir / "junk.json").string()), FormatError);
}

TEST_CASE("merged CSV ranks models across shared tasks") {
    const fs::path dir = fresh_dir("report_csv");
    BenchReport a;
    a.model_id = "alpha";
    a.tasks.push_back({"wit", Metric{MetricKind::Recall, 10}, 0.9, 4});
    a.tasks.push_back({"oven", Metric{MetricKind::Recall, 5}, 0.5, 4});
    BenchReport b;
    b.model_id = "beta";
    b.tasks.push_back({"wit", Metric{MetricKind::Recall, 10}, 0.6, 4});
    b.tasks.push_back({"oven", Metric{MetricKind::Recall, 5}, 0.25, 4});

    const std::string path = (dir / "report.csv").string();
    write_report_csv(path, {a, b});
    const std::string text = slurp(path);
    std::istringstream lines(text);
    std::string line;
    REQUIRE(std::getline(lines, line));
    CHECK(line == "model,task,metric,value,A.R.");
    std::vector<std::string> rest;
    while (std::getline(lines, line)) {
        if (!line.empty()) rest.push_back(line);
    }
    REQUIRE(rest.size() == 4);
    // alpha beats beta on both tasks
    CHECK(text.find("alpha,wit,R@10,0.900000,1.000000") != std::string::npos);
    CHECK(text.find("alpha,oven,R@5,0.500000,1.000000") != std::string::npos);
    CHECK(text.find("beta,wit,R@10,0.600000,2.000000") != std::string::npos);
    CHECK(text.find("beta,oven,R@5,0.250000,2.000000") != std::string::npos);

    BenchReport dup = b;
    CHECK_THROWS_AS(write_report_csv((dir / "dup.csv").string(), {b, dup}), InputError);
    CHECK_THROWS_AS(write_report_csv((dir / "none.csv").string(), {}), InputError);

    // coverage mismatch across models
    BenchReport c;
    c.model_id = "gamma";
    c.tasks.push_back({"wit", Metric{MetricKind::Recall, 10}, 0.7, 4});
    CHECK_THROWS_AS(write_report_csv((dir / "partial.csv").string(), {a, c}), InputError);
}
