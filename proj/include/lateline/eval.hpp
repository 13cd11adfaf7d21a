#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "lateline/dataset.hpp"
#include "lateline/mapping.hpp"
#include "lateline/plaid.hpp"

namespace lateline {

enum class MetricKind { Recall, PseudoRecall, MRR };

struct Metric {
    MetricKind kind = MetricKind::Recall;
    int k = 10;
};

std::string to_string(const Metric& m);  // "R@10", "PR@5", "MRR@10"
Metric parse_metric(const std::string& s);

/// Per-dataset metric defaults: R@10 for wit/msmarco, R@1 for llava/iglue,
/// PR@5 for infoseek/evqa/okvqa, R@5 otherwise.
Metric default_metric(const std::string& dataset);

/// 1 iff any of the first k ranked ids is gold.
int recall_at_k(const std::vector<std::string>& ranked, const std::set<std::string>& gold,
                int k);

/// 1 iff any of the first k doc texts contains any answer, both sides
/// normalized (lowercase, whitespace collapsed, punctuation stripped at token
/// edges); substring match on the normalized text.
int pseudo_recall_at_k(const std::vector<std::string>& ranked_texts,
                       const std::vector<std::string>& answers, int k);

/// 1/rank of the first gold within the top k, else 0.
double mrr_at_k(const std::vector<std::string>& ranked, const std::set<std::string>& gold,
                int k);

std::string normalize_answer_text(const std::string& s);

/// results: model -> task -> metric value. Per task, models are ranked by
/// value descending with ties sharing the mean of their positions; the
/// result is each model's mean rank across tasks (lower is better).
/// Every model must cover every task.
std::map<std::string, double> average_rank(
    const std::map<std::string, std::map<std::string, double>>& results);

struct EvalRecord {
    std::string query_id;
    std::set<std::string> gold_doc_ids;
    std::vector<std::string> gold_answers;
    Task task = Task::IQ2T;
    Metric metric;
};

struct TaskReport {
    std::string dataset;
    Metric metric;
    double value = 0.0;
    int n_queries = 0;
};

struct BenchReport {
    std::string model_id;
    std::string checkpoint;
    std::uint64_t seed = 1;
    int index_nprobe = 0;  // 0 records an exhaustive run
    std::vector<TaskReport> tasks;
};

struct BenchConfig {
    std::string model_id = "model";
    std::string checkpoint;
    SearchParams search;                    // nprobe is clamped to each corpus's K
    bool exhaustive = false;                // brute-force instead of the two-phase index
    std::optional<Metric> metric_override;  // applied to every dataset when set
    bool stage1_mask = false;               // evaluate with text rows masked out
    std::uint64_t seed = 1;
};

/// Embeds each dataset's held-out queries (falling back to the training
/// split when no held-out split exists), retrieves within each query's
/// corpus, and scores every record with the dataset's metric. Failures name
/// the dataset and query id.
BenchReport run_benchmark(const Model& model, const std::map<std::string, Dataset>& datasets,
                          const BenchConfig& cfg);

void write_report_json(const std::string& path, const BenchReport& r);
BenchReport load_report_json(const std::string& path);

/// Merged CSV over one or more reports: model,task,metric,value,A.R. —
/// every model must cover the same task set.
void write_report_csv(const std::string& path, const std::vector<BenchReport>& reports);

}  // namespace lateline
