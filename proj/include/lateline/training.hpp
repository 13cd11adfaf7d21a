#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "lateline/dataset.hpp"
#include "lateline/mapping.hpp"

namespace lateline {

struct TrainExample {
    QueryInput query;
    std::set<std::string> gold_doc_ids;
    std::string corpus_id;
    int n_patches = 4;
};

/// Throws InputError when the query has no gold documents.
TrainExample make_train_example(const QueryInput& q, int n_patches);

// ---- contrastive objective -------------------------------------------------

struct LossResult {
    double loss = 0.0;                      // summed over examples
    std::vector<double> dpos;               // d loss / d positive score
    std::vector<std::vector<double>> dneg;  // d loss / d negative scores
};

/// Softmax cross-entropy of the positive against its negatives, log-sum-exp
/// stabilized. Throws InputError when an example has no negatives.
LossResult contrastive_loss(const std::vector<double>& pos_scores,
                            const std::vector<std::vector<double>>& neg_scores);

// ---- batches -----------------------------------------------------------------

struct BatchRow {
    int pos = -1;               // pool index of the gold doc
    std::vector<int> negatives; // pool indices, ascending
};

struct Batch {
    std::vector<int> examples;  // indices into the caller's example list
    std::vector<std::pair<std::string, std::string>> pool;  // (corpus_id, doc_id), first-use order
    std::vector<BatchRow> rows;
};

/// Gold + n seeded random same-corpus negatives per example; every other
/// same-corpus pool doc that is not one of the example's own golds also
/// becomes a negative (in-batch negatives). A doc gold for two queries is a
/// negative for neither.
Batch build_batch(const std::vector<TrainExample>& examples, const std::vector<int>& picked,
                  const std::map<std::string, const Corpus*>& corpora, int n_random_negatives,
                  std::uint64_t seed);

// ---- optimizer ----------------------------------------------------------------

enum class ParamGroup { Mapping, FlQuery, FlDoc, ToyEncoders };

struct TensorSlot {
    std::string name;
    Matrix* tensor;
    ParamGroup group;
};

/// Every trainable tensor of the model in a fixed order.
std::vector<TensorSlot> model_slots(Model& m);

struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::int64_t step = 0;
    std::vector<Matrix> m1, m2;  // parallel to the slot list

    static AdamState init(const std::vector<TensorSlot>& slots);
};

/// Bias-corrected Adam on every slot whose group has a nonzero learning rate;
/// other slots (params and moments) stay bit-identical.
void adam_step(AdamState& st, const std::vector<TensorSlot>& slots,
               const std::vector<Matrix>& grads, const std::map<ParamGroup, double>& lr_by_group);

/// Scales the listed gradients in place so their joint L2 norm is at most
/// max_norm; returns the pre-clip norm.
double clip_global_norm(const std::vector<Matrix*>& grads, double max_norm);

// ---- stages --------------------------------------------------------------------

struct TrainableFlags {
    bool mapping = false;
    bool fl_query = false;
    bool fl_doc = false;
    bool toy_encoders = false;
};

/// Stage 1 trains the mapping structure only; stage 2 adds the tied text
/// projection and token table; stage 3 unties the document side and trains
/// everything.
TrainableFlags default_trainable(int stage);

struct StageConfig {
    int stage = 1;
    TrainableFlags trainable = default_trainable(1);
    std::vector<std::pair<std::string, long long>> datasets;  // (dataset id, sample budget)
    int n_random_negatives = 4;
    double lr_mapping = 1e-4;
    double lr_other = 1e-5;
    int max_steps = 100;
    std::uint64_t seed = 1;
    int batch_size = 8;
    int grad_accum = 8;
    int val_interval = 0;     // optimizer steps between validation passes, 0 = off
    int val_negatives = 8;    // fixed seeded negatives per validation query
    int val_max_queries = 0;  // per-dataset cap, 0 = all
    std::vector<std::string> watch;  // early-stop watch dataset ids
    int patience = 3;
    double clip_norm = 1.0;
};

StageConfig load_stage_config(const std::string& path);
void validate_stage_config(const StageConfig& cfg);

struct ValPoint {
    int step = 0;
    std::string dataset;
    double nll = 0.0;
};

struct StageResult {
    std::vector<std::pair<int, double>> loss_curve;  // (step, mean NLL per example)
    std::vector<ValPoint> val_curve;
    std::map<std::string, double> min_val_nll;
    int steps_run = 0;
    bool early_stopped = false;
};

/// Runs the configured stage against the loaded datasets, mutating the model.
/// Query/doc parameter copies stay tied (bit-identical) below stage 3.
/// Aborts with TrainingError naming the step when the loss leaves the finite
/// range.
StageResult run_stage(const StageConfig& cfg, Model& model,
                      const std::map<std::string, Dataset>& datasets);

/// CSV rows step,dataset,loss: training rows under dataset "train",
/// validation rows per dataset.
void write_loss_curve_csv(const std::string& path, const StageResult& r);

// ---- intermediate-pretraining gain ----------------------------------------------

struct GainRow {
    int n_inter = 0;
    std::map<std::string, double> min_nll;  // H per stage-3 dataset
    std::map<std::string, double> gain;     // H(0) - H(n_inter)
};

/// For each grid entry: stage 2 for n_inter steps from a shared starting
/// model, then stage 3, recording the minimum validation NLL per dataset.
/// The baseline run (n_inter = 0) is computed once and reused, so its row is
/// exactly zero.
std::vector<GainRow> intermediate_gain(const Model& base, const StageConfig& stage2_cfg,
                                       const StageConfig& stage3_cfg,
                                       const std::map<std::string, Dataset>& datasets,
                                       const std::vector<int>& n_inter_grid);

// ---- dataset balancing -----------------------------------------------------------

struct BalanceEntry {
    long long budget = 0;
    int repeat = 1;  // passes over the raw data needed to fill the budget
};

/// Built-in stage-3 proportion policy: dataset id -> adjusted sample budget.
const std::map<std::string, long long>& stage3_policy();

/// Subsample or repeat each dataset to its policy budget. Throws InputError
/// for dataset ids the policy does not cover.
std::map<std::string, BalanceEntry> balance_datasets(
    const std::map<std::string, long long>& raw_sizes,
    const std::map<std::string, long long>& policy);

/// Installs a pretrained token table (a vocab x d_L token-matrix file) as both
/// text-encoder copies, replacing the seeded Gaussian tables.
void load_pretrained_text_table(Model& m, const std::string& token_matrix_path);

}  // namespace lateline
