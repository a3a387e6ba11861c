// SPDX-License-Identifier: Apache-2.0
// The continual pre-training protocol: pre-train on the base distribution,
// then walk the stream, pre-training the carried checkpoint on each
// experience while measuring downstream and forgetting-control accuracy on
// disposable head-swapped copies. Also the traditional continual-learning
// comparison (naive and replay fine-tuning of a single shared classifier).
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cptlab/model.hpp"
#include "cptlab/objectives.hpp"
#include "cptlab/streams.hpp"
#include "cptlab/tokenizer.hpp"
#include "cptlab/training.hpp"

namespace cptlab {

struct FcGridCell {
    float lr = 1e-4f;
    int batch_size = 32;
};

enum class FcMode { kFinetune, kLinearEval, kBoth };
std::string fc_mode_name(FcMode m);
FcMode fc_mode_from_name(const std::string& s);

struct RunConfig {
    Objective objective = Objective::kMlm;
    ModelSpec model;  // vocab_size is filled from the trained vocabulary for text
    StreamConfig stream;
    TrainBudget pretrain_budget = TrainBudget::pretrain_default();
    TrainBudget finetune_budget = TrainBudget::finetune_default();
    TrainBudget probe_budget = TrainBudget::probe_default();
    FcMode fc_mode = FcMode::kBoth;
    std::vector<int> nt_budgets;  // per-experience new-token counts; empty disables expansion
    std::vector<FcGridCell> fc_grid = {{1e-4f, 32}};
    int vocab_cap = 0;  // 0: large enough for every base word
    int codebook_size = 16;
    int patch_extent = 16;
    bool measure_ds_base = false;  // also fine-tune the baseline checkpoint per downstream task
    std::uint64_t seed = 0;

    void validate() const;
    nlohmann::json to_json() const;
    static RunConfig from_json(const nlohmann::json& j);
};

struct EvalPair {
    double acc = 0.0;
    double one_epoch = 0.0;
};

struct ExperienceRecord {
    int index = 0;
    std::vector<int> classes;
    EvalPair ds;                  // fine-tuned copy of h_i^pr on this experience's task
    EvalPair ds_base;             // fine-tuned copy of h_0^pr, same task and budget
    bool has_ds_base = false;
    EvalPair fc;                  // grid-selected fine-tune of a copy on forgetting control
    double fc_linear = -1.0;      // frozen-body probe accuracy; -1 when not measured
    int fc_grid_pick = -1;        // grid cell chosen on validation
    int pretrain_epochs = 0;
    double pretrain_final_loss = 0.0;
    double pretrain_val_loss = 0.0;
    int new_tokens = 0;
    std::string checkpoint;  // file name of h_i^pr within the run directory
    std::uint64_t body_hash = 0;
    std::uint64_t parent_body_hash = 0;

    nlohmann::json to_json() const;
    static ExperienceRecord from_json(const nlohmann::json& j);
};

struct RunRecord {
    nlohmann::json config;  // RunConfig::to_json of the producing run
    std::uint64_t seed = 0;
    std::string strategy;  // "continual", "naive", or "replay"
    std::uint64_t fc_id = 0;
    EvalPair fc_baseline;
    double fc_baseline_linear = -1.0;
    int fc_baseline_grid_pick = -1;
    std::string baseline_checkpoint;
    std::uint64_t baseline_body_hash = 0;
    std::vector<ExperienceRecord> experiences;
    std::vector<std::vector<double>> acc_matrix;  // traditional runs; row i = after task i+1

    double forgetting(int i) const;  // baseline fc accuracy minus experience i's (0-based)
    nlohmann::json to_json() const;  // canonical: no wall-clock, keys sorted
    static RunRecord from_json(const nlohmann::json& j);
    void save(const std::string& path) const;
    static RunRecord load(const std::string& path);
};

// Pre-trains a fresh model on the base distribution with the run objective;
// the result is the forgetting baseline h_0^pr. Zero epochs returns the
// initialized model unchanged.
PretrainStats initial_pretrain(Model& model, const RunConfig& cfg, const Dataset& base,
                               const Vocab* vocab, const VisualCodebook* codebook,
                               AccessLog* log);

// Fine-tunes copies of `model` over the lr/batch grid, selects the cell with
// the best validation accuracy, and reports that cell's test numbers.
struct FcEvalResult {
    EvalPair pair;
    int pick = -1;
};
FcEvalResult fc_grid_eval(const Model& model, const FcDataset& fc,
                          const std::vector<FcGridCell>& grid, const TrainBudget& base_budget,
                          const Vocab* vocab, std::uint64_t seed, AccessLog* log,
                          const std::string& phase);

// Frozen-body probe on the forgetting-control task; asserts the body is
// bitwise untouched.
double linear_eval(const Model& model, const Dataset& train, const Dataset& test,
                   const std::vector<std::int32_t>& classes, const TrainBudget& budget,
                   const Vocab* vocab, std::uint64_t seed, AccessLog* log,
                   const std::string& phase);

// Executes the full protocol and persists record.json, the access log, a
// wall-clock sidecar, and per-step checkpoints into out_dir. A sub-step
// failure persists the partial record before rethrowing with the experience
// index attached.
RunRecord run_scenario(const RunConfig& cfg, const std::string& out_dir, AccessLog* log = nullptr);

// Sequential supervised fine-tuning of one shared all-classes classifier on
// the downstream tasks only. strategy: "naive" or "replay"; replay keeps a
// reservoir of past training samples and mixes batches half and half.
RunRecord run_traditional_cl(const RunConfig& cfg, const std::string& strategy,
                             std::int64_t memory_size, const std::string& out_dir,
                             AccessLog* log = nullptr);

// Mean of the last row: (1/T) sum_j R[T-1][j].
double acc_metric(const std::vector<std::vector<double>>& r, int tasks);

// Phases named "e<i>." must never read a dataset tagged "e<j>." with j < i.
void assert_data_isolation(const AccessLog& log);
// Every experience's parent hash must equal the previous checkpoint's hash.
void assert_lineage(const RunRecord& record);

}  // namespace cptlab
