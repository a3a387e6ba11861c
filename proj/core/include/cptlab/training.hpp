// SPDX-License-Identifier: Apache-2.0
// Epoch-driven training loops shared by every protocol step: objective
// pre-training with early stopping, classifier fine-tuning with
// best-validation reporting, and frozen-body linear probes. All data reads
// funnel through an AccessLog so isolation properties are checkable.
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cptlab/model.hpp"
#include "cptlab/objectives.hpp"
#include "cptlab/streams.hpp"
#include "cptlab/tokenizer.hpp"

namespace cptlab {

struct TrainBudget {
    int epochs = 30;
    float lr = 5e-5f;
    int batch_size = 64;
    int patience = 2;         // consecutive non-improving epochs allowed; <0 disables
    double min_delta = 1e-3;  // validation-loss improvement below this does not count

    static TrainBudget pretrain_default();  // 30 epochs, lr 5e-5, patience 2
    static TrainBudget finetune_default();  // 20 epochs, lr 1e-5, full budget
    static TrainBudget probe_default();     // 30 epochs, lr 1e-3, full budget

    void validate() const;
    nlohmann::json to_json() const;
    // Fields absent from j keep the base values, so each role's defaults
    // survive partial overrides.
    static TrainBudget from_json(const nlohmann::json& j);
    static TrainBudget from_json(const nlohmann::json& j, const TrainBudget& base);
};

// Aggregated (phase, dataset tag) read counts. Rows are counted per full
// pass, which is enough to prove which datasets a phase touched.
class AccessLog {
  public:
    void record(const std::string& phase, const std::string& tag, std::int64_t rows);

    struct Entry {
        std::string phase;
        std::string tag;
        std::int64_t rows;
    };
    std::vector<Entry> entries() const;  // sorted by (phase, tag)
    nlohmann::json to_json() const;
    void save(const std::string& path) const;

  private:
    std::map<std::pair<std::string, std::string>, std::int64_t> counts_;
};

// One tokenizer pass per phase; expansion tokens apply to every subsequent
// batch uniformly.
IntMatrix tokenize_dataset(const Dataset& ds, const Vocab& vocab, int max_len);

struct PretrainStats {
    std::vector<double> train_losses;  // one per epoch run
    std::vector<double> val_losses;
    int epochs_run = 0;
    bool early_stopped = false;
};

// Trains `model` in place on `data` with the objective's corruption or
// labels. `label_to_head` maps dataset labels to head indices (clf only).
// The last tenth of the data (after a seeded shuffle) serves as the
// validation split for early stopping; corruption of validation batches is
// fixed across epochs so losses are comparable.
PretrainStats pretrain(Model& model, Objective objective, const Dataset& data,
                       const TrainBudget& budget, const Vocab* vocab,
                       const VisualCodebook* codebook,
                       const std::vector<std::int32_t>* label_to_head, std::uint64_t seed,
                       AccessLog* log, const std::string& phase);

struct FinetuneStats {
    double test_acc = 0.0;       // test accuracy at the best-validation epoch
    double one_epoch_acc = 0.0;  // test accuracy after the first epoch
    double best_val_acc = 0.0;
    int best_epoch = 0;  // 1-based; ties resolve to the earliest epoch
    int epochs_run = 0;
    std::vector<double> per_epoch_test_acc;
    std::vector<double> per_epoch_val_acc;
};

// Supervised training of a classifier head (and body, unless the head is a
// probe). `classes` defines the label space: a row's target is its label's
// position in `classes`. A fifth of the training split (seeded shuffle)
// serves as validation for checkpoint selection; the budget always runs in
// full unless early stopping is enabled.
FinetuneStats finetune_classifier(Model& model, const Dataset& train, const Dataset& test,
                                  const std::vector<std::int32_t>& classes,
                                  const TrainBudget& budget, const Vocab* vocab,
                                  std::uint64_t seed, AccessLog* log, const std::string& phase);

double evaluate_classifier(const Model& model, const Dataset& data,
                           const std::vector<std::int32_t>& classes, const Vocab* vocab,
                           int batch_size, AccessLog* log, const std::string& phase);

// Final-tap representations, one row per sample, tape-free.
Tensor extract_features(const Model& model, const Dataset& data, const Vocab* vocab,
                        int batch_size, AccessLog* log, const std::string& phase);

// Trains a fresh softmax readout on frozen final-tap features and reports
// test accuracy. The model is never mutated.
double linear_probe_eval(const Model& model, const Dataset& train, const Dataset& test,
                         const std::vector<std::int32_t>& classes, const TrainBudget& budget,
                         const Vocab* vocab, std::uint64_t seed, AccessLog* log,
                         const std::string& phase);

}  // namespace cptlab
