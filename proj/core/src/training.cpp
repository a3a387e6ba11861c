// SPDX-License-Identifier: Apache-2.0
#include "cptlab/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "cptlab/ops.hpp"
#include "cptlab/optim.hpp"

namespace cptlab {
namespace {

IntMatrix gather_tokens(const IntMatrix& all, const std::vector<std::int64_t>& idx) {
    IntMatrix out(static_cast<std::int64_t>(idx.size()), all.cols);
    for (std::size_t r = 0; r < idx.size(); ++r)
        std::copy_n(all.v.begin() + idx[r] * all.cols, all.cols,
                    out.v.begin() + static_cast<std::int64_t>(r) * all.cols);
    return out;
}

Tensor gather_images(const Tensor& all, const std::vector<std::int64_t>& idx) {
    Shape sh = all.shape();
    const std::int64_t px = all.numel() / sh[0];
    sh[0] = static_cast<std::int64_t>(idx.size());
    Tensor out = Tensor::zeros(sh);
    for (std::size_t r = 0; r < idx.size(); ++r)
        std::memcpy(out.data() + static_cast<std::int64_t>(r) * px, all.data() + idx[r] * px,
                    static_cast<std::size_t>(px) * sizeof(float));
    return out;
}

std::int32_t target_of(std::int32_t label, const std::vector<std::int32_t>& classes) {
    for (std::size_t i = 0; i < classes.size(); ++i)
        if (classes[i] == label) return static_cast<std::int32_t>(i);
    throw ContractError("label " + std::to_string(label) + " outside the declared class set");
}

std::vector<std::vector<std::int64_t>> chunk(const std::vector<std::int64_t>& idx, int batch) {
    std::vector<std::vector<std::int64_t>> out;
    for (std::size_t start = 0; start < idx.size(); start += static_cast<std::size_t>(batch))
        out.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(start),
                         idx.begin() + static_cast<std::ptrdiff_t>(std::min(
                                           idx.size(), start + static_cast<std::size_t>(batch))));
    return out;
}

// Pre-materialized inputs for one dataset so tokenization happens once per
// phase regardless of epoch count.
struct PhaseData {
    bool text = false;
    IntMatrix tokens{0, 0};
    Tensor images;
    const std::vector<std::int32_t>* labels = nullptr;
    std::int64_t n = 0;
};

PhaseData materialize(const Dataset& ds, const Model& model, const Vocab* vocab) {
    PhaseData pd;
    pd.text = ds.modality == Modality::kText;
    pd.labels = &ds.labels;
    pd.n = ds.size();
    if (pd.text) {
        if (!vocab) throw ContractError("text dataset requires a vocabulary");
        pd.tokens = tokenize_dataset(ds, *vocab, model.spec.max_sequence);
    } else {
        pd.images = ds.images;
    }
    return pd;
}

struct BatchInputs {
    IntMatrix tokens{0, 0};
    Tensor images;
};

BatchInputs gather(const PhaseData& pd, const std::vector<std::int64_t>& idx) {
    BatchInputs b;
    if (pd.text)
        b.tokens = gather_tokens(pd.tokens, idx);
    else
        b.images = gather_images(pd.images, idx);
    return b;
}

Tensor forward_logits(const Model& model, const BatchInputs& in) {
    return in.tokens.rows > 0 ? model.forward_tokens(in.tokens).logits
                              : model.forward_images(in.images).logits;
}

double accuracy_on(const Model& model, const PhaseData& pd,
                   const std::vector<std::int64_t>& idx,
                   const std::vector<std::int32_t>& classes, int batch_size) {
    if (idx.empty()) return 0.0;
    std::int64_t correct = 0;
    for (const auto& part : chunk(idx, batch_size)) {
        const auto preds = argmax_rows(forward_logits(model, gather(pd, part)));
        for (std::size_t r = 0; r < part.size(); ++r)
            if (preds[r] == target_of((*pd.labels)[static_cast<std::size_t>(part[r])], classes))
                ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(idx.size());
}

// Corruption or label assembly for one pre-training batch. Returns false
// when masking selected nothing; such a batch carries no learning signal.
bool prepare_pretrain_batch(Objective objective, const PhaseData& pd,
                            const std::vector<std::int64_t>& idx, const MaskingPlan& plan,
                            std::int32_t vocab_size, const VisualCodebook* codebook,
                            const std::vector<std::int32_t>* label_to_head, Rng& rng,
                            PreparedBatch& out) {
    BatchInputs in = gather(pd, idx);
    switch (objective) {
        case Objective::kMlm: {
            CorruptedTokens ct = mlm_corrupt(in.tokens, plan, vocab_size, rng);
            out.tokens = std::move(ct.tokens);
            out.targets = std::move(ct.targets);
            return ct.any_selected;
        }
        case Objective::kMim: {
            CorruptedImages ci = mim_corrupt(in.images, *codebook, plan, rng);
            out.images = std::move(ci.images);
            out.targets = std::move(ci.targets);
            return ci.any_selected;
        }
        case Objective::kClf: {
            out.tokens = std::move(in.tokens);
            out.images = std::move(in.images);
            out.targets.clear();
            for (auto i : idx) {
                const std::int32_t label = (*pd.labels)[static_cast<std::size_t>(i)];
                if (label < 0 ||
                    label >= static_cast<std::int32_t>(label_to_head->size()))
                    throw ContractError("pretrain: label outside the head mapping");
                out.targets.push_back((*label_to_head)[static_cast<std::size_t>(label)]);
            }
            return true;
        }
    }
    throw ContractError("unreachable objective");
}

}  // namespace

TrainBudget TrainBudget::pretrain_default() { return TrainBudget{30, 5e-5f, 64, 2, 1e-3}; }
TrainBudget TrainBudget::finetune_default() { return TrainBudget{20, 1e-5f, 32, -1, 1e-3}; }
TrainBudget TrainBudget::probe_default() { return TrainBudget{30, 1e-3f, 64, -1, 1e-3}; }

void TrainBudget::validate() const {
    if (epochs < 0) throw ContractError("train budget: epochs must be >= 0");
    if (!(lr >= 0.0f) || !std::isfinite(lr)) throw ContractError("train budget: bad lr");
    if (batch_size < 1) throw ContractError("train budget: batch_size must be positive");
    if (!(min_delta >= 0.0)) throw ContractError("train budget: min_delta must be >= 0");
}

nlohmann::json TrainBudget::to_json() const {
    return {{"epochs", epochs},
            {"lr", lr},
            {"batch_size", batch_size},
            {"patience", patience},
            {"min_delta", min_delta}};
}

TrainBudget TrainBudget::from_json(const nlohmann::json& j) { return from_json(j, TrainBudget{}); }

TrainBudget TrainBudget::from_json(const nlohmann::json& j, const TrainBudget& base) {
    TrainBudget b = base;
    b.epochs = j.value("epochs", b.epochs);
    b.lr = j.value("lr", b.lr);
    b.batch_size = j.value("batch_size", b.batch_size);
    b.patience = j.value("patience", b.patience);
    b.min_delta = j.value("min_delta", b.min_delta);
    b.validate();
    return b;
}

void AccessLog::record(const std::string& phase, const std::string& tag, std::int64_t rows) {
    counts_[{phase, tag}] += rows;
}

std::vector<AccessLog::Entry> AccessLog::entries() const {
    std::vector<Entry> out;
    for (const auto& [key, rows] : counts_) out.push_back({key.first, key.second, rows});
    return out;
}

nlohmann::json AccessLog::to_json() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& e : entries())
        arr.push_back({{"phase", e.phase}, {"dataset", e.tag}, {"rows", e.rows}});
    return arr;
}

void AccessLog::save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    f << to_json().dump(2) << '\n';
    if (!f) throw IoError("failed writing " + path);
}

IntMatrix tokenize_dataset(const Dataset& ds, const Vocab& vocab, int max_len) {
    if (ds.modality != Modality::kText) throw ContractError("tokenize_dataset: not a text dataset");
    IntMatrix out(ds.size(), max_len);
    for (std::int64_t i = 0; i < ds.size(); ++i) {
        const auto row = vocab.tokenize(ds.texts[static_cast<std::size_t>(i)], max_len);
        std::copy(row.begin(), row.end(), out.v.begin() + i * max_len);
    }
    return out;
}

PretrainStats pretrain(Model& model, Objective objective, const Dataset& data,
                       const TrainBudget& budget, const Vocab* vocab,
                       const VisualCodebook* codebook,
                       const std::vector<std::int32_t>* label_to_head, std::uint64_t seed,
                       AccessLog* log, const std::string& phase) {
    budget.validate();
    if (data.size() == 0) throw DataError("pretrain: empty dataset");
    if (objective == Objective::kMim && (!codebook || !codebook->frozen))
        throw ContractError("pretrain: masked image modeling requires a fitted codebook");
    if (objective == Objective::kClf) {
        if (!label_to_head) throw ContractError("pretrain: clf objective requires a label mapping");
        if (data.labels.empty()) throw DataError("pretrain: clf objective requires labels");
    }
    const PhaseData pd = materialize(data, model, vocab);
    const MaskingPlan plan =
        objective == Objective::kMlm ? MaskingPlan::mlm_default() : MaskingPlan::mim_default();
    const std::int32_t vsize = vocab ? vocab->size() : 0;

    Rng root = Rng(seed).derive("pretrain");
    auto perm = [&] {
        Rng r = root.derive("split");
        return r.permutation(pd.n);
    }();
    const std::int64_t n_val = pd.n >= 10 ? pd.n / 10 : (pd.n >= 2 ? 1 : 0);
    std::vector<std::int64_t> train_idx(perm.begin(), perm.end() - n_val);
    const std::vector<std::int64_t> val_idx(perm.end() - n_val, perm.end());
    const auto val_batches = chunk(val_idx, budget.batch_size);

    Optimizer opt = Optimizer::adam(budget.lr);
    const auto params = model.trainable_parameters();

    PretrainStats stats;
    double best = std::numeric_limits<double>::infinity();
    int bad = 0;
    for (int epoch = 1; epoch <= budget.epochs; ++epoch) {
        {
            Rng r = root.derive("order").derive(static_cast<std::uint64_t>(epoch));
            r.shuffle(train_idx);
        }
        double loss_sum = 0.0;
        std::int64_t loss_batches = 0;
        const auto batches = chunk(train_idx, budget.batch_size);
        for (std::size_t b = 0; b < batches.size(); ++b) {
            Rng crng = root.derive("corrupt")
                           .derive(static_cast<std::uint64_t>(epoch))
                           .derive(static_cast<std::uint64_t>(b));
            PreparedBatch batch;
            if (!prepare_pretrain_batch(objective, pd, batches[b], plan, vsize, codebook,
                                        label_to_head, crng, batch))
                continue;  // nothing selected, no learning signal
            zero_grads(params);
            Tensor loss = objective_loss(objective, model, batch);
            loss.backward();
            opt.step(params);
            loss_sum += loss.data()[0];
            ++loss_batches;
        }
        if (log) log->record(phase, data.tag, static_cast<std::int64_t>(train_idx.size()));
        stats.train_losses.push_back(loss_batches ? loss_sum / static_cast<double>(loss_batches)
                                                  : 0.0);
        stats.epochs_run = epoch;

        if (!val_idx.empty()) {
            double vsum = 0.0;
            std::int64_t vbatches = 0;
            for (std::size_t b = 0; b < val_batches.size(); ++b) {
                // Epoch-independent corruption keeps validation comparable.
                Rng vrng = root.derive("valcorrupt").derive(static_cast<std::uint64_t>(b));
                PreparedBatch batch;
                if (!prepare_pretrain_batch(objective, pd, val_batches[b], plan, vsize, codebook,
                                            label_to_head, vrng, batch))
                    continue;
                vsum += objective_loss(objective, model, batch).data()[0];
                ++vbatches;
            }
            if (log) log->record(phase, data.tag, static_cast<std::int64_t>(val_idx.size()));
            const double vloss = vbatches ? vsum / static_cast<double>(vbatches) : 0.0;
            stats.val_losses.push_back(vloss);
            if (budget.patience >= 0) {
                if (vloss < best - budget.min_delta) {
                    best = vloss;
                    bad = 0;
                } else if (++bad >= budget.patience && budget.patience >= 0) {
                    stats.early_stopped = true;
                    break;
                }
            }
        }
    }
    return stats;
}

FinetuneStats finetune_classifier(Model& model, const Dataset& train, const Dataset& test,
                                  const std::vector<std::int32_t>& classes,
                                  const TrainBudget& budget, const Vocab* vocab,
                                  std::uint64_t seed, AccessLog* log, const std::string& phase) {
    budget.validate();
    if (train.size() == 0 || test.size() == 0) throw DataError("finetune: empty dataset");
    if (train.labels.empty() || test.labels.empty()) throw DataError("finetune: unlabeled dataset");
    if (model.head.kind != HeadKind::kClf && model.head.kind != HeadKind::kProbe)
        throw HeadError("finetune: model must carry a classifier or probe head");
    if (model.head.k != static_cast<int>(classes.size()))
        throw ContractError("finetune: head arity does not match the class set");

    const PhaseData tr = materialize(train, model, vocab);
    const PhaseData te = materialize(test, model, vocab);
    std::vector<std::int64_t> test_idx(static_cast<std::size_t>(te.n));
    for (std::int64_t i = 0; i < te.n; ++i) test_idx[static_cast<std::size_t>(i)] = i;

    Rng root = Rng(seed).derive("finetune");
    auto perm = [&] {
        Rng r = root.derive("split");
        return r.permutation(tr.n);
    }();
    const std::int64_t n_val = tr.n >= 5 ? tr.n / 5 : (tr.n >= 2 ? 1 : 0);
    std::vector<std::int64_t> train_idx(perm.begin(), perm.end() - n_val);
    const std::vector<std::int64_t> val_idx(perm.end() - n_val, perm.end());

    Optimizer opt = Optimizer::adam(budget.lr);
    const auto params = model.trainable_parameters();

    FinetuneStats stats;
    double best_vloss = std::numeric_limits<double>::infinity();
    int bad = 0;
    for (int epoch = 1; epoch <= budget.epochs; ++epoch) {
        {
            Rng r = root.derive("order").derive(static_cast<std::uint64_t>(epoch));
            r.shuffle(train_idx);
        }
        for (const auto& part : chunk(train_idx, budget.batch_size)) {
            BatchInputs in = gather(tr, part);
            std::vector<std::int32_t> targets;
            targets.reserve(part.size());
            for (auto i : part)
                targets.push_back(target_of((*tr.labels)[static_cast<std::size_t>(i)], classes));
            zero_grads(params);
            Tensor loss = softmax_ce(forward_logits(model, in), targets);
            loss.backward();
            opt.step(params);
        }
        if (log) log->record(phase, train.tag, static_cast<std::int64_t>(train_idx.size()));
        stats.epochs_run = epoch;

        double val_acc = 0.0, val_loss = 0.0;
        if (!val_idx.empty()) {
            val_acc = accuracy_on(model, tr, val_idx, classes, budget.batch_size);
            double lsum = 0.0;
            std::int64_t lb = 0;
            for (const auto& part : chunk(val_idx, budget.batch_size)) {
                BatchInputs in = gather(tr, part);
                std::vector<std::int32_t> targets;
                for (auto i : part)
                    targets.push_back(
                        target_of((*tr.labels)[static_cast<std::size_t>(i)], classes));
                lsum += softmax_ce(forward_logits(model, in), targets).data()[0];
                ++lb;
            }
            val_loss = lb ? lsum / static_cast<double>(lb) : 0.0;
            if (log) log->record(phase, train.tag, 2 * static_cast<std::int64_t>(val_idx.size()));
        }
        const double test_acc = accuracy_on(model, te, test_idx, classes, budget.batch_size);
        if (log) log->record(phase, test.tag, te.n);
        stats.per_epoch_val_acc.push_back(val_acc);
        stats.per_epoch_test_acc.push_back(test_acc);
        if (stats.best_epoch == 0 || val_acc > stats.best_val_acc) {
            stats.best_val_acc = val_acc;
            stats.best_epoch = epoch;
        }
        if (budget.patience >= 0 && !val_idx.empty()) {
            if (val_loss < best_vloss - budget.min_delta) {
                best_vloss = val_loss;
                bad = 0;
            } else if (++bad >= budget.patience) {
                break;
            }
        }
    }
    if (stats.epochs_run > 0) {
        stats.one_epoch_acc = stats.per_epoch_test_acc.front();
        const int pick = val_idx.empty() ? stats.epochs_run : stats.best_epoch;
        stats.best_epoch = pick;
        stats.test_acc = stats.per_epoch_test_acc[static_cast<std::size_t>(pick - 1)];
    }
    return stats;
}

double evaluate_classifier(const Model& model, const Dataset& data,
                           const std::vector<std::int32_t>& classes, const Vocab* vocab,
                           int batch_size, AccessLog* log, const std::string& phase) {
    if (data.size() == 0) throw DataError("evaluate: empty dataset");
    if (data.labels.empty()) throw DataError("evaluate: unlabeled dataset");
    const PhaseData pd = materialize(data, model, vocab);
    std::vector<std::int64_t> idx(static_cast<std::size_t>(pd.n));
    for (std::int64_t i = 0; i < pd.n; ++i) idx[static_cast<std::size_t>(i)] = i;
    if (log) log->record(phase, data.tag, pd.n);
    return accuracy_on(model, pd, idx, classes, batch_size);
}

Tensor extract_features(const Model& model, const Dataset& data, const Vocab* vocab,
                        int batch_size, AccessLog* log, const std::string& phase) {
    if (data.size() == 0) throw DataError("extract_features: empty dataset");
    const PhaseData pd = materialize(data, model, vocab);
    std::vector<std::int64_t> idx(static_cast<std::size_t>(pd.n));
    for (std::int64_t i = 0; i < pd.n; ++i) idx[static_cast<std::size_t>(i)] = i;
    if (log) log->record(phase, data.tag, pd.n);

    Tensor out;
    std::int64_t row = 0;
    for (const auto& part : chunk(idx, batch_size)) {
        BatchInputs in = gather(pd, part);
        const ForwardOut fwd = in.tokens.rows > 0
                                   ? model.forward_tokens(in.tokens, false, true)
                                   : model.forward_images(in.images, false, true);
        if (fwd.taps.empty()) throw ContractError("extract_features: model exposes no taps");
        const Tensor& feat = fwd.taps.back().second;
        if (!out.defined()) out = Tensor::zeros({pd.n, feat.shape()[1]});
        std::memcpy(out.data() + row * feat.shape()[1], feat.data(),
                    static_cast<std::size_t>(feat.numel()) * sizeof(float));
        row += feat.shape()[0];
    }
    return out;
}

double linear_probe_eval(const Model& model, const Dataset& train, const Dataset& test,
                         const std::vector<std::int32_t>& classes, const TrainBudget& budget,
                         const Vocab* vocab, std::uint64_t seed, AccessLog* log,
                         const std::string& phase) {
    budget.validate();
    if (train.labels.empty() || test.labels.empty())
        throw DataError("linear_probe_eval: unlabeled dataset");
    const Tensor ftrain = extract_features(model, train, vocab, budget.batch_size, log, phase);
    const Tensor ftest = extract_features(model, test, vocab, budget.batch_size, log, phase);
    const std::int64_t width = ftrain.shape()[1];
    const auto k = static_cast<std::int64_t>(classes.size());

    Rng root = Rng(seed).derive("probe");
    Tensor w = Tensor::zeros({width, k}, true);
    {
        Rng ir = root.derive("init");
        for (std::int64_t i = 0; i < w.numel(); ++i)
            w.data()[i] = ir.truncated_gaussian(0.02f);
    }
    Tensor b = Tensor::zeros({k}, true);
    const std::vector<Tensor> params{w, b};
    Optimizer opt = Optimizer::adam(budget.lr);

    std::vector<std::int64_t> idx(static_cast<std::size_t>(ftrain.shape()[0]));
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<std::int64_t>(i);
    for (int epoch = 1; epoch <= budget.epochs; ++epoch) {
        Rng r = root.derive("order").derive(static_cast<std::uint64_t>(epoch));
        r.shuffle(idx);
        for (const auto& part : chunk(idx, budget.batch_size)) {
            Tensor feat = gather_images(ftrain, part);  // row gather works for any 2d tensor
            std::vector<std::int32_t> targets;
            for (auto i : part)
                targets.push_back(target_of(train.labels[static_cast<std::size_t>(i)], classes));
            zero_grads(params);
            Tensor loss = softmax_ce(add_bias(matmul(feat, w), b), targets);
            loss.backward();
            opt.step(params);
        }
    }

    const auto preds = argmax_rows(add_bias(matmul(ftest, w), b));
    std::int64_t correct = 0;
    for (std::size_t i = 0; i < preds.size(); ++i)
        if (preds[i] == target_of(test.labels[i], classes)) ++correct;
    return static_cast<double>(correct) / static_cast<double>(preds.size());
}

}  // namespace cptlab
