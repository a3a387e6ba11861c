// SPDX-License-Identifier: Apache-2.0
// Training loop suite: budget plumbing, access logging, early stopping,
// best-validation reporting, 1-epoch accounting, and the frozen-body
// guarantee of the linear probe.
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "cptlab/common.hpp"
#include "cptlab/model.hpp"
#include "cptlab/objectives.hpp"
#include "cptlab/streams.hpp"
#include "cptlab/tokenizer.hpp"
#include "cptlab/training.hpp"

using cptlab::AccessLog;
using cptlab::Dataset;
using cptlab::Model;
using cptlab::ModelSpec;
using cptlab::Objective;
using cptlab::TrainBudget;

namespace {

ModelSpec tiny_cnn_spec() {
    // Width 16 keeps sigma=0.02 features large enough for lr 1e-2 Adam runs
    // to separate the stream classes within a few epochs.
    ModelSpec spec;
    spec.family = cptlab::Family::kCnn;
    spec.depth = 2;
    spec.width = 16;
    spec.channels = 1;
    spec.image_size = 16;
    return spec;
}

ModelSpec tiny_transformer_spec() {
    ModelSpec spec;
    spec.family = cptlab::Family::kTransformer;
    spec.depth = 1;
    spec.width = 16;
    spec.heads = 2;
    spec.vocab_size = 64;
    spec.max_sequence = 8;
    return spec;
}

cptlab::StreamConfig image_cfg() {
    cptlab::StreamConfig cfg;
    cfg.modality = cptlab::Modality::kImage;
    cfg.n_experiences = 1;
    cfg.pretrain_per_experience = 40;
    cfg.ds_train_per_experience = 80;
    cfg.ds_test_per_experience = 40;
    cfg.fc_train = 8;
    cfg.fc_test = 8;
    cfg.base_size = 8;
    cfg.image_size = 16;
    cfg.seed = 21;
    return cfg;
}

cptlab::StreamConfig text_cfg() {
    cptlab::StreamConfig cfg;
    cfg.modality = cptlab::Modality::kText;
    cfg.n_experiences = 1;
    cfg.pretrain_per_experience = 60;
    cfg.ds_train_per_experience = 8;
    cfg.ds_test_per_experience = 8;
    cfg.fc_train = 8;
    cfg.fc_test = 8;
    cfg.base_size = 60;
    cfg.doc_words = 12;
    cfg.seed = 22;
    return cfg;
}

// Order-sensitive digest of every parameter, head included.
std::uint64_t full_param_hash(const Model& m) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& nt : m.params) {
        h ^= nt.t.content_hash();
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace

TEST_CASE("train budget defaults, validation, and layered json overrides") {
    const TrainBudget pre = TrainBudget::pretrain_default();
    CHECK(pre.epochs == 30);
    CHECK(pre.lr == 5e-5f);
    CHECK(pre.patience == 2);
    const TrainBudget fin = TrainBudget::finetune_default();
    CHECK(fin.epochs == 20);
    CHECK(fin.lr == 1e-5f);
    CHECK(fin.patience < 0);  // full budget, no early stop
    const TrainBudget probe = TrainBudget::probe_default();
    CHECK(probe.lr == 1e-3f);

    TrainBudget bad = pre;
    bad.epochs = -1;
    CHECK_THROWS_AS(bad.validate(), cptlab::ContractError);
    bad = pre;
    bad.batch_size = 0;
    CHECK_THROWS_AS(bad.validate(), cptlab::ContractError);
    bad = pre;
    bad.lr = -1.0f;
    CHECK_THROWS_AS(bad.validate(), cptlab::ContractError);
    bad = pre;
    bad.min_delta = -1.0;
    CHECK_THROWS_AS(bad.validate(), cptlab::ContractError);

    // Partial override keeps the base role's remaining fields.
    const TrainBudget merged = TrainBudget::from_json({{"epochs", 3}}, fin);
    CHECK(merged.epochs == 3);
    CHECK(merged.lr == fin.lr);
    CHECK(merged.patience == fin.patience);
    const TrainBudget round = TrainBudget::from_json(pre.to_json(), TrainBudget{});
    CHECK(round.to_json() == pre.to_json());
    CHECK_THROWS_AS(TrainBudget::from_json({{"epochs", -2}}, fin), cptlab::ContractError);
}

TEST_CASE("access log aggregates per phase and tag") {
    AccessLog log;
    log.record("pretrain", "e1.pr", 100);
    log.record("pretrain", "e1.pr", 50);
    log.record("finetune", "e1.ds.train", 10);
    log.record("pretrain", "base", 5);
    const auto entries = log.entries();
    REQUIRE(entries.size() == 3);
    CHECK(entries[0].phase == "finetune");
    CHECK(entries[0].tag == "e1.ds.train");
    CHECK(entries[0].rows == 10);
    CHECK(entries[1].tag == "base");
    CHECK(entries[2].tag == "e1.pr");
    CHECK(entries[2].rows == 150);

    const auto j = log.to_json();
    REQUIRE(j.size() == 3);
    CHECK(j[2]["phase"] == "pretrain");
    CHECK(j[2]["dataset"] == "e1.pr");
    CHECK(j[2]["rows"] == 150);
}

TEST_CASE("tokenize_dataset matches per-row tokenize") {
    const auto bundle = cptlab::gen_text_stream(text_cfg());
    const cptlab::Vocab vocab = cptlab::train_vocab(bundle.base.texts, 64);
    const Dataset& ds = bundle.stream.experiences[0].ds_train;
    const cptlab::IntMatrix tok = cptlab::tokenize_dataset(ds, vocab, 8);
    REQUIRE(tok.rows == ds.size());
    REQUIRE(tok.cols == 8);
    for (std::int64_t i = 0; i < ds.size(); ++i) {
        const auto row = vocab.tokenize(ds.texts[static_cast<std::size_t>(i)], 8);
        for (int c = 0; c < 8; ++c)
            CHECK(tok.v[static_cast<std::size_t>(i * 8 + c)] == row[static_cast<std::size_t>(c)]);
    }
    Dataset img;
    img.modality = cptlab::Modality::kImage;
    CHECK_THROWS_AS(cptlab::tokenize_dataset(img, vocab, 8), cptlab::ContractError);
}

TEST_CASE("pretrain reduces the objective and is seed-deterministic") {
    const auto bundle = cptlab::gen_text_stream(text_cfg());
    const cptlab::Vocab vocab = cptlab::train_vocab(bundle.base.texts, 64);

    Model m = Model::build(tiny_transformer_spec(), 401);
    m.replace_head(cptlab::HeadKind::kMlm, 64, 402);

    TrainBudget budget;
    budget.epochs = 4;
    budget.lr = 1e-3f;
    budget.batch_size = 16;
    budget.patience = -1;

    Model a = m.clone();
    AccessLog log;
    const auto stats =
        cptlab::pretrain(a, Objective::kMlm, bundle.base, budget, &vocab, nullptr, nullptr, 7,
                         &log, "pretrain");
    CHECK(stats.epochs_run == 4);
    CHECK(!stats.early_stopped);
    REQUIRE(stats.train_losses.size() == 4);
    REQUIRE(stats.val_losses.size() == 4);
    CHECK(stats.train_losses.back() < stats.train_losses.front());
    CHECK(stats.val_losses.back() < stats.val_losses.front());
    CHECK(a.body_hash() != m.body_hash());

    // The log shows exactly one dataset touched, twice per epoch (train+val).
    const auto entries = log.entries();
    REQUIRE(entries.size() == 1);
    CHECK(entries[0].phase == "pretrain");
    CHECK(entries[0].tag == "base");
    CHECK(entries[0].rows == 4 * bundle.base.size());

    Model b = m.clone();
    cptlab::pretrain(b, Objective::kMlm, bundle.base, budget, &vocab, nullptr, nullptr, 7,
                     nullptr, "pretrain");
    CHECK(b.body_hash() == a.body_hash());
    CHECK(full_param_hash(b) == full_param_hash(a));

    Model c = m.clone();
    cptlab::pretrain(c, Objective::kMlm, bundle.base, budget, &vocab, nullptr, nullptr, 8,
                     nullptr, "pretrain");
    CHECK(c.body_hash() != a.body_hash());
}

TEST_CASE("pretrain with a zero-epoch budget leaves the model untouched") {
    const auto bundle = cptlab::gen_text_stream(text_cfg());
    const cptlab::Vocab vocab = cptlab::train_vocab(bundle.base.texts, 64);
    Model m = Model::build(tiny_transformer_spec(), 403);
    m.replace_head(cptlab::HeadKind::kMlm, 64, 404);
    const std::uint64_t before = full_param_hash(m);

    TrainBudget budget;
    budget.epochs = 0;
    const auto stats = cptlab::pretrain(m, Objective::kMlm, bundle.base, budget, &vocab, nullptr,
                                        nullptr, 7, nullptr, "pretrain");
    CHECK(stats.epochs_run == 0);
    CHECK(stats.train_losses.empty());
    CHECK(full_param_hash(m) == before);
}

TEST_CASE("pretrain early stopping consumes patience on stalled validation") {
    const auto bundle = cptlab::gen_text_stream(text_cfg());
    const cptlab::Vocab vocab = cptlab::train_vocab(bundle.base.texts, 64);
    Model m = Model::build(tiny_transformer_spec(), 405);
    m.replace_head(cptlab::HeadKind::kMlm, 64, 406);

    // A min_delta no run can beat: the first epoch sets the best loss, the
    // next two count as stalled, and patience 2 stops the run at epoch 3.
    TrainBudget budget;
    budget.epochs = 10;
    budget.lr = 1e-4f;
    budget.batch_size = 16;
    budget.patience = 2;
    budget.min_delta = 1e9;
    const auto stats = cptlab::pretrain(m, Objective::kMlm, bundle.base, budget, &vocab, nullptr,
                                        nullptr, 7, nullptr, "pretrain");
    CHECK(stats.early_stopped);
    CHECK(stats.epochs_run == 3);
    CHECK(stats.val_losses.size() == 3);
}

TEST_CASE("pretrain contract errors") {
    const auto bundle = cptlab::gen_text_stream(text_cfg());
    const cptlab::Vocab vocab = cptlab::train_vocab(bundle.base.texts, 64);
    Model m = Model::build(tiny_transformer_spec(), 407);
    m.replace_head(cptlab::HeadKind::kMlm, 64, 408);
    TrainBudget budget;
    budget.epochs = 1;

    Dataset empty;
    empty.modality = cptlab::Modality::kText;
    CHECK_THROWS_AS(cptlab::pretrain(m, Objective::kMlm, empty, budget, &vocab, nullptr, nullptr,
                                     7, nullptr, "p"),
                    cptlab::DataError);
    // CLF pre-training needs the label-to-head mapping.
    Model c = Model::build(tiny_transformer_spec(), 409);
    c.replace_head(cptlab::HeadKind::kClf, 2, 410);
    CHECK_THROWS_AS(cptlab::pretrain(c, Objective::kClf, bundle.base, budget, &vocab, nullptr,
                                     nullptr, 7, nullptr, "p"),
                    cptlab::ContractError);
    // MIM needs a fitted codebook.
    Model n = Model::build(tiny_cnn_spec(), 411);
    n.replace_head(cptlab::HeadKind::kMim, 6, 412);
    const auto images = cptlab::gen_image_stream(image_cfg());
    CHECK_THROWS_AS(cptlab::pretrain(n, Objective::kMim, images.base, budget, nullptr, nullptr,
                                     nullptr, 7, nullptr, "p"),
                    cptlab::ContractError);
}

TEST_CASE("clf and mim pretraining run end to end") {
    const auto images = cptlab::gen_image_stream(image_cfg());
    TrainBudget budget;
    budget.epochs = 2;
    budget.lr = 1e-3f;
    budget.batch_size = 16;
    budget.patience = -1;

    Model c = Model::build(tiny_cnn_spec(), 413);
    c.replace_head(cptlab::HeadKind::kClf, 2, 414);
    const std::vector<std::int32_t> l2h{0, 1};
    const auto cs = cptlab::pretrain(c, Objective::kClf,
                                     images.stream.experiences[0].pretrain, budget, nullptr,
                                     nullptr, &l2h, 7, nullptr, "p");
    REQUIRE(cs.train_losses.size() == 2);
    CHECK(cs.train_losses.back() < cs.train_losses.front());

    Model n = Model::build(tiny_cnn_spec(), 415);
    n.replace_head(cptlab::HeadKind::kMim, 6, 416);
    const auto patches = cptlab::extract_patches(images.base.images, 4);
    const auto codebook = cptlab::fit_codebook(patches, 6, 4, 1, 417);
    const auto ms = cptlab::pretrain(n, Objective::kMim, images.stream.experiences[0].pretrain,
                                     budget, nullptr, &codebook, nullptr, 7, nullptr, "p");
    REQUIRE(ms.train_losses.size() == 2);
    CHECK(std::isfinite(ms.train_losses.back()));
    CHECK(n.body_hash() != Model::build(tiny_cnn_spec(), 415).body_hash());
}

TEST_CASE("finetune learns a separable image task and reports 1-epoch accuracy") {
    const auto images = cptlab::gen_image_stream(image_cfg());
    const auto& e = images.stream.experiences[0];

    Model m = Model::build(tiny_cnn_spec(), 421);
    m.replace_head(cptlab::HeadKind::kClf, 2, 422);
    TrainBudget budget;
    budget.epochs = 15;
    budget.lr = 1e-2f;
    budget.batch_size = 16;
    budget.patience = -1;

    AccessLog log;
    const auto stats = cptlab::finetune_classifier(m, e.ds_train, e.ds_test, {0, 1}, budget,
                                                   nullptr, 31, &log, "finetune");
    CHECK(stats.epochs_run == 15);
    REQUIRE(stats.per_epoch_test_acc.size() == 15);
    REQUIRE(stats.per_epoch_val_acc.size() == 15);
    CHECK(stats.one_epoch_acc == stats.per_epoch_test_acc.front());
    CHECK(stats.test_acc ==
          stats.per_epoch_test_acc[static_cast<std::size_t>(stats.best_epoch - 1)]);
    CHECK(stats.test_acc > 0.95);
    CHECK(stats.best_val_acc == *std::max_element(stats.per_epoch_val_acc.begin(),
                                                  stats.per_epoch_val_acc.end()));
    // Best-validation ties resolve to the earliest epoch.
    for (int i = 0; i + 1 < stats.best_epoch; ++i)
        CHECK(stats.per_epoch_val_acc[static_cast<std::size_t>(i)] < stats.best_val_acc);

    // Both splits appear in the access log; the test set once per epoch.
    bool saw_test = false;
    for (const auto& entry : log.entries())
        if (entry.tag == e.ds_test.tag) {
            saw_test = true;
            CHECK(entry.rows == stats.epochs_run * e.ds_test.size());
        }
    CHECK(saw_test);

    // The same accuracy is recomputable from the trained model.
    const double again =
        cptlab::evaluate_classifier(m, e.ds_test, {0, 1}, nullptr, 16, nullptr, "eval");
    CHECK(again == stats.per_epoch_test_acc.back());
}

TEST_CASE("single-epoch budget makes accuracy equal 1-epoch accuracy") {
    const auto images = cptlab::gen_image_stream(image_cfg());
    const auto& e = images.stream.experiences[0];
    Model m = Model::build(tiny_cnn_spec(), 423);
    m.replace_head(cptlab::HeadKind::kClf, 2, 424);
    TrainBudget budget;
    budget.epochs = 1;
    budget.lr = 1e-3f;
    budget.batch_size = 16;
    const auto stats = cptlab::finetune_classifier(m, e.ds_train, e.ds_test, {0, 1}, budget,
                                                   nullptr, 31, nullptr, "finetune");
    CHECK(stats.epochs_run == 1);
    CHECK(stats.test_acc == stats.one_epoch_acc);
    CHECK(stats.best_epoch == 1);
}

TEST_CASE("zero learning rate keeps accuracy at the untrained head's level") {
    const auto images = cptlab::gen_image_stream(image_cfg());
    const auto& e = images.stream.experiences[0];
    Model m = Model::build(tiny_cnn_spec(), 425);
    m.replace_head(cptlab::HeadKind::kClf, 2, 426);
    const double untrained =
        cptlab::evaluate_classifier(m, e.ds_test, {0, 1}, nullptr, 16, nullptr, "eval");

    TrainBudget budget;
    budget.epochs = 3;
    budget.lr = 0.0f;
    budget.batch_size = 16;
    budget.patience = -1;
    const auto stats = cptlab::finetune_classifier(m, e.ds_train, e.ds_test, {0, 1}, budget,
                                                   nullptr, 31, nullptr, "finetune");
    for (double acc : stats.per_epoch_test_acc) CHECK(acc == untrained);
    CHECK(stats.test_acc == untrained);
}

TEST_CASE("finetune contract errors") {
    const auto images = cptlab::gen_image_stream(image_cfg());
    const auto& e = images.stream.experiences[0];
    Model m = Model::build(tiny_cnn_spec(), 427);
    m.replace_head(cptlab::HeadKind::kClf, 2, 428);
    TrainBudget budget;
    budget.epochs = 1;

    Dataset empty;
    empty.modality = cptlab::Modality::kImage;
    CHECK_THROWS_AS(cptlab::finetune_classifier(m, empty, e.ds_test, {0, 1}, budget, nullptr, 1,
                                                nullptr, "f"),
                    cptlab::DataError);
    Dataset unlabeled = e.ds_train;
    unlabeled.labels.clear();
    CHECK_THROWS_AS(cptlab::finetune_classifier(m, unlabeled, e.ds_test, {0, 1}, budget, nullptr,
                                                1, nullptr, "f"),
                    cptlab::DataError);
    CHECK_THROWS_AS(cptlab::finetune_classifier(m, e.ds_train, e.ds_test, {0, 1, 2}, budget,
                                                nullptr, 1, nullptr, "f"),
                    cptlab::ContractError);
    Model headless = Model::build(tiny_cnn_spec(), 429);
    CHECK_THROWS_AS(cptlab::finetune_classifier(headless, e.ds_train, e.ds_test, {0, 1}, budget,
                                                nullptr, 1, nullptr, "f"),
                    cptlab::HeadError);
    CHECK_THROWS_AS(
        cptlab::evaluate_classifier(m, empty, {0, 1}, nullptr, 16, nullptr, "eval"),
        cptlab::DataError);
}

TEST_CASE("extract_features returns tape-free final-tap rows") {
    const auto images = cptlab::gen_image_stream(image_cfg());
    const Dataset probe = images.stream.experiences[0].ds_test.subset({0, 1, 2, 3, 4});
    Model m = Model::build(tiny_cnn_spec(), 431);

    const cptlab::Tensor feats = cptlab::extract_features(m, probe, nullptr, 4, nullptr, "probe");
    REQUIRE(feats.shape() == std::vector<std::int64_t>{5, 16});
    CHECK(!feats.tracked());
    CHECK(cptlab::all_finite(feats));

    // Feature rows equal the last forward tap, batch by batch.
    const auto fwd = m.forward_images(probe.images, false, true);
    const cptlab::Tensor& tap = fwd.taps.back().second;
    for (std::int64_t i = 0; i < feats.numel(); ++i) CHECK(feats.data()[i] == tap.data()[i]);
}

TEST_CASE("linear probe trains a readout without touching the model") {
    // Channel-coded classes (red-heavy vs blue-heavy constants) give
    // final-tap features that align with the label by construction, so the
    // probe must reach perfect accuracy while the body stays bitwise fixed.
    const int n_train = 40, n_test = 20;
    auto make_split = [](int n, const char* tag) {
        Dataset d;
        d.modality = cptlab::Modality::kImage;
        d.tag = tag;
        d.images = cptlab::Tensor::zeros({n, 3, 16, 16});
        for (int i = 0; i < n; ++i) {
            const int label = i % 2;
            d.labels.push_back(label);
            float* row = d.images.data() + static_cast<std::int64_t>(i) * 3 * 256;
            for (int c = 0; c < 3; ++c) {
                const float v = c == (label == 0 ? 0 : 2) ? 0.9f : 0.1f;
                for (int p = 0; p < 256; ++p) row[c * 256 + p] = v;
            }
        }
        return d;
    };
    const Dataset train = make_split(n_train, "probe.train");
    const Dataset test = make_split(n_test, "probe.test");

    cptlab::ModelSpec rgb = tiny_cnn_spec();
    rgb.channels = 3;
    Model m = Model::build(rgb, 433);  // headless: probe needs only taps
    const std::uint64_t body_before = m.body_hash();
    const std::uint64_t all_before = full_param_hash(m);

    TrainBudget budget = TrainBudget::probe_default();
    budget.epochs = 15;
    budget.lr = 1e-2f;
    budget.batch_size = 8;
    AccessLog log;
    const double acc =
        cptlab::linear_probe_eval(m, train, test, {0, 1}, budget, nullptr, 41, &log, "probe");
    CHECK(acc > 0.95);
    CHECK(m.body_hash() == body_before);
    CHECK(full_param_hash(m) == all_before);
    CHECK(!log.entries().empty());

    Dataset unlabeled = train;
    unlabeled.labels.clear();
    CHECK_THROWS_AS(
        cptlab::linear_probe_eval(m, unlabeled, test, {0, 1}, budget, nullptr, 41, nullptr, "p"),
        cptlab::DataError);
}

TEST_CASE("probe accuracy does not beat finetuning by more than noise") {
    // Same model, data, and seed; fine-tuning adapts the body, the probe
    // cannot, so across seeds the probe should not come out meaningfully
    // ahead.
    const auto images = cptlab::gen_image_stream(image_cfg());
    const auto& e = images.stream.experiences[0];
    TrainBudget ft;
    ft.epochs = 8;
    ft.lr = 1e-2f;
    ft.batch_size = 16;
    ft.patience = -1;
    const TrainBudget pb = ft;

    double gap_sum = 0.0;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        Model base = Model::build(tiny_cnn_spec(), 500 + seed);
        Model ftm = base.clone();
        ftm.replace_head(cptlab::HeadKind::kClf, 2, 600 + seed);
        const auto stats = cptlab::finetune_classifier(ftm, e.ds_train, e.ds_test, {0, 1}, ft,
                                                       nullptr, seed, nullptr, "finetune");
        const double probe_acc = cptlab::linear_probe_eval(base, e.ds_train, e.ds_test, {0, 1},
                                                           pb, nullptr, seed, nullptr, "probe");
        gap_sum += probe_acc - stats.test_acc;
    }
    CHECK(gap_sum / 5.0 <= 0.05);
}
