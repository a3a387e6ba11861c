// SPDX-License-Identifier: Apache-2.0
#include "cptlab/scenario.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>

#include "cptlab/ops.hpp"
#include "cptlab/optim.hpp"

namespace cptlab {
namespace {

std::string fmt(const char* f, int a) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), f, a);
    return buf;
}

std::uint64_t sub_seed(std::uint64_t seed, std::string_view label) {
    return Rng(seed).derive(label).next_u64();
}

std::uint64_t sub_seed(std::uint64_t seed, std::string_view label, std::uint64_t i) {
    return Rng(seed).derive(label).derive(i).next_u64();
}

std::vector<std::int32_t> as_i32(const std::vector<int>& v) {
    return std::vector<std::int32_t>(v.begin(), v.end());
}

std::vector<std::int32_t> iota_classes(int n) {
    std::vector<std::int32_t> v(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = i;
    return v;
}

nlohmann::json grid_to_json(const std::vector<FcGridCell>& grid) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& c : grid) arr.push_back({{"lr", c.lr}, {"batch_size", c.batch_size}});
    return arr;
}

std::vector<FcGridCell> grid_from_json(const nlohmann::json& arr) {
    std::vector<FcGridCell> grid;
    for (const auto& c : arr) grid.push_back({c.at("lr").get<float>(), c.at("batch_size").get<int>()});
    return grid;
}

void write_json_file(const std::string& path, const nlohmann::json& j) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    f << j.dump(2) << '\n';
    if (!f) throw IoError("failed writing " + path);
}

// Wall-clock lives in a sidecar so record.json stays byte-identical across
// reruns of the same config.
void write_timing_sidecar(const std::string& out_dir, std::uint64_t seed,
                          std::chrono::steady_clock::time_point t0) {
    nlohmann::json j;
    j["seed"] = seed;
    j["wall_clock_seconds"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_json_file(out_dir + "/timing.json", j);
}

}  // namespace

std::string fc_mode_name(FcMode m) {
    switch (m) {
        case FcMode::kFinetune: return "finetune";
        case FcMode::kLinearEval: return "linear_eval";
        case FcMode::kBoth: return "both";
    }
    throw ContractError("unreachable fc mode");
}

FcMode fc_mode_from_name(const std::string& s) {
    if (s == "finetune") return FcMode::kFinetune;
    if (s == "linear_eval") return FcMode::kLinearEval;
    if (s == "both") return FcMode::kBoth;
    throw SpecError("unknown fc mode: " + s);
}

void RunConfig::validate() const {
    stream.validate();
    pretrain_budget.validate();
    finetune_budget.validate();
    probe_budget.validate();
    const bool text = stream.modality == Modality::kText;
    if (text && model.family != Family::kTransformer)
        throw ContractError("run config: text streams require a transformer");
    if (!text && model.family != Family::kCnn)
        throw ContractError("run config: image streams require a cnn");
    if (objective == Objective::kMlm && text == false)
        throw ContractError("run config: mlm runs on text");
    if (objective == Objective::kMim && text)
        throw ContractError("run config: mim runs on images");
    if (!text) {
        if (model.image_size != stream.image_size || model.channels != stream.channels)
            throw ContractError("run config: model and stream image geometry differ");
    }
    if (!nt_budgets.empty()) {
        if (!text) throw ContractError("run config: token expansion applies to text only");
        if (static_cast<int>(nt_budgets.size()) != stream.n_experiences)
            throw ContractError("run config: one expansion budget per experience");
        for (int b : nt_budgets)
            if (b < 0) throw ContractError("run config: expansion budgets must be >= 0");
    }
    if (fc_grid.empty()) throw ContractError("run config: fc grid must not be empty");
    for (const auto& c : fc_grid)
        if (!(c.lr > 0.0f) || c.batch_size < 1)
            throw ContractError("run config: bad fc grid cell");
    if (codebook_size < 1 || patch_extent < 1)
        throw ContractError("run config: codebook parameters must be positive");
    if (objective == Objective::kMim) {
        if (stream.image_size % patch_extent != 0)
            throw ContractError("run config: patch extent must divide the image size");
        if (patch_extent != (1 << model.depth))
            throw ContractError(
                "run config: the masked-image head reads one feature-map site per patch, so "
                "patch_extent must equal the conv downsampling factor");
    }
}

nlohmann::json RunConfig::to_json() const {
    return {{"objective", objective_name(objective)},
            {"model", model.to_json()},
            {"stream", stream.to_json()},
            {"pretrain_budget", pretrain_budget.to_json()},
            {"finetune_budget", finetune_budget.to_json()},
            {"probe_budget", probe_budget.to_json()},
            {"fc_mode", fc_mode_name(fc_mode)},
            {"nt_budgets", nt_budgets},
            {"fc_grid", grid_to_json(fc_grid)},
            {"vocab_cap", vocab_cap},
            {"codebook_size", codebook_size},
            {"patch_extent", patch_extent},
            {"measure_ds_base", measure_ds_base},
            {"seed", seed}};
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
    RunConfig c;
    if (!j.contains("seed")) throw SpecError("run config: seed is mandatory");
    c.seed = j.at("seed").get<std::uint64_t>();
    c.objective = objective_from_name(j.value("objective", "mlm"));
    if (j.contains("model")) c.model = ModelSpec::from_json(j.at("model"));
    if (!j.contains("stream")) throw SpecError("run config: stream settings are mandatory");
    c.stream = StreamConfig::from_json(j.at("stream"));
    if (j.contains("pretrain_budget"))
        c.pretrain_budget = TrainBudget::from_json(j.at("pretrain_budget"), c.pretrain_budget);
    if (j.contains("finetune_budget"))
        c.finetune_budget = TrainBudget::from_json(j.at("finetune_budget"), c.finetune_budget);
    if (j.contains("probe_budget"))
        c.probe_budget = TrainBudget::from_json(j.at("probe_budget"), c.probe_budget);
    c.fc_mode = fc_mode_from_name(j.value("fc_mode", "both"));
    c.nt_budgets = j.value("nt_budgets", c.nt_budgets);
    if (j.contains("fc_grid")) c.fc_grid = grid_from_json(j.at("fc_grid"));
    c.vocab_cap = j.value("vocab_cap", c.vocab_cap);
    c.codebook_size = j.value("codebook_size", c.codebook_size);
    c.patch_extent = j.value("patch_extent", c.patch_extent);
    c.measure_ds_base = j.value("measure_ds_base", c.measure_ds_base);
    // Geometry follows the stream unless the manifest pinned it explicitly.
    if (!j.contains("model")) {
        c.model.family =
            c.stream.modality == Modality::kText ? Family::kTransformer : Family::kCnn;
        c.model.image_size = c.stream.image_size;
        c.model.channels = c.stream.channels;
    }
    c.validate();
    return c;
}

nlohmann::json ExperienceRecord::to_json() const {
    return {{"index", index},
            {"classes", classes},
            {"ds_acc", ds.acc},
            {"ds_one_epoch_acc", ds.one_epoch},
            {"ds_base_acc", ds_base.acc},
            {"ds_base_one_epoch_acc", ds_base.one_epoch},
            {"has_ds_base", has_ds_base},
            {"fc_acc", fc.acc},
            {"fc_one_epoch_acc", fc.one_epoch},
            {"fc_linear_acc", fc_linear},
            {"fc_grid_pick", fc_grid_pick},
            {"pretrain_epochs", pretrain_epochs},
            {"pretrain_final_loss", pretrain_final_loss},
            {"pretrain_val_loss", pretrain_val_loss},
            {"new_tokens", new_tokens},
            {"checkpoint", checkpoint},
            {"body_hash", body_hash},
            {"parent_body_hash", parent_body_hash}};
}

ExperienceRecord ExperienceRecord::from_json(const nlohmann::json& j) {
    ExperienceRecord e;
    e.index = j.at("index").get<int>();
    e.classes = j.at("classes").get<std::vector<int>>();
    e.ds = {j.at("ds_acc").get<double>(), j.at("ds_one_epoch_acc").get<double>()};
    e.ds_base = {j.at("ds_base_acc").get<double>(), j.at("ds_base_one_epoch_acc").get<double>()};
    e.has_ds_base = j.at("has_ds_base").get<bool>();
    e.fc = {j.at("fc_acc").get<double>(), j.at("fc_one_epoch_acc").get<double>()};
    e.fc_linear = j.at("fc_linear_acc").get<double>();
    e.fc_grid_pick = j.at("fc_grid_pick").get<int>();
    e.pretrain_epochs = j.at("pretrain_epochs").get<int>();
    e.pretrain_final_loss = j.at("pretrain_final_loss").get<double>();
    e.pretrain_val_loss = j.at("pretrain_val_loss").get<double>();
    e.new_tokens = j.at("new_tokens").get<int>();
    e.checkpoint = j.at("checkpoint").get<std::string>();
    e.body_hash = j.at("body_hash").get<std::uint64_t>();
    e.parent_body_hash = j.at("parent_body_hash").get<std::uint64_t>();
    return e;
}

double RunRecord::forgetting(int i) const {
    if (i < 0 || i >= static_cast<int>(experiences.size()))
        throw ContractError("forgetting: experience index out of range");
    return fc_baseline.acc - experiences[static_cast<std::size_t>(i)].fc.acc;
}

nlohmann::json RunRecord::to_json() const {
    nlohmann::json exps = nlohmann::json::array();
    for (const auto& e : experiences) exps.push_back(e.to_json());
    return {{"config", config},
            {"seed", seed},
            {"strategy", strategy},
            {"fc_id", fc_id},
            {"fc_baseline_acc", fc_baseline.acc},
            {"fc_baseline_one_epoch_acc", fc_baseline.one_epoch},
            {"fc_baseline_linear_acc", fc_baseline_linear},
            {"fc_baseline_grid_pick", fc_baseline_grid_pick},
            {"baseline_checkpoint", baseline_checkpoint},
            {"baseline_body_hash", baseline_body_hash},
            {"experiences", exps},
            {"acc_matrix", acc_matrix}};
}

RunRecord RunRecord::from_json(const nlohmann::json& j) {
    RunRecord r;
    r.config = j.at("config");
    r.seed = j.at("seed").get<std::uint64_t>();
    r.strategy = j.at("strategy").get<std::string>();
    r.fc_id = j.at("fc_id").get<std::uint64_t>();
    r.fc_baseline = {j.at("fc_baseline_acc").get<double>(),
                     j.at("fc_baseline_one_epoch_acc").get<double>()};
    r.fc_baseline_linear = j.at("fc_baseline_linear_acc").get<double>();
    r.fc_baseline_grid_pick = j.at("fc_baseline_grid_pick").get<int>();
    r.baseline_checkpoint = j.at("baseline_checkpoint").get<std::string>();
    r.baseline_body_hash = j.at("baseline_body_hash").get<std::uint64_t>();
    for (const auto& e : j.at("experiences")) r.experiences.push_back(ExperienceRecord::from_json(e));
    r.acc_matrix = j.at("acc_matrix").get<std::vector<std::vector<double>>>();
    return r;
}

void RunRecord::save(const std::string& path) const { write_json_file(path, to_json()); }

RunRecord RunRecord::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    nlohmann::json j;
    f >> j;
    return from_json(j);
}

PretrainStats initial_pretrain(Model& model, const RunConfig& cfg, const Dataset& base,
                               const Vocab* vocab, const VisualCodebook* codebook,
                               AccessLog* log) {
    std::vector<std::int32_t> base_map = iota_classes(kBaseDomains);
    return pretrain(model, cfg.objective, base, cfg.pretrain_budget, vocab, codebook,
                    cfg.objective == Objective::kClf ? &base_map : nullptr,
                    sub_seed(cfg.seed, "pretrain.base"), log, "base.pretrain");
}

FcEvalResult fc_grid_eval(const Model& model, const FcDataset& fc,
                          const std::vector<FcGridCell>& grid, const TrainBudget& base_budget,
                          const Vocab* vocab, std::uint64_t seed, AccessLog* log,
                          const std::string& phase) {
    if (grid.empty()) throw ContractError("fc_grid_eval: empty grid");
    const auto classes = iota_classes(fc.n_classes);
    FcEvalResult out;
    double best_val = -1.0;
    for (std::size_t ci = 0; ci < grid.size(); ++ci) {
        Model m = model.clone();
        m.replace_head(HeadKind::kClf, fc.n_classes, sub_seed(seed, "head", ci));
        TrainBudget b = base_budget;
        b.lr = grid[ci].lr;
        b.batch_size = grid[ci].batch_size;
        const FinetuneStats st = finetune_classifier(m, fc.train, fc.test, classes, b, vocab,
                                                     sub_seed(seed, "cell", ci), log, phase);
        if (st.best_val_acc > best_val) {
            best_val = st.best_val_acc;
            out.pair = {st.test_acc, st.one_epoch_acc};
            out.pick = static_cast<int>(ci);
        }
    }
    return out;
}

double linear_eval(const Model& model, const Dataset& train, const Dataset& test,
                   const std::vector<std::int32_t>& classes, const TrainBudget& budget,
                   const Vocab* vocab, std::uint64_t seed, AccessLog* log,
                   const std::string& phase) {
    const std::uint64_t before = model.body_hash();
    const double acc =
        linear_probe_eval(model, train, test, classes, budget, vocab, seed, log, phase);
    if (model.body_hash() != before)
        throw ContractError("linear_eval: body parameters changed during probing");
    return acc;
}

RunRecord run_scenario(const RunConfig& cfg, const std::string& out_dir, AccessLog* log) {
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();
    std::filesystem::create_directories(out_dir);
    AccessLog local_log;
    if (!log) log = &local_log;

    const bool text = cfg.stream.modality == Modality::kText;
    const StreamBundle bundle = text ? gen_text_stream(cfg.stream) : gen_image_stream(cfg.stream);
    const int n_stream_classes = cfg.stream.n_experiences * cfg.stream.classes_per_experience;

    std::optional<Vocab> vocab, base_vocab;
    ModelSpec spec = cfg.model;
    if (text) {
        const int cap =
            cfg.vocab_cap ? cfg.vocab_cap : cfg.stream.base_vocab_words + Vocab::kNumSpecials;
        vocab = train_vocab(bundle.base.texts, cap);
        log->record("vocab", bundle.base.tag, bundle.base.size());
        base_vocab = vocab;  // pre-expansion snapshot, used for baseline comparisons
        spec.vocab_size = vocab->size();
    }
    spec.validate();

    std::optional<VisualCodebook> codebook;
    if (cfg.objective == Objective::kMim) {
        // The codebook comes from the first experience's pre-training images;
        // it is fitted once at setup and frozen for the whole run.
        const Dataset& src = bundle.stream.experiences.empty()
                                 ? bundle.base
                                 : bundle.stream.experiences.front().pretrain;
        codebook = fit_codebook(extract_patches(src.images, cfg.patch_extent), cfg.codebook_size,
                                cfg.patch_extent, cfg.stream.channels,
                                sub_seed(cfg.seed, "codebook"));
        log->record("codebook", src.tag, src.size());
    }
    const Vocab* vp = vocab ? &*vocab : nullptr;
    const VisualCodebook* cbp = codebook ? &*codebook : nullptr;

    Model model = Model::build(spec, sub_seed(cfg.seed, "model.init"));
    switch (cfg.objective) {
        case Objective::kMlm:
            model.replace_head(HeadKind::kMlm, spec.vocab_size, sub_seed(cfg.seed, "head.mlm"));
            break;
        case Objective::kMim:
            model.replace_head(HeadKind::kMim, cfg.codebook_size, sub_seed(cfg.seed, "head.mim"));
            break;
        case Objective::kClf:
            // One supervised head spans base domains and all stream classes,
            // so the pre-training chain never swaps it.
            model.replace_head(HeadKind::kClf, kBaseDomains + n_stream_classes,
                               sub_seed(cfg.seed, "head.clf"));
            break;
    }

    RunRecord rec;
    rec.config = cfg.to_json();
    rec.seed = cfg.seed;
    rec.strategy = "continual";
    rec.fc_id = bundle.fc.id();

    auto checkpoint_extra = [&]() {
        nlohmann::json extra;
        extra["objective"] = objective_name(cfg.objective);
        extra["run_config"] = cfg.to_json();
        if (vocab) extra["vocab"] = vocab->to_json();
        return extra;
    };

    initial_pretrain(model, cfg, bundle.base, vp, cbp, log);
    save_checkpoint(out_dir + "/h0.pr.cpt", Checkpoint{model, "pr:base", 0, checkpoint_extra()});
    rec.baseline_checkpoint = "h0.pr.cpt";
    rec.baseline_body_hash = model.body_hash();

    const auto fc_classes = iota_classes(bundle.fc.n_classes);
    if (cfg.fc_mode != FcMode::kLinearEval) {
        const FcEvalResult r =
            fc_grid_eval(model, bundle.fc, cfg.fc_grid, cfg.finetune_budget, vp,
                         sub_seed(cfg.seed, "fc.base"), log, "baseline.fc");
        rec.fc_baseline = r.pair;
        rec.fc_baseline_grid_pick = r.pick;
    }
    if (cfg.fc_mode != FcMode::kFinetune)
        rec.fc_baseline_linear =
            linear_eval(model, bundle.fc.train, bundle.fc.test, fc_classes, cfg.probe_budget, vp,
                        sub_seed(cfg.seed, "fc.base.linear"), log, "baseline.fc.linear");

    std::optional<Model> baseline;
    if (cfg.measure_ds_base) baseline = model.clone();

    std::uint64_t prev_hash = rec.baseline_body_hash;
    for (const Experience& e : bundle.stream.experiences) {
        const int i = e.index;
        try {
            ExperienceRecord er;
            er.index = i;
            er.classes = e.classes;
            er.parent_body_hash = prev_hash;

            if (!cfg.nt_budgets.empty()) {
                const int budget = cfg.nt_budgets[static_cast<std::size_t>(i - 1)];
                const NewTokenSelection sel = select_new_tokens(*vocab, e.pretrain.texts, budget);
                log->record(fmt("e%d.nt", i), e.pretrain.tag, e.pretrain.size());
                vocab->expand(sel.tokens, i);
                model.expand_embeddings(static_cast<int>(sel.tokens.size()),
                                        sub_seed(cfg.seed, "expand", static_cast<std::uint64_t>(i)));
                er.new_tokens = static_cast<int>(sel.tokens.size());
            }

            std::vector<std::int32_t> stream_map(static_cast<std::size_t>(n_stream_classes));
            for (int g = 0; g < n_stream_classes; ++g)
                stream_map[static_cast<std::size_t>(g)] = kBaseDomains + g;
            const PretrainStats ps =
                pretrain(model, cfg.objective, e.pretrain, cfg.pretrain_budget, vp, cbp,
                         cfg.objective == Objective::kClf ? &stream_map : nullptr,
                         sub_seed(cfg.seed, "pretrain.e", static_cast<std::uint64_t>(i)), log,
                         fmt("e%d.pretrain", i));
            er.pretrain_epochs = ps.epochs_run;
            er.pretrain_final_loss = ps.train_losses.empty() ? 0.0 : ps.train_losses.back();
            er.pretrain_val_loss = ps.val_losses.empty() ? 0.0 : ps.val_losses.back();
            er.body_hash = model.body_hash();
            er.checkpoint = fmt("h%d.pr.cpt", i);
            save_checkpoint(out_dir + "/" + er.checkpoint,
                            Checkpoint{model, fmt("pr:e%d", i), prev_hash, checkpoint_extra()});
            prev_hash = er.body_hash;

            {
                Model m = model.clone();
                m.replace_head(HeadKind::kClf, static_cast<int>(e.classes.size()),
                               sub_seed(cfg.seed, "ds.head", static_cast<std::uint64_t>(i)));
                const FinetuneStats st = finetune_classifier(
                    m, e.ds_train, e.ds_test, as_i32(e.classes), cfg.finetune_budget, vp,
                    sub_seed(cfg.seed, "ds", static_cast<std::uint64_t>(i)), log,
                    fmt("e%d.ds", i));
                er.ds = {st.test_acc, st.one_epoch_acc};
            }

            if (baseline) {
                Model m = baseline->clone();
                m.replace_head(HeadKind::kClf, static_cast<int>(e.classes.size()),
                               sub_seed(cfg.seed, "ds.head", static_cast<std::uint64_t>(i)));
                const FinetuneStats st = finetune_classifier(
                    m, e.ds_train, e.ds_test, as_i32(e.classes), cfg.finetune_budget,
                    base_vocab ? &*base_vocab : nullptr,
                    sub_seed(cfg.seed, "ds_base", static_cast<std::uint64_t>(i)), log,
                    fmt("e%d.ds_base", i));
                er.ds_base = {st.test_acc, st.one_epoch_acc};
                er.has_ds_base = true;
            }

            if (cfg.fc_mode != FcMode::kLinearEval) {
                const FcEvalResult r = fc_grid_eval(
                    model, bundle.fc, cfg.fc_grid, cfg.finetune_budget, vp,
                    sub_seed(cfg.seed, "fc.e", static_cast<std::uint64_t>(i)), log,
                    fmt("e%d.fc", i));
                er.fc = r.pair;
                er.fc_grid_pick = r.pick;
            }
            if (cfg.fc_mode != FcMode::kFinetune)
                er.fc_linear = linear_eval(
                    model, bundle.fc.train, bundle.fc.test, fc_classes, cfg.probe_budget, vp,
                    sub_seed(cfg.seed, "fc.linear", static_cast<std::uint64_t>(i)), log,
                    fmt("e%d.fc.linear", i));

            rec.experiences.push_back(std::move(er));
        } catch (const Error& err) {
            rec.save(out_dir + "/record.partial.json");
            log->save(out_dir + "/access_log.json");
            write_timing_sidecar(out_dir, cfg.seed, t0);
            throw Error("experience " + std::to_string(i) + ": " + err.what());
        }
    }

    rec.save(out_dir + "/record.json");
    log->save(out_dir + "/access_log.json");
    write_timing_sidecar(out_dir, cfg.seed, t0);
    assert_data_isolation(*log);
    assert_lineage(rec);
    return rec;
}

RunRecord run_traditional_cl(const RunConfig& cfg, const std::string& strategy,
                             std::int64_t memory_size, const std::string& out_dir,
                             AccessLog* log) {
    cfg.validate();
    if (strategy != "naive" && strategy != "replay")
        throw ContractError("run_traditional_cl: strategy must be naive or replay");
    if (strategy == "replay" && memory_size < 1)
        throw ContractError("run_traditional_cl: replay needs a positive memory size");
    const auto t0 = std::chrono::steady_clock::now();
    std::filesystem::create_directories(out_dir);
    AccessLog local_log;
    if (!log) log = &local_log;

    const bool text = cfg.stream.modality == Modality::kText;
    const StreamBundle bundle = text ? gen_text_stream(cfg.stream) : gen_image_stream(cfg.stream);
    const int n_classes = cfg.stream.n_experiences * cfg.stream.classes_per_experience;
    const auto all_classes = iota_classes(n_classes);

    std::optional<Vocab> vocab;
    ModelSpec spec = cfg.model;
    if (text) {
        const int cap =
            cfg.vocab_cap ? cfg.vocab_cap : cfg.stream.base_vocab_words + Vocab::kNumSpecials;
        vocab = train_vocab(bundle.base.texts, cap);
        log->record("vocab", bundle.base.tag, bundle.base.size());
        spec.vocab_size = vocab->size();
    }
    spec.validate();
    const Vocab* vp = vocab ? &*vocab : nullptr;

    // Fresh model, single shared head over every class; no pre-training.
    Model model = Model::build(spec, sub_seed(cfg.seed, "cl.init"));
    model.replace_head(HeadKind::kClf, n_classes, sub_seed(cfg.seed, "cl.head"));
    Optimizer opt = Optimizer::adam(cfg.finetune_budget.lr);
    const auto params = model.trainable_parameters();

    RunRecord rec;
    rec.config = cfg.to_json();
    rec.seed = cfg.seed;
    rec.strategy = strategy;
    rec.fc_id = bundle.fc.id();

    // Reservoir of row references (task index, row) over all seen training
    // samples; materialized into a dataset at each task boundary.
    std::vector<std::pair<int, std::int64_t>> reservoir;
    std::int64_t seen = 0;
    Rng res_rng = Rng(cfg.seed).derive("reservoir");

    const int T = static_cast<int>(bundle.stream.experiences.size());
    for (int ti = 1; ti <= T; ++ti) {
        const Experience& e = bundle.stream.experiences[static_cast<std::size_t>(ti - 1)];
        const std::string phase = fmt("cl.task%d", ti);

        Dataset memory;
        if (strategy == "replay" && !reservoir.empty()) {
            // Gather per source task to keep subset calls contiguous.
            bool first = true;
            for (int src = 1; src < ti; ++src) {
                std::vector<std::int64_t> rows;
                for (const auto& [task, row] : reservoir)
                    if (task == src) rows.push_back(row);
                if (rows.empty()) continue;
                Dataset part =
                    bundle.stream.experiences[static_cast<std::size_t>(src - 1)].ds_train.subset(
                        rows);
                memory = first ? std::move(part) : concat(memory, part);
                first = false;
            }
            memory.tag = "memory";
            if (memory_size < 2LL * ti)
                std::fprintf(stderr,
                             "warning: replay memory (%lld) is smaller than the number of "
                             "classes seen (%d)\n",
                             static_cast<long long>(memory_size), 2 * ti);
        }

        const std::int64_t n_cur = e.ds_train.size();
        Rng order_root = Rng(cfg.seed).derive("cl.order").derive(static_cast<std::uint64_t>(ti));
        Rng mix_rng = Rng(cfg.seed).derive("cl.mix").derive(static_cast<std::uint64_t>(ti));
        const bool mixing = memory.size() > 0;
        const int cur_step = mixing ? std::max(1, cfg.finetune_budget.batch_size / 2)
                                    : cfg.finetune_budget.batch_size;
        for (int epoch = 1; epoch <= cfg.finetune_budget.epochs; ++epoch) {
            std::vector<std::int64_t> idx(static_cast<std::size_t>(n_cur));
            for (std::int64_t r = 0; r < n_cur; ++r) idx[static_cast<std::size_t>(r)] = r;
            {
                Rng r = order_root.derive(static_cast<std::uint64_t>(epoch));
                r.shuffle(idx);
            }
            for (std::size_t start = 0; start < idx.size();
                 start += static_cast<std::size_t>(cur_step)) {
                const std::vector<std::int64_t> cur_rows(
                    idx.begin() + static_cast<std::ptrdiff_t>(start),
                    idx.begin() + static_cast<std::ptrdiff_t>(
                                      std::min(idx.size(), start + static_cast<std::size_t>(cur_step))));
                Dataset batch = e.ds_train.subset(cur_rows);
                if (mixing) {
                    std::vector<std::int64_t> mem_rows;
                    for (std::size_t k = 0; k < cur_rows.size(); ++k)
                        mem_rows.push_back(static_cast<std::int64_t>(
                            mix_rng.next_below(static_cast<std::uint64_t>(memory.size()))));
                    batch = concat(batch, memory.subset(mem_rows));
                }
                std::vector<std::int32_t> targets;
                for (std::int32_t l : batch.labels) {
                    if (l < 0 || l >= n_classes)
                        throw ContractError("run_traditional_cl: label outside the shared head");
                    targets.push_back(l);
                }
                Tensor logits;
                if (text) {
                    const IntMatrix toks = tokenize_dataset(batch, *vocab, spec.max_sequence);
                    logits = model.forward_tokens(toks).logits;
                } else {
                    logits = model.forward_images(batch.images).logits;
                }
                zero_grads(params);
                Tensor loss = softmax_ce(logits, targets);
                loss.backward();
                opt.step(params);
            }
            if (log) {
                log->record(phase, e.ds_train.tag, n_cur);
                if (mixing) log->record(phase, memory.tag, n_cur);
            }
        }

        std::vector<double> row;
        for (int j = 1; j <= ti; ++j)
            row.push_back(evaluate_classifier(
                model, bundle.stream.experiences[static_cast<std::size_t>(j - 1)].ds_test,
                all_classes, vp, cfg.finetune_budget.batch_size, log, fmt("cl.eval%d", ti)));
        rec.acc_matrix.push_back(std::move(row));

        if (strategy == "replay") {
            for (std::int64_t r = 0; r < n_cur; ++r) {
                ++seen;
                if (static_cast<std::int64_t>(reservoir.size()) < memory_size) {
                    reservoir.emplace_back(ti, r);
                } else {
                    const auto slot = res_rng.next_below(static_cast<std::uint64_t>(seen));
                    if (slot < static_cast<std::uint64_t>(memory_size))
                        reservoir[static_cast<std::size_t>(slot)] = {ti, r};
                }
            }
        }
    }

    rec.save(out_dir + "/record.json");
    log->save(out_dir + "/access_log.json");
    write_timing_sidecar(out_dir, cfg.seed, t0);
    return rec;
}

double acc_metric(const std::vector<std::vector<double>>& r, int tasks) {
    if (tasks < 1) throw ContractError("acc_metric: need at least one task");
    if (static_cast<int>(r.size()) < tasks ||
        static_cast<int>(r[static_cast<std::size_t>(tasks - 1)].size()) < tasks)
        throw ContractError("acc_metric: incomplete last row");
    double sum = 0.0;
    for (int j = 0; j < tasks; ++j) sum += r[static_cast<std::size_t>(tasks - 1)][static_cast<std::size_t>(j)];
    return sum / static_cast<double>(tasks);
}

namespace {

// Returns the experience number of an "e<i>." prefix, or 0 when the name has
// no such prefix.
int experience_prefix(const std::string& name) {
    if (name.size() < 3 || name[0] != 'e') return 0;
    std::size_t p = 1;
    int v = 0;
    while (p < name.size() && name[p] >= '0' && name[p] <= '9') {
        v = v * 10 + (name[p] - '0');
        ++p;
    }
    if (p == 1 || p >= name.size() || name[p] != '.') return 0;
    return v;
}

}  // namespace

void assert_data_isolation(const AccessLog& log) {
    for (const auto& e : log.entries()) {
        const int phase_i = experience_prefix(e.phase);
        const int data_j = experience_prefix(e.tag);
        if (phase_i > 0 && data_j > 0 && data_j < phase_i)
            throw ContractError("data isolation violated: phase " + e.phase + " read " + e.tag);
    }
}

void assert_lineage(const RunRecord& record) {
    std::uint64_t prev = record.baseline_body_hash;
    for (const auto& e : record.experiences) {
        if (e.parent_body_hash != prev)
            throw ContractError("lineage violated at experience " + std::to_string(e.index) +
                                ": parent hash does not match the previous checkpoint");
        if (e.body_hash == 0) throw ContractError("lineage: missing body hash");
        prev = e.body_hash;
    }
}

}  // namespace cptlab
