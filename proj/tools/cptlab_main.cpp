// SPDX-License-Identifier: Apache-2.0
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cptlab/cli.hpp"

int main(int argc, char** argv) {
    CLI::App app{"cptlab: desk-scale continual pre-training laboratory"};
    app.require_subcommand(1);

    std::string manifest_path;
    bool force = false;
    int jobs = 1;
    std::uint64_t seed = 0;
    auto* run = app.add_subcommand(
        "run", "Execute every run of an experiment manifest (CPTLAB_OUT roots the output)");
    run->add_option("manifest", manifest_path, "Manifest JSON file")->required();
    run->add_flag("--force", force, "Redo runs whose record already exists");
    run->add_option("--jobs", jobs, "Worker pool size")->check(CLI::PositiveNumber);
    auto* run_seed = run->add_option("--seed", seed, "Run only this seed of the sweep");

    std::vector<std::string> records;
    std::string baseline;
    std::string cmp_out = "compare.tsv";
    auto* cmp = app.add_subcommand("compare", "Forgetting table of records against a baseline");
    cmp->add_option("records", records, "RunRecord JSON files")->required();
    cmp->add_option("--baseline", baseline, "Baseline record")->required();
    cmp->add_option("--out", cmp_out, "Output TSV path");

    std::string ckpt_a;
    std::string ckpt_b;
    std::string probe = "fc.test";
    std::string cka_config;
    std::string cka_out = "cka.tsv";
    cptlab::CkaConfig ccfg;
    auto* cka = app.add_subcommand("cka", "Layer-wise CKA between two checkpoints");
    cka->add_option("ckpt_a", ckpt_a, "First checkpoint")->required();
    cka->add_option("ckpt_b", ckpt_b, "Second checkpoint")->required();
    cka->add_option("--probe", probe, "Probe dataset tag (default fc.test)");
    cka->add_option("--config", cka_config,
                    "Stream source: manifest, run config or stream config JSON");
    cka->add_option("--batch", ccfg.batch_size, "Minibatch size");
    cka->add_option("--passes", ccfg.passes, "Shuffled passes");
    cka->add_option("--seed", ccfg.seed, "Shuffle seed");
    cka->add_flag("--full-batch", ccfg.full_batch, "Single pass over all probe rows");
    cka->add_option("--out", cka_out, "Output TSV path");

    std::string dd_config;
    std::string dd_tag;
    std::string dd_out;
    auto* dd = app.add_subcommand("dump-data", "Export one dataset of a configured stream");
    dd->add_option("config", dd_config, "Manifest, run config or stream config JSON")->required();
    dd->add_option("tag", dd_tag, "Dataset tag, e.g. base, e1.pr, e2.ds.train, fc.test")
        ->required();
    dd->add_option("--out", dd_out, "Output path (TSV for text, container for images)")
        ->required();

    std::string ec_path;
    auto* ec = app.add_subcommand("explain-config", "Print the fully expanded configuration");
    ec->add_option("config", ec_path, "Manifest, run config or stream config JSON")->required();

    CLI11_PARSE(app, argc, argv);

    if (run->parsed()) {
        const std::optional<std::uint64_t> so =
            run_seed->count() > 0 ? std::optional<std::uint64_t>(seed) : std::nullopt;
        return cptlab::cmd_run(manifest_path, force, jobs, so);
    }
    if (cmp->parsed()) return cptlab::cmd_compare(records, baseline, cmp_out);
    if (cka->parsed()) return cptlab::cmd_cka(ckpt_a, ckpt_b, probe, cka_config, ccfg, cka_out);
    if (dd->parsed()) return cptlab::cmd_dump_data(dd_config, dd_tag, dd_out);
    if (ec->parsed()) return cptlab::cmd_explain_config(ec_path);
    return 1;
}
