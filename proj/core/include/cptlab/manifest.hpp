// SPDX-License-Identifier: Apache-2.0
// Declarative experiment manifests: one run template, a seed sweep, and the
// set of artifacts to produce. Every file the batch front-end emits carries
// the manifest hash and seed in its header, so equal headers imply equal
// bytes.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cptlab/cka.hpp"
#include "cptlab/scenario.hpp"

namespace cptlab {

struct ExperimentManifest {
    std::string name;
    RunConfig run;                    // template; each sweep entry overrides run.seed
    std::vector<std::uint64_t> seeds; // defaults to {run.seed}
    std::string out_dir = "runs";     // relative paths resolve under $CPTLAB_OUT
    bool art_checkpoints = true;
    bool art_cka = false;  // layer CKA of the final vs the baseline checkpoint
    bool art_summary = true;
    CkaConfig cka;
    std::string strategy = "continual";  // or "naive" / "replay"
    std::int64_t replay_memory = 0;

    std::string source_path;
    std::uint64_t file_hash = 0;  // fnv over the manifest file bytes

    // Parses and validates; error messages name the offending field.
    static ExperimentManifest load(const std::string& path);
    static ExperimentManifest from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;  // fully expanded, defaults resolved

    std::string run_dir(std::uint64_t seed) const;  // <out>/<name>.seed<seed>
    std::string resolved_out_dir() const;
};

std::uint64_t file_fnv(const std::string& path);

// "manifest_hash=<hex> seed=<s>" (or seeds=...); the first line of every
// emitted table begins with "# " plus this.
std::string stamp_header(std::uint64_t manifest_hash, const std::string& seed_field);

// Per-seed records in sweep order; partial entries allowed (gap markers).
void write_summary(const ExperimentManifest& m,
                   const std::vector<std::pair<std::uint64_t, RunRecord>>& runs,
                   const std::string& path);

}  // namespace cptlab
