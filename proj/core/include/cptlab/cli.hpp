// SPDX-License-Identifier: Apache-2.0
// Command implementations behind the batch front-end. Each returns 0 iff all
// requested artifacts were written; errors go to stderr. Commands catch their
// own exceptions so the binary and the tests share exact behavior.
#pragma once

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "cptlab/manifest.hpp"

namespace cptlab {

// Executes every seed of the manifest sweep. Completed runs (record.json
// present) are skipped untouched unless force; seed_override restricts the
// sweep to one seed. jobs > 1 runs seeds on a worker pool.
int cmd_run(const std::string& manifest_path, bool force, int jobs,
            const std::optional<std::uint64_t>& seed_override = std::nullopt);

// Per-experience accuracy, 1-epoch accuracy and forgetting of each record
// against the baseline record. The reference for experience i is the
// baseline's own experience i when it has one, else the baseline's base row.
int cmd_compare(const std::vector<std::string>& record_paths, const std::string& baseline_path,
                const std::string& out_path);

// Layer-wise CKA between two checkpoints on a named probe dataset. The probe
// is regenerated from config_path when given, else from the run config
// embedded in the first checkpoint.
int cmd_cka(const std::string& ckpt_a, const std::string& ckpt_b, const std::string& probe_tag,
            const std::string& config_path, const CkaConfig& cfg, const std::string& out_path);

// Regenerates one dataset of the stream described by a manifest, run config
// or stream config file and exports it (TSV for text, container for images).
int cmd_dump_data(const std::string& config_path, const std::string& tag,
                  const std::string& out_path);

// Prints the fully expanded configuration, defaults resolved.
int cmd_explain_config(const std::string& config_path, std::ostream& out = std::cout);

}  // namespace cptlab
