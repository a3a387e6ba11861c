// SPDX-License-Identifier: Apache-2.0
#include "cptlab/manifest.hpp"

#include <algorithm>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "cptlab/common.hpp"

namespace cptlab {

namespace {

std::string fmt(const char* f, ...) {
    va_list ap;
    va_start(ap, f);
    char buf[512];
    std::vsnprintf(buf, sizeof(buf), f, ap);
    va_end(ap);
    return std::string(buf);
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("manifest: cannot read '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

bool safe_name(const std::string& s) {
    if (s.empty()) return false;
    for (char c : s) {
        const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
                        (c >= '0' && c <= '9') || c == '.' || c == '_' || c == '-';
        if (!ok) return false;
    }
    return true;
}

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known,
                    const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!known.count(it.key()))
            throw SpecError(where + ": unknown field '" + it.key() + "'");
    }
}

// Median of the present values; caller guarantees non-empty.
double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

constexpr double kGap = std::numeric_limits<double>::quiet_NaN();

// One summary panel: rows are seeds plus a median row, columns are shared.
// NaN marks a gap (unmeasured cell) and is skipped by the median.
void write_panel(std::ostream& out, const std::string& title,
                 const std::vector<std::string>& cols,
                 const std::vector<std::pair<std::string, std::vector<double>>>& rows) {
    out << "[" << title << "]\n";
    out << "seed";
    for (const auto& c : cols) out << '\t' << c;
    out << '\n';
    std::vector<std::vector<double>> present(cols.size());
    for (const auto& r : rows) {
        out << r.first;
        for (std::size_t c = 0; c < cols.size(); ++c) {
            const double v = c < r.second.size() ? r.second[c] : kGap;
            if (std::isnan(v)) {
                out << "\t-";
            } else {
                out << '\t' << fmt("%.6f", v);
                present[c].push_back(v);
            }
        }
        out << '\n';
    }
    out << "median";
    for (std::size_t c = 0; c < cols.size(); ++c) {
        if (present[c].empty())
            out << "\t-";
        else
            out << '\t' << fmt("%.6f", median(present[c]));
    }
    out << "\n\n";
}

}  // namespace

std::uint64_t file_fnv(const std::string& path) {
    const std::string bytes = read_file(path);
    return fnv1a(bytes.data(), bytes.size());
}

std::string stamp_header(std::uint64_t manifest_hash, const std::string& seed_field) {
    return "manifest_hash=" + to_hex(manifest_hash) + " " + seed_field;
}

ExperimentManifest ExperimentManifest::load(const std::string& path) {
    const std::string bytes = read_file(path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(bytes);
    } catch (const nlohmann::json::exception& e) {
        throw SpecError("manifest: '" + path + "' is not valid JSON: " + e.what());
    }
    ExperimentManifest m = from_json(j);
    m.source_path = path;
    m.file_hash = fnv1a(bytes.data(), bytes.size());
    return m;
}

ExperimentManifest ExperimentManifest::from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw SpecError("manifest: top level must be an object");
    reject_unknown(j,
                   {"name", "run", "seeds", "out_dir", "artifacts", "cka", "strategy",
                    "replay_memory"},
                   "manifest");

    ExperimentManifest m;
    if (!j.contains("name") || !j["name"].is_string())
        throw SpecError("manifest: name is mandatory");
    m.name = j["name"].get<std::string>();
    if (!safe_name(m.name))
        throw SpecError("manifest: name must be non-empty and limited to [A-Za-z0-9._-]");

    if (!j.contains("run") || !j["run"].is_object())
        throw SpecError("manifest: run is mandatory");
    m.run = RunConfig::from_json(j["run"]);

    if (j.contains("seeds")) {
        if (!j["seeds"].is_array() || j["seeds"].empty())
            throw SpecError("manifest: seeds must be a non-empty array");
        for (const auto& s : j["seeds"]) {
            if (!s.is_number_integer() && !s.is_number_unsigned())
                throw SpecError("manifest: seeds entries must be non-negative integers");
            if (s.is_number_integer() && s.get<std::int64_t>() < 0)
                throw SpecError("manifest: seeds entries must be non-negative integers");
            m.seeds.push_back(s.get<std::uint64_t>());
        }
        std::set<std::uint64_t> uniq(m.seeds.begin(), m.seeds.end());
        if (uniq.size() != m.seeds.size())
            throw SpecError("manifest: seeds must be unique, run directories would collide");
    } else {
        m.seeds = {m.run.seed};
    }

    m.out_dir = j.value("out_dir", m.out_dir);
    if (m.out_dir.empty()) throw SpecError("manifest: out_dir must be non-empty");

    if (j.contains("artifacts")) {
        const auto& a = j["artifacts"];
        if (!a.is_object()) throw SpecError("manifest: artifacts must be an object");
        reject_unknown(a, {"checkpoints", "cka", "summary"}, "manifest artifacts");
        m.art_checkpoints = a.value("checkpoints", m.art_checkpoints);
        m.art_cka = a.value("cka", m.art_cka);
        m.art_summary = a.value("summary", m.art_summary);
    }

    if (j.contains("cka")) {
        const auto& c = j["cka"];
        if (!c.is_object()) throw SpecError("manifest: cka must be an object");
        reject_unknown(c, {"batch_size", "passes", "seed", "full_batch"}, "manifest cka");
        m.cka.batch_size = c.value("batch_size", m.cka.batch_size);
        m.cka.passes = c.value("passes", m.cka.passes);
        m.cka.seed = c.value("seed", m.cka.seed);
        m.cka.full_batch = c.value("full_batch", m.cka.full_batch);
        if (m.cka.batch_size < 4) throw SpecError("manifest: cka.batch_size must be >= 4");
        if (m.cka.passes < 1) throw SpecError("manifest: cka.passes must be >= 1");
    }

    m.strategy = j.value("strategy", m.strategy);
    if (m.strategy != "continual" && m.strategy != "naive" && m.strategy != "replay")
        throw SpecError("manifest: strategy must be \"continual\", \"naive\" or \"replay\"");
    m.replay_memory = j.value("replay_memory", m.replay_memory);
    if (m.strategy == "replay" && m.replay_memory < 1)
        throw SpecError("manifest: strategy \"replay\" requires replay_memory >= 1");
    if (m.strategy != "replay" && m.replay_memory != 0)
        throw SpecError("manifest: replay_memory is only meaningful for strategy \"replay\"");
    if (m.art_cka && m.strategy != "continual")
        throw SpecError("manifest: artifacts.cka requires strategy \"continual\" checkpoints");
    return m;
}

nlohmann::json ExperimentManifest::to_json() const {
    nlohmann::json j;
    j["name"] = name;
    j["run"] = run.to_json();
    j["seeds"] = seeds;
    j["out_dir"] = out_dir;
    j["artifacts"] = {{"checkpoints", art_checkpoints}, {"cka", art_cka},
                      {"summary", art_summary}};
    j["cka"] = {{"batch_size", cka.batch_size}, {"passes", cka.passes},
                {"seed", cka.seed}, {"full_batch", cka.full_batch}};
    j["strategy"] = strategy;
    j["replay_memory"] = replay_memory;
    return j;
}

std::string ExperimentManifest::resolved_out_dir() const {
    namespace fs = std::filesystem;
    if (fs::path(out_dir).is_absolute()) return out_dir;
    const char* root = std::getenv("CPTLAB_OUT");
    if (root != nullptr && *root != '\0') return (fs::path(root) / out_dir).string();
    return out_dir;
}

std::string ExperimentManifest::run_dir(std::uint64_t seed) const {
    namespace fs = std::filesystem;
    return (fs::path(resolved_out_dir()) / (name + ".seed" + std::to_string(seed))).string();
}

void write_summary(const ExperimentManifest& m,
                   const std::vector<std::pair<std::uint64_t, RunRecord>>& runs,
                   const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("summary: cannot write '" + path + "'");

    std::string seed_csv;
    for (std::size_t i = 0; i < runs.size(); ++i) {
        if (i) seed_csv += ',';
        seed_csv += std::to_string(runs[i].first);
    }
    out << "# " << stamp_header(m.file_hash, "seeds=" + seed_csv) << '\n';
    out << "# experiment " << m.name << " strategy " << m.strategy << "\n\n";

    if (m.strategy != "continual") {
        // One panel: accuracy per task after the last task, plus the ACC mean.
        int tasks = 0;
        for (const auto& r : runs)
            tasks = std::max(tasks, static_cast<int>(r.second.acc_matrix.size()));
        std::vector<std::string> cols;
        for (int t = 1; t <= tasks; ++t) cols.push_back("t" + std::to_string(t));
        cols.push_back("ACC");
        std::vector<std::pair<std::string, std::vector<double>>> rows;
        for (const auto& r : runs) {
            std::vector<double> v(cols.size(), kGap);
            const auto& mat = r.second.acc_matrix;
            if (!mat.empty()) {
                const auto& last = mat.back();
                for (std::size_t t = 0; t < last.size() && t < static_cast<std::size_t>(tasks); ++t)
                    v[t] = last[t];
                v.back() = acc_metric(mat, static_cast<int>(mat.size()));
            }
            rows.emplace_back(std::to_string(r.first), std::move(v));
        }
        write_panel(out, "final task accuracy", cols, rows);
        return;
    }

    std::size_t n_exp = 0;
    for (const auto& r : runs) n_exp = std::max(n_exp, r.second.experiences.size());
    std::vector<std::string> cols{"base"};
    for (std::size_t i = 1; i <= n_exp; ++i) cols.push_back("e" + std::to_string(i));

    auto collect = [&](auto base_of, auto exp_of) {
        std::vector<std::pair<std::string, std::vector<double>>> rows;
        for (const auto& r : runs) {
            std::vector<double> v(cols.size(), kGap);
            v[0] = base_of(r.second);
            for (std::size_t i = 0; i < r.second.experiences.size(); ++i)
                v[i + 1] = exp_of(r.second, r.second.experiences[i]);
            rows.emplace_back(std::to_string(r.first), std::move(v));
        }
        return rows;
    };

    write_panel(out, "accuracy", cols,
                collect([](const RunRecord& r) { return r.fc_baseline.acc; },
                        [](const RunRecord&, const ExperienceRecord& e) { return e.fc.acc; }));
    write_panel(out, "1-epoch accuracy", cols,
                collect([](const RunRecord& r) { return r.fc_baseline.one_epoch; },
                        [](const RunRecord&, const ExperienceRecord& e) {
                            return e.fc.one_epoch;
                        }));

    bool any_linear = false;
    for (const auto& r : runs) {
        if (r.second.fc_baseline_linear >= 0.0) any_linear = true;
        for (const auto& e : r.second.experiences)
            if (e.fc_linear >= 0.0) any_linear = true;
    }
    if (any_linear) {
        write_panel(out, "linear accuracy", cols,
                    collect([](const RunRecord& r) {
                                return r.fc_baseline_linear >= 0.0 ? r.fc_baseline_linear : kGap;
                            },
                            [](const RunRecord&, const ExperienceRecord& e) {
                                return e.fc_linear >= 0.0 ? e.fc_linear : kGap;
                            }));
    }

    write_panel(out, "forgetting", cols,
                collect([](const RunRecord&) { return 0.0; },
                        [](const RunRecord& r, const ExperienceRecord& e) {
                            return r.fc_baseline.acc - e.fc.acc;
                        }));

    bool any_ds = false;
    for (const auto& r : runs) any_ds = any_ds || !r.second.experiences.empty();
    if (any_ds) {
        write_panel(out, "downstream accuracy", cols,
                    collect([](const RunRecord&) { return kGap; },
                            [](const RunRecord&, const ExperienceRecord& e) {
                                return e.ds.acc;
                            }));
        bool any_base_ds = false;
        for (const auto& r : runs)
            for (const auto& e : r.second.experiences) any_base_ds |= e.has_ds_base;
        if (any_base_ds) {
            write_panel(out, "downstream accuracy from base checkpoint", cols,
                        collect([](const RunRecord&) { return kGap; },
                                [](const RunRecord&, const ExperienceRecord& e) {
                                    return e.has_ds_base ? e.ds_base.acc : kGap;
                                }));
        }
    }
}

}  // namespace cptlab
