// SPDX-License-Identifier: Apache-2.0
#include "cptlab/cli.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include "cptlab/cka.hpp"
#include "cptlab/common.hpp"
#include "cptlab/model.hpp"
#include "cptlab/streams.hpp"
#include "cptlab/tokenizer.hpp"

namespace cptlab {

namespace fs = std::filesystem;

namespace {

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

nlohmann::json read_json(const std::string& path) {
    const std::string bytes = read_file(path);
    try {
        return nlohmann::json::parse(bytes);
    } catch (const nlohmann::json::exception& e) {
        throw SpecError("'" + path + "' is not valid JSON: " + std::string(e.what()));
    }
}

void write_json_file(const std::string& path, const nlohmann::json& j) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write '" + path + "'");
    out << j.dump(2) << '\n';
}

// record.json carries the stamp as extra top-level keys; readers ignore them.
void stamp_record_file(const std::string& path, std::uint64_t manifest_hash) {
    if (!fs::exists(path)) return;
    nlohmann::json j = read_json(path);
    j["manifest_hash"] = to_hex(manifest_hash);
    write_json_file(path, j);
}

// The access log is an entry array at the core layer; the emitted file wraps
// it so the stamp has somewhere to live.
void stamp_access_log(const std::string& path, std::uint64_t manifest_hash, std::uint64_t seed) {
    if (!fs::exists(path)) return;
    nlohmann::json j = read_json(path);
    if (!j.is_array()) return;  // already wrapped
    nlohmann::json w;
    w["manifest_hash"] = to_hex(manifest_hash);
    w["seed"] = seed;
    w["entries"] = std::move(j);
    write_json_file(path, w);
}

StreamBundle gen_bundle(const StreamConfig& s) {
    return s.modality == Modality::kText ? gen_text_stream(s) : gen_image_stream(s);
}

const Dataset* find_dataset(const StreamBundle& b, const std::string& tag) {
    if (tag == "base") return &b.base;
    if (tag == "fc.train") return &b.fc.train;
    if (tag == "fc.test") return &b.fc.test;
    for (const auto& e : b.stream.experiences) {
        const std::string p = "e" + std::to_string(e.index) + ".";
        if (tag == p + "pr") return &e.pretrain;
        if (tag == p + "ds.train") return &e.ds_train;
        if (tag == p + "ds.test") return &e.ds_test;
    }
    return nullptr;
}

// Config files are accepted at three levels of nesting; the stream is the
// part data generation needs.
StreamConfig stream_of_json(const nlohmann::json& j) {
    if (j.is_object() && j.contains("run")) return ExperimentManifest::from_json(j).run.stream;
    if (j.is_object() && j.contains("stream")) return RunConfig::from_json(j).stream;
    return StreamConfig::from_json(j);
}

struct RunOutcome {
    bool ok = false;
    bool skipped = false;
    double seconds = 0.0;
    std::string error;
};

void write_cka_artifact(const ExperimentManifest& m, const RunRecord& rec,
                        const std::string& dir) {
    const Checkpoint first = load_checkpoint(dir + "/" + rec.baseline_checkpoint);
    const std::string last_name =
        rec.experiences.empty() ? rec.baseline_checkpoint : rec.experiences.back().checkpoint;
    const Checkpoint last = load_checkpoint(dir + "/" + last_name);

    const StreamBundle bundle = gen_bundle(RunConfig::from_json(rec.config).stream);
    std::optional<Vocab> va, vb;
    if (first.extra.contains("vocab")) va = Vocab::from_json(first.extra["vocab"]);
    if (last.extra.contains("vocab")) vb = Vocab::from_json(last.extra["vocab"]);
    const CkaMatrix mat =
        layer_cka(first.model, last.model, bundle.fc.test, va ? &*va : nullptr,
                  vb ? &*vb : nullptr, m.cka);

    const std::string path = dir + "/cka.tsv";
    mat.save_tsv(path);
    const std::string body = read_file(path);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write '" + path + "'");
    out << "# " << stamp_header(m.file_hash, "seed=" + std::to_string(rec.seed)) << '\n' << body;
}

RunOutcome run_one(const ExperimentManifest& m, std::uint64_t seed, bool force) {
    RunOutcome o;
    const auto t0 = std::chrono::steady_clock::now();
    const std::string dir = m.run_dir(seed);
    const std::string record_path = dir + "/record.json";
    try {
        if (fs::exists(record_path) && !force) {
            o.ok = true;
            o.skipped = true;
            return o;
        }
        if (force && fs::exists(dir)) fs::remove_all(dir);

        RunConfig cfg = m.run;
        cfg.seed = seed;
        AccessLog log;
        RunRecord rec;
        try {
            rec = m.strategy == "continual"
                      ? run_scenario(cfg, dir, &log)
                      : run_traditional_cl(cfg, m.strategy, m.replay_memory, dir, &log);
        } catch (...) {
            // Partial artifacts still get stamped so the header invariant
            // holds for everything on disk.
            stamp_record_file(dir + "/record.partial.json", m.file_hash);
            stamp_access_log(dir + "/access_log.json", m.file_hash, seed);
            throw;
        }

        if (m.art_cka) write_cka_artifact(m, rec, dir);
        stamp_record_file(record_path, m.file_hash);
        stamp_access_log(dir + "/access_log.json", m.file_hash, seed);
        if (!m.art_checkpoints) {
            for (const auto& entry : fs::directory_iterator(dir)) {
                if (entry.path().extension() == ".cpt") fs::remove(entry.path());
            }
        }
        o.ok = true;
    } catch (const std::exception& e) {
        o.ok = false;
        o.error = e.what();
    }
    o.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return o;
}

}  // namespace

int cmd_run(const std::string& manifest_path, bool force, int jobs,
            const std::optional<std::uint64_t>& seed_override) {
    try {
        const ExperimentManifest m = ExperimentManifest::load(manifest_path);
        fs::create_directories(m.resolved_out_dir());

        std::vector<std::uint64_t> to_run = seed_override
                                                ? std::vector<std::uint64_t>{*seed_override}
                                                : m.seeds;
        std::vector<RunOutcome> outcomes(to_run.size());
        std::atomic<std::size_t> next{0};
        auto worker = [&]() {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= to_run.size()) return;
                outcomes[i] = run_one(m, to_run[i], force);
            }
        };
        const int n_workers = static_cast<int>(
            std::min<std::size_t>(static_cast<std::size_t>(std::max(1, jobs)), to_run.size()));
        if (n_workers <= 1) {
            worker();
        } else {
            std::vector<std::thread> pool;
            for (int w = 0; w < n_workers; ++w) pool.emplace_back(worker);
            for (auto& t : pool) t.join();
        }

        bool all_ok = true;
        for (std::size_t i = 0; i < to_run.size(); ++i) {
            const auto& o = outcomes[i];
            if (!o.ok) {
                all_ok = false;
                std::fprintf(stderr, "error: run %s.seed%llu failed: %s\n", m.name.c_str(),
                             static_cast<unsigned long long>(to_run[i]), o.error.c_str());
            } else if (o.skipped) {
                std::fprintf(stderr, "kept %s.seed%llu\n", m.name.c_str(),
                             static_cast<unsigned long long>(to_run[i]));
            } else {
                std::fprintf(stderr, "wrote %s.seed%llu (%.1fs)\n", m.name.c_str(),
                             static_cast<unsigned long long>(to_run[i]), o.seconds);
            }
        }

        if (m.art_summary) {
            // Summary covers every sweep seed with a record on disk, so a
            // single-seed rerun refreshes the aggregate view.
            std::vector<std::uint64_t> sum_seeds = m.seeds;
            if (seed_override &&
                std::find(sum_seeds.begin(), sum_seeds.end(), *seed_override) == sum_seeds.end())
                sum_seeds.push_back(*seed_override);
            std::vector<std::pair<std::uint64_t, RunRecord>> runs;
            for (const std::uint64_t s : sum_seeds) {
                const std::string rp = m.run_dir(s) + "/record.json";
                if (fs::exists(rp)) runs.emplace_back(s, RunRecord::load(rp));
            }
            const std::string sum_path =
                (fs::path(m.resolved_out_dir()) / (m.name + ".summary.tsv")).string();
            const std::string tmp = sum_path + ".tmp";
            write_summary(m, runs, tmp);
            // Rewriting identical bytes would disturb timestamps that the
            // idempotence contract promises to keep.
            if (fs::exists(sum_path) && read_file(sum_path) == read_file(tmp)) {
                fs::remove(tmp);
            } else {
                fs::rename(tmp, sum_path);
            }
        }
        return all_ok ? 0 : 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}

int cmd_compare(const std::vector<std::string>& record_paths, const std::string& baseline_path,
                const std::string& out_path) {
    try {
        if (record_paths.empty()) throw SpecError("compare: no records given");
        const RunRecord baseline = RunRecord::load(baseline_path);
        std::vector<RunRecord> recs;
        std::uint64_t h = file_fnv(baseline_path);
        std::string seed_csv = std::to_string(baseline.seed);
        for (const auto& p : record_paths) {
            RunRecord r = RunRecord::load(p);
            if (r.fc_id != baseline.fc_id)
                throw DataError("compare: '" + p +
                                "' was measured on a different FC dataset than the baseline");
            h = hash_combine(h, file_fnv(p));
            seed_csv += "," + std::to_string(r.seed);
            recs.push_back(std::move(r));
        }

        std::size_t n_exp = baseline.experiences.size();
        for (const auto& r : recs) n_exp = std::max(n_exp, r.experiences.size());

        std::ofstream out(out_path, std::ios::binary);
        if (!out) throw IoError("compare: cannot write '" + out_path + "'");
        out << "# " << stamp_header(h, "seeds=" + seed_csv) << '\n';
        out << "# baseline " << baseline_path << " strategy " << baseline.strategy << " seed "
            << baseline.seed << '\n';
        for (std::size_t k = 0; k < recs.size(); ++k)
            out << "# r" << k + 1 << " " << record_paths[k] << " strategy " << recs[k].strategy
                << " seed " << recs[k].seed << '\n';

        out << "row\tref_acc";
        for (std::size_t k = 1; k <= recs.size(); ++k)
            out << "\tr" << k << "_acc\tr" << k << "_1ep\tr" << k << "_forgetting";
        out << '\n';

        char buf[64];
        auto cell = [&](double v) {
            std::snprintf(buf, sizeof(buf), "\t%.6f", v);
            out << buf;
        };
        // Row 0 is the base checkpoint; rows 1..n are experiences. The
        // reference falls back to the baseline's base accuracy when the
        // baseline record has no matching experience.
        for (std::size_t row = 0; row <= n_exp; ++row) {
            const double ref = row == 0 ? baseline.fc_baseline.acc
                               : row <= baseline.experiences.size()
                                   ? baseline.experiences[row - 1].fc.acc
                                   : baseline.fc_baseline.acc;
            out << (row == 0 ? std::string("base") : "e" + std::to_string(row));
            cell(ref);
            for (const auto& r : recs) {
                if (row == 0) {
                    cell(r.fc_baseline.acc);
                    cell(r.fc_baseline.one_epoch);
                    cell(ref - r.fc_baseline.acc);
                } else if (row <= r.experiences.size()) {
                    const auto& e = r.experiences[row - 1];
                    cell(e.fc.acc);
                    cell(e.fc.one_epoch);
                    cell(ref - e.fc.acc);
                } else {
                    out << "\t-\t-\t-";
                }
            }
            out << '\n';
        }
        return 0;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}

int cmd_cka(const std::string& ckpt_a, const std::string& ckpt_b, const std::string& probe_tag,
            const std::string& config_path, const CkaConfig& cfg, const std::string& out_path) {
    try {
        const Checkpoint a = load_checkpoint(ckpt_a);
        const Checkpoint b = load_checkpoint(ckpt_b);

        StreamConfig stream;
        if (!config_path.empty()) {
            stream = stream_of_json(read_json(config_path));
        } else if (a.extra.contains("run_config")) {
            stream = RunConfig::from_json(a.extra["run_config"]).stream;
        } else {
            throw SpecError(
                "cka: checkpoint has no embedded run config; pass an explicit config file");
        }
        const StreamBundle bundle = gen_bundle(stream);
        const Dataset* probe = find_dataset(bundle, probe_tag);
        if (probe == nullptr) throw DataError("cka: unknown dataset tag '" + probe_tag + "'");

        std::optional<Vocab> va, vb;
        if (a.extra.contains("vocab")) va = Vocab::from_json(a.extra["vocab"]);
        if (b.extra.contains("vocab")) vb = Vocab::from_json(b.extra["vocab"]);
        if (a.model.spec.family == Family::kTransformer && !va)
            throw SpecError("cka: '" + ckpt_a + "' lacks a stored vocabulary");
        if (b.model.spec.family == Family::kTransformer && !vb)
            throw SpecError("cka: '" + ckpt_b + "' lacks a stored vocabulary");

        const CkaMatrix mat = layer_cka(a.model, b.model, *probe, va ? &*va : nullptr,
                                        vb ? &*vb : nullptr, cfg);
        mat.save_tsv(out_path);
        const std::string body = read_file(out_path);
        const std::uint64_t h = hash_combine(file_fnv(ckpt_a), file_fnv(ckpt_b));
        std::ofstream out(out_path, std::ios::binary);
        if (!out) throw IoError("cka: cannot write '" + out_path + "'");
        out << "# " << stamp_header(h, "seed=" + std::to_string(cfg.seed)) << '\n' << body;
        return 0;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}

int cmd_dump_data(const std::string& config_path, const std::string& tag,
                  const std::string& out_path) {
    try {
        const StreamConfig stream = stream_of_json(read_json(config_path));
        const StreamBundle bundle = gen_bundle(stream);
        const Dataset* ds = find_dataset(bundle, tag);
        if (ds == nullptr) throw DataError("dump-data: unknown dataset tag '" + tag + "'");
        const std::uint64_t h = file_fnv(config_path);
        if (stream.modality == Modality::kText) {
            export_text(*ds, out_path, stamp_header(h, "seed=" + std::to_string(stream.seed)));
        } else {
            nlohmann::json extra;
            extra["manifest_hash"] = to_hex(h);
            extra["seed"] = stream.seed;
            export_images(*ds, out_path, extra);
        }
        return 0;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}

int cmd_explain_config(const std::string& config_path, std::ostream& out) {
    try {
        const nlohmann::json j = read_json(config_path);
        nlohmann::json expanded;
        if (j.is_object() && j.contains("run"))
            expanded = ExperimentManifest::from_json(j).to_json();
        else if (j.is_object() && j.contains("stream"))
            expanded = RunConfig::from_json(j).to_json();
        else
            expanded = StreamConfig::from_json(j).to_json();
        out << expanded.dump(2) << '\n';
        return 0;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}

}  // namespace cptlab
