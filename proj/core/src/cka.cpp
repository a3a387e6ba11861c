// SPDX-License-Identifier: Apache-2.0
#include "cptlab/cka.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "cptlab/common.hpp"

namespace cptlab {
namespace {

constexpr double kEps = 1e-6;

DMat gather_rows(const DMat& x, const std::vector<std::int64_t>& idx) {
    DMat out(static_cast<std::int64_t>(idx.size()), x.cols);
    for (std::size_t r = 0; r < idx.size(); ++r)
        std::copy_n(x.v.begin() + idx[r] * x.cols, x.cols,
                    out.v.begin() + static_cast<std::int64_t>(r) * x.cols);
    return out;
}

double finish_cka(double num, double da, double db) {
    if (da <= 0.0 || db <= 0.0)
        throw DegenerateBatchError("cka: non-positive self-similarity, activations degenerate");
    const double raw = num / std::sqrt(da * db);
    if (!std::isfinite(raw) || raw < -0.5 || raw > 1.5)
        throw ContractError("cka: estimator out of range");
    return std::clamp(raw, -kEps, 1.0 + kEps);
}

}  // namespace

DMat gram_linear(const DMat& x) {
    if (x.rows < 2) throw ContractError("gram_linear: need at least 2 rows");
    DMat k(x.rows, x.rows);
    for (std::int64_t i = 0; i < x.rows; ++i)
        for (std::int64_t j = i; j < x.rows; ++j) {
            double acc = 0.0;
            const double* a = x.v.data() + i * x.cols;
            const double* b = x.v.data() + j * x.cols;
            for (std::int64_t c = 0; c < x.cols; ++c) acc += a[c] * b[c];
            k.at(i, j) = acc;
            k.at(j, i) = acc;
        }
    return k;
}

double hsic_unbiased(const DMat& k, const DMat& l) {
    if (k.rows != k.cols || l.rows != l.cols || k.rows != l.rows)
        throw ShapeError("hsic_unbiased: gram matrices must be square and equal-sized");
    const std::int64_t n = k.rows;
    if (n < 4) throw ContractError("hsic_unbiased: estimator needs n >= 4");

    double tr = 0.0, sum_k = 0.0, sum_l = 0.0;
    std::vector<double> rs_k(static_cast<std::size_t>(n), 0.0), rs_l(static_cast<std::size_t>(n), 0.0);
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < n; ++j) {
            if (i == j) continue;  // zeroed diagonals
            const double kv = k.at(i, j), lv = l.at(i, j);
            tr += kv * lv;
            sum_k += kv;
            sum_l += lv;
            rs_k[static_cast<std::size_t>(i)] += kv;
            rs_l[static_cast<std::size_t>(i)] += lv;
        }
    // 1'K~L~1 for symmetric grams via row sums; per-term products commute,
    // so the value is exactly symmetric in (K, L).
    double cross = 0.0;
    for (std::int64_t i = 0; i < n; ++i)
        cross += rs_k[static_cast<std::size_t>(i)] * rs_l[static_cast<std::size_t>(i)];
    const double nd = static_cast<double>(n);
    return (tr + sum_k * sum_l / ((nd - 1.0) * (nd - 2.0)) - 2.0 * cross / (nd - 2.0)) /
           (nd * (nd - 3.0));
}

double cka_full(const DMat& x, const DMat& y) {
    if (x.rows != y.rows) throw ContractError("cka_full: row counts differ");
    const DMat k = gram_linear(x), l = gram_linear(y);
    return finish_cka(hsic_unbiased(k, l), hsic_unbiased(k, k), hsic_unbiased(l, l));
}

double cka_minibatch(const DMat& x, const DMat& y, int batch_size, int passes, Rng& rng) {
    if (x.rows != y.rows) throw ContractError("cka_minibatch: row counts differ");
    if (batch_size < 4) throw ContractError("cka_minibatch: batch size must be >= 4");
    if (passes < 1) throw ContractError("cka_minibatch: need at least one pass");
    const std::int64_t n = x.rows;
    if (n < 4) throw ContractError("cka_minibatch: need at least 4 rows");

    double num = 0.0, da = 0.0, db = 0.0;
    std::int64_t count = 0;
    for (int p = 0; p < passes; ++p) {
        const auto perm = rng.permutation(n);
        for (std::int64_t start = 0; start < n; start += batch_size) {
            const std::int64_t stop = std::min(n, start + batch_size);
            if (stop - start < 4) break;  // tail too small for the estimator
            const std::vector<std::int64_t> idx(perm.begin() + start, perm.begin() + stop);
            const DMat k = gram_linear(gather_rows(x, idx));
            const DMat l = gram_linear(gather_rows(y, idx));
            num += hsic_unbiased(k, l);
            da += hsic_unbiased(k, k);
            db += hsic_unbiased(l, l);
            ++count;
        }
    }
    const double c = static_cast<double>(count);
    return finish_cka(num / c, da / c, db / c);
}

ActivationDump dump_activations(const Model& model, const Dataset& probe, const Vocab* vocab,
                                int batch_size, AccessLog* log, const std::string& phase) {
    if (probe.size() == 0) throw DataError("dump_activations: empty probe set");
    const bool text = probe.modality == Modality::kText;
    IntMatrix tokens{0, 0};
    if (text) {
        if (!vocab) throw ContractError("dump_activations: text probe requires a vocabulary");
        tokens = tokenize_dataset(probe, *vocab, model.spec.max_sequence);
    }
    if (log) log->record(phase, probe.tag, probe.size());

    ActivationDump dump;
    dump.checkpoint_id = to_hex(model.body_hash());
    dump.probe_id = probe.content_hash();
    dump.tap_names = model.tap_names();
    const std::int64_t n = probe.size();
    std::int64_t done = 0;
    while (done < n) {
        const std::int64_t b = std::min<std::int64_t>(batch_size, n - done);
        ForwardOut fwd;
        if (text) {
            IntMatrix part(b, tokens.cols);
            std::copy_n(tokens.v.begin() + done * tokens.cols, b * tokens.cols, part.v.begin());
            fwd = model.forward_tokens(part, false, true);
        } else {
            Shape sh = probe.images.shape();
            const std::int64_t px = probe.images.numel() / sh[0];
            sh[0] = b;
            Tensor part = Tensor::zeros(sh);
            std::memcpy(part.data(), probe.images.data() + done * px,
                        static_cast<std::size_t>(b * px) * sizeof(float));
            fwd = model.forward_images(part, false, true);
        }
        if (dump.taps.empty())
            for (const auto& [name, t] : fwd.taps) dump.taps.emplace_back(n, t.shape()[1]);
        for (std::size_t ti = 0; ti < fwd.taps.size(); ++ti) {
            const Tensor& t = fwd.taps[ti].second;
            DMat& m = dump.taps[ti];
            for (std::int64_t r = 0; r < b; ++r)
                for (std::int64_t c = 0; c < m.cols; ++c)
                    m.at(done + r, c) = static_cast<double>(t.data()[r * m.cols + c]);
        }
        done += b;
    }
    return dump;
}

void save_dump(const ActivationDump& dump, const std::string& path) {
    nlohmann::json meta;
    meta["kind"] = "activation_dump";
    meta["checkpoint_id"] = dump.checkpoint_id;
    meta["probe_id"] = dump.probe_id;
    meta["tap_names"] = dump.tap_names;
    std::vector<NamedTensor> tensors;
    for (std::size_t i = 0; i < dump.taps.size(); ++i) {
        const DMat& m = dump.taps[i];
        Tensor t = Tensor::zeros({m.rows, m.cols});
        for (std::int64_t j = 0; j < m.rows * m.cols; ++j)
            t.data()[j] = static_cast<float>(m.v[static_cast<std::size_t>(j)]);
        tensors.push_back({dump.tap_names[i], t});
    }
    save_container(path, meta, tensors);
}

ActivationDump load_dump(const std::string& path) {
    auto [meta, tensors] = load_container(path);
    if (meta.value("kind", "") != "activation_dump")
        throw IoError("not an activation dump: " + path);
    ActivationDump dump;
    dump.checkpoint_id = meta.at("checkpoint_id").get<std::string>();
    dump.probe_id = meta.at("probe_id").get<std::uint64_t>();
    dump.tap_names = meta.at("tap_names").get<std::vector<std::string>>();
    for (const auto& nt : tensors) {
        DMat m(nt.t.shape()[0], nt.t.shape()[1]);
        for (std::int64_t j = 0; j < m.rows * m.cols; ++j)
            m.v[static_cast<std::size_t>(j)] = static_cast<double>(nt.t.data()[j]);
        dump.taps.push_back(std::move(m));
    }
    return dump;
}

void CkaMatrix::save_tsv(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    f << "tap";
    for (const auto& c : col_taps) f << '\t' << c;
    f << '\n';
    char buf[40];
    for (std::size_t r = 0; r < row_taps.size(); ++r) {
        f << row_taps[r];
        for (std::size_t c = 0; c < col_taps.size(); ++c) {
            std::snprintf(buf, sizeof(buf), "%.17g",
                          values.at(static_cast<std::int64_t>(r), static_cast<std::int64_t>(c)));
            f << '\t' << buf;
        }
        f << '\n';
    }
    if (!f) throw IoError("failed writing " + path);
}

CkaMatrix cka_matrix(const ActivationDump& a, const ActivationDump& b, const CkaConfig& cfg) {
    if (a.probe_id != b.probe_id)
        throw ContractError("cka_matrix: dumps come from different probe sets");
    CkaMatrix m;
    m.row_taps = a.tap_names;
    m.col_taps = b.tap_names;
    m.estimator = cfg.full_batch ? "unbiased-full" : "unbiased-minibatch";
    m.values = DMat(static_cast<std::int64_t>(a.taps.size()),
                    static_cast<std::int64_t>(b.taps.size()));
    for (std::size_t r = 0; r < a.taps.size(); ++r)
        for (std::size_t c = 0; c < b.taps.size(); ++c) {
            double v;
            if (cfg.full_batch) {
                v = cka_full(a.taps[r], b.taps[c]);
            } else {
                Rng rng = Rng(cfg.seed).derive("cell").derive(a.tap_names[r]).derive(
                    b.tap_names[c]);
                v = cka_minibatch(a.taps[r], b.taps[c], cfg.batch_size, cfg.passes, rng);
            }
            m.values.at(static_cast<std::int64_t>(r), static_cast<std::int64_t>(c)) = v;
        }
    return m;
}

CkaMatrix layer_cka(const Model& a, const Model& b, const Dataset& probe, const Vocab* vocab_a,
                    const Vocab* vocab_b, const CkaConfig& cfg, AccessLog* log) {
    if (!cfg.full_batch && probe.size() < cfg.batch_size)
        throw DataError("layer_cka: probe set smaller than one batch");
    ActivationDump da = dump_activations(a, probe, vocab_a, 64, log, "cka.dump");
    ActivationDump db = dump_activations(b, probe, vocab_b, 64, log, "cka.dump");
    return cka_matrix(da, db, cfg);
}

}  // namespace cptlab
