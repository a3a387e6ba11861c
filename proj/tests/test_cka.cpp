// SPDX-License-Identifier: Apache-2.0
// CKA suite: gram and unbiased-HSIC values against long-double oracles,
// linear-CKA invariances, minibatch-vs-full agreement, and the dump/matrix
// plumbing between checkpoints.
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "cptlab/cka.hpp"
#include "cptlab/common.hpp"
#include "cptlab/model.hpp"
#include "cptlab/rng.hpp"
#include "cptlab/streams.hpp"
#include "cptlab/tokenizer.hpp"

using cptlab::CkaConfig;
using cptlab::DMat;

namespace {

DMat rand_mat(std::int64_t n, std::int64_t d, std::uint64_t seed) {
    cptlab::Rng rng(seed);
    DMat m(n, d);
    for (auto& v : m.v) v = 2.0 * rng.next_double() - 1.0;
    return m;
}

// Long-double gram oracle, independent reduction order (column-major inner).
DMat gram_oracle(const DMat& x) {
    DMat k(x.rows, x.rows);
    for (std::int64_t i = 0; i < x.rows; ++i)
        for (std::int64_t j = 0; j < x.rows; ++j) {
            long double s = 0.0L;
            for (std::int64_t c = x.cols - 1; c >= 0; --c)
                s += static_cast<long double>(x.at(i, c)) * static_cast<long double>(x.at(j, c));
            k.at(i, j) = static_cast<double>(s);
        }
    return k;
}

// Long-double unbiased HSIC, written directly from the estimator definition:
// zero the diagonals, then (tr(KL) + sumK sumL/((n-1)(n-2)) - 2/(n-2) rowK.rowL)
// / (n(n-3)).
long double hsic_oracle(const DMat& k, const DMat& l) {
    const std::int64_t n = k.rows;
    std::vector<long double> kr(static_cast<std::size_t>(n), 0.0L);
    std::vector<long double> lr(static_cast<std::size_t>(n), 0.0L);
    long double tr = 0.0L, sk = 0.0L, sl = 0.0L;
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < n; ++j) {
            const long double kv = i == j ? 0.0L : static_cast<long double>(k.at(i, j));
            const long double lv = i == j ? 0.0L : static_cast<long double>(l.at(i, j));
            tr += kv * lv;
            kr[static_cast<std::size_t>(i)] += kv;
            lr[static_cast<std::size_t>(i)] += lv;
            sk += kv;
            sl += lv;
        }
    long double cross = 0.0L;
    for (std::int64_t i = 0; i < n; ++i)
        cross += kr[static_cast<std::size_t>(i)] * lr[static_cast<std::size_t>(i)];
    const long double nn = static_cast<long double>(n);
    return (tr + sk * sl / ((nn - 1.0L) * (nn - 2.0L)) - 2.0L / (nn - 2.0L) * cross) /
           (nn * (nn - 3.0L));
}

// Orthogonal d x d matrix by Gram-Schmidt with one reorthogonalization pass.
DMat orthogonal(std::int64_t d, std::uint64_t seed) {
    DMat q = rand_mat(d, d, seed);
    for (std::int64_t c = 0; c < d; ++c) {
        for (int pass = 0; pass < 2; ++pass)
            for (std::int64_t p = 0; p < c; ++p) {
                double dot = 0.0;
                for (std::int64_t r = 0; r < d; ++r) dot += q.at(r, c) * q.at(r, p);
                for (std::int64_t r = 0; r < d; ++r) q.at(r, c) -= dot * q.at(r, p);
            }
        double norm = 0.0;
        for (std::int64_t r = 0; r < d; ++r) norm += q.at(r, c) * q.at(r, c);
        norm = std::sqrt(norm);
        for (std::int64_t r = 0; r < d; ++r) q.at(r, c) /= norm;
    }
    return q;
}

DMat matmul(const DMat& a, const DMat& b) {
    DMat out(a.rows, b.cols);
    for (std::int64_t i = 0; i < a.rows; ++i)
        for (std::int64_t j = 0; j < b.cols; ++j) {
            double s = 0.0;
            for (std::int64_t c = 0; c < a.cols; ++c) s += a.at(i, c) * b.at(c, j);
            out.at(i, j) = s;
        }
    return out;
}

DMat scaled(DMat m, double c) {
    for (auto& v : m.v) v *= c;
    return m;
}

cptlab::ModelSpec tiny_transformer_spec(int depth) {
    cptlab::ModelSpec spec;
    spec.family = cptlab::Family::kTransformer;
    spec.depth = depth;
    spec.width = 16;
    spec.heads = 2;
    spec.vocab_size = 64;
    spec.max_sequence = 8;
    return spec;
}

}  // namespace

TEST_CASE("gram_linear identity, rank-1, and long-double oracle") {
    DMat eye(3, 3);
    for (int i = 0; i < 3; ++i) eye.at(i, i) = 1.0;
    const DMat k = cptlab::gram_linear(eye);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) CHECK(k.at(i, j) == (i == j ? 1.0 : 0.0));

    const DMat col = rand_mat(5, 1, 21);
    const DMat k1 = cptlab::gram_linear(col);
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 5; ++j) CHECK(k1.at(i, j) == col.at(i, 0) * col.at(j, 0));

    const DMat x = rand_mat(6, 3, 22);
    const DMat got = cptlab::gram_linear(x);
    const DMat want = gram_oracle(x);
    for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 6; ++j) {
            const double rel = std::abs(got.at(i, j) - want.at(i, j)) /
                               std::max(1e-30, std::abs(want.at(i, j)));
            CHECK(rel < 1e-12);
        }

    DMat one_row(1, 4);
    CHECK_THROWS_AS(cptlab::gram_linear(one_row), cptlab::ContractError);
}

TEST_CASE("hsic_unbiased matches long-double oracle and is symmetric") {
    const DMat zero(6, 6);
    CHECK(cptlab::hsic_unbiased(zero, zero) == 0.0);

    const DMat k = cptlab::gram_linear(rand_mat(8, 5, 31));
    const DMat l = cptlab::gram_linear(rand_mat(8, 4, 32));
    const double got = cptlab::hsic_unbiased(k, l);
    const long double want = hsic_oracle(k, l);
    CHECK(std::isfinite(got));
    const double rel =
        std::abs(got - static_cast<double>(want)) / std::max(1e-30, std::abs(static_cast<double>(want)));
    INFO("hsic ", got, " oracle ", static_cast<double>(want));
    CHECK(rel < 1e-10);

    // Term-symmetric reduction makes the swap bitwise identical.
    CHECK(cptlab::hsic_unbiased(k, l) == cptlab::hsic_unbiased(l, k));

    const DMat small = cptlab::gram_linear(rand_mat(3, 2, 33));
    CHECK_THROWS_AS(cptlab::hsic_unbiased(small, small), cptlab::ContractError);
    DMat rect(6, 5);
    CHECK_THROWS_AS(cptlab::hsic_unbiased(rect, rect), cptlab::ShapeError);
    const DMat other = cptlab::gram_linear(rand_mat(6, 2, 34));
    CHECK_THROWS_AS(cptlab::hsic_unbiased(k, other), cptlab::ShapeError);
}

TEST_CASE("cka of a matrix with itself is 1") {
    const DMat x = rand_mat(32, 10, 41);
    CHECK(cptlab::cka_full(x, x) == doctest::Approx(1.0).epsilon(1e-6));
    cptlab::Rng rng(42);
    CHECK(cptlab::cka_minibatch(x, x, 8, 3, rng) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("linear CKA is invariant to orthogonal maps and positive scaling") {
    const DMat x = rand_mat(24, 6, 51);
    const DMat q = orthogonal(6, 52);
    // Sanity: q' q = I to near machine precision.
    const DMat qtq = gram_oracle(q);
    for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 6; ++j)
            REQUIRE(std::abs(qtq.at(i, j) - (i == j ? 1.0 : 0.0)) < 1e-12);

    const DMat xq = matmul(x, q);
    const DMat xs = scaled(x, 3.7);
    CHECK(cptlab::cka_full(x, xq) == doctest::Approx(1.0).epsilon(1e-5));
    CHECK(cptlab::cka_full(x, xs) == doctest::Approx(1.0).epsilon(1e-5));
    cptlab::Rng r1(53), r2(54);
    CHECK(cptlab::cka_minibatch(x, xq, 8, 5, r1) == doctest::Approx(1.0).epsilon(1e-5));
    CHECK(cptlab::cka_minibatch(x, xs, 8, 5, r2) == doctest::Approx(1.0).epsilon(1e-5));
}

TEST_CASE("minibatch estimator tracks the full-batch value") {
    const DMat x = rand_mat(64, 10, 61);
    DMat y = rand_mat(64, 10, 62);
    // Correlate y with x so the target CKA sits mid-range instead of near 0.
    for (std::int64_t i = 0; i < y.rows; ++i)
        for (std::int64_t j = 0; j < y.cols; ++j) y.at(i, j) = 0.6 * x.at(i, j) + 0.8 * y.at(i, j);

    const double full = cptlab::cka_full(x, y);
    CHECK(full > 0.05);
    CHECK(full <= 1.0 + 1e-6);

    cptlab::Rng r1(63);
    const double mb = cptlab::cka_minibatch(x, y, 16, 10, r1);
    INFO("full ", full, " minibatch ", mb);
    CHECK(std::abs(mb - full) < 0.01);

    // More passes bring the estimate closer on this fixed data.
    cptlab::Rng ra(64), rb(64), rc(64);
    const double d1 = std::abs(cptlab::cka_minibatch(x, y, 16, 1, ra) - full);
    const double d5 = std::abs(cptlab::cka_minibatch(x, y, 16, 5, rb) - full);
    const double d20 = std::abs(cptlab::cka_minibatch(x, y, 16, 20, rc) - full);
    INFO("diffs p1 ", d1, " p5 ", d5, " p20 ", d20);
    CHECK(d5 <= d1 + 5e-3);
    CHECK(d20 <= d5 + 5e-3);
    CHECK(d20 < 0.01);

    // Tail chunks shorter than 4 rows are dropped, not folded in.
    const DMat x18 = rand_mat(18, 5, 65);
    const DMat y18 = rand_mat(18, 5, 66);
    cptlab::Rng rt(67);
    CHECK(std::isfinite(cptlab::cka_minibatch(x18, y18, 16, 2, rt)));

    cptlab::Rng re(68);
    CHECK_THROWS_AS(cptlab::cka_minibatch(x, y, 3, 1, re), cptlab::ContractError);
    cptlab::Rng rf(69);
    CHECK_THROWS_AS(cptlab::cka_minibatch(x, y, 16, 0, rf), cptlab::ContractError);
    const DMat y3 = rand_mat(3, 10, 70);
    cptlab::Rng rg(71);
    CHECK_THROWS_AS(cptlab::cka_minibatch(y3, y3, 4, 1, rg), cptlab::ContractError);
    cptlab::Rng rh(72);
    CHECK_THROWS_AS(cptlab::cka_minibatch(x, y3, 4, 1, rh), cptlab::ContractError);
}

TEST_CASE("degenerate constant activations are rejected") {
    DMat flat(16, 4);
    for (auto& v : flat.v) v = 0.25;
    const DMat y = rand_mat(16, 4, 81);
    CHECK_THROWS_AS(cptlab::cka_full(flat, y), cptlab::DegenerateBatchError);
}

TEST_CASE("activation dumps and the matrix over tap pairs") {
    const auto spec = tiny_transformer_spec(2);
    cptlab::Model m = cptlab::Model::build(spec, 301);
    m.replace_head(cptlab::HeadKind::kClf, 4, 302);

    cptlab::StreamConfig cfg;
    cfg.n_experiences = 1;
    cfg.pretrain_per_experience = 4;
    cfg.ds_train_per_experience = 4;
    cfg.ds_test_per_experience = 4;
    cfg.fc_train = 8;
    cfg.fc_test = 24;
    cfg.base_size = 40;
    cfg.seed = 5;
    const auto bundle = cptlab::gen_text_stream(cfg);
    const cptlab::Vocab vocab = cptlab::train_vocab(bundle.base.texts, spec.vocab_size);
    const cptlab::Dataset& probe = bundle.fc.test;

    const auto dump = cptlab::dump_activations(m, probe, &vocab, 8, nullptr, "probe");
    CHECK(dump.tap_names == m.tap_names());
    REQUIRE(dump.taps.size() == 3);  // embed + 2 blocks
    for (const auto& t : dump.taps) {
        CHECK(t.rows == probe.size());
        CHECK(t.cols == spec.width);
    }
    CHECK(dump.probe_id == probe.content_hash());

    // Round-trip through the container keeps everything.
    const std::string dpath = "cka_dump_test.bin";
    cptlab::save_dump(dump, dpath);
    const auto loaded = cptlab::load_dump(dpath);
    std::remove(dpath.c_str());
    CHECK(loaded.checkpoint_id == dump.checkpoint_id);
    CHECK(loaded.probe_id == dump.probe_id);
    CHECK(loaded.tap_names == dump.tap_names);
    REQUIRE(loaded.taps.size() == dump.taps.size());
    for (std::size_t i = 0; i < dump.taps.size(); ++i) CHECK(loaded.taps[i].v == dump.taps[i].v);

    CkaConfig ccfg;
    ccfg.batch_size = 8;
    ccfg.passes = 4;
    ccfg.seed = 9;
    const cptlab::CkaMatrix self = cptlab::cka_matrix(dump, dump, ccfg);
    CHECK(self.estimator == "unbiased-minibatch");
    REQUIRE(self.values.rows == 3);
    REQUIRE(self.values.cols == 3);
    for (int i = 0; i < 3; ++i) {
        CHECK(self.values.at(i, i) == doctest::Approx(1.0).epsilon(1e-6));
        for (int j = 0; j < 3; ++j) {
            CHECK(self.values.at(i, j) >= -1e-6);
            CHECK(self.values.at(i, j) <= 1.0 + 1e-6);
        }
    }

    // Same seed, same matrix, bitwise.
    const cptlab::CkaMatrix again = cptlab::cka_matrix(dump, dump, ccfg);
    CHECK(again.values.v == self.values.v);

    // Permuting one side's taps permutes the matrix cells unchanged.
    cptlab::ActivationDump perm = dump;
    std::swap(perm.tap_names[0], perm.tap_names[2]);
    std::swap(perm.taps[0], perm.taps[2]);
    const cptlab::CkaMatrix pm = cptlab::cka_matrix(dump, perm, ccfg);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) CHECK(pm.values.at(i, j) == self.values.at(i, 2 - j));

    // Dumps over different probes never mix.
    cptlab::ActivationDump other = dump;
    other.probe_id ^= 1;
    CHECK_THROWS_AS(cptlab::cka_matrix(dump, other, ccfg), cptlab::ContractError);

    // Full-batch estimator path.
    CkaConfig full = ccfg;
    full.full_batch = true;
    const cptlab::CkaMatrix fm = cptlab::cka_matrix(dump, dump, full);
    CHECK(fm.estimator == "unbiased-full");
    for (int i = 0; i < 3; ++i) CHECK(fm.values.at(i, i) == doctest::Approx(1.0).epsilon(1e-6));

    // Rectangular matrix across checkpoints of different depth.
    cptlab::Model deeper = cptlab::Model::build(tiny_transformer_spec(3), 305);
    const cptlab::CkaMatrix rect =
        cptlab::layer_cka(m, deeper, probe, &vocab, &vocab, ccfg);
    REQUIRE(rect.values.rows == 3);
    REQUIRE(rect.values.cols == 4);
    CHECK(rect.row_taps == m.tap_names());
    CHECK(rect.col_taps == deeper.tap_names());
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 4; ++j) {
            CHECK(rect.values.at(i, j) >= -1e-6);
            CHECK(rect.values.at(i, j) <= 1.0 + 1e-6);
        }

    // Probe smaller than one batch cannot feed the estimator.
    const cptlab::Dataset tiny = probe.subset({0, 1, 2, 3});
    CHECK_THROWS_AS(cptlab::layer_cka(m, deeper, tiny, &vocab, &vocab, ccfg),
                    cptlab::DataError);
    CHECK_THROWS_AS(cptlab::dump_activations(m, probe, nullptr, 8, nullptr, "probe"),
                    cptlab::ContractError);

    // TSV emission: one header line plus one row per tap.
    const std::string tpath = "cka_matrix_test.tsv";
    self.save_tsv(tpath);
    std::ifstream f(tpath);
    REQUIRE(f.good());
    std::string line;
    std::getline(f, line);
    CHECK(line.find("block1") != std::string::npos);
    int rows = 0;
    while (std::getline(f, line))
        if (!line.empty()) ++rows;
    CHECK(rows == 3);
    std::remove(tpath.c_str());
}
