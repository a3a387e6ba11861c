// SPDX-License-Identifier: Apache-2.0
// Linear-kernel centered kernel alignment between checkpoints, computed with
// the unbiased HSIC estimator over shuffled minibatches. All gram and HSIC
// math runs in 64-bit; the estimator subtracts large near-equal terms.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cptlab/model.hpp"
#include "cptlab/rng.hpp"
#include "cptlab/streams.hpp"
#include "cptlab/tokenizer.hpp"
#include "cptlab/training.hpp"

namespace cptlab {

// Minimal row-major double matrix; analysis never mixes with the f32 tape.
struct DMat {
    std::int64_t rows = 0, cols = 0;
    std::vector<double> v;
    DMat() = default;
    DMat(std::int64_t r, std::int64_t c) : rows(r), cols(c), v(static_cast<std::size_t>(r * c)) {}
    double& at(std::int64_t r, std::int64_t c) { return v[static_cast<std::size_t>(r * cols + c)]; }
    double at(std::int64_t r, std::int64_t c) const {
        return v[static_cast<std::size_t>(r * cols + c)];
    }
};

// Pooled activations of every tap on a fixed probe set; all taps share the
// probe's row order, which is what aligns two dumps sample by sample.
struct ActivationDump {
    std::string checkpoint_id;  // hex body hash
    std::uint64_t probe_id = 0; // content hash of the probe dataset
    std::vector<std::string> tap_names;
    std::vector<DMat> taps;  // one [n x d] matrix per tap
};

ActivationDump dump_activations(const Model& model, const Dataset& probe, const Vocab* vocab,
                                int batch_size, AccessLog* log, const std::string& phase);
// Container round-trip; activations are f32 at the source, so storing f32
// loses nothing.
void save_dump(const ActivationDump& dump, const std::string& path);
ActivationDump load_dump(const std::string& path);

struct CkaMatrix {
    std::vector<std::string> row_taps, col_taps;
    DMat values;
    std::string estimator;  // "unbiased-minibatch" or "unbiased-full"
    void save_tsv(const std::string& path) const;  // tap-name headers, plot-ready
};

struct CkaConfig {
    int batch_size = 16;
    int passes = 10;
    std::uint64_t seed = 0;
    bool full_batch = false;  // oracle path: one batch of all rows
};

// K = X * X^T.
DMat gram_linear(const DMat& x);

// Unbiased HSIC over gram matrices with zeroed diagonals:
//   ( tr(K~L~) + (1'K~1)(1'L~1)/((n-1)(n-2)) - (2/(n-2)) 1'K~L~1 ) / (n(n-3)).
// Inputs must be symmetric grams; the reduction is term-symmetric in (K,L).
double hsic_unbiased(const DMat& k, const DMat& l);

// Full-batch unbiased CKA of two activation matrices.
double cka_full(const DMat& x, const DMat& y);

// Mean minibatch HSIC numerator over `passes` shuffled passes divided by the
// geometric mean of the accumulated self-HSIC terms. Chunks smaller than 4
// rows at a pass's tail are dropped.
double cka_minibatch(const DMat& x, const DMat& y, int batch_size, int passes, Rng& rng);

// All tap pairs of two aligned dumps. Per-cell rng is derived from the tap
// names, so cells are order-independent.
CkaMatrix cka_matrix(const ActivationDump& a, const ActivationDump& b, const CkaConfig& cfg);

// Dump + matrix in one step; the probe must hold at least one full batch.
// Vocabularies are per side because checkpoints may differ in expansion
// state; rows stay aligned because both sides read the same probe order.
CkaMatrix layer_cka(const Model& a, const Model& b, const Dataset& probe, const Vocab* vocab_a,
                    const Vocab* vocab_b, const CkaConfig& cfg, AccessLog* log = nullptr);

}  // namespace cptlab
