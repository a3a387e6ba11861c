// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <nlohmann/json.hpp>
#include <string>
#include <utility>
#include <vector>

#include "cptlab/ops.hpp"
#include "cptlab/tensor.hpp"

namespace cptlab {

enum class Family { kTransformer, kCnn };

std::string family_name(Family f);
Family family_from_name(const std::string& s);

// Parameter count closed forms (width W, depth D, vocab V, sequence T,
// input channels C, head arity k):
//   transformer body: V*W + T*W + D*(12*W^2 + 13*W) + 2*W
//     per block: two layer norms 4W, packed qkv 3W^2+3W, out proj W^2+W,
//     mlp 8W^2+5W; plus token and position tables and the final norm.
//   cnn body:         9*W*C + W + (D-1)*(9*W^2 + W)
//   heads: mlm (tied to the token table) V; clf/probe/mim W*k + k.
struct ModelSpec {
    Family family = Family::kTransformer;
    int depth = 4;
    int width = 64;
    int heads = 4;          // transformer only
    int vocab_size = 0;     // transformer: includes the 4 special ids
    int max_sequence = 32;  // transformer
    int channels = 1;       // cnn
    int image_size = 32;    // cnn, square inputs

    void validate() const;  // throws SpecError
    nlohmann::json to_json() const;
    static ModelSpec from_json(const nlohmann::json& j);
};

enum class HeadKind { kNone, kMlm, kMim, kClf, kProbe };

std::string head_name(HeadKind k);
HeadKind head_from_name(const std::string& s);

// kMlm ties its output projection to the token table; its only parameter is
// the per-vocab bias, and k mirrors vocab_size. kMim/kClf/kProbe carry a
// [width x k] linear map. kProbe reads the final tap (pre-final-norm pooled
// features) instead of the head representation.
struct Head {
    HeadKind kind = HeadKind::kNone;
    int k = 0;
};

struct NamedTensor {
    std::string name;
    Tensor t;
};

struct ForwardOut {
    Tensor logits;  // defined iff a head is attached and logits were requested
    // Pooled activations [batch x feature], detached from the tape, in tap
    // registry order. Empty unless requested.
    std::vector<std::pair<std::string, Tensor>> taps;
};

// A model is its spec, an ordered named-parameter list and an optional head.
// Head parameters are the ones whose names start with "head."; everything
// else is body. Parameter order is fixed by construction and is part of the
// checkpoint contract.
class Model {
public:
    ModelSpec spec;
    Head head;
    std::vector<NamedTensor> params;

    static Model build(const ModelSpec& spec, std::uint64_t seed);

    // Tap registry: transformer ["embed", "block0", ...]; cnn ["block0", ...].
    // Identical across checkpoints of one spec by construction.
    std::vector<std::string> tap_names() const;

    ForwardOut forward_tokens(const IntMatrix& tokens, bool want_logits = true,
                              bool want_taps = false) const;
    ForwardOut forward_images(const Tensor& images, bool want_logits = true,
                              bool want_taps = false) const;

    // Body parameters are untouched; the previous head is dropped. k is the
    // class count for clf/probe, the codebook size for mim, ignored for mlm.
    void replace_head(HeadKind kind, int k, std::uint64_t seed);

    // Grows the token table (and the tied mlm bias) by n_new rows. New rows
    // are the mean of the existing rows plus gaussian(sigma=0.02) noise.
    void expand_embeddings(int n_new, std::uint64_t seed);

    const Tensor& param(const std::string& name) const;
    bool has_param(const std::string& name) const;
    std::vector<Tensor> parameters() const;        // all, in order
    std::vector<Tensor> body_parameters() const;   // names not starting with "head."
    std::vector<Tensor> head_parameters() const;
    // What an optimizer should update: head-only for probe heads, everything
    // otherwise.
    std::vector<Tensor> trainable_parameters() const;

    std::uint64_t body_hash() const;
    std::int64_t param_numel() const;

    Model clone() const;  // deep copy, fresh buffers

private:
    ForwardOut run_transformer(const IntMatrix& tokens, bool want_logits, bool want_taps) const;
    ForwardOut run_cnn(const Tensor& images, bool want_logits, bool want_taps) const;
    void init_head_params(std::uint64_t seed);
};

// Closed-form parameter count for a spec + head; kept in lockstep with
// build() by an enumeration test.
std::int64_t param_count(const ModelSpec& spec, const Head& head);

// --- snapshot container -------------------------------------------------
// Layout: 8-byte magic, little-endian u64 manifest length, manifest JSON,
// then each tensor in the numeric snapshot format in manifest order.
// Round-trips bit-exactly.
constexpr char kContainerMagic[8] = {'C', 'P', 'T', 'C', '0', '0', '0', '1'};

void save_container(const std::string& path, const nlohmann::json& meta,
                    const std::vector<NamedTensor>& tensors);
std::pair<nlohmann::json, std::vector<NamedTensor>> load_container(const std::string& path);

// A checkpoint is a model plus provenance: which step of which run produced
// it and the body hash of its parent in the pre-training chain.
struct Checkpoint {
    Model model;
    std::string provenance;  // "init", "pr:e3", "ds:e2", "fc:e2", ...
    std::uint64_t parent_body_hash = 0;
    nlohmann::json extra;    // vocab for text models, run metadata
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace cptlab
