// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cptlab/model.hpp"
#include "cptlab/ops.hpp"
#include "cptlab/rng.hpp"
#include "cptlab/tensor.hpp"

namespace cptlab {

enum class Objective { kMlm, kMim, kClf };

std::string objective_name(Objective o);
Objective objective_from_name(const std::string& s);

// Shared corruption plan for the masked objectives. The split decides what a
// selected position becomes: the mask symbol (mask token / zeroed patch), a
// random symbol (random non-special token / random code vector), or left as
// is. Targets always hold the original identity at selected positions.
struct MaskingPlan {
    float mask_prob = 0.15f;
    float frac_mask = 0.8f;
    float frac_random = 0.1f;
    float frac_keep = 0.1f;

    void validate() const;

    static MaskingPlan mlm_default() { return {0.15f, 0.8f, 0.1f, 0.1f}; }
    static MaskingPlan mim_default() { return {0.4f, 1.0f, 0.0f, 0.0f}; }
};

// Frozen k-means codebook over flattened image patches; the discrete target
// space for masked image modeling.
struct VisualCodebook {
    int patch_extent = 16;
    int channels = 1;
    Tensor codes;  // [codebook_size, channels * patch_extent^2]
    bool frozen = false;

    int size() const { return codes.defined() ? static_cast<int>(codes.shape()[0]) : 0; }
    std::uint64_t content_hash() const;
    int nearest(const float* patch) const;  // lowest index wins ties

    void save(const std::string& path) const;
    static VisualCodebook load(const std::string& path);
};

// [B*P, D] patch matrix, batch-major then site-major (row-major grid walk).
Tensor extract_patches(const Tensor& images, int patch_extent);

// k-means++ seeding then exactly 20 Lloyd iterations, all in 64-bit.
// Throws DataError when the patch set has fewer distinct rows than codes.
VisualCodebook fit_codebook(const Tensor& patches, int codebook_size, int patch_extent,
                            int channels, std::uint64_t seed);

struct CorruptedTokens {
    IntMatrix tokens;                   // corrupted copy
    std::vector<std::int32_t> targets;  // length rows*cols, kIgnoreTarget where unselected
    bool any_selected = false;
};

struct CorruptedImages {
    Tensor images;                      // corrupted copy
    std::vector<std::int32_t> targets;  // length B*P, patch order of extract_patches
    bool any_selected = false;
};

// Special ids (0..3) are never selected. Selection is i.i.d. per position.
CorruptedTokens mlm_corrupt(const IntMatrix& batch, const MaskingPlan& plan,
                            std::int32_t vocab_size, Rng& rng);

// Targets are nearest-code indices of the original patches.
CorruptedImages mim_corrupt(const Tensor& images, const VisualCodebook& codebook,
                            const MaskingPlan& plan, Rng& rng);

// One prepared training batch; exactly one input side is populated.
struct PreparedBatch {
    IntMatrix tokens;                   // text when rows > 0
    Tensor images;                      // image when defined
    std::vector<std::int32_t> targets;  // mlm: B*T, mim: B*P, clf: B
};

// Cross-entropy against the prepared targets. The model's head must match
// the objective kind.
Tensor objective_loss(Objective kind, const Model& model, const PreparedBatch& batch);

}  // namespace cptlab
