// SPDX-License-Identifier: Apache-2.0
#include "cptlab/objectives.hpp"

#include <cmath>
#include <cstring>
#include <unordered_set>

#include "cptlab/common.hpp"
#include "cptlab/tokenizer.hpp"

namespace cptlab {

std::string objective_name(Objective o) {
    switch (o) {
        case Objective::kMlm: return "mlm";
        case Objective::kMim: return "mim";
        case Objective::kClf: return "clf";
    }
    throw ContractError("unreachable objective");
}

Objective objective_from_name(const std::string& s) {
    if (s == "mlm") return Objective::kMlm;
    if (s == "mim") return Objective::kMim;
    if (s == "clf") return Objective::kClf;
    throw SpecError("unknown objective: " + s);
}

void MaskingPlan::validate() const {
    if (!(mask_prob > 0.0f && mask_prob <= 1.0f))
        throw ContractError("masking plan: mask_prob must be in (0,1]");
    if (frac_mask < 0.0f || frac_random < 0.0f || frac_keep < 0.0f)
        throw ContractError("masking plan: split fractions must be non-negative");
    // Tolerance sized for f32 fields: 0.8f + 0.1f + 0.1f lands ~1.5e-8 off.
    const double sum = static_cast<double>(frac_mask) + frac_random + frac_keep;
    if (std::abs(sum - 1.0) > 1e-6) throw ContractError("masking plan: split must sum to 1");
}

// --- codebook ---------------------------------------------------------------

std::uint64_t VisualCodebook::content_hash() const {
    std::uint64_t h = kFnvOffset;
    h = hash_combine(h, static_cast<std::uint64_t>(patch_extent));
    h = hash_combine(h, static_cast<std::uint64_t>(channels));
    h = hash_combine(h, static_cast<std::uint64_t>(size()));
    if (codes.defined())
        h = fnv1a(codes.data(), static_cast<std::size_t>(codes.numel()) * sizeof(float), h);
    return h;
}

int VisualCodebook::nearest(const float* patch) const {
    const std::int64_t k = codes.shape()[0], d = codes.shape()[1];
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::int64_t c = 0; c < k; ++c) {
        const float* row = codes.data() + c * d;
        double acc = 0.0;
        for (std::int64_t j = 0; j < d; ++j) {
            const double diff = static_cast<double>(patch[j]) - row[j];
            acc += diff * diff;
        }
        if (acc < best_d) {  // strict: lowest index wins ties
            best_d = acc;
            best = static_cast<int>(c);
        }
    }
    return best;
}

void VisualCodebook::save(const std::string& path) const {
    nlohmann::json meta;
    meta["kind"] = "codebook";
    meta["patch_extent"] = patch_extent;
    meta["channels"] = channels;
    meta["frozen"] = frozen;
    save_container(path, meta, {{"codes", codes}});
}

VisualCodebook VisualCodebook::load(const std::string& path) {
    auto [meta, tensors] = load_container(path);
    if (meta.value("kind", "") != "codebook") throw IoError("not a codebook: " + path);
    VisualCodebook cb;
    cb.patch_extent = meta.at("patch_extent").get<int>();
    cb.channels = meta.at("channels").get<int>();
    cb.frozen = meta.at("frozen").get<bool>();
    cb.codes = tensors.at(0).t;
    return cb;
}

Tensor extract_patches(const Tensor& images, int patch_extent) {
    if (images.rank() != 4) throw ShapeError("extract_patches: need [B,C,H,W]");
    const std::int64_t b = images.shape()[0], c = images.shape()[1];
    const std::int64_t h = images.shape()[2], w = images.shape()[3];
    if (patch_extent < 1 || h % patch_extent != 0 || w % patch_extent != 0)
        throw ContractError("extract_patches: image extents not divisible by patch extent");
    const std::int64_t gh = h / patch_extent, gw = w / patch_extent;
    const std::int64_t d = c * patch_extent * patch_extent;
    Tensor out = Tensor::zeros({b * gh * gw, d});
    for (std::int64_t bi = 0; bi < b; ++bi)
        for (std::int64_t gy = 0; gy < gh; ++gy)
            for (std::int64_t gx = 0; gx < gw; ++gx) {
                float* row = out.data() + ((bi * gh + gy) * gw + gx) * d;
                std::int64_t col = 0;
                for (std::int64_t ci = 0; ci < c; ++ci)
                    for (int py = 0; py < patch_extent; ++py)
                        for (int px = 0; px < patch_extent; ++px, ++col)
                            row[col] = images.data()[((bi * c + ci) * h + gy * patch_extent + py) *
                                                         w +
                                                     gx * patch_extent + px];
            }
    return out;
}

VisualCodebook fit_codebook(const Tensor& patches, int codebook_size, int patch_extent,
                            int channels, std::uint64_t seed) {
    if (patches.rank() != 2) throw ShapeError("fit_codebook: need [N,D] patches");
    const std::int64_t n = patches.shape()[0], d = patches.shape()[1];
    if (codebook_size < 1) throw ContractError("fit_codebook: need at least one code");
    if (d != static_cast<std::int64_t>(channels) * patch_extent * patch_extent)
        throw ShapeError("fit_codebook: patch width does not match extent/channels");

    // Distinct-row check; k-means over fewer distinct points than codes
    // cannot produce a meaningful codebook.
    std::unordered_set<std::uint64_t> distinct;
    for (std::int64_t i = 0; i < n && static_cast<int>(distinct.size()) < codebook_size; ++i)
        distinct.insert(fnv1a(patches.data() + i * d, static_cast<std::size_t>(d) * sizeof(float)));
    if (static_cast<int>(distinct.size()) < codebook_size)
        throw DataError("fit_codebook: fewer distinct patches than codes");

    Rng rng = Rng(seed).derive("codebook");
    const auto* x = patches.data();
    std::vector<double> centers(static_cast<std::size_t>(codebook_size) * d);
    auto dist2_to = [&](std::int64_t i, const double* ctr) {
        double acc = 0.0;
        for (std::int64_t j = 0; j < d; ++j) {
            const double diff = static_cast<double>(x[i * d + j]) - ctr[j];
            acc += diff * diff;
        }
        return acc;
    };

    // k-means++ seeding: first center uniform, the rest D^2-weighted.
    std::vector<double> mind(static_cast<std::size_t>(n), 0.0);
    {
        const std::int64_t first = static_cast<std::int64_t>(rng.next_below(
            static_cast<std::uint64_t>(n)));
        for (std::int64_t j = 0; j < d; ++j) centers[static_cast<std::size_t>(j)] = x[first * d + j];
        for (std::int64_t i = 0; i < n; ++i) mind[static_cast<std::size_t>(i)] = dist2_to(i, centers.data());
        for (int k = 1; k < codebook_size; ++k) {
            double total = 0.0;
            for (std::int64_t i = 0; i < n; ++i) total += mind[static_cast<std::size_t>(i)];
            const double pick = rng.next_double() * total;
            double cum = 0.0;
            std::int64_t chosen = n - 1;
            for (std::int64_t i = 0; i < n; ++i) {
                cum += mind[static_cast<std::size_t>(i)];
                if (pick < cum) {
                    chosen = i;
                    break;
                }
            }
            double* ctr = centers.data() + static_cast<std::size_t>(k) * d;
            for (std::int64_t j = 0; j < d; ++j) ctr[j] = x[chosen * d + j];
            for (std::int64_t i = 0; i < n; ++i) {
                const double dd = dist2_to(i, ctr);
                if (dd < mind[static_cast<std::size_t>(i)]) mind[static_cast<std::size_t>(i)] = dd;
            }
        }
    }

    // Exactly 20 Lloyd iterations; an emptied cluster keeps its center.
    std::vector<std::int32_t> assign(static_cast<std::size_t>(n));
    std::vector<double> sums(centers.size());
    std::vector<std::int64_t> counts(static_cast<std::size_t>(codebook_size));
    for (int it = 0; it < 20; ++it) {
        for (std::int64_t i = 0; i < n; ++i) {
            int best = 0;
            double best_d = std::numeric_limits<double>::infinity();
            for (int k = 0; k < codebook_size; ++k) {
                const double dd = dist2_to(i, centers.data() + static_cast<std::size_t>(k) * d);
                if (dd < best_d) {
                    best_d = dd;
                    best = k;
                }
            }
            assign[static_cast<std::size_t>(i)] = best;
        }
        std::fill(sums.begin(), sums.end(), 0.0);
        std::fill(counts.begin(), counts.end(), 0);
        for (std::int64_t i = 0; i < n; ++i) {
            const int k = assign[static_cast<std::size_t>(i)];
            ++counts[static_cast<std::size_t>(k)];
            double* s = sums.data() + static_cast<std::size_t>(k) * d;
            for (std::int64_t j = 0; j < d; ++j) s[j] += x[i * d + j];
        }
        for (int k = 0; k < codebook_size; ++k) {
            if (counts[static_cast<std::size_t>(k)] == 0) continue;
            double* ctr = centers.data() + static_cast<std::size_t>(k) * d;
            const double inv = 1.0 / static_cast<double>(counts[static_cast<std::size_t>(k)]);
            for (std::int64_t j = 0; j < d; ++j)
                ctr[j] = sums[static_cast<std::size_t>(k) * d + j] * inv;
        }
    }

    VisualCodebook cb;
    cb.patch_extent = patch_extent;
    cb.channels = channels;
    cb.codes = Tensor::zeros({codebook_size, d});
    for (std::size_t i = 0; i < centers.size(); ++i)
        cb.codes.data()[i] = static_cast<float>(centers[i]);
    cb.frozen = true;
    return cb;
}

// --- corruption ---------------------------------------------------------------

CorruptedTokens mlm_corrupt(const IntMatrix& batch, const MaskingPlan& plan,
                            std::int32_t vocab_size, Rng& rng) {
    plan.validate();
    if (vocab_size <= Vocab::kNumSpecials)
        throw ContractError("mlm_corrupt: vocab holds nothing but specials");
    for (std::int32_t id : batch.v)
        if (id < 0 || id >= vocab_size)
            throw ContractError("mlm_corrupt: token id " + std::to_string(id) +
                                " outside vocab of " + std::to_string(vocab_size));
    CorruptedTokens out;
    out.tokens = batch;
    out.targets.assign(static_cast<std::size_t>(batch.numel()), kIgnoreTarget);
    const std::int64_t n_content = vocab_size - Vocab::kNumSpecials;
    for (std::int64_t i = 0; i < batch.numel(); ++i) {
        const std::int32_t id = batch.v[static_cast<std::size_t>(i)];
        if (id < Vocab::kNumSpecials) continue;  // specials are never selected
        if (rng.next_float() >= plan.mask_prob) continue;
        out.targets[static_cast<std::size_t>(i)] = id;
        out.any_selected = true;
        const float u = rng.next_float();
        if (u < plan.frac_mask) {
            out.tokens.v[static_cast<std::size_t>(i)] = Vocab::kMask;
        } else if (u < plan.frac_mask + plan.frac_random) {
            out.tokens.v[static_cast<std::size_t>(i)] = static_cast<std::int32_t>(
                Vocab::kNumSpecials + rng.next_below(static_cast<std::uint64_t>(n_content)));
        }  // else keep
    }
    return out;
}

CorruptedImages mim_corrupt(const Tensor& images, const VisualCodebook& codebook,
                            const MaskingPlan& plan, Rng& rng) {
    plan.validate();
    if (!codebook.frozen || !codebook.codes.defined())
        throw ContractError("mim_corrupt: codebook is not fitted");
    if (images.rank() != 4) throw ShapeError("mim_corrupt: need [B,C,H,W]");
    const std::int64_t b = images.shape()[0], c = images.shape()[1];
    const std::int64_t h = images.shape()[2], w = images.shape()[3];
    const int pe = codebook.patch_extent;
    if (h % pe != 0 || w % pe != 0)
        throw ContractError("mim_corrupt: image extents not divisible by patch extent");
    if (c != codebook.channels) throw ShapeError("mim_corrupt: channel mismatch with codebook");
    const std::int64_t gh = h / pe, gw = w / pe, d = c * pe * pe;

    CorruptedImages out;
    out.images = images.clone();
    out.targets.assign(static_cast<std::size_t>(b * gh * gw), kIgnoreTarget);
    std::vector<float> patch(static_cast<std::size_t>(d));
    for (std::int64_t bi = 0; bi < b; ++bi)
        for (std::int64_t gy = 0; gy < gh; ++gy)
            for (std::int64_t gx = 0; gx < gw; ++gx) {
                if (rng.next_float() >= plan.mask_prob) continue;
                // Original patch drives the target, then the pixels change.
                std::int64_t col = 0;
                for (std::int64_t ci = 0; ci < c; ++ci)
                    for (int py = 0; py < pe; ++py)
                        for (int px = 0; px < pe; ++px, ++col)
                            patch[static_cast<std::size_t>(col)] =
                                images.data()[((bi * c + ci) * h + gy * pe + py) * w + gx * pe +
                                              px];
                const std::int64_t p = (bi * gh + gy) * gw + gx;
                out.targets[static_cast<std::size_t>(p)] =
                    static_cast<std::int32_t>(codebook.nearest(patch.data()));
                out.any_selected = true;
                const float u = rng.next_float();
                const float* src = nullptr;  // nullptr = zero fill
                if (u < plan.frac_mask) {
                    src = nullptr;
                } else if (u < plan.frac_mask + plan.frac_random) {
                    src = codebook.codes.data() +
                          static_cast<std::int64_t>(rng.next_below(
                              static_cast<std::uint64_t>(codebook.size()))) *
                              d;
                } else {
                    continue;  // keep pixels
                }
                col = 0;
                for (std::int64_t ci = 0; ci < c; ++ci)
                    for (int py = 0; py < pe; ++py)
                        for (int px = 0; px < pe; ++px, ++col)
                            out.images.data()[((bi * c + ci) * h + gy * pe + py) * w + gx * pe +
                                              px] = src ? src[col] : 0.0f;
            }
    return out;
}

Tensor objective_loss(Objective kind, const Model& model, const PreparedBatch& batch) {
    HeadKind want = HeadKind::kNone;
    switch (kind) {
        case Objective::kMlm: want = HeadKind::kMlm; break;
        case Objective::kMim: want = HeadKind::kMim; break;
        case Objective::kClf: want = HeadKind::kClf; break;
    }
    if (model.head.kind != want)
        throw HeadError("objective_loss: " + objective_name(kind) + " objective against " +
                        head_name(model.head.kind) + " head");
    ForwardOut fwd;
    if (kind == Objective::kMlm || (kind == Objective::kClf && batch.tokens.rows > 0)) {
        fwd = model.forward_tokens(batch.tokens);
    } else {
        if (!batch.images.defined()) throw ContractError("objective_loss: batch has no input");
        fwd = model.forward_images(batch.images);
    }
    return softmax_ce(fwd.logits, batch.targets);
}

}  // namespace cptlab
