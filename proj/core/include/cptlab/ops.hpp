// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "cptlab/rng.hpp"
#include "cptlab/tensor.hpp"

namespace cptlab {

// Integer batch container for token ids, class labels and code indices.
struct IntMatrix {
    std::int64_t rows = 0;
    std::int64_t cols = 0;
    std::vector<std::int32_t> v;

    IntMatrix() = default;
    IntMatrix(std::int64_t r, std::int64_t c, std::int32_t fill = 0)
        : rows(r), cols(c), v(static_cast<std::size_t>(r * c), fill) {}

    std::int32_t& at(std::int64_t r, std::int64_t c) { return v[static_cast<std::size_t>(r * cols + c)]; }
    std::int32_t at(std::int64_t r, std::int64_t c) const { return v[static_cast<std::size_t>(r * cols + c)]; }
    std::int64_t numel() const { return rows * cols; }
};

// Sentinel target for positions excluded from a loss.
constexpr std::int32_t kIgnoreTarget = -1;

// --- elementwise / structural ------------------------------------------------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, float c);
Tensor add_bias(const Tensor& x, const Tensor& bias);  // x [..., W] + bias [W]
Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose2d(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor dropout(const Tensor& x, float p, Rng& rng);
Tensor sum_all(const Tensor& x);

// --- linear algebra ----------------------------------------------------------
Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k] x [k,n]

// Row-statistics normalization over the last axis with learned gain/bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps = 1e-5f);

// --- indexing ----------------------------------------------------------------
Tensor embedding(const Tensor& table, const IntMatrix& ids);   // -> [rows, cols, W]
Tensor take_position(const Tensor& x, std::int64_t t);         // [B,T,W] -> [B,W]

// --- attention ---------------------------------------------------------------
// Fused multi-head self-attention core: packed projections in, mixed values
// out. `valid` marks key positions that may be attended to (empty = all);
// invalid keys are excluded from every softmax row.
Tensor mha_core(const Tensor& qkv, int n_heads, const std::vector<std::uint8_t>& valid = {});

// --- convolution -------------------------------------------------------------
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad);
Tensor global_avg_pool(const Tensor& x);   // [B,C,H,W] -> [B,C]
Tensor channels_to_rows(const Tensor& x);  // [B,C,H,W] -> [B*H*W, C], site-major rows

// --- loss --------------------------------------------------------------------
// Mean negative log-softmax over rows whose target is not ignored.
// Stable (max-subtracted); the reduction runs in double.
Tensor softmax_ce(const Tensor& logits, const std::vector<std::int32_t>& targets,
                  std::int32_t ignore_index = kIgnoreTarget);

// Row-wise argmax, the shared decode step of every accuracy measurement.
std::vector<std::int32_t> argmax_rows(const Tensor& logits);

}  // namespace cptlab
