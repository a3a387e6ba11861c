// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "cptlab/tensor.hpp"

namespace cptlab {

// First-order update rules over a fixed parameter list. The list identity is
// positional: every step() must pass the same tensors in the same order, which
// is what lets the adam moment buffers live here instead of on the tensors.
class Optimizer {
public:
    enum class Kind { kSgd, kAdam };

    static Optimizer sgd(float lr);
    static Optimizer adam(float lr, float beta1 = 0.9f, float beta2 = 0.999f, float eps = 1e-8f);

    // Applies one update from the accumulated gradients. Throws ContractError
    // if a parameter has no gradient buffer or the list does not match the
    // one seen first.
    void step(const std::vector<Tensor>& params);

    std::int64_t step_count() const { return step_count_; }
    Kind kind() const { return kind_; }
    float lr() const { return lr_; }
    void set_lr(float lr) { lr_ = lr; }

private:
    Optimizer(Kind kind, float lr, float beta1, float beta2, float eps)
        : kind_(kind), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    Kind kind_;
    float lr_;
    float beta1_, beta2_, eps_;
    std::int64_t step_count_ = 0;
    std::vector<std::vector<float>> m_, v_;  // adam only, sized lazily
    std::vector<std::int64_t> sizes_;        // numel per param, frozen on first step
};

// Gradient clearing is deliberately not part of step(); callers decide when
// accumulation windows end.
void zero_grads(const std::vector<Tensor>& params);

}  // namespace cptlab
