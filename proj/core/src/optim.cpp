// SPDX-License-Identifier: Apache-2.0
#include "cptlab/optim.hpp"

#include <cmath>
#include <string>

#include "cptlab/common.hpp"

namespace cptlab {

Optimizer Optimizer::sgd(float lr) { return Optimizer(Kind::kSgd, lr, 0.0f, 0.0f, 0.0f); }

Optimizer Optimizer::adam(float lr, float beta1, float beta2, float eps) {
    return Optimizer(Kind::kAdam, lr, beta1, beta2, eps);
}

void Optimizer::step(const std::vector<Tensor>& params) {
    // All contract checks run before any state mutates, so a rejected step
    // leaves parameters, moments and step_count untouched.
    if (!sizes_.empty() && sizes_.size() != params.size())
        throw ContractError("optimizer: parameter list changed size, " +
                            std::to_string(sizes_.size()) + " -> " +
                            std::to_string(params.size()));
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!sizes_.empty() && params[i].numel() != sizes_[i])
            throw ContractError("optimizer: parameter " + std::to_string(i) + " changed shape");
        if (!params[i].has_grad())
            throw ContractError("optimizer: parameter " + std::to_string(i) + " has no gradient");
    }
    if (sizes_.empty()) {
        sizes_.reserve(params.size());
        for (const auto& p : params) sizes_.push_back(p.numel());
        if (kind_ == Kind::kAdam) {
            m_.resize(params.size());
            v_.resize(params.size());
            for (std::size_t i = 0; i < params.size(); ++i) {
                m_[i].assign(static_cast<std::size_t>(sizes_[i]), 0.0f);
                v_[i].assign(static_cast<std::size_t>(sizes_[i]), 0.0f);
            }
        }
    }
    ++step_count_;

    const double bc1 = 1.0 - std::pow(static_cast<double>(beta1_), static_cast<double>(step_count_));
    const double bc2 = 1.0 - std::pow(static_cast<double>(beta2_), static_cast<double>(step_count_));

    for (std::size_t i = 0; i < params.size(); ++i) {
        const Tensor& p = params[i];
        float* w = p.data();
        const float* g = p.impl_ptr()->grad.data();
        const std::int64_t n = sizes_[i];
        if (kind_ == Kind::kSgd) {
            for (std::int64_t j = 0; j < n; ++j) w[j] -= lr_ * g[j];
        } else {
            float* m = m_[i].data();
            float* v = v_[i].data();
            for (std::int64_t j = 0; j < n; ++j) {
                const float gj = g[j];
                m[j] = beta1_ * m[j] + (1.0f - beta1_) * gj;
                v[j] = beta2_ * v[j] + (1.0f - beta2_) * gj * gj;
                const double mhat = static_cast<double>(m[j]) / bc1;
                const double vhat = static_cast<double>(v[j]) / bc2;
                w[j] -= static_cast<float>(lr_ * mhat / (std::sqrt(vhat) + eps_));
            }
        }
    }
}

void zero_grads(const std::vector<Tensor>& params) {
    for (const auto& p : params) p.zero_grad();
}

}  // namespace cptlab
