// SPDX-License-Identifier: Apache-2.0
// Shared test utilities: reproducible tensor fills and a finite-difference
// gradient checker used as the oracle for every differentiable op and model.
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cptlab/rng.hpp"
#include "cptlab/tensor.hpp"

namespace testutil {

// Uniform fill in [lo, hi).
inline cptlab::Tensor rand_tensor(const cptlab::Shape& shape, cptlab::Rng& rng, float lo = -1.0f,
                                  float hi = 1.0f, bool requires_grad = true) {
    cptlab::Tensor t = cptlab::Tensor::zeros(shape, requires_grad);
    for (std::int64_t i = 0; i < t.numel(); ++i)
        t.data()[i] = lo + (hi - lo) * rng.next_float();
    return t;
}

// Uniform fill with magnitude in [0.2, 1.2) and random sign. Keeps values
// away from zero so kinked ops (relu) never straddle the kink under the
// finite-difference step.
inline cptlab::Tensor rand_tensor_off_zero(const cptlab::Shape& shape, cptlab::Rng& rng,
                                           bool requires_grad = true) {
    cptlab::Tensor t = cptlab::Tensor::zeros(shape, requires_grad);
    for (std::int64_t i = 0; i < t.numel(); ++i) {
        const float mag = 0.2f + rng.next_float();
        t.data()[i] = rng.next_u64() % 2 ? mag : -mag;
    }
    return t;
}

struct GradCheckResult {
    bool ok = true;
    double worst_rel = 0.0;    // worst |fd-an| / max(|fd|,|an|,floor)
    std::string worst_where;
};

// Finite-difference gradient check of a scalar loss against the tape.
//
// `loss` must rebuild the graph from the current leaf values on every call
// and return a scalar tensor. Each leaf coordinate is perturbed around its
// value; the analytic gradient must match within
//     |fd - an| <= rtol * max(|fd|, |an|) + atol
// where atol absorbs f32 forward noise amplified by the 1/eps division.
// Noise per evaluation is about |L| * 2^-24 * kappa with kappa the reduction
// blowup, so atol = noise_scale * eps_f32 / eps with noise_scale ~ |L|*kappa
// passed by the caller.
//
// `richardson` switches from the 2-point central difference (error O(eps^2),
// exact for ops linear in the coordinate) to the 4-point stencil (error
// O(eps^4), 3x the noise). Deep model compositions need it: their third
// derivatives along weight coordinates reach O(100).
inline GradCheckResult check_grad(const std::function<cptlab::Tensor()>& loss,
                                  const std::vector<cptlab::Tensor>& leaves, double rtol,
                                  double eps = 1e-2, double noise_scale = 1.0,
                                  bool richardson = false) {
    GradCheckResult res;
    for (const auto& leaf : leaves) leaf.zero_grad();
    cptlab::Tensor l0 = loss();
    l0.backward();
    std::vector<std::vector<float>> analytic;
    analytic.reserve(leaves.size());
    for (const auto& leaf : leaves) analytic.push_back(leaf.grad_vec());

    const double atol = (richardson ? 3.0 : 1.0) * noise_scale * 6.0e-8 / eps;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        const cptlab::Tensor& leaf = leaves[li];
        for (std::int64_t i = 0; i < leaf.numel(); ++i) {
            const float keep = leaf.data()[i];
            auto eval_at = [&](double offset) {
                leaf.data()[i] = static_cast<float>(keep + offset);
                const double v = loss().item();
                leaf.data()[i] = keep;
                return v;
            };
            double fd;
            if (richardson) {
                fd = (eval_at(-eps) - 8.0 * eval_at(-eps / 2) + 8.0 * eval_at(eps / 2) -
                      eval_at(eps)) /
                     (6.0 * eps);
            } else {
                fd = (eval_at(eps) - eval_at(-eps)) / (2.0 * eps);
            }
            const double an = analytic[li][static_cast<std::size_t>(i)];
            const double err = std::abs(fd - an);
            const double tol = rtol * std::max(std::abs(fd), std::abs(an)) + atol;
            const double rel = err / std::max({std::abs(fd), std::abs(an), atol / rtol});
            if (rel > res.worst_rel) {
                res.worst_rel = rel;
                res.worst_where = "leaf " + std::to_string(li) + " coord " + std::to_string(i) +
                                  " fd=" + std::to_string(fd) + " an=" + std::to_string(an);
            }
            if (err > tol) res.ok = false;
        }
    }
    return res;
}

// Reduces an arbitrary-shaped op output to a scalar through a fixed random
// weighting, so every output coordinate influences the loss.
inline cptlab::Tensor weighted_sum(const cptlab::Tensor& out, const cptlab::Tensor& weights) {
    return cptlab::sum_all(cptlab::mul(out, weights));
}

inline cptlab::Tensor fixed_weights(const cptlab::Shape& shape, std::uint64_t salt) {
    cptlab::Rng rng(0x5eedf00du + salt);
    return rand_tensor(shape, rng, 0.5f, 1.5f, false);
}

}  // namespace testutil
