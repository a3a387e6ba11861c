// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <vector>

#include <doctest.h>

#include "cptlab/common.hpp"
#include "cptlab/ops.hpp"
#include "cptlab/optim.hpp"
#include "cptlab/rng.hpp"
#include "cptlab/tensor.hpp"
#include "helpers.hpp"

using cptlab::Optimizer;
using cptlab::Tensor;

namespace {

// Accumulates grad = coeff * p elementwise via a real backward pass.
void fill_grad(const Tensor& p, float coeff) {
    p.zero_grad();
    Tensor loss = cptlab::sum_all(cptlab::mul(p, Tensor::full(p.shape(), coeff)));
    loss.backward();
}

}  // namespace

TEST_CASE("sgd applies p -= lr * grad exactly") {
    Tensor p = Tensor::from_data({3}, {1.0f, -2.0f, 0.5f}, true);
    Optimizer opt = Optimizer::sgd(0.5f);
    fill_grad(p, 2.0f);  // grad = {2,2,2}
    opt.step({p});
    CHECK(p.vec() == std::vector<float>{0.0f, -3.0f, -0.5f});
    CHECK(opt.step_count() == 1);
    opt.set_lr(0.25f);
    fill_grad(p, 4.0f);
    opt.step({p});
    CHECK(p.vec() == std::vector<float>{-1.0f, -4.0f, -1.5f});
    CHECK(opt.step_count() == 2);
}

TEST_CASE("adam matches a double-precision reference for five steps") {
    cptlab::Rng rng(5);
    Tensor p = testutil::rand_tensor({6}, rng);
    std::vector<double> ref(6), m(6, 0.0), v(6, 0.0);
    for (int i = 0; i < 6; ++i) ref[i] = p.data()[i];

    const double lr = 1e-2, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    Optimizer opt = Optimizer::adam(static_cast<float>(lr));
    for (int t = 1; t <= 5; ++t) {
        const float coeff = 0.5f + 0.25f * static_cast<float>(t);
        fill_grad(p, coeff);
        opt.step({p});
        for (int i = 0; i < 6; ++i) {
            const double g = coeff;  // grad of sum(coeff * p) wrt p[i]
            m[i] = b1 * m[i] + (1 - b1) * g;
            v[i] = b2 * v[i] + (1 - b2) * g * g;
            const double mhat = m[i] / (1 - std::pow(b1, t));
            const double vhat = v[i] / (1 - std::pow(b2, t));
            ref[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
    for (int i = 0; i < 6; ++i) {
        CHECK(p.data()[i] == doctest::Approx(ref[i]).epsilon(1e-5));
    }
    CHECK(opt.step_count() == 5);
}

TEST_CASE("adam moment state is per-slot, not shared") {
    // Two parameters with different gradient histories must diverge even if
    // their current gradients agree.
    Tensor a = Tensor::from_data({1}, {1.0f}, true);
    Tensor b = Tensor::from_data({1}, {1.0f}, true);
    Optimizer opt = Optimizer::adam(1e-2f);
    fill_grad(a, 1.0f);
    fill_grad(b, -1.0f);
    opt.step({a, b});
    fill_grad(a, 1.0f);
    fill_grad(b, 1.0f);
    opt.step({a, b});
    CHECK(a.data()[0] != b.data()[0]);
}

TEST_CASE("step rejects missing grads and list mismatches") {
    Tensor a = Tensor::from_data({2}, {1, 2}, true);
    Tensor b = Tensor::from_data({2}, {3, 4}, true);
    Optimizer opt = Optimizer::sgd(0.1f);
    CHECK_THROWS_AS(opt.step({a}), cptlab::ContractError);  // no grad buffer yet

    fill_grad(a, 1.0f);
    fill_grad(b, 1.0f);
    opt.step({a, b});
    CHECK_THROWS_AS(opt.step({a}), cptlab::ContractError);  // shorter list
    Tensor c = Tensor::from_data({3}, {1, 2, 3}, true);
    fill_grad(c, 1.0f);
    CHECK_THROWS_AS(opt.step({a, c}), cptlab::ContractError);  // shape mismatch
    CHECK(opt.step_count() == 1);  // rejected steps never count

    // A rejected step mutates nothing, even params earlier in the list.
    Tensor x = Tensor::from_data({2}, {1, 2}, true);
    Tensor y = Tensor::from_data({2}, {3, 4}, true);
    Optimizer o2 = Optimizer::sgd(0.1f);
    fill_grad(x, 1.0f);  // y never gets a gradient
    CHECK_THROWS_AS(o2.step({x, y}), cptlab::ContractError);
    CHECK(x.vec() == std::vector<float>{1, 2});
    CHECK(o2.step_count() == 0);
}

TEST_CASE("zero_grads clears every buffer") {
    Tensor a = Tensor::from_data({2}, {1, 2}, true);
    Tensor b = Tensor::from_data({2}, {3, 4}, true);
    fill_grad(a, 2.0f);
    fill_grad(b, 3.0f);
    cptlab::zero_grads({a, b});
    CHECK(a.grad_vec() == std::vector<float>{0, 0});
    CHECK(b.grad_vec() == std::vector<float>{0, 0});
}

TEST_CASE("sgd descends a quadratic") {
    // f(p) = sum(p^2) has minimum 0; fifty steps should shrink it hard.
    Tensor p = Tensor::from_data({4}, {1.0f, -1.5f, 2.0f, -0.5f}, true);
    Optimizer opt = Optimizer::sgd(0.1f);
    for (int i = 0; i < 50; ++i) {
        p.zero_grad();
        Tensor loss = cptlab::sum_all(cptlab::mul(p, p));
        loss.backward();
        opt.step({p});
    }
    Tensor final_loss = cptlab::sum_all(cptlab::mul(p, p));
    CHECK(final_loss.item() < 1e-4f);
}
