// SPDX-License-Identifier: Apache-2.0
#include <cstring>
#include <filesystem>
#include <sstream>
#include <vector>

#include <doctest.h>

#include "cptlab/common.hpp"
#include "cptlab/ops.hpp"
#include "cptlab/tensor.hpp"

using cptlab::Tensor;
namespace ops = cptlab;

TEST_CASE("constructors fill shape and values") {
    Tensor z = Tensor::zeros({2, 3});
    CHECK(z.numel() == 6);
    CHECK(z.rank() == 2);
    for (std::int64_t i = 0; i < 6; ++i) CHECK(z.data()[i] == 0.0f);

    Tensor f = Tensor::full({4}, 2.5f);
    for (std::int64_t i = 0; i < 4; ++i) CHECK(f.data()[i] == 2.5f);

    Tensor d = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    CHECK(d.vec() == std::vector<float>{1, 2, 3, 4});

    Tensor s = Tensor::scalar(-3.0f);
    CHECK(s.numel() == 1);
    CHECK(s.item() == -3.0f);

    CHECK_THROWS_AS(Tensor::from_data({2, 2}, {1, 2, 3}), cptlab::ShapeError);
}

TEST_CASE("clone and detached_view are independent value copies") {
    Tensor a = Tensor::from_data({3}, {1, 2, 3}, true);
    Tensor c = a.clone();
    c.data()[0] = 99.0f;
    CHECK(a.data()[0] == 1.0f);
    CHECK(c.tracked());  // clone keeps requires_grad, drops the tape node

    Tensor v = a.detached_view();
    v.data()[1] = 42.0f;
    CHECK(a.data()[1] == 2.0f);
    CHECK_FALSE(v.tracked());
}

TEST_CASE("content_hash is value-sensitive and stable") {
    Tensor a = Tensor::from_data({2}, {1, 2});
    Tensor b = Tensor::from_data({2}, {1, 2});
    CHECK(a.content_hash() == b.content_hash());
    b.data()[1] = 3.0f;
    CHECK(a.content_hash() != b.content_hash());
    // Shape participates: same bytes, different shape.
    Tensor c = Tensor::from_data({1, 2}, {1, 2});
    CHECK(a.content_hash() != c.content_hash());
}

TEST_CASE("tensor io roundtrips bit-exactly") {
    Tensor a = Tensor::from_data({2, 3}, {0.1f, -0.0f, 3e-38f, 1e30f, -7.25f, 0.5f});
    std::stringstream buf;
    cptlab::write_tensor(buf, a);
    Tensor b = cptlab::read_tensor(buf);
    REQUIRE(b.shape() == a.shape());
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        CHECK(std::memcmp(a.data() + i, b.data() + i, sizeof(float)) == 0);
    }

    const std::string path = (std::filesystem::temp_directory_path() / "cptlab_t.bin").string();
    cptlab::save_tensor(path, a);
    Tensor c = cptlab::load_tensor(path);
    CHECK(c.vec() == a.vec());
    std::filesystem::remove(path);
}

TEST_CASE("all_finite flags nan and inf") {
    Tensor a = Tensor::from_data({2}, {1.0f, 2.0f});
    CHECK(cptlab::all_finite(a));
    a.data()[1] = std::numeric_limits<float>::infinity();
    CHECK_FALSE(cptlab::all_finite(a));
    a.data()[1] = std::numeric_limits<float>::quiet_NaN();
    CHECK_FALSE(cptlab::all_finite(a));
}

TEST_CASE("backward requires a scalar") {
    Tensor a = Tensor::from_data({2}, {1, 2}, true);
    Tensor b = ops::relu(a);
    CHECK_THROWS_AS(b.backward(), cptlab::ContractError);
}

TEST_CASE("simple chain gradient is exact") {
    Tensor a = Tensor::from_data({3}, {1, -2, 3}, true);
    Tensor b = Tensor::from_data({3}, {4, 5, -6}, true);
    Tensor loss = ops::sum_all(ops::mul(a, b));
    loss.backward();
    CHECK(loss.item() == doctest::Approx(1 * 4 + -2 * 5 + 3 * -6));
    // d(sum a*b)/da = b exactly, no float error possible.
    CHECK(a.grad_vec() == b.vec());
    CHECK(b.grad_vec() == a.vec());
}

TEST_CASE("diamond graph accumulates both paths") {
    Tensor a = Tensor::from_data({2}, {2, 3}, true);
    Tensor b = Tensor::from_data({2}, {5, 7}, true);
    Tensor c = Tensor::from_data({2}, {11, 13}, true);
    // loss = sum(a*b + a*c); d/da = b + c.
    Tensor loss = ops::sum_all(ops::add(ops::mul(a, b), ops::mul(a, c)));
    loss.backward();
    CHECK(a.grad_vec() == std::vector<float>{16, 20});
}

TEST_CASE("gradients accumulate until zeroed") {
    Tensor a = Tensor::from_data({2}, {1, 2}, true);
    {
        Tensor loss = ops::sum_all(ops::scale(a, 3.0f));
        loss.backward();
    }
    CHECK(a.grad_vec() == std::vector<float>{3, 3});
    {
        // Fresh forward; the new backward adds onto the existing grads.
        Tensor loss = ops::sum_all(ops::scale(a, 3.0f));
        loss.backward();
    }
    CHECK(a.grad_vec() == std::vector<float>{6, 6});
    a.zero_grad();
    CHECK(a.has_grad());
    CHECK(a.grad_vec() == std::vector<float>{0, 0});
}

TEST_CASE("untracked leaves receive no gradient") {
    Tensor a = Tensor::from_data({2}, {1, 2}, true);
    Tensor b = Tensor::from_data({2}, {3, 4}, false);
    Tensor loss = ops::sum_all(ops::mul(a, b));
    loss.backward();
    CHECK(a.has_grad());
    CHECK_FALSE(b.has_grad());
    CHECK_FALSE(b.tracked());
}

TEST_CASE("reshape and transpose route gradients through unchanged") {
    Tensor a = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    Tensor w = Tensor::from_data({3, 2}, {1, 2, 3, 4, 5, 6});
    Tensor loss = ops::sum_all(ops::mul(ops::transpose2d(a), w));
    loss.backward();
    // grad(a)[i][j] = w[j][i].
    CHECK(a.grad_vec() == std::vector<float>{1, 3, 5, 2, 4, 6});

    Tensor b = Tensor::from_data({4}, {1, 2, 3, 4}, true);
    Tensor r = ops::reshape(b, {2, 2});
    CHECK(r.shape() == cptlab::Shape{2, 2});
    Tensor loss2 = ops::sum_all(ops::mul(r, Tensor::from_data({2, 2}, {9, 8, 7, 6})));
    loss2.backward();
    CHECK(b.grad_vec() == std::vector<float>{9, 8, 7, 6});
    CHECK_THROWS_AS(ops::reshape(b, {3, 2}), cptlab::ShapeError);
}

TEST_CASE("graph releases when outputs go out of scope") {
    // Re-running a fresh forward from the same leaves works and accumulates.
    Tensor a = Tensor::from_data({2}, {1, 2}, true);
    for (int i = 0; i < 3; ++i) {
        Tensor loss = ops::sum_all(a);
        loss.backward();
    }
    CHECK(a.grad_vec() == std::vector<float>{3, 3});
}
