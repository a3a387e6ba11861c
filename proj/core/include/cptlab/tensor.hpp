// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include "cptlab/common.hpp"

namespace cptlab {

using Shape = std::vector<std::int64_t>;

std::string shape_str(const Shape& s);
std::int64_t shape_numel(const Shape& s);

class Tensor;

namespace detail {

// One reverse-mode tape node. `backward` receives the node's output tensor
// (whose grad has already been accumulated) and pushes gradient into the
// parents captured by the closure.
struct TapeNode {
    std::vector<std::shared_ptr<struct TensorImpl>> parents;
    std::function<void(const Tensor& out)> backward;
};

struct TensorImpl : std::enable_shared_from_this<TensorImpl> {
    Shape shape;
    std::vector<float> data;
    std::vector<float> grad;  // empty until touched; same length as data afterwards
    bool requires_grad = false;
    std::unique_ptr<TapeNode> node;  // present iff produced by a differentiable op

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
    }
};

}  // namespace detail

// Dense row-major float32 tensor with optional participation in a reverse-mode
// tape. Copying a Tensor copies the handle, not the buffer; `clone` makes an
// independent value.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, float value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<float> data, bool requires_grad = false);
    static Tensor scalar(float value, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::int64_t dim(int i) const { return impl_->shape[static_cast<std::size_t>(i)]; }
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    std::int64_t numel() const { return impl_->numel(); }

    // Tensors are shared handles; const propagates to the handle, not the
    // buffer, matching shared_ptr semantics.
    float* data() const { return impl_->data.data(); }
    std::vector<float>& vec() const { return impl_->data; }

    float item() const;  // value of a 1-element tensor

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        impl_->requires_grad = v;
        return *this;
    }

    bool has_grad() const { return !impl_->grad.empty(); }
    float* grad() const {
        impl_->ensure_grad();
        return impl_->grad.data();
    }
    const std::vector<float>& grad_vec() const { return impl_->grad; }
    void zero_grad() const {
        if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
    }

    // True when gradient should flow into this tensor: either a trainable
    // leaf or an interior node of the tape.
    bool tracked() const { return impl_ && (impl_->requires_grad || impl_->node != nullptr); }

    // Reverse pass from a scalar. Grads accumulate across calls; call
    // zero_grad between steps. Re-running backward on one graph without
    // zeroing also compounds stale intermediate grads, so each backward must
    // follow a fresh forward.
    void backward() const;

    // Value copy detached from the tape; keeps requires_grad.
    Tensor clone() const;
    // Value copy with requires_grad cleared (used for activation taps).
    Tensor detached_view() const;

    std::uint64_t content_hash() const;

    // Internal: used by ops to attach tape nodes.
    detail::TensorImpl* impl() const { return impl_.get(); }
    std::shared_ptr<detail::TensorImpl> impl_ptr() const { return impl_; }
    void set_node(std::unique_ptr<detail::TapeNode> node) const { impl_->node = std::move(node); }

private:
    std::shared_ptr<detail::TensorImpl> impl_;
};

// --- snapshot container -----------------------------------------------------
// Little-endian: u32 rank, rank x u64 extents, then float32 payload in
// row-major order. Round-trips bit-exactly.
void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);
void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

// Finite check used by the post-op invariants and tests.
bool all_finite(const Tensor& t);

}  // namespace cptlab
