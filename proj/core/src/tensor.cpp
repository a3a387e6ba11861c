// SPDX-License-Identifier: Apache-2.0
#include "cptlab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <unordered_set>

namespace cptlab {

std::string to_hex(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<std::size_t>(i)] = digits[v & 0xF];
        v >>= 4;
    }
    return s;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << "x";
        os << s[i];
    }
    os << "]";
    return os.str();
}

std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto e : s) n *= e;
    return n;
}

static std::shared_ptr<detail::TensorImpl> make_impl(Shape shape, bool requires_grad) {
    for (auto e : shape) {
        if (e <= 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
    }
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(shape);
    impl->data.assign(static_cast<std::size_t>(shape_numel(impl->shape)), 0.0f);
    impl->requires_grad = requires_grad;
    return impl;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    Tensor t;
    t.impl_ = make_impl(std::move(shape), requires_grad);
    return t;
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
    return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<float> data, bool requires_grad) {
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
        throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                         shape_str(shape));
    }
    Tensor t;
    t.impl_ = make_impl(std::move(shape), requires_grad);
    t.impl_->data = std::move(data);
    return t;
}

Tensor Tensor::scalar(float value, bool requires_grad) {
    return from_data({1}, {value}, requires_grad);
}

float Tensor::item() const {
    if (numel() != 1) throw ContractError("item() requires a 1-element tensor, got " + shape_str(shape()));
    return impl_->data[0];
}

Tensor Tensor::clone() const {
    Tensor t;
    t.impl_ = std::make_shared<detail::TensorImpl>();
    t.impl_->shape = impl_->shape;
    t.impl_->data = impl_->data;
    t.impl_->requires_grad = impl_->requires_grad;
    return t;
}

Tensor Tensor::detached_view() const {
    Tensor t;
    t.impl_ = std::make_shared<detail::TensorImpl>();
    t.impl_->shape = impl_->shape;
    t.impl_->data = impl_->data;  // copy; taps are small [batch x feature] slices
    t.impl_->requires_grad = false;
    return t;
}

std::uint64_t Tensor::content_hash() const {
    std::uint64_t h = kFnvOffset;
    h = fnv1a(impl_->shape.data(), impl_->shape.size() * sizeof(std::int64_t), h);
    h = fnv1a(impl_->data.data(), impl_->data.size() * sizeof(float), h);
    return h;
}

void Tensor::backward() const {
    if (numel() != 1) {
        throw ContractError("backward() requires a scalar loss, got " + shape_str(shape()));
    }
    // Topological order over the tape, children before parents.
    std::vector<detail::TensorImpl*> order;
    std::unordered_set<detail::TensorImpl*> seen;
    std::vector<std::pair<detail::TensorImpl*, std::size_t>> stack;
    stack.emplace_back(impl_.get(), 0);
    seen.insert(impl_.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (node->node && next < node->node->parents.size()) {
            detail::TensorImpl* parent = node->node->parents[next].get();
            ++next;
            if (parent->node && seen.insert(parent).second) {
                stack.emplace_back(parent, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    // `order` is parents-first; walk it backwards so each node's grad is
    // complete before it pushes into its parents.
    impl_->ensure_grad();
    impl_->grad[0] += 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::TensorImpl* node = *it;
        if (!node->node) continue;
        Tensor out;
        out.impl_ = node->shared_from_this();
        node->node->backward(out);
    }
}

// --- snapshot container -----------------------------------------------------

namespace {
template <typename T>
void write_le(std::ostream& out, T v) {
    unsigned char buf[sizeof(T)];
    for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF);
    out.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_le(std::istream& in) {
    unsigned char buf[sizeof(T)];
    in.read(reinterpret_cast<char*>(buf), sizeof(T));
    if (!in) throw IoError("truncated tensor snapshot");
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    return static_cast<T>(v);
}
}  // namespace

void write_tensor(std::ostream& out, const Tensor& t) {
    write_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) write_le<std::uint64_t>(out, static_cast<std::uint64_t>(e));
    // Floats are written bit-for-bit; x86/ARM little-endian IEEE754 assumed.
    for (std::int64_t i = 0; i < t.numel(); ++i) {
        std::uint32_t bits;
        std::memcpy(&bits, t.data() + i, sizeof(bits));
        write_le<std::uint32_t>(out, bits);
    }
}

Tensor read_tensor(std::istream& in) {
    auto rank = read_le<std::uint32_t>(in);
    if (rank > 8) throw IoError("tensor snapshot rank " + std::to_string(rank) + " out of range");
    Shape shape(rank);
    for (auto& e : shape) e = static_cast<std::int64_t>(read_le<std::uint64_t>(in));
    std::vector<float> data(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& f : data) {
        std::uint32_t bits = read_le<std::uint32_t>(in);
        std::memcpy(&f, &bits, sizeof(f));
    }
    return Tensor::from_data(std::move(shape), std::move(data));
}

void save_tensor(const std::string& path, const Tensor& t) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    write_tensor(out, t);
    if (!out) throw IoError("failed writing " + path);
}

Tensor load_tensor(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    return read_tensor(in);
}

bool all_finite(const Tensor& t) {
    const float* p = t.data();
    for (std::int64_t i = 0; i < t.numel(); ++i) {
        if (!std::isfinite(p[i])) return false;
    }
    return true;
}

}  // namespace cptlab
