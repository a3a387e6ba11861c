// SPDX-License-Identifier: Apache-2.0
#define EIGEN_DONT_PARALLELIZE
#include "cptlab/ops.hpp"

#include <Eigen/Core>
#include <cmath>
#include <cstring>
#include <memory>
#include <utility>

namespace cptlab {
namespace {

using EMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

// Attach a tape node to `out` when any parent participates in the graph.
void attach(Tensor& out, const std::vector<Tensor>& parents,
            std::function<void(const Tensor&)> fn) {
    bool any = false;
    for (const auto& p : parents)
        if (p.tracked()) any = true;
    if (!any) return;
    auto node = std::make_unique<detail::TapeNode>();
    node->parents.reserve(parents.size());
    for (const auto& p : parents) node->parents.push_back(p.impl_ptr());
    node->backward = std::move(fn);
    out.set_node(std::move(node));
}

float* grad_of(const Tensor& t) {
    t.impl_ptr()->ensure_grad();
    return t.impl_ptr()->grad.data();
}

}  // namespace

// --- elementwise / structural ------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    Tensor out = Tensor::zeros(a.shape());
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
    attach(out, {a, b}, [a, b, n](const Tensor& o) {
        const float* g = o.impl_ptr()->grad.data();
        if (a.tracked()) {
            float* ga = grad_of(a);
            for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i];
        }
        if (b.tracked()) {
            float* gb = grad_of(b);
            for (std::int64_t i = 0; i < n; ++i) gb[i] += g[i];
        }
    });
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    Tensor out = Tensor::zeros(a.shape());
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
    attach(out, {a, b}, [a, b, n](const Tensor& o) {
        const float* g = o.impl_ptr()->grad.data();
        if (a.tracked()) {
            float* ga = grad_of(a);
            for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i];
        }
        if (b.tracked()) {
            float* gb = grad_of(b);
            for (std::int64_t i = 0; i < n; ++i) gb[i] -= g[i];
        }
    });
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    Tensor out = Tensor::zeros(a.shape());
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
    attach(out, {a, b}, [a, b, n](const Tensor& o) {
        const float* g = o.impl_ptr()->grad.data();
        if (a.tracked()) {
            float* ga = grad_of(a);
            for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i] * b.data()[i];
        }
        if (b.tracked()) {
            float* gb = grad_of(b);
            for (std::int64_t i = 0; i < n; ++i) gb[i] += g[i] * a.data()[i];
        }
    });
    return out;
}

Tensor scale(const Tensor& x, float c) {
    Tensor out = Tensor::zeros(x.shape());
    const std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i) out.data()[i] = x.data()[i] * c;
    attach(out, {x}, [x, c, n](const Tensor& o) {
        if (!x.tracked()) return;
        const float* g = o.impl_ptr()->grad.data();
        float* gx = grad_of(x);
        for (std::int64_t i = 0; i < n; ++i) gx[i] += g[i] * c;
    });
    return out;
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
    if (bias.rank() != 1) throw ShapeError("add_bias: bias must be rank 1");
    const std::int64_t w = bias.numel();
    if (x.numel() % w != 0 || x.shape().back() != w)
        throw ShapeError("add_bias: last axis " + shape_str(x.shape()) + " vs bias " +
                         shape_str(bias.shape()));
    Tensor out = Tensor::zeros(x.shape());
    const std::int64_t rows = x.numel() / w;
    for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < w; ++j)
            out.data()[r * w + j] = x.data()[r * w + j] + bias.data()[j];
    attach(out, {x, bias}, [x, bias, rows, w](const Tensor& o) {
        const float* g = o.impl_ptr()->grad.data();
        if (x.tracked()) {
            float* gx = grad_of(x);
            const std::int64_t n = rows * w;
            for (std::int64_t i = 0; i < n; ++i) gx[i] += g[i];
        }
        if (bias.tracked()) {
            float* gb = grad_of(bias);
            for (std::int64_t r = 0; r < rows; ++r)
                for (std::int64_t j = 0; j < w; ++j) gb[j] += g[r * w + j];
        }
    });
    return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel())
        throw ShapeError("reshape: numel mismatch " + shape_str(x.shape()) + " -> " +
                         shape_str(shape));
    Tensor out = Tensor::zeros(shape);
    std::memcpy(out.data(), x.data(), static_cast<std::size_t>(x.numel()) * sizeof(float));
    const std::int64_t n = x.numel();
    attach(out, {x}, [x, n](const Tensor& o) {
        if (!x.tracked()) return;
        const float* g = o.impl_ptr()->grad.data();
        float* gx = grad_of(x);
        for (std::int64_t i = 0; i < n; ++i) gx[i] += g[i];
    });
    return out;
}

Tensor transpose2d(const Tensor& x) {
    if (x.rank() != 2) throw ShapeError("transpose2d: need rank 2, got " + shape_str(x.shape()));
    const std::int64_t m = x.shape()[0], n = x.shape()[1];
    Tensor out = Tensor::zeros({n, m});
    EMap(out.data(), n, m) = ECMap(x.data(), m, n).transpose();
    attach(out, {x}, [x, m, n](const Tensor& o) {
        if (!x.tracked()) return;
        x.impl_ptr()->ensure_grad();
        EMap(x.impl_ptr()->grad.data(), m, n) +=
            ECMap(o.impl_ptr()->grad.data(), n, m).transpose();
    });
    return out;
}

Tensor relu(const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape());
    const std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i) out.data()[i] = x.data()[i] > 0.0f ? x.data()[i] : 0.0f;
    attach(out, {x}, [x, n](const Tensor& o) {
        if (!x.tracked()) return;
        const float* g = o.impl_ptr()->grad.data();
        float* gx = grad_of(x);
        for (std::int64_t i = 0; i < n; ++i)
            if (x.data()[i] > 0.0f) gx[i] += g[i];
    });
    return out;
}

Tensor gelu(const Tensor& x) {
    // Exact erf form; the derivative is Phi(x) + x*phi(x).
    Tensor out = Tensor::zeros(x.shape());
    const std::int64_t n = x.numel();
    constexpr float kInvSqrt2 = 0.7071067811865475f;
    for (std::int64_t i = 0; i < n; ++i) {
        const float v = x.data()[i];
        out.data()[i] = 0.5f * v * (1.0f + std::erf(v * kInvSqrt2));
    }
    attach(out, {x}, [x, n](const Tensor& o) {
        if (!x.tracked()) return;
        const float* g = o.impl_ptr()->grad.data();
        float* gx = grad_of(x);
        constexpr float kInvSqrt2 = 0.7071067811865475f;
        constexpr float kInvSqrt2Pi = 0.3989422804014327f;
        for (std::int64_t i = 0; i < n; ++i) {
            const float v = x.data()[i];
            const float cdf = 0.5f * (1.0f + std::erf(v * kInvSqrt2));
            const float pdf = kInvSqrt2Pi * std::exp(-0.5f * v * v);
            gx[i] += g[i] * (cdf + v * pdf);
        }
    });
    return out;
}

Tensor dropout(const Tensor& x, float p, Rng& rng) {
    if (p < 0.0f || p >= 1.0f) throw ContractError("dropout: p must be in [0,1)");
    const std::int64_t n = x.numel();
    if (p == 0.0f) {
        // Still a node so graph structure does not depend on the rate.
        Tensor out = Tensor::zeros(x.shape());
        std::memcpy(out.data(), x.data(), static_cast<std::size_t>(n) * sizeof(float));
        attach(out, {x}, [x, n](const Tensor& o) {
            if (!x.tracked()) return;
            const float* g = o.impl_ptr()->grad.data();
            float* gx = grad_of(x);
            for (std::int64_t i = 0; i < n; ++i) gx[i] += g[i];
        });
        return out;
    }
    auto mask = std::make_shared<std::vector<float>>(static_cast<std::size_t>(n));
    const float keep = 1.0f - p;
    const float inv = 1.0f / keep;
    for (std::int64_t i = 0; i < n; ++i)
        (*mask)[static_cast<std::size_t>(i)] = rng.next_float() < keep ? inv : 0.0f;
    Tensor out = Tensor::zeros(x.shape());
    for (std::int64_t i = 0; i < n; ++i)
        out.data()[i] = x.data()[i] * (*mask)[static_cast<std::size_t>(i)];
    attach(out, {x}, [x, n, mask](const Tensor& o) {
        if (!x.tracked()) return;
        const float* g = o.impl_ptr()->grad.data();
        float* gx = grad_of(x);
        for (std::int64_t i = 0; i < n; ++i) gx[i] += g[i] * (*mask)[static_cast<std::size_t>(i)];
    });
    return out;
}

Tensor sum_all(const Tensor& x) {
    const std::int64_t n = x.numel();
    double acc = 0.0;
    for (std::int64_t i = 0; i < n; ++i) acc += static_cast<double>(x.data()[i]);
    Tensor out = Tensor::scalar(static_cast<float>(acc));
    attach(out, {x}, [x, n](const Tensor& o) {
        if (!x.tracked()) return;
        const float g = o.impl_ptr()->grad[0];
        float* gx = grad_of(x);
        for (std::int64_t i = 0; i < n; ++i) gx[i] += g;
    });
    return out;
}

// --- linear algebra ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul: need rank 2, got " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    const std::int64_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    if (b.shape()[0] != k)
        throw ShapeError("matmul: inner dims " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    Tensor out = Tensor::zeros({m, n});
    EMap(out.data(), m, n).noalias() = ECMap(a.data(), m, k) * ECMap(b.data(), k, n);
    attach(out, {a, b}, [a, b, m, k, n](const Tensor& o) {
        ECMap g(o.impl_ptr()->grad.data(), m, n);
        if (a.tracked()) {
            a.impl_ptr()->ensure_grad();
            EMap(a.impl_ptr()->grad.data(), m, k).noalias() +=
                g * ECMap(b.data(), k, n).transpose();
        }
        if (b.tracked()) {
            b.impl_ptr()->ensure_grad();
            EMap(b.impl_ptr()->grad.data(), k, n).noalias() +=
                ECMap(a.data(), m, k).transpose() * g;
        }
    });
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps) {
    if (gain.rank() != 1 || bias.rank() != 1) throw ShapeError("layer_norm: params must be rank 1");
    const std::int64_t w = x.shape().back();
    if (gain.numel() != w || bias.numel() != w)
        throw ShapeError("layer_norm: param width " + shape_str(gain.shape()) + " vs axis " +
                         std::to_string(w));
    const std::int64_t rows = x.numel() / w;
    Tensor out = Tensor::zeros(x.shape());
    // Cache per row: normalized values and 1/sqrt(var+eps).
    auto xhat = std::make_shared<std::vector<float>>(static_cast<std::size_t>(rows * w));
    auto rstd = std::make_shared<std::vector<float>>(static_cast<std::size_t>(rows));
    for (std::int64_t r = 0; r < rows; ++r) {
        const float* xr = x.data() + r * w;
        double mean = 0.0;
        for (std::int64_t j = 0; j < w; ++j) mean += xr[j];
        mean /= static_cast<double>(w);
        double var = 0.0;
        for (std::int64_t j = 0; j < w; ++j) {
            const double d = xr[j] - mean;
            var += d * d;
        }
        var /= static_cast<double>(w);
        const float rs = static_cast<float>(1.0 / std::sqrt(var + static_cast<double>(eps)));
        (*rstd)[static_cast<std::size_t>(r)] = rs;
        for (std::int64_t j = 0; j < w; ++j) {
            const float h = (xr[j] - static_cast<float>(mean)) * rs;
            (*xhat)[static_cast<std::size_t>(r * w + j)] = h;
            out.data()[r * w + j] = gain.data()[j] * h + bias.data()[j];
        }
    }
    attach(out, {x, gain, bias}, [x, gain, bias, rows, w, xhat, rstd](const Tensor& o) {
        const float* g = o.impl_ptr()->grad.data();
        if (gain.tracked()) {
            float* gg = grad_of(gain);
            for (std::int64_t r = 0; r < rows; ++r)
                for (std::int64_t j = 0; j < w; ++j)
                    gg[j] += g[r * w + j] * (*xhat)[static_cast<std::size_t>(r * w + j)];
        }
        if (bias.tracked()) {
            float* gb = grad_of(bias);
            for (std::int64_t r = 0; r < rows; ++r)
                for (std::int64_t j = 0; j < w; ++j) gb[j] += g[r * w + j];
        }
        if (x.tracked()) {
            float* gx = grad_of(x);
            for (std::int64_t r = 0; r < rows; ++r) {
                const float rs = (*rstd)[static_cast<std::size_t>(r)];
                // dxhat_j = g_j * gain_j; dx via the two row statistics.
                double sum_dh = 0.0, sum_dh_h = 0.0;
                for (std::int64_t j = 0; j < w; ++j) {
                    const double dh = static_cast<double>(g[r * w + j]) * gain.data()[j];
                    sum_dh += dh;
                    sum_dh_h += dh * (*xhat)[static_cast<std::size_t>(r * w + j)];
                }
                const double invw = 1.0 / static_cast<double>(w);
                for (std::int64_t j = 0; j < w; ++j) {
                    const double dh = static_cast<double>(g[r * w + j]) * gain.data()[j];
                    const double h = (*xhat)[static_cast<std::size_t>(r * w + j)];
                    gx[r * w + j] += static_cast<float>(
                        rs * (dh - invw * sum_dh - h * invw * sum_dh_h));
                }
            }
        }
    });
    return out;
}

// --- indexing ----------------------------------------------------------------

Tensor embedding(const Tensor& table, const IntMatrix& ids) {
    if (table.rank() != 2) throw ShapeError("embedding: table must be rank 2");
    const std::int64_t v = table.shape()[0], w = table.shape()[1];
    for (std::int32_t id : ids.v)
        if (id < 0 || id >= v)
            throw ContractError("embedding: id " + std::to_string(id) + " outside table of " +
                                std::to_string(v));
    Tensor out = Tensor::zeros({ids.rows, ids.cols, w});
    for (std::int64_t i = 0; i < ids.numel(); ++i)
        std::memcpy(out.data() + i * w, table.data() + ids.v[static_cast<std::size_t>(i)] * w,
                    static_cast<std::size_t>(w) * sizeof(float));
    auto idv = std::make_shared<std::vector<std::int32_t>>(ids.v);
    attach(out, {table}, [table, idv, w](const Tensor& o) {
        if (!table.tracked()) return;
        const float* g = o.impl_ptr()->grad.data();
        float* gt = grad_of(table);
        for (std::size_t i = 0; i < idv->size(); ++i) {
            float* dst = gt + static_cast<std::int64_t>((*idv)[i]) * w;
            const float* src = g + static_cast<std::int64_t>(i) * w;
            for (std::int64_t j = 0; j < w; ++j) dst[j] += src[j];
        }
    });
    return out;
}

Tensor take_position(const Tensor& x, std::int64_t t) {
    if (x.rank() != 3) throw ShapeError("take_position: need rank 3, got " + shape_str(x.shape()));
    const std::int64_t b = x.shape()[0], tt = x.shape()[1], w = x.shape()[2];
    if (t < 0 || t >= tt) throw ContractError("take_position: index out of range");
    Tensor out = Tensor::zeros({b, w});
    for (std::int64_t i = 0; i < b; ++i)
        std::memcpy(out.data() + i * w, x.data() + (i * tt + t) * w,
                    static_cast<std::size_t>(w) * sizeof(float));
    attach(out, {x}, [x, t, b, tt, w](const Tensor& o) {
        if (!x.tracked()) return;
        const float* g = o.impl_ptr()->grad.data();
        float* gx = grad_of(x);
        for (std::int64_t i = 0; i < b; ++i)
            for (std::int64_t j = 0; j < w; ++j) gx[(i * tt + t) * w + j] += g[i * w + j];
    });
    return out;
}

// --- attention ---------------------------------------------------------------

Tensor mha_core(const Tensor& qkv, int n_heads, const std::vector<std::uint8_t>& valid) {
    if (qkv.rank() != 3) throw ShapeError("mha_core: need [B,T,3W], got " + shape_str(qkv.shape()));
    const std::int64_t b = qkv.shape()[0], t = qkv.shape()[1], w3 = qkv.shape()[2];
    if (w3 % 3 != 0) throw ShapeError("mha_core: last axis must pack q,k,v");
    const std::int64_t w = w3 / 3;
    if (n_heads <= 0 || w % n_heads != 0)
        throw ShapeError("mha_core: width " + std::to_string(w) + " not divisible by " +
                         std::to_string(n_heads) + " heads");
    if (!valid.empty() && static_cast<std::int64_t>(valid.size()) != b * t)
        throw ShapeError("mha_core: valid mask must have B*T entries");
    const std::int64_t hd = w / n_heads;
    const float inv_sqrt_d = 1.0f / std::sqrt(static_cast<float>(hd));

    Tensor out = Tensor::zeros({b, t, w});
    // Attention probabilities are kept for the backward pass.
    auto probs = std::make_shared<std::vector<float>>(
        static_cast<std::size_t>(b) * static_cast<std::size_t>(n_heads) *
        static_cast<std::size_t>(t) * static_cast<std::size_t>(t));

    const float* in = qkv.data();
    for (std::int64_t bi = 0; bi < b; ++bi) {
        const std::uint8_t* vm = valid.empty() ? nullptr : valid.data() + bi * t;
        for (int h = 0; h < n_heads; ++h) {
            const std::int64_t qo = h * hd, ko = w + h * hd, vo = 2 * w + h * hd;
            float* p = probs->data() + ((bi * n_heads + h) * t) * t;
            for (std::int64_t i = 0; i < t; ++i) {
                const float* q = in + (bi * t + i) * w3 + qo;
                // Scores with running max for a stable softmax.
                float mx = -std::numeric_limits<float>::infinity();
                float* pr = p + i * t;
                for (std::int64_t j = 0; j < t; ++j) {
                    if (vm && !vm[j]) {
                        pr[j] = -std::numeric_limits<float>::infinity();
                        continue;
                    }
                    const float* k = in + (bi * t + j) * w3 + ko;
                    float s = 0.0f;
                    for (std::int64_t d = 0; d < hd; ++d) s += q[d] * k[d];
                    s *= inv_sqrt_d;
                    pr[j] = s;
                    if (s > mx) mx = s;
                }
                if (!std::isfinite(mx))
                    throw DegenerateBatchError("mha_core: row with no valid key");
                double z = 0.0;
                for (std::int64_t j = 0; j < t; ++j) {
                    if (std::isinf(pr[j])) {
                        pr[j] = 0.0f;
                    } else {
                        pr[j] = std::exp(pr[j] - mx);
                        z += pr[j];
                    }
                }
                const float invz = static_cast<float>(1.0 / z);
                float* orow = out.data() + (bi * t + i) * w + h * hd;
                for (std::int64_t j = 0; j < t; ++j) {
                    pr[j] *= invz;
                    if (pr[j] == 0.0f) continue;
                    const float* vv = in + (bi * t + j) * w3 + vo;
                    for (std::int64_t d = 0; d < hd; ++d) orow[d] += pr[j] * vv[d];
                }
            }
        }
    }

    attach(out, {qkv}, [qkv, probs, b, t, w, n_heads, hd, inv_sqrt_d](const Tensor& o) {
        if (!qkv.tracked()) return;
        const float* g = o.impl_ptr()->grad.data();
        const float* in = qkv.data();
        float* gin = grad_of(qkv);
        const std::int64_t w3 = 3 * w;
        std::vector<float> dp(static_cast<std::size_t>(t));
        for (std::int64_t bi = 0; bi < b; ++bi) {
            for (int h = 0; h < n_heads; ++h) {
                const std::int64_t qo = h * hd, ko = w + h * hd, vo = 2 * w + h * hd;
                const float* p = probs->data() + ((bi * n_heads + h) * t) * t;
                for (std::int64_t i = 0; i < t; ++i) {
                    const float* go = g + (bi * t + i) * w + h * hd;
                    const float* pr = p + i * t;
                    // dV and dP from the mixing step.
                    double dot = 0.0;
                    for (std::int64_t j = 0; j < t; ++j) {
                        if (pr[j] == 0.0f) {
                            dp[static_cast<std::size_t>(j)] = 0.0f;
                            continue;
                        }
                        const float* vv = in + (bi * t + j) * w3 + vo;
                        float* gv = gin + (bi * t + j) * w3 + vo;
                        float d = 0.0f;
                        for (std::int64_t dd = 0; dd < hd; ++dd) {
                            gv[dd] += pr[j] * go[dd];
                            d += go[dd] * vv[dd];
                        }
                        dp[static_cast<std::size_t>(j)] = d;
                        dot += static_cast<double>(d) * pr[j];
                    }
                    // Softmax jacobian, then score gradients into q and k.
                    const float* q = in + (bi * t + i) * w3 + qo;
                    float* gq = gin + (bi * t + i) * w3 + qo;
                    for (std::int64_t j = 0; j < t; ++j) {
                        if (pr[j] == 0.0f) continue;
                        const float ds =
                            pr[j] * (dp[static_cast<std::size_t>(j)] - static_cast<float>(dot)) *
                            inv_sqrt_d;
                        const float* k = in + (bi * t + j) * w3 + ko;
                        float* gk = gin + (bi * t + j) * w3 + ko;
                        for (std::int64_t dd = 0; dd < hd; ++dd) {
                            gq[dd] += ds * k[dd];
                            gk[dd] += ds * q[dd];
                        }
                    }
                }
            }
        }
    });
    return out;
}

// --- convolution -------------------------------------------------------------

namespace {

struct ConvDims {
    std::int64_t b, c, h, w, o, kh, kw, oh, ow;
};

ConvDims conv_dims(const Tensor& x, const Tensor& wt, int stride, int pad) {
    if (x.rank() != 4 || wt.rank() != 4)
        throw ShapeError("conv2d: need x [B,C,H,W] and w [O,C,KH,KW]");
    ConvDims d{};
    d.b = x.shape()[0];
    d.c = x.shape()[1];
    d.h = x.shape()[2];
    d.w = x.shape()[3];
    d.o = wt.shape()[0];
    d.kh = wt.shape()[2];
    d.kw = wt.shape()[3];
    if (wt.shape()[1] != d.c)
        throw ShapeError("conv2d: channel mismatch " + shape_str(x.shape()) + " vs " +
                         shape_str(wt.shape()));
    if (stride < 1) throw ContractError("conv2d: stride must be >= 1");
    d.oh = (d.h + 2 * pad - d.kh) / stride + 1;
    d.ow = (d.w + 2 * pad - d.kw) / stride + 1;
    if (d.oh < 1 || d.ow < 1) throw ShapeError("conv2d: empty output map");
    return d;
}

// Patch matrix: one row per output site, one column per (c,kh,kw) tap.
void im2col(const float* x, const ConvDims& d, int stride, int pad, float* cols) {
    const std::int64_t patch = d.c * d.kh * d.kw;
    for (std::int64_t bi = 0; bi < d.b; ++bi)
        for (std::int64_t oy = 0; oy < d.oh; ++oy)
            for (std::int64_t ox = 0; ox < d.ow; ++ox) {
                float* row = cols + ((bi * d.oh + oy) * d.ow + ox) * patch;
                std::int64_t col = 0;
                for (std::int64_t c = 0; c < d.c; ++c)
                    for (std::int64_t ky = 0; ky < d.kh; ++ky)
                        for (std::int64_t kx = 0; kx < d.kw; ++kx, ++col) {
                            const std::int64_t iy = oy * stride + ky - pad;
                            const std::int64_t ix = ox * stride + kx - pad;
                            row[col] = (iy < 0 || iy >= d.h || ix < 0 || ix >= d.w)
                                           ? 0.0f
                                           : x[((bi * d.c + c) * d.h + iy) * d.w + ix];
                        }
            }
}

void col2im_add(const float* cols, const ConvDims& d, int stride, int pad, float* gx) {
    const std::int64_t patch = d.c * d.kh * d.kw;
    for (std::int64_t bi = 0; bi < d.b; ++bi)
        for (std::int64_t oy = 0; oy < d.oh; ++oy)
            for (std::int64_t ox = 0; ox < d.ow; ++ox) {
                const float* row = cols + ((bi * d.oh + oy) * d.ow + ox) * patch;
                std::int64_t col = 0;
                for (std::int64_t c = 0; c < d.c; ++c)
                    for (std::int64_t ky = 0; ky < d.kh; ++ky)
                        for (std::int64_t kx = 0; kx < d.kw; ++kx, ++col) {
                            const std::int64_t iy = oy * stride + ky - pad;
                            const std::int64_t ix = ox * stride + kx - pad;
                            if (iy < 0 || iy >= d.h || ix < 0 || ix >= d.w) continue;
                            gx[((bi * d.c + c) * d.h + iy) * d.w + ix] += row[col];
                        }
            }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad) {
    const ConvDims d = conv_dims(x, w, stride, pad);
    if (bias.rank() != 1 || bias.numel() != d.o)
        throw ShapeError("conv2d: bias must have one entry per output channel");
    const std::int64_t patch = d.c * d.kh * d.kw;
    const std::int64_t sites = d.b * d.oh * d.ow;
    auto cols = std::make_shared<std::vector<float>>(static_cast<std::size_t>(sites * patch));
    im2col(x.data(), d, stride, pad, cols->data());

    // sites x patch times patch x O, then scatter into channel-major layout.
    EMat prod(sites, d.o);
    prod.noalias() = ECMap(cols->data(), sites, patch) *
                     ECMap(w.data(), d.o, patch).transpose();
    Tensor out = Tensor::zeros({d.b, d.o, d.oh, d.ow});
    for (std::int64_t bi = 0; bi < d.b; ++bi)
        for (std::int64_t oy = 0; oy < d.oh; ++oy)
            for (std::int64_t ox = 0; ox < d.ow; ++ox) {
                const std::int64_t row = (bi * d.oh + oy) * d.ow + ox;
                for (std::int64_t oc = 0; oc < d.o; ++oc)
                    out.data()[((bi * d.o + oc) * d.oh + oy) * d.ow + ox] =
                        prod(row, oc) + bias.data()[oc];
            }

    attach(out, {x, w, bias}, [x, w, bias, d, stride, pad, cols, patch, sites](const Tensor& o) {
        const float* g = o.impl_ptr()->grad.data();
        // Gather output grads back into site-major rows.
        EMat gm(sites, d.o);
        for (std::int64_t bi = 0; bi < d.b; ++bi)
            for (std::int64_t oy = 0; oy < d.oh; ++oy)
                for (std::int64_t ox = 0; ox < d.ow; ++ox) {
                    const std::int64_t row = (bi * d.oh + oy) * d.ow + ox;
                    for (std::int64_t oc = 0; oc < d.o; ++oc)
                        gm(row, oc) = g[((bi * d.o + oc) * d.oh + oy) * d.ow + ox];
                }
        if (bias.tracked()) {
            float* gb = grad_of(bias);
            for (std::int64_t oc = 0; oc < d.o; ++oc) {
                double acc = 0.0;
                for (std::int64_t r = 0; r < sites; ++r) acc += gm(r, oc);
                gb[oc] += static_cast<float>(acc);
            }
        }
        if (w.tracked()) {
            w.impl_ptr()->ensure_grad();
            EMap(w.impl_ptr()->grad.data(), d.o, patch).noalias() +=
                gm.transpose() * ECMap(cols->data(), sites, patch);
        }
        if (x.tracked()) {
            EMat dcols(sites, patch);
            dcols.noalias() = gm * ECMap(w.data(), d.o, patch);
            x.impl_ptr()->ensure_grad();
            col2im_add(dcols.data(), d, stride, pad, x.impl_ptr()->grad.data());
        }
    });
    return out;
}

Tensor global_avg_pool(const Tensor& x) {
    if (x.rank() != 4) throw ShapeError("global_avg_pool: need [B,C,H,W]");
    const std::int64_t b = x.shape()[0], c = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
    Tensor out = Tensor::zeros({b, c});
    const float inv = 1.0f / static_cast<float>(hw);
    for (std::int64_t i = 0; i < b * c; ++i) {
        double acc = 0.0;
        const float* src = x.data() + i * hw;
        for (std::int64_t j = 0; j < hw; ++j) acc += src[j];
        out.data()[i] = static_cast<float>(acc) * inv;
    }
    attach(out, {x}, [x, b, c, hw, inv](const Tensor& o) {
        if (!x.tracked()) return;
        const float* g = o.impl_ptr()->grad.data();
        float* gx = grad_of(x);
        for (std::int64_t i = 0; i < b * c; ++i) {
            const float gv = g[i] * inv;
            float* dst = gx + i * hw;
            for (std::int64_t j = 0; j < hw; ++j) dst[j] += gv;
        }
    });
    return out;
}

Tensor channels_to_rows(const Tensor& x) {
    if (x.rank() != 4) throw ShapeError("channels_to_rows: need [B,C,H,W]");
    const std::int64_t b = x.shape()[0], c = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
    Tensor out = Tensor::zeros({b * hw, c});
    for (std::int64_t bi = 0; bi < b; ++bi)
        for (std::int64_t ci = 0; ci < c; ++ci) {
            const float* src = x.data() + (bi * c + ci) * hw;
            for (std::int64_t s = 0; s < hw; ++s) out.data()[(bi * hw + s) * c + ci] = src[s];
        }
    attach(out, {x}, [x, b, c, hw](const Tensor& o) {
        if (!x.tracked()) return;
        const float* g = o.impl_ptr()->grad.data();
        float* gx = grad_of(x);
        for (std::int64_t bi = 0; bi < b; ++bi)
            for (std::int64_t ci = 0; ci < c; ++ci) {
                float* dst = gx + (bi * c + ci) * hw;
                for (std::int64_t s = 0; s < hw; ++s) dst[s] += g[(bi * hw + s) * c + ci];
            }
    });
    return out;
}

// --- loss --------------------------------------------------------------------

Tensor softmax_ce(const Tensor& logits, const std::vector<std::int32_t>& targets,
                  std::int32_t ignore_index) {
    if (logits.rank() != 2) throw ShapeError("softmax_ce: logits must be [N,C]");
    const std::int64_t n = logits.shape()[0], c = logits.shape()[1];
    if (static_cast<std::int64_t>(targets.size()) != n)
        throw ShapeError("softmax_ce: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(n) + " rows");
    std::int64_t kept = 0;
    for (std::int32_t tg : targets) {
        if (tg == ignore_index) continue;
        if (tg < 0 || tg >= c)
            throw ContractError("softmax_ce: target " + std::to_string(tg) + " outside " +
                                std::to_string(c) + " classes");
        ++kept;
    }
    if (kept == 0) throw DegenerateBatchError("softmax_ce: every target ignored");

    double loss = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        if (targets[static_cast<std::size_t>(i)] == ignore_index) continue;
        const float* row = logits.data() + i * c;
        float mx = row[0];
        for (std::int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (std::int64_t j = 0; j < c; ++j) z += std::exp(static_cast<double>(row[j] - mx));
        loss += std::log(z) + mx - row[targets[static_cast<std::size_t>(i)]];
    }
    Tensor out = Tensor::scalar(static_cast<float>(loss / static_cast<double>(kept)));

    auto tg = std::make_shared<std::vector<std::int32_t>>(targets);
    attach(out, {logits}, [logits, tg, n, c, kept, ignore_index](const Tensor& o) {
        if (!logits.tracked()) return;
        const float g = o.impl_ptr()->grad[0];
        float* gl = grad_of(logits);
        const float invk = g / static_cast<float>(kept);
        for (std::int64_t i = 0; i < n; ++i) {
            const std::int32_t t = (*tg)[static_cast<std::size_t>(i)];
            if (t == ignore_index) continue;
            const float* row = logits.data() + i * c;
            float mx = row[0];
            for (std::int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
            double z = 0.0;
            for (std::int64_t j = 0; j < c; ++j) z += std::exp(static_cast<double>(row[j] - mx));
            for (std::int64_t j = 0; j < c; ++j) {
                const float p =
                    static_cast<float>(std::exp(static_cast<double>(row[j] - mx)) / z);
                gl[i * c + j] += invk * (p - (j == t ? 1.0f : 0.0f));
            }
        }
    });
    return out;
}

std::vector<std::int32_t> argmax_rows(const Tensor& logits) {
    if (logits.rank() != 2) throw ShapeError("argmax_rows: need [N,C]");
    const std::int64_t n = logits.shape()[0], c = logits.shape()[1];
    std::vector<std::int32_t> out(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        const float* row = logits.data() + i * c;
        std::int64_t best = 0;
        for (std::int64_t j = 1; j < c; ++j)
            if (row[j] > row[best]) best = j;
        out[static_cast<std::size_t>(i)] = static_cast<std::int32_t>(best);
    }
    return out;
}

}  // namespace cptlab
