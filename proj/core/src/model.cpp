// SPDX-License-Identifier: Apache-2.0
#include "cptlab/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "cptlab/common.hpp"
#include "cptlab/rng.hpp"

namespace cptlab {

std::string family_name(Family f) { return f == Family::kTransformer ? "transformer" : "cnn"; }

Family family_from_name(const std::string& s) {
    if (s == "transformer") return Family::kTransformer;
    if (s == "cnn") return Family::kCnn;
    throw SpecError("unknown model family: " + s);
}

std::string head_name(HeadKind k) {
    switch (k) {
        case HeadKind::kNone: return "none";
        case HeadKind::kMlm: return "mlm";
        case HeadKind::kMim: return "mim";
        case HeadKind::kClf: return "clf";
        case HeadKind::kProbe: return "probe";
    }
    throw ContractError("unreachable head kind");
}

HeadKind head_from_name(const std::string& s) {
    if (s == "none") return HeadKind::kNone;
    if (s == "mlm") return HeadKind::kMlm;
    if (s == "mim") return HeadKind::kMim;
    if (s == "clf") return HeadKind::kClf;
    if (s == "probe") return HeadKind::kProbe;
    throw ContractError("unknown head kind: " + s);
}

void ModelSpec::validate() const {
    if (depth < 1) throw SpecError("model: depth must be >= 1");
    if (width < 1) throw SpecError("model: width must be >= 1");
    if (family == Family::kTransformer) {
        if (heads < 1 || width % heads != 0)
            throw SpecError("model: width " + std::to_string(width) + " not divisible by " +
                            std::to_string(heads) + " heads");
        // 0 defers the size to a vocabulary trained later; build requires it resolved.
        if (vocab_size != 0 && vocab_size < 5)
            throw SpecError("model: vocab must hold the 4 specials plus content");
        if (max_sequence < 2) throw SpecError("model: sequence must fit cls plus content");
    } else {
        if (channels < 1) throw SpecError("model: channels must be >= 1");
        if (image_size < 2) throw SpecError("model: image size must be >= 2");
    }
}

nlohmann::json ModelSpec::to_json() const {
    return {{"family", family_name(family)}, {"depth", depth},
            {"width", width},               {"heads", heads},
            {"vocab_size", vocab_size},     {"max_sequence", max_sequence},
            {"channels", channels},         {"image_size", image_size}};
}

ModelSpec ModelSpec::from_json(const nlohmann::json& j) {
    ModelSpec s;
    s.family = family_from_name(j.at("family").get<std::string>());
    s.depth = j.value("depth", s.depth);
    s.width = j.value("width", s.width);
    s.heads = j.value("heads", s.heads);
    s.vocab_size = j.value("vocab_size", s.vocab_size);
    s.max_sequence = j.value("max_sequence", s.max_sequence);
    s.channels = j.value("channels", s.channels);
    s.image_size = j.value("image_size", s.image_size);
    s.validate();
    return s;
}

namespace {

// Initialization rule keyed by name: weights and embedding tables get
// truncated normal sigma=0.02, biases zeros, norm gains ones. Each parameter
// draws from its own name-derived stream so init is order-independent.
Tensor init_param(const std::string& name, Shape shape, const Rng& base) {
    Tensor t = Tensor::zeros(std::move(shape), true);
    const bool gain = name.size() >= 2 && name.compare(name.size() - 2, 2, "_g") == 0;
    const bool bias = name.size() >= 2 && name.compare(name.size() - 2, 2, "_b") == 0;
    if (gain) {
        std::fill(t.vec().begin(), t.vec().end(), 1.0f);
    } else if (!bias) {
        Rng rng = base.derive(name);
        for (auto& v : t.vec()) v = static_cast<float>(rng.truncated_gaussian(0.02));
    }
    return t;
}

// Output spatial extent of the stride-2 3x3 pad-1 conv stack.
std::int64_t cnn_grid(const ModelSpec& spec) {
    std::int64_t n = spec.image_size;
    for (int d = 0; d < spec.depth; ++d) n = (n + 2 - 3) / 2 + 1;
    return n;
}

// Plain pooled copies for activation taps; deliberately not tape ops.
Tensor cls_pool(const Tensor& x) {
    const std::int64_t b = x.shape()[0], t = x.shape()[1], w = x.shape()[2];
    Tensor out = Tensor::zeros({b, w});
    for (std::int64_t i = 0; i < b; ++i)
        std::memcpy(out.data() + i * w, x.data() + i * t * w,
                    static_cast<std::size_t>(w) * sizeof(float));
    return out;
}

Tensor mean_pool_valid(const Tensor& x, const std::vector<std::uint8_t>& valid) {
    const std::int64_t b = x.shape()[0], t = x.shape()[1], w = x.shape()[2];
    Tensor out = Tensor::zeros({b, w});
    for (std::int64_t i = 0; i < b; ++i) {
        std::int64_t n = 0;
        for (std::int64_t j = 0; j < t; ++j) {
            if (!valid[static_cast<std::size_t>(i * t + j)]) continue;
            ++n;
            const float* src = x.data() + (i * t + j) * w;
            float* dst = out.data() + i * w;
            for (std::int64_t k = 0; k < w; ++k) dst[k] += src[k];
        }
        const float inv = 1.0f / static_cast<float>(n);  // cls is always valid
        for (std::int64_t k = 0; k < w; ++k) out.data()[i * w + k] *= inv;
    }
    return out;
}

Tensor gap_pool(const Tensor& x) {
    const std::int64_t b = x.shape()[0], c = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
    Tensor out = Tensor::zeros({b, c});
    const float inv = 1.0f / static_cast<float>(hw);
    for (std::int64_t i = 0; i < b * c; ++i) {
        double acc = 0.0;
        const float* src = x.data() + i * hw;
        for (std::int64_t j = 0; j < hw; ++j) acc += src[j];
        out.data()[i] = static_cast<float>(acc) * inv;
    }
    return out;
}

Tensor linear3d(const Tensor& x, const Tensor& w, const Tensor& b) {
    const std::int64_t bb = x.shape()[0], t = x.shape()[1];
    Tensor flat = reshape(x, {bb * t, x.shape()[2]});
    Tensor y = add_bias(matmul(flat, w), b);
    return reshape(y, {bb, t, y.shape()[1]});
}

}  // namespace

Model Model::build(const ModelSpec& spec, std::uint64_t seed) {
    spec.validate();
    if (spec.family == Family::kTransformer && spec.vocab_size == 0)
        throw SpecError("model: vocab size unresolved, train a vocabulary first");
    Model m;
    m.spec = spec;
    const Rng base = Rng(seed).derive("init");
    auto p = [&](const std::string& name, Shape shape) {
        m.params.push_back({name, init_param(name, std::move(shape), base)});
    };
    const std::int64_t w = spec.width;
    if (spec.family == Family::kTransformer) {
        p("tok_emb", {spec.vocab_size, w});
        p("pos_emb", {spec.max_sequence, w});
        for (int d = 0; d < spec.depth; ++d) {
            const std::string b = "block" + std::to_string(d) + ".";
            p(b + "ln1_g", {w});
            p(b + "ln1_b", {w});
            p(b + "qkv_w", {w, 3 * w});
            p(b + "qkv_b", {3 * w});
            p(b + "proj_w", {w, w});
            p(b + "proj_b", {w});
            p(b + "ln2_g", {w});
            p(b + "ln2_b", {w});
            p(b + "fc1_w", {w, 4 * w});
            p(b + "fc1_b", {4 * w});
            p(b + "fc2_w", {4 * w, w});
            p(b + "fc2_b", {w});
        }
        p("lnf_g", {w});
        p("lnf_b", {w});
    } else {
        for (int d = 0; d < spec.depth; ++d) {
            const std::string b = "block" + std::to_string(d) + ".";
            p(b + "conv_w", {w, d == 0 ? spec.channels : w, 3, 3});
            p(b + "conv_b", {w});
        }
    }
    return m;
}

std::vector<std::string> Model::tap_names() const {
    std::vector<std::string> names;
    if (spec.family == Family::kTransformer) names.push_back("embed");
    for (int d = 0; d < spec.depth; ++d) names.push_back("block" + std::to_string(d));
    return names;
}

const Tensor& Model::param(const std::string& name) const {
    for (const auto& nt : params)
        if (nt.name == name) return nt.t;
    throw ContractError("model: no parameter named " + name);
}

bool Model::has_param(const std::string& name) const {
    for (const auto& nt : params)
        if (nt.name == name) return true;
    return false;
}

std::vector<Tensor> Model::parameters() const {
    std::vector<Tensor> out;
    out.reserve(params.size());
    for (const auto& nt : params) out.push_back(nt.t);
    return out;
}

std::vector<Tensor> Model::body_parameters() const {
    std::vector<Tensor> out;
    for (const auto& nt : params)
        if (nt.name.rfind("head.", 0) != 0) out.push_back(nt.t);
    return out;
}

std::vector<Tensor> Model::head_parameters() const {
    std::vector<Tensor> out;
    for (const auto& nt : params)
        if (nt.name.rfind("head.", 0) == 0) out.push_back(nt.t);
    return out;
}

std::vector<Tensor> Model::trainable_parameters() const {
    return head.kind == HeadKind::kProbe ? head_parameters() : parameters();
}

std::uint64_t Model::body_hash() const {
    std::uint64_t h = kFnvOffset;
    for (const auto& nt : params) {
        if (nt.name.rfind("head.", 0) == 0) continue;
        h = fnv1a(nt.name, h);
        for (auto e : nt.t.shape()) h = hash_combine(h, static_cast<std::uint64_t>(e));
        h = fnv1a(nt.t.data(), static_cast<std::size_t>(nt.t.numel()) * sizeof(float), h);
    }
    return h;
}

std::int64_t Model::param_numel() const {
    std::int64_t n = 0;
    for (const auto& nt : params) n += nt.t.numel();
    return n;
}

Model Model::clone() const {
    Model m;
    m.spec = spec;
    m.head = head;
    m.params.reserve(params.size());
    for (const auto& nt : params) {
        Tensor t = nt.t.clone();
        t.set_requires_grad(true);
        m.params.push_back({nt.name, t});
    }
    return m;
}

void Model::init_head_params(std::uint64_t seed) {
    const Rng base = Rng(seed).derive("head");
    const std::int64_t w = spec.width;
    switch (head.kind) {
        case HeadKind::kMlm:
            // Output projection is tied to tok_emb; only the bias is owned.
            params.push_back({"head.out_b", init_param("head.out_b", {spec.vocab_size}, base)});
            head.k = spec.vocab_size;
            break;
        case HeadKind::kMim:
        case HeadKind::kClf:
        case HeadKind::kProbe:
            params.push_back({"head.lin_w", init_param("head.lin_w", {w, head.k}, base)});
            params.push_back({"head.lin_b", init_param("head.lin_b", {head.k}, base)});
            break;
        case HeadKind::kNone:
            break;
    }
}

void Model::replace_head(HeadKind kind, int k, std::uint64_t seed) {
    if (kind == HeadKind::kMlm && spec.family != Family::kTransformer)
        throw HeadError("mlm head requires a transformer");
    if (kind == HeadKind::kMim && spec.family != Family::kCnn)
        throw HeadError("mim head requires a cnn");
    if ((kind == HeadKind::kClf || kind == HeadKind::kProbe || kind == HeadKind::kMim) && k < 1)
        throw ContractError("head: output arity must be >= 1");
    params.erase(std::remove_if(params.begin(), params.end(),
                                [](const NamedTensor& nt) {
                                    return nt.name.rfind("head.", 0) == 0;
                                }),
                 params.end());
    head.kind = kind;
    head.k = k;
    init_head_params(seed);
}

void Model::expand_embeddings(int n_new, std::uint64_t seed) {
    if (spec.family != Family::kTransformer)
        throw SpecError("expand_embeddings: model has no token table");
    if (n_new < 0) throw ContractError("expand_embeddings: n_new must be >= 0");
    if (n_new == 0) return;
    const std::int64_t v = spec.vocab_size, w = spec.width;
    const Tensor& old = param("tok_emb");
    Tensor grown = Tensor::zeros({v + n_new, w}, true);
    std::memcpy(grown.data(), old.data(), static_cast<std::size_t>(v * w) * sizeof(float));
    // New rows: column means of the existing table plus small noise.
    std::vector<double> mean(static_cast<std::size_t>(w), 0.0);
    for (std::int64_t r = 0; r < v; ++r)
        for (std::int64_t c = 0; c < w; ++c)
            mean[static_cast<std::size_t>(c)] += old.data()[r * w + c];
    for (auto& m : mean) m /= static_cast<double>(v);
    Rng rng = Rng(seed).derive("expand_embeddings");
    for (std::int64_t r = v; r < v + n_new; ++r)
        for (std::int64_t c = 0; c < w; ++c)
            grown.data()[r * w + c] = static_cast<float>(mean[static_cast<std::size_t>(c)] +
                                                         rng.gaussian() * 0.02);
    for (auto& nt : params)
        if (nt.name == "tok_emb") nt.t = grown;
    spec.vocab_size += n_new;
    if (head.kind == HeadKind::kMlm) {
        const Tensor& ob = param("head.out_b");
        Tensor grown_b = Tensor::zeros({v + n_new}, true);
        std::memcpy(grown_b.data(), ob.data(), static_cast<std::size_t>(v) * sizeof(float));
        for (auto& nt : params)
            if (nt.name == "head.out_b") nt.t = grown_b;
        head.k = spec.vocab_size;
    }
}

ForwardOut Model::forward_tokens(const IntMatrix& tokens, bool want_logits, bool want_taps) const {
    if (spec.family != Family::kTransformer)
        throw SpecError("forward_tokens: model is not a transformer");
    return run_transformer(tokens, want_logits, want_taps);
}

ForwardOut Model::forward_images(const Tensor& images, bool want_logits, bool want_taps) const {
    if (spec.family != Family::kCnn) throw SpecError("forward_images: model is not a cnn");
    return run_cnn(images, want_logits, want_taps);
}

ForwardOut Model::run_transformer(const IntMatrix& ids, bool want_logits, bool want_taps) const {
    const std::int64_t b = ids.rows, t = ids.cols, w = spec.width;
    if (t != spec.max_sequence)
        throw ShapeError("forward: batch is " + std::to_string(t) + " long, spec wants " +
                         std::to_string(spec.max_sequence));
    if (b < 1) throw ShapeError("forward: empty batch");

    std::vector<std::uint8_t> valid(static_cast<std::size_t>(b * t));
    for (std::int64_t i = 0; i < b * t; ++i)
        valid[static_cast<std::size_t>(i)] = ids.v[static_cast<std::size_t>(i)] != 0 ? 1 : 0;
    IntMatrix pos(b, t);
    for (std::int64_t i = 0; i < b; ++i)
        for (std::int64_t j = 0; j < t; ++j) pos.at(i, j) = static_cast<std::int32_t>(j);

    ForwardOut out;
    Tensor x = add(embedding(param("tok_emb"), ids), embedding(param("pos_emb"), pos));
    if (want_taps) out.taps.emplace_back("embed", mean_pool_valid(x, valid));

    for (int d = 0; d < spec.depth; ++d) {
        const std::string bp = "block" + std::to_string(d) + ".";
        Tensor h = layer_norm(x, param(bp + "ln1_g"), param(bp + "ln1_b"));
        Tensor qkv = linear3d(h, param(bp + "qkv_w"), param(bp + "qkv_b"));
        Tensor att = mha_core(qkv, spec.heads, valid);
        x = add(x, linear3d(att, param(bp + "proj_w"), param(bp + "proj_b")));
        Tensor h2 = layer_norm(x, param(bp + "ln2_g"), param(bp + "ln2_b"));
        Tensor mid = gelu(linear3d(h2, param(bp + "fc1_w"), param(bp + "fc1_b")));
        x = add(x, linear3d(mid, param(bp + "fc2_w"), param(bp + "fc2_b")));
        if (want_taps) out.taps.emplace_back("block" + std::to_string(d), cls_pool(x));
    }

    if (!want_logits) return out;
    if (head.kind == HeadKind::kNone) throw HeadError("forward: logits requested with no head");
    Tensor xf = layer_norm(x, param("lnf_g"), param("lnf_b"));
    switch (head.kind) {
        case HeadKind::kMlm:
            out.logits = add_bias(
                matmul(reshape(xf, {b * t, w}), transpose2d(param("tok_emb"))),
                param("head.out_b"));
            break;
        case HeadKind::kClf:
            out.logits = add_bias(matmul(take_position(xf, 0), param("head.lin_w")), param("head.lin_b"));
            break;
        case HeadKind::kProbe:
            // Probe reads the final tap: pre-final-norm block output.
            out.logits = add_bias(matmul(take_position(x, 0), param("head.lin_w")), param("head.lin_b"));
            break;
        default:
            throw HeadError("forward: head kind not valid for a transformer");
    }
    return out;
}

ForwardOut Model::run_cnn(const Tensor& images, bool want_logits, bool want_taps) const {
    if (images.rank() != 4 || images.shape()[1] != spec.channels ||
        images.shape()[2] != spec.image_size || images.shape()[3] != spec.image_size)
        throw ShapeError("forward: image batch " + shape_str(images.shape()) +
                         " does not match spec");
    ForwardOut out;
    Tensor x = images;
    for (int d = 0; d < spec.depth; ++d) {
        const std::string bp = "block" + std::to_string(d) + ".";
        x = relu(conv2d(x, param(bp + "conv_w"), param(bp + "conv_b"), 2, 1));
        if (want_taps) out.taps.emplace_back("block" + std::to_string(d), gap_pool(x));
    }
    if (!want_logits) return out;
    if (head.kind == HeadKind::kNone) throw HeadError("forward: logits requested with no head");
    switch (head.kind) {
        case HeadKind::kClf:
        case HeadKind::kProbe:
            // The final tap and the head representation coincide for the cnn.
            out.logits = add_bias(matmul(global_avg_pool(x), param("head.lin_w")), param("head.lin_b"));
            break;
        case HeadKind::kMim:
            // Per-site code logits over the last feature map; row order is
            // batch-major then site-major, matching the corruption targets.
            out.logits = add_bias(matmul(channels_to_rows(x), param("head.lin_w")), param("head.lin_b"));
            break;
        default:
            throw HeadError("forward: head kind not valid for a cnn");
    }
    return out;
}

std::int64_t param_count(const ModelSpec& spec, const Head& head) {
    const std::int64_t w = spec.width, d = spec.depth;
    std::int64_t body;
    if (spec.family == Family::kTransformer) {
        body = static_cast<std::int64_t>(spec.vocab_size) * w +
               static_cast<std::int64_t>(spec.max_sequence) * w + d * (12 * w * w + 13 * w) +
               2 * w;
    } else {
        body = 9 * w * spec.channels + w + (d - 1) * (9 * w * w + w);
    }
    std::int64_t h = 0;
    switch (head.kind) {
        case HeadKind::kNone: h = 0; break;
        case HeadKind::kMlm: h = spec.vocab_size; break;
        default: h = w * static_cast<std::int64_t>(head.k) + head.k; break;
    }
    return body + h;
}

// --- snapshot container -------------------------------------------------

namespace {

void write_u64(std::ostream& out, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t read_u64(std::istream& in) {
    unsigned char b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    if (!in) throw IoError("container: truncated header");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

}  // namespace

void save_container(const std::string& path, const nlohmann::json& meta,
                    const std::vector<NamedTensor>& tensors) {
    nlohmann::json m = meta;
    nlohmann::json tl = nlohmann::json::array();
    for (const auto& nt : tensors) {
        nlohmann::json e;
        e["name"] = nt.name;
        e["shape"] = nt.t.shape();
        tl.push_back(e);
    }
    m["tensors"] = tl;
    const std::string body = m.dump();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("container: cannot open " + path + " for writing");
    out.write(kContainerMagic, sizeof(kContainerMagic));
    write_u64(out, body.size());
    out.write(body.data(), static_cast<std::streamsize>(body.size()));
    for (const auto& nt : tensors) write_tensor(out, nt.t);
    if (!out) throw IoError("container: write failed for " + path);
}

std::pair<nlohmann::json, std::vector<NamedTensor>> load_container(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("container: cannot open " + path);
    char magic[sizeof(kContainerMagic)];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kContainerMagic, sizeof(magic)) != 0)
        throw IoError("container: bad magic in " + path);
    const std::uint64_t len = read_u64(in);
    std::string body(len, '\0');
    in.read(body.data(), static_cast<std::streamsize>(len));
    if (!in) throw IoError("container: truncated manifest in " + path);
    nlohmann::json meta = nlohmann::json::parse(body);
    std::vector<NamedTensor> tensors;
    for (const auto& e : meta.at("tensors")) {
        NamedTensor nt;
        nt.name = e.at("name").get<std::string>();
        nt.t = read_tensor(in);
        tensors.push_back(std::move(nt));
    }
    return {std::move(meta), std::move(tensors)};
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    nlohmann::json meta;
    meta["kind"] = "checkpoint";
    meta["spec"] = ckpt.model.spec.to_json();
    meta["head"] = {{"kind", head_name(ckpt.model.head.kind)}, {"k", ckpt.model.head.k}};
    meta["provenance"] = ckpt.provenance;
    meta["parent_body_hash"] = to_hex(ckpt.parent_body_hash);
    meta["body_hash"] = to_hex(ckpt.model.body_hash());
    meta["extra"] = ckpt.extra;
    save_container(path, meta, ckpt.model.params);
}

Checkpoint load_checkpoint(const std::string& path) {
    auto [meta, tensors] = load_container(path);
    if (meta.value("kind", "") != "checkpoint") throw IoError("not a checkpoint: " + path);
    Checkpoint c;
    c.model.spec = ModelSpec::from_json(meta.at("spec"));
    c.model.head.kind = head_from_name(meta.at("head").at("kind").get<std::string>());
    c.model.head.k = meta.at("head").at("k").get<int>();
    for (auto& nt : tensors) {
        nt.t.set_requires_grad(true);
        c.model.params.push_back(std::move(nt));
    }
    c.provenance = meta.at("provenance").get<std::string>();
    c.parent_body_hash = std::stoull(meta.at("parent_body_hash").get<std::string>(), nullptr, 16);
    c.extra = meta.value("extra", nlohmann::json::object());
    if (c.model.param_numel() != param_count(c.model.spec, c.model.head))
        throw IoError("checkpoint: parameter payload does not match spec: " + path);
    const std::uint64_t want = std::stoull(meta.at("body_hash").get<std::string>(), nullptr, 16);
    if (c.model.body_hash() != want) throw IoError("checkpoint: body hash mismatch: " + path);
    return c;
}

}  // namespace cptlab
