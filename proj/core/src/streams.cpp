// SPDX-License-Identifier: Apache-2.0
#include "cptlab/streams.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <unordered_map>
#include <unordered_set>

#include "cptlab/common.hpp"
#include "cptlab/model.hpp"

namespace cptlab {
namespace {

// Key for structural randomness (tilts) that is part of the language
// definition, not of any particular sampling run.
constexpr std::uint64_t kTiltKey = 0x7C1F2E3D4B5A6978ULL;
constexpr int kDedupeRetries = 200;

std::string fmt(const char* f, int a, int b = -1) {
    char buf[32];
    if (b < 0)
        std::snprintf(buf, sizeof(buf), f, a);
    else
        std::snprintf(buf, sizeof(buf), f, a, b);
    return buf;
}

std::vector<double> zipf_probs(int n) {
    std::vector<double> p(static_cast<std::size_t>(n));
    double s = 0.0;
    for (int i = 0; i < n; ++i) {
        p[static_cast<std::size_t>(i)] = 1.0 / (i + 10);
        s += p[static_cast<std::size_t>(i)];
    }
    for (auto& v : p) v /= s;
    return p;
}

std::vector<std::string> base_words(int n) {
    std::vector<std::string> w;
    w.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) w.push_back(fmt("w%03d", i));
    return w;
}

enum class TiltLaw { kBaseDomain, kStreamClass, kFcClass };

UnigramModel tilted_base(const StreamConfig& cfg, TiltLaw law, int id) {
    UnigramModel m;
    m.words = base_words(cfg.base_vocab_words);
    m.probs = zipf_probs(cfg.base_vocab_words);
    const char* kind = law == TiltLaw::kBaseDomain ? "base"
                       : law == TiltLaw::kStreamClass ? "class"
                                                      : "fc";
    Rng tr = Rng(kTiltKey).derive(kind).derive(static_cast<std::uint64_t>(id));
    double s = 0.0;
    for (auto& p : m.probs) {
        const double u = tr.next_double();
        double f = 1.0;
        switch (law) {
            case TiltLaw::kBaseDomain: f = 1.0 + 0.25 * u; break;
            case TiltLaw::kStreamClass: f = 1.0 + cfg.tilt * u; break;
            case TiltLaw::kFcClass: f = std::pow(2.0, cfg.fc_tilt * u); break;
        }
        p *= f;
        s += p;
    }
    for (auto& p : m.probs) p /= s;
    return m;
}

// Mixture of a (renormalized) base component and class-specific words that
// take a fixed share of the probability mass.
UnigramModel with_specific_words(UnigramModel base_part, double mass, const std::string& prefix,
                                 int n_words) {
    for (auto& p : base_part.probs) p *= 1.0 - mass;
    const auto spec = zipf_probs(n_words);
    for (int j = 0; j < n_words; ++j) {
        base_part.words.push_back(prefix + fmt("w%02d", j));
        base_part.probs.push_back(mass * spec[static_cast<std::size_t>(j)]);
    }
    return base_part;
}

struct Deduper {
    std::unordered_set<std::uint64_t> seen;
    int misses = 0;
    bool accept(std::uint64_t h) {
        if (seen.insert(h).second) {
            misses = 0;
            return true;
        }
        if (++misses > kDedupeRetries)
            throw CapacityError("stream generation: requested sizes exceed generator capacity");
        return false;
    }
};

// --- image renderers ---------------------------------------------------------

struct ShapeParams {
    double cx, cy, radius, intensity;
    int shape;       // 0 disk, 1 square, 2 diamond
    bool striped;
    int period;      // stripe period in pixels
    int color;       // channel weighting family for RGB output
};

ShapeParams stream_params(int global_class) {
    const int r = global_class;
    ShapeParams p;
    p.cx = 8.0 + 16.0 * (r % 2);
    p.cy = 4.0 + 6.0 * (r / 2);
    p.radius = 5.0 + r % 3;
    p.intensity = 0.55 + 0.05 * (r % 4);
    p.shape = (r / 2) % 3;
    p.striped = (r % 2) == 1;
    p.period = 3 + r % 2;
    p.color = r % 3;
    return p;
}

ShapeParams fc_params(int f, bool base_band) {
    ShapeParams p;
    p.cx = 10.0 + 12.0 * (f % 2);
    p.cy = 10.0 + 12.0 * (f / 2);
    p.radius = 6.0;
    // Base and forgetting-control share geometry; only the intensity band
    // differs, so the base distribution stays close to the control one while
    // their samples can never coincide.
    p.intensity = (base_band ? 0.72 : 0.45) + 0.03 * f;
    p.shape = f % 3;
    p.striped = false;
    p.period = 3;
    p.color = f % 3;
    return p;
}

Tensor render_shape(const StreamConfig& cfg, ShapeParams p, Rng& rng) {
    const int s = cfg.image_size, c = cfg.channels;
    const double sc = s / 32.0, jit = cfg.jitter;
    // Every jitter draw happens unconditionally so a zero-jitter render is
    // the exact center of the class distribution.
    const double cx = (p.cx + jit * 2.0 * (2.0 * rng.next_double() - 1.0)) * sc;
    const double cy = (p.cy + jit * 2.0 * (2.0 * rng.next_double() - 1.0)) * sc;
    const double rad = (p.radius + jit * (2.0 * rng.next_double() - 1.0)) * sc;
    const double inten = p.intensity + jit * 0.05 * (2.0 * rng.next_double() - 1.0);
    const double phase = jit * rng.next_double() * p.period;

    static const double kColorWt[3][3] = {{1.0, 0.6, 0.3}, {0.3, 1.0, 0.6}, {0.6, 0.3, 1.0}};
    Tensor out = Tensor::zeros({c, s, s});
    for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) {
            const double u = rng.next_double();  // one noise draw per pixel
            const double dx = x - cx, dy = y - cy;
            bool inside = false;
            switch (p.shape) {
                case 0: inside = dx * dx + dy * dy <= rad * rad; break;
                case 1: inside = std::max(std::abs(dx), std::abs(dy)) <= rad; break;
                default: inside = std::abs(dx) + std::abs(dy) <= rad; break;
            }
            double val;
            if (inside) {
                val = inten + jit * 0.03 * (u - 0.5);
                if (p.striped &&
                    static_cast<int>(std::floor((y + phase) / p.period)) % 2 == 0)
                    val += 0.2;
            } else {
                val = 0.06 + jit * 0.05 * u;
            }
            val = std::clamp(val, 0.0, 1.0);
            for (int ch = 0; ch < c; ++ch)
                out.data()[(static_cast<std::int64_t>(ch) * s + y) * s + x] =
                    static_cast<float>(val * (c == 3 ? kColorWt[p.color][ch] : 1.0));
        }
    return out;
}

// --- split assembly ----------------------------------------------------------

Dataset gen_text_split(const StreamConfig& cfg, const std::string& tag,
                       const std::vector<const UnigramModel*>& class_models,
                       const std::vector<std::int32_t>& class_labels, std::int64_t n,
                       Deduper& dedupe) {
    Dataset ds;
    ds.modality = Modality::kText;
    ds.tag = tag;
    Rng rng = Rng(cfg.seed).derive("stream.text").derive(tag);
    for (std::int64_t i = 0; i < n; ++i) {
        const auto ci = static_cast<std::size_t>(i % static_cast<std::int64_t>(class_models.size()));
        for (;;) {
            std::string doc = sample_document(*class_models[ci], cfg.doc_words, rng);
            if (dedupe.accept(fnv1a(doc))) {
                ds.texts.push_back(std::move(doc));
                ds.labels.push_back(class_labels[ci]);
                break;
            }
        }
    }
    return ds;
}

Dataset gen_image_split(const StreamConfig& cfg, const std::string& tag,
                        const std::vector<ShapeParams>& class_params,
                        const std::vector<std::int32_t>& class_labels, std::int64_t n,
                        Deduper& dedupe) {
    Dataset ds;
    ds.modality = Modality::kImage;
    ds.tag = tag;
    const std::int64_t px = static_cast<std::int64_t>(cfg.channels) * cfg.image_size * cfg.image_size;
    ds.images = Tensor::zeros({n, cfg.channels, cfg.image_size, cfg.image_size});
    Rng rng = Rng(cfg.seed).derive("stream.image").derive(tag);
    for (std::int64_t i = 0; i < n; ++i) {
        const auto ci = static_cast<std::size_t>(i % static_cast<std::int64_t>(class_params.size()));
        for (;;) {
            Tensor img = render_shape(cfg, class_params[ci], rng);
            if (dedupe.accept(fnv1a(img.data(), static_cast<std::size_t>(px) * sizeof(float)))) {
                std::memcpy(ds.images.data() + i * px, img.data(),
                            static_cast<std::size_t>(px) * sizeof(float));
                ds.labels.push_back(class_labels[ci]);
                break;
            }
        }
    }
    return ds;
}

}  // namespace

std::string modality_name(Modality m) { return m == Modality::kText ? "text" : "image"; }

Modality modality_from_name(const std::string& s) {
    if (s == "text") return Modality::kText;
    if (s == "image") return Modality::kImage;
    throw SpecError("unknown modality: " + s);
}

std::int64_t Dataset::size() const {
    if (modality == Modality::kText) return static_cast<std::int64_t>(texts.size());
    return images.defined() ? images.shape()[0] : 0;
}

std::uint64_t Dataset::sample_hash(std::int64_t i) const {
    if (i < 0 || i >= size()) throw ContractError("sample_hash: index out of range");
    if (modality == Modality::kText) return fnv1a(texts[static_cast<std::size_t>(i)]);
    const std::int64_t px = images.numel() / images.shape()[0];
    return fnv1a(images.data() + i * px, static_cast<std::size_t>(px) * sizeof(float));
}

std::uint64_t Dataset::content_hash() const {
    std::uint64_t h = kFnvOffset;
    for (std::int64_t i = 0; i < size(); ++i) h = hash_combine(h, sample_hash(i));
    for (std::int32_t l : labels) h = hash_combine(h, static_cast<std::uint64_t>(l));
    return h;
}

Dataset Dataset::subset(const std::vector<std::int64_t>& idx) const {
    Dataset out;
    out.modality = modality;
    out.tag = tag;
    const bool labeled = !labels.empty();
    if (modality == Modality::kText) {
        for (auto i : idx) {
            if (i < 0 || i >= size()) throw ContractError("subset: index out of range");
            out.texts.push_back(texts[static_cast<std::size_t>(i)]);
            if (labeled) out.labels.push_back(labels[static_cast<std::size_t>(i)]);
        }
        return out;
    }
    const std::int64_t px = images.numel() / std::max<std::int64_t>(1, images.shape()[0]);
    Shape sh = images.shape();
    sh[0] = static_cast<std::int64_t>(idx.size());
    out.images = Tensor::zeros(sh);
    for (std::size_t k = 0; k < idx.size(); ++k) {
        const std::int64_t i = idx[k];
        if (i < 0 || i >= size()) throw ContractError("subset: index out of range");
        std::memcpy(out.images.data() + static_cast<std::int64_t>(k) * px, images.data() + i * px,
                    static_cast<std::size_t>(px) * sizeof(float));
        if (labeled) out.labels.push_back(labels[static_cast<std::size_t>(i)]);
    }
    return out;
}

Dataset concat(const Dataset& a, const Dataset& b) {
    if (a.modality != b.modality) throw ContractError("concat: modality mismatch");
    if (a.labels.empty() != b.labels.empty()) throw ContractError("concat: label presence mismatch");
    Dataset out = a.subset([&] {
        std::vector<std::int64_t> all(static_cast<std::size_t>(a.size()));
        for (std::int64_t i = 0; i < a.size(); ++i) all[static_cast<std::size_t>(i)] = i;
        return all;
    }());
    out.tag = a.tag + "+" + b.tag;
    if (a.modality == Modality::kText) {
        out.texts.insert(out.texts.end(), b.texts.begin(), b.texts.end());
    } else {
        if (a.images.shape().size() != b.images.shape().size())
            throw ShapeError("concat: image rank mismatch");
        for (std::size_t d = 1; d < a.images.shape().size(); ++d)
            if (a.images.shape()[d] != b.images.shape()[d])
                throw ShapeError("concat: image extent mismatch");
        Shape sh = a.images.shape();
        sh[0] = a.size() + b.size();
        Tensor merged = Tensor::zeros(sh);
        const std::int64_t px = a.images.numel() / std::max<std::int64_t>(1, a.size());
        std::memcpy(merged.data(), out.images.data(),
                    static_cast<std::size_t>(a.size() * px) * sizeof(float));
        std::memcpy(merged.data() + a.size() * px, b.images.data(),
                    static_cast<std::size_t>(b.size() * px) * sizeof(float));
        out.images = merged;
    }
    out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
    return out;
}

std::uint64_t FcDataset::id() const { return hash_combine(train.content_hash(), test.content_hash()); }

void StreamConfig::validate() const {
    // Zero experiences is the degenerate empty stream; a run then records
    // only the baseline row.
    if (n_experiences < 0 || classes_per_experience < 1)
        throw ContractError("stream config: experience counts must not be negative");
    if (pretrain_per_experience < 1 || ds_train_per_experience < 1 || ds_test_per_experience < 1 ||
        fc_train < 1 || fc_test < 1 || base_size < 1)
        throw ContractError("stream config: split sizes must be positive");
    if (modality == Modality::kText) {
        if (base_vocab_words < 16 || class_vocab_words < 1)
            throw ContractError("stream config: vocabulary sizes too small");
        if (class_word_mass <= 0.0 || class_word_mass >= 1.0 || fc_word_mass <= 0.0 ||
            fc_word_mass >= 1.0)
            throw ContractError("stream config: word masses must lie in (0,1)");
        if (tilt < 0.0 || fc_tilt < 0.0) throw ContractError("stream config: tilts must be >= 0");
        if (doc_words < 1) throw ContractError("stream config: doc_words must be positive");
    } else {
        if (n_experiences * classes_per_experience > 10)
            throw CapacityError("stream config: image stream supports at most 10 classes");
        if (image_size < 16 || image_size % 16 != 0)
            throw ContractError("stream config: image_size must be a positive multiple of 16");
        if (channels != 1 && channels != 3)
            throw ContractError("stream config: channels must be 1 or 3");
        if (jitter < 0.0) throw ContractError("stream config: jitter must be >= 0");
    }
}

nlohmann::json StreamConfig::to_json() const {
    return {{"modality", modality_name(modality)},
            {"n_experiences", n_experiences},
            {"classes_per_experience", classes_per_experience},
            {"pretrain_per_experience", pretrain_per_experience},
            {"ds_train_per_experience", ds_train_per_experience},
            {"ds_test_per_experience", ds_test_per_experience},
            {"fc_train", fc_train},
            {"fc_test", fc_test},
            {"base_size", base_size},
            {"base_vocab_words", base_vocab_words},
            {"class_vocab_words", class_vocab_words},
            {"class_word_mass", class_word_mass},
            {"fc_word_mass", fc_word_mass},
            {"tilt", tilt},
            {"fc_tilt", fc_tilt},
            {"doc_words", doc_words},
            {"image_size", image_size},
            {"channels", channels},
            {"jitter", jitter},
            {"seed", seed}};
}

StreamConfig StreamConfig::from_json(const nlohmann::json& j) {
    StreamConfig c;
    if (!j.contains("seed")) throw SpecError("stream config: seed is mandatory");
    c.modality = modality_from_name(j.value("modality", "text"));
    c.n_experiences = j.value("n_experiences", c.n_experiences);
    c.classes_per_experience = j.value("classes_per_experience", c.classes_per_experience);
    c.pretrain_per_experience = j.value("pretrain_per_experience", c.pretrain_per_experience);
    c.ds_train_per_experience = j.value("ds_train_per_experience", c.ds_train_per_experience);
    c.ds_test_per_experience = j.value("ds_test_per_experience", c.ds_test_per_experience);
    c.fc_train = j.value("fc_train", c.fc_train);
    c.fc_test = j.value("fc_test", c.fc_test);
    c.base_size = j.value("base_size", c.base_size);
    c.base_vocab_words = j.value("base_vocab_words", c.base_vocab_words);
    c.class_vocab_words = j.value("class_vocab_words", c.class_vocab_words);
    c.class_word_mass = j.value("class_word_mass", c.class_word_mass);
    c.fc_word_mass = j.value("fc_word_mass", c.fc_word_mass);
    c.tilt = j.value("tilt", c.tilt);
    c.fc_tilt = j.value("fc_tilt", c.fc_tilt);
    c.doc_words = j.value("doc_words", c.doc_words);
    c.image_size = j.value("image_size", c.image_size);
    c.channels = j.value("channels", c.channels);
    c.jitter = j.value("jitter", c.jitter);
    c.seed = j.at("seed").get<std::uint64_t>();
    c.validate();
    return c;
}

TextModels text_generator_models(const StreamConfig& cfg) {
    TextModels m;
    for (int b = 0; b < kBaseDomains; ++b)
        m.base_domains.push_back(tilted_base(cfg, TiltLaw::kBaseDomain, b));
    const int n_classes = cfg.n_experiences * cfg.classes_per_experience;
    for (int c = 0; c < n_classes; ++c) {
        UnigramModel comp = tilted_base(cfg, TiltLaw::kStreamClass, c);
        m.class_base_components.push_back(comp);
        m.classes.push_back(with_specific_words(std::move(comp), cfg.class_word_mass,
                                                fmt("c%d", c), cfg.class_vocab_words));
    }
    for (int f = 0; f < kFcClasses; ++f)
        m.fc_classes.push_back(with_specific_words(tilted_base(cfg, TiltLaw::kFcClass, f),
                                                   cfg.fc_word_mass, fmt("f%d", f),
                                                   cfg.class_vocab_words));
    return m;
}

double jensen_shannon(const UnigramModel& a, const UnigramModel& b) {
    std::unordered_map<std::string, std::pair<double, double>> u;
    for (std::size_t i = 0; i < a.words.size(); ++i) u[a.words[i]].first = a.probs[i];
    for (std::size_t i = 0; i < b.words.size(); ++i) u[b.words[i]].second = b.probs[i];
    double div = 0.0;
    for (const auto& [w, pq] : u) {
        const double p = pq.first, q = pq.second, mid = 0.5 * (p + q);
        if (p > 0.0) div += 0.5 * p * std::log2(p / mid);
        if (q > 0.0) div += 0.5 * q * std::log2(q / mid);
    }
    return div;
}

std::string sample_document(const UnigramModel& model, int n_words, Rng& rng) {
    std::vector<double> cdf(model.probs.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < model.probs.size(); ++i) {
        acc += model.probs[i];
        cdf[i] = acc;
    }
    std::string doc;
    for (int w = 0; w < n_words; ++w) {
        const double u = rng.next_double() * acc;
        const auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
        const auto i = static_cast<std::size_t>(
            std::min<std::ptrdiff_t>(it - cdf.begin(), static_cast<std::ptrdiff_t>(cdf.size()) - 1));
        if (w) doc += ' ';
        doc += model.words[i];
    }
    return doc;
}

Tensor render_stream_image(const StreamConfig& cfg, int global_class, Rng& rng) {
    if (global_class < 0 || global_class >= cfg.n_experiences * cfg.classes_per_experience)
        throw ContractError("render_stream_image: class out of range");
    return render_shape(cfg, stream_params(global_class), rng);
}

Tensor render_fc_image(const StreamConfig& cfg, int fc_class, Rng& rng) {
    if (fc_class < 0 || fc_class >= kFcClasses)
        throw ContractError("render_fc_image: class out of range");
    return render_shape(cfg, fc_params(fc_class, false), rng);
}

Tensor render_base_image(const StreamConfig& cfg, int base_class, Rng& rng) {
    if (base_class < 0 || base_class >= kBaseDomains)
        throw ContractError("render_base_image: class out of range");
    return render_shape(cfg, fc_params(base_class, true), rng);
}

StreamBundle gen_text_stream(const StreamConfig& cfg) {
    cfg.validate();
    if (cfg.modality != Modality::kText) throw ContractError("gen_text_stream: config is not text");
    const TextModels models = text_generator_models(cfg);
    Deduper dedupe;
    StreamBundle out;

    {
        std::vector<const UnigramModel*> doms;
        std::vector<std::int32_t> labels;
        for (int b = 0; b < kBaseDomains; ++b) {
            doms.push_back(&models.base_domains[static_cast<std::size_t>(b)]);
            labels.push_back(b);
        }
        out.base = gen_text_split(cfg, "base", doms, labels, cfg.base_size, dedupe);
    }
    for (int i = 1; i <= cfg.n_experiences; ++i) {
        Experience e;
        e.index = i;
        std::vector<const UnigramModel*> cls;
        std::vector<std::int32_t> labels;
        for (int k = 0; k < cfg.classes_per_experience; ++k) {
            const int g = (i - 1) * cfg.classes_per_experience + k;
            e.classes.push_back(g);
            cls.push_back(&models.classes[static_cast<std::size_t>(g)]);
            labels.push_back(g);
        }
        e.pretrain = gen_text_split(cfg, fmt("e%d.pr", i), cls, labels,
                                    cfg.pretrain_per_experience, dedupe);
        e.ds_train = gen_text_split(cfg, fmt("e%d.ds.train", i), cls, labels,
                                    cfg.ds_train_per_experience, dedupe);
        e.ds_test = gen_text_split(cfg, fmt("e%d.ds.test", i), cls, labels,
                                   cfg.ds_test_per_experience, dedupe);
        out.stream.experiences.push_back(std::move(e));
    }
    {
        std::vector<const UnigramModel*> cls;
        std::vector<std::int32_t> labels;
        for (int f = 0; f < kFcClasses; ++f) {
            cls.push_back(&models.fc_classes[static_cast<std::size_t>(f)]);
            labels.push_back(f);
        }
        out.fc.train = gen_text_split(cfg, "fc.train", cls, labels, cfg.fc_train, dedupe);
        out.fc.test = gen_text_split(cfg, "fc.test", cls, labels, cfg.fc_test, dedupe);
        out.fc.n_classes = kFcClasses;
    }
    return out;
}

StreamBundle gen_image_stream(const StreamConfig& cfg) {
    cfg.validate();
    if (cfg.modality != Modality::kImage)
        throw ContractError("gen_image_stream: config is not image");
    Deduper dedupe;
    StreamBundle out;

    {
        std::vector<ShapeParams> par;
        std::vector<std::int32_t> labels;
        for (int b = 0; b < kBaseDomains; ++b) {
            par.push_back(fc_params(b, true));
            labels.push_back(b);
        }
        out.base = gen_image_split(cfg, "base", par, labels, cfg.base_size, dedupe);
    }
    for (int i = 1; i <= cfg.n_experiences; ++i) {
        Experience e;
        e.index = i;
        std::vector<ShapeParams> par;
        std::vector<std::int32_t> labels;
        for (int k = 0; k < cfg.classes_per_experience; ++k) {
            const int g = (i - 1) * cfg.classes_per_experience + k;
            e.classes.push_back(g);
            par.push_back(stream_params(g));
            labels.push_back(g);
        }
        e.pretrain = gen_image_split(cfg, fmt("e%d.pr", i), par, labels,
                                     cfg.pretrain_per_experience, dedupe);
        e.ds_train = gen_image_split(cfg, fmt("e%d.ds.train", i), par, labels,
                                     cfg.ds_train_per_experience, dedupe);
        e.ds_test = gen_image_split(cfg, fmt("e%d.ds.test", i), par, labels,
                                    cfg.ds_test_per_experience, dedupe);
        out.stream.experiences.push_back(std::move(e));
    }
    {
        std::vector<ShapeParams> par;
        std::vector<std::int32_t> labels;
        for (int f = 0; f < kFcClasses; ++f) {
            par.push_back(fc_params(f, false));
            labels.push_back(f);
        }
        out.fc.train = gen_image_split(cfg, "fc.train", par, labels, cfg.fc_train, dedupe);
        out.fc.test = gen_image_split(cfg, "fc.test", par, labels, cfg.fc_test, dedupe);
        out.fc.n_classes = kFcClasses;
    }
    return out;
}

void export_text(const Dataset& ds, const std::string& path, const std::string& header) {
    if (ds.modality != Modality::kText) throw ContractError("export_text: dataset is not text");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    if (!header.empty()) f << "# " << header << '\n';
    for (std::int64_t i = 0; i < ds.size(); ++i) {
        const std::int32_t l = ds.labels.empty() ? -1 : ds.labels[static_cast<std::size_t>(i)];
        f << l << '\t' << ds.texts[static_cast<std::size_t>(i)] << '\n';
    }
    if (!f) throw IoError("failed writing " + path);
}

void export_images(const Dataset& ds, const std::string& path, const nlohmann::json& extra_meta) {
    if (ds.modality != Modality::kImage) throw ContractError("export_images: dataset is not image");
    nlohmann::json meta = extra_meta;
    meta["kind"] = "dataset";
    meta["modality"] = "image";
    meta["tag"] = ds.tag;
    meta["labels"] = ds.labels;
    save_container(path, meta, {{"images", ds.images}});
}

}  // namespace cptlab
