// SPDX-License-Identifier: Apache-2.0
// Deterministic synthetic data streams: a base set, five two-class
// experiences, and a forgetting-control set whose generators are disjoint
// from every stream class. Text classes are unigram mixture languages over a
// shared base vocabulary; image classes are procedural renderers.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cptlab/rng.hpp"
#include "cptlab/tensor.hpp"

namespace cptlab {

enum class Modality { kText, kImage };
std::string modality_name(Modality m);
Modality modality_from_name(const std::string& s);

// One split of one partition. Text rows live in `texts`, image rows in
// `images` ([N,C,H,W]); labels are global class ids and may be empty for
// splits used without supervision.
struct Dataset {
    Modality modality = Modality::kText;
    std::string tag;  // provenance label, e.g. "e2.ds.train"; access logs key on it
    std::vector<std::string> texts;
    Tensor images;
    std::vector<std::int32_t> labels;

    std::int64_t size() const;
    std::uint64_t sample_hash(std::int64_t i) const;  // content only, not the label
    std::uint64_t content_hash() const;
    Dataset subset(const std::vector<std::int64_t>& idx) const;
};

Dataset concat(const Dataset& a, const Dataset& b);

struct Experience {
    int index = 0;             // 1-based position in the stream
    std::vector<int> classes;  // global class ids covered by this experience
    Dataset pretrain;          // unlabeled usage, labels retained for analysis
    Dataset ds_train;
    Dataset ds_test;
};

struct FcDataset {
    Dataset train;
    Dataset test;
    int n_classes = 0;  // local label space 0..n_classes-1
    std::uint64_t id() const;
};

struct Stream {
    std::vector<Experience> experiences;
};

struct StreamBundle {
    Dataset base;  // initial pre-training distribution
    Stream stream;
    FcDataset fc;
};

inline constexpr int kBaseDomains = 4;  // base labels 0..3, both modalities
inline constexpr int kFcClasses = 4;

struct StreamConfig {
    Modality modality = Modality::kText;
    int n_experiences = 5;
    int classes_per_experience = 2;
    std::int64_t pretrain_per_experience = 2000;
    std::int64_t ds_train_per_experience = 500;
    std::int64_t ds_test_per_experience = 200;
    std::int64_t fc_train = 1000;
    std::int64_t fc_test = 400;
    std::int64_t base_size = 2000;

    // Text: shared zipf base vocabulary, per-class multiplicative tilts, and
    // class-specific words holding a fixed probability mass.
    int base_vocab_words = 300;
    int class_vocab_words = 20;
    double class_word_mass = 0.30;
    double fc_word_mass = 0.15;
    double tilt = 0.5;     // stream-class tilt amplitude on base words
    double fc_tilt = 1.0;  // forgetting-control tilt exponent
    int doc_words = 24;

    // Image: procedural shape renderers with jitter; 0 jitter degenerates to
    // one sample per class.
    int image_size = 32;
    int channels = 1;
    double jitter = 1.0;

    std::uint64_t seed = 0;

    void validate() const;
    nlohmann::json to_json() const;
    static StreamConfig from_json(const nlohmann::json& j);
};

// Lexicon plus probabilities over it; probabilities sum to 1.
struct UnigramModel {
    std::vector<std::string> words;
    std::vector<double> probs;
};

// Generator parameters behind the text stream, exposed so distribution
// properties can be checked against the sampler's own targets.
struct TextModels {
    std::vector<UnigramModel> base_domains;          // kBaseDomains mixtures
    std::vector<UnigramModel> classes;               // global class id order
    std::vector<UnigramModel> class_base_components; // shared-base part per class
    std::vector<UnigramModel> fc_classes;            // kFcClasses mixtures
};

TextModels text_generator_models(const StreamConfig& cfg);

// Base-2 JSD over the union support; in [0,1].
double jensen_shannon(const UnigramModel& a, const UnigramModel& b);

std::string sample_document(const UnigramModel& model, int n_words, Rng& rng);

// Single image draws ([C,H,W]), exposed so jitter behavior is testable
// without building whole splits.
Tensor render_stream_image(const StreamConfig& cfg, int global_class, Rng& rng);
Tensor render_fc_image(const StreamConfig& cfg, int fc_class, Rng& rng);
Tensor render_base_image(const StreamConfig& cfg, int base_class, Rng& rng);

// Both generators are pure in cfg (seed included). Splits are de-duplicated
// against each other by sample hash; a split that cannot fill within the
// retry budget raises CapacityError. Experience i (1-based) holds global
// classes {2(i-1), 2(i-1)+1} under the defaults.
StreamBundle gen_text_stream(const StreamConfig& cfg);
StreamBundle gen_image_stream(const StreamConfig& cfg);

// Line-delimited "label\ttext" records, or a tensor container with labels in
// the metadata. For external inspection of generated data. A non-empty
// header becomes a leading "# ..." line (text) or extra metadata fields
// (images).
void export_text(const Dataset& ds, const std::string& path, const std::string& header = "");
void export_images(const Dataset& ds, const std::string& path,
                   const nlohmann::json& extra_meta = nlohmann::json::object());

}  // namespace cptlab
