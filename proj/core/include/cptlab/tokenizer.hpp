// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <nlohmann/json.hpp>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace cptlab {

// Word-level vocabulary with append-only dynamic expansion. Ids are stable
// for the lifetime of the vocab; specials occupy 0..3.
//
// Matching precedence at tokenize time: tokens added by expand() are tried
// first, as substrings of the whitespace word, longer token first and
// insertion order within a length; if none hits, the whole word is looked up
// exactly; otherwise unk. Base tokens only ever match exactly, so texts
// without expansion-token substrings tokenize identically before and after
// any expand().
class Vocab {
public:
    static constexpr std::int32_t kPad = 0;
    static constexpr std::int32_t kMask = 1;
    static constexpr std::int32_t kUnk = 2;
    static constexpr std::int32_t kCls = 3;
    static constexpr int kNumSpecials = 4;

    Vocab();  // specials only

    std::int32_t size() const { return static_cast<std::int32_t>(id_to_token_.size()); }
    const std::string& token(std::int32_t id) const;
    std::int32_t id_of(std::string_view token) const;  // -1 if absent
    bool contains(std::string_view token) const { return id_of(token) >= 0; }
    // Experience index that introduced the id: 0 for specials and base tokens.
    int insertion_experience(std::int32_t id) const;

    // Appends tokens with fresh ids, recording the experience index.
    // Throws ContractError on a duplicate.
    void expand(const std::vector<std::string>& new_tokens, int experience);

    // [cls, word ids..., pad...] of exactly max_len entries.
    std::vector<std::int32_t> tokenize(std::string_view text, int max_len) const;

    // Line-oriented file: token <tab> id <tab> insertion experience.
    void save(const std::string& path) const;
    static Vocab load(const std::string& path);

    nlohmann::json to_json() const;
    static Vocab from_json(const nlohmann::json& j);

private:
    friend Vocab train_vocab(const std::vector<std::string>&, int);
    void push(const std::string& token, int experience);

    std::vector<std::string> id_to_token_;
    std::vector<int> insertion_exp_;
    std::unordered_map<std::string, std::int32_t> to_id_;
    // Expansion-token ids sorted for matching: length descending, then FIFO.
    std::vector<std::int32_t> precedence_;
};

// Most frequent whitespace-delimited words of the corpus, up to
// max_size - 4 of them; frequency ties break lexicographically.
Vocab train_vocab(const std::vector<std::string>& corpus, int max_size);

struct NewTokenSelection {
    std::vector<std::string> tokens;  // ranked by domain frequency, ties lexicographic
    bool exhausted = false;           // true when fewer than k candidates existed
};

// The k most frequent corpus words absent from `base`.
NewTokenSelection select_new_tokens(const Vocab& base, const std::vector<std::string>& corpus,
                                    int k);

std::vector<std::string> split_words(std::string_view text);

}  // namespace cptlab
