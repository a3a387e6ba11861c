// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <doctest.h>

#include "cptlab/common.hpp"
#include "cptlab/tokenizer.hpp"

using cptlab::NewTokenSelection;
using cptlab::select_new_tokens;
using cptlab::split_words;
using cptlab::train_vocab;
using cptlab::Vocab;

TEST_CASE("split_words splits on any whitespace run") {
    CHECK(split_words("alpha beta  gamma") == std::vector<std::string>{"alpha", "beta", "gamma"});
    CHECK(split_words("  lead\ttab\nnewline ") ==
          std::vector<std::string>{"lead", "tab", "newline"});
    CHECK(split_words("").empty());
    CHECK(split_words("   ").empty());
    CHECK(split_words("one") == std::vector<std::string>{"one"});
}

TEST_CASE("fresh vocab holds exactly the four specials") {
    Vocab v;
    CHECK(v.size() == 4);
    CHECK(v.token(Vocab::kPad) == "<pad>");
    CHECK(v.token(Vocab::kMask) == "<mask>");
    CHECK(v.token(Vocab::kUnk) == "<unk>");
    CHECK(v.token(Vocab::kCls) == "<cls>");
    CHECK(v.id_of("nothere") == -1);
}

TEST_CASE("train_vocab keeps the most frequent words, ties lexicographic") {
    // Frequencies: bb x3, aa x2, cc x2, dd x1. Capacity for 3 content words.
    std::vector<std::string> corpus{"bb aa cc", "bb cc aa bb", "dd"};
    Vocab v = train_vocab(corpus, 7);
    CHECK(v.size() == 7);
    CHECK(v.contains("bb"));
    CHECK(v.contains("aa"));
    CHECK(v.contains("cc"));
    CHECK_FALSE(v.contains("dd"));
    // Rank order assigns ids: bb first (3 hits), then aa before cc (tie at 2).
    CHECK(v.id_of("bb") == 4);
    CHECK(v.id_of("aa") == 5);
    CHECK(v.id_of("cc") == 6);
    // All trained words are base words (experience 0).
    CHECK(v.insertion_experience(v.id_of("bb")) == 0);
    CHECK(v.insertion_experience(Vocab::kCls) == 0);

    // A tighter cap truncates the ranking, never the specials.
    Vocab small = train_vocab(corpus, 5);
    CHECK(small.size() == 5);
    CHECK(small.contains("bb"));
    CHECK_FALSE(small.contains("aa"));
}

TEST_CASE("tokenize emits cls, word ids, then pad to max_len") {
    Vocab v = train_vocab({"aa bb cc"}, 8);
    auto ids = v.tokenize("aa cc zz", 6);
    REQUIRE(ids.size() == 6);
    CHECK(ids[0] == Vocab::kCls);
    CHECK(ids[1] == v.id_of("aa"));
    CHECK(ids[2] == v.id_of("cc"));
    CHECK(ids[3] == Vocab::kUnk);  // zz unseen
    CHECK(ids[4] == Vocab::kPad);
    CHECK(ids[5] == Vocab::kPad);

    // Longer text truncates after max_len - 1 words.
    auto truncated = v.tokenize("aa bb cc aa bb", 3);
    CHECK(truncated == std::vector<std::int32_t>{Vocab::kCls, v.id_of("aa"), v.id_of("bb")});

    auto empty = v.tokenize("", 3);
    CHECK(empty == std::vector<std::int32_t>{Vocab::kCls, Vocab::kPad, Vocab::kPad});
}

TEST_CASE("base tokens only match whole words") {
    Vocab v = train_vocab({"alpha alp"}, 8);
    REQUIRE(v.contains("alpha"));
    REQUIRE(v.contains("alp"));
    // "alphabet" contains both as substrings but matches neither exactly.
    auto ids = v.tokenize("alphabet", 3);
    CHECK(ids[1] == Vocab::kUnk);
}

TEST_CASE("expand appends stable ids and records the experience") {
    Vocab v = train_vocab({"aa bb"}, 8);
    const std::int32_t aa = v.id_of("aa");
    v.expand({"zz", "yy"}, 2);
    CHECK(v.size() == 8);
    CHECK(v.id_of("aa") == aa);  // existing ids untouched
    CHECK(v.id_of("zz") == 6);
    CHECK(v.id_of("yy") == 7);
    CHECK(v.insertion_experience(v.id_of("zz")) == 2);
    v.expand({"xx"}, 3);
    CHECK(v.insertion_experience(v.id_of("xx")) == 3);
    CHECK_THROWS_AS(v.expand({"zz"}, 4), cptlab::ContractError);
    CHECK_THROWS_AS(v.expand({"aa"}, 4), cptlab::ContractError);
}

TEST_CASE("expansion tokens match as substrings with precedence") {
    Vocab v = train_vocab({"plain words here"}, 12);
    v.expand({"net", "internet"}, 1);

    // Both are substrings of "internets"; the longer expansion token wins.
    auto ids = v.tokenize("internets", 3);
    CHECK(ids[1] == v.id_of("internet"));

    // Only the short one is a substring here.
    ids = v.tokenize("networks", 3);
    CHECK(ids[1] == v.id_of("net"));

    // Insertion order breaks equal lengths: "abc" added before "bcd".
    v.expand({"abc", "bcd"}, 2);
    ids = v.tokenize("xabcdx", 3);
    CHECK(ids[1] == v.id_of("abc"));

    // Expansion match outranks an exact base match.
    Vocab u = train_vocab({"planet earth"}, 12);
    u.expand({"net"}, 1);
    ids = u.tokenize("planet", 3);
    CHECK(ids[1] == u.id_of("net"));

    // Words without expansion substrings keep their pre-expansion encoding.
    Vocab w = train_vocab({"stable words stay put"}, 12);
    auto before = w.tokenize("stable words stay put maybe", 8);
    w.expand({"qqq"}, 1);
    CHECK(w.tokenize("stable words stay put maybe", 8) == before);
}

TEST_CASE("select_new_tokens equals a brute-force frequency ranking") {
    Vocab base = train_vocab({"kept words live here"}, 10);
    std::vector<std::string> corpus{"nova nova flux warp flux nova", "warp kept here zeta",
                                    "flux zeta zeta"};
    NewTokenSelection sel = select_new_tokens(base, corpus, 3);
    REQUIRE(sel.tokens.size() == 3);
    CHECK_FALSE(sel.exhausted);

    // Oracle: count every word, drop base members, sort by count then lexico.
    std::map<std::string, int> counts;
    for (const auto& doc : corpus)
        for (const auto& wrd : split_words(doc)) ++counts[wrd];
    std::vector<std::pair<std::string, int>> cand;
    for (const auto& [wrd, n] : counts)
        if (!base.contains(wrd)) cand.push_back({wrd, n});
    std::sort(cand.begin(), cand.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    for (std::size_t i = 0; i < sel.tokens.size(); ++i) CHECK(sel.tokens[i] == cand[i].first);

    // Asking for more than exist reports exhaustion.
    NewTokenSelection all = select_new_tokens(base, corpus, 10);
    CHECK(all.exhausted);
    CHECK(all.tokens.size() == cand.size());
    NewTokenSelection none = select_new_tokens(base, {"kept words"}, 2);
    CHECK(none.exhausted);
    CHECK(none.tokens.empty());
    NewTokenSelection zero = select_new_tokens(base, corpus, 0);
    CHECK_FALSE(zero.exhausted);
    CHECK(zero.tokens.empty());
}

TEST_CASE("vocab io and json round-trip preserve ids and experiences") {
    namespace fs = std::filesystem;
    Vocab v = train_vocab({"aa bb cc"}, 10);
    v.expand({"zz"}, 2);

    const std::string path = (fs::temp_directory_path() / "cptlab_vocab.tsv").string();
    v.save(path);
    Vocab file_back = Vocab::load(path);
    fs::remove(path);
    Vocab json_back = Vocab::from_json(v.to_json());

    for (const Vocab* back : {&file_back, &json_back}) {
        CHECK(back->size() == v.size());
        for (std::int32_t id = 0; id < v.size(); ++id) {
            CHECK(back->token(id) == v.token(id));
            CHECK(back->insertion_experience(id) == v.insertion_experience(id));
        }
        // Precedence order survives: expansion substring still wins.
        CHECK(back->tokenize("zzz", 2)[1] == v.id_of("zz"));
    }
}
