// SPDX-License-Identifier: Apache-2.0
#include "cptlab/tokenizer.hpp"

#include <algorithm>
#include <fstream>

#include "cptlab/common.hpp"

namespace cptlab {

namespace {
const char* kSpecials[Vocab::kNumSpecials] = {"<pad>", "<mask>", "<unk>", "<cls>"};

bool is_special_string(std::string_view w) {
    for (const char* s : kSpecials)
        if (w == s) return true;
    return false;
}
}  // namespace

std::vector<std::string> split_words(std::string_view text) {
    std::vector<std::string> words;
    std::size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
        std::size_t start = i;
        while (i < text.size() && !std::isspace(static_cast<unsigned char>(text[i]))) ++i;
        if (i > start) words.emplace_back(text.substr(start, i - start));
    }
    return words;
}

Vocab::Vocab() {
    for (const char* s : kSpecials) push(s, 0);
}

void Vocab::push(const std::string& token, int experience) {
    const auto id = static_cast<std::int32_t>(id_to_token_.size());
    id_to_token_.push_back(token);
    insertion_exp_.push_back(experience);
    to_id_.emplace(token, id);
}

const std::string& Vocab::token(std::int32_t id) const {
    if (id < 0 || id >= size()) throw ContractError("vocab: id " + std::to_string(id) + " out of range");
    return id_to_token_[static_cast<std::size_t>(id)];
}

std::int32_t Vocab::id_of(std::string_view token) const {
    auto it = to_id_.find(std::string(token));
    return it == to_id_.end() ? -1 : it->second;
}

int Vocab::insertion_experience(std::int32_t id) const {
    if (id < 0 || id >= size()) throw ContractError("vocab: id " + std::to_string(id) + " out of range");
    return insertion_exp_[static_cast<std::size_t>(id)];
}

void Vocab::expand(const std::vector<std::string>& new_tokens, int experience) {
    if (experience < 1) throw ContractError("vocab: expansion experience index must be >= 1");
    for (const auto& t : new_tokens) {
        if (t.empty()) throw ContractError("vocab: empty expansion token");
        if (contains(t)) throw ContractError("vocab: duplicate token '" + t + "'");
        push(t, experience);
        precedence_.push_back(static_cast<std::int32_t>(id_to_token_.size()) - 1);
    }
    // Longer first; stable sort keeps insertion (FIFO) order within a length.
    std::stable_sort(precedence_.begin(), precedence_.end(),
                     [this](std::int32_t a, std::int32_t b) {
                         return id_to_token_[static_cast<std::size_t>(a)].size() >
                                id_to_token_[static_cast<std::size_t>(b)].size();
                     });
}

std::vector<std::int32_t> Vocab::tokenize(std::string_view text, int max_len) const {
    if (max_len < 2) throw ContractError("tokenize: max_len must be >= 2");
    std::vector<std::int32_t> out;
    out.reserve(static_cast<std::size_t>(max_len));
    out.push_back(kCls);
    for (const auto& w : split_words(text)) {
        if (static_cast<int>(out.size()) >= max_len) break;
        std::int32_t id = -1;
        for (std::int32_t cand : precedence_) {
            if (id_to_token_[static_cast<std::size_t>(cand)].size() > w.size()) continue;
            if (w.find(id_to_token_[static_cast<std::size_t>(cand)]) != std::string::npos) {
                id = cand;
                break;
            }
        }
        if (id < 0) {
            id = id_of(w);
            if (id < kNumSpecials) id = kUnk;  // specials never come from text
        }
        out.push_back(id);
    }
    out.resize(static_cast<std::size_t>(max_len), kPad);
    return out;
}

void Vocab::save(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("vocab: cannot open " + path + " for writing");
    for (std::int32_t id = 0; id < size(); ++id)
        out << id_to_token_[static_cast<std::size_t>(id)] << '\t' << id << '\t'
            << insertion_exp_[static_cast<std::size_t>(id)] << '\n';
    if (!out) throw IoError("vocab: write failed for " + path);
}

Vocab Vocab::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("vocab: cannot open " + path);
    Vocab v;
    std::string line;
    std::int32_t expect = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto t1 = line.find('\t');
        const auto t2 = line.find('\t', t1 + 1);
        if (t1 == std::string::npos || t2 == std::string::npos)
            throw IoError("vocab: malformed line '" + line + "'");
        const std::string token = line.substr(0, t1);
        const int id = std::stoi(line.substr(t1 + 1, t2 - t1 - 1));
        const int exp = std::stoi(line.substr(t2 + 1));
        if (id != expect) throw IoError("vocab: ids must be dense and ordered");
        if (id < kNumSpecials) {
            if (token != kSpecials[id]) throw IoError("vocab: special id " + std::to_string(id) +
                                                      " bound to '" + token + "'");
        } else if (exp == 0) {
            v.push(token, 0);
        } else {
            v.expand({token}, exp);
        }
        ++expect;
    }
    return v;
}

nlohmann::json Vocab::to_json() const {
    nlohmann::json j;
    j["tokens"] = id_to_token_;
    j["experience"] = insertion_exp_;
    return j;
}

Vocab Vocab::from_json(const nlohmann::json& j) {
    const auto tokens = j.at("tokens").get<std::vector<std::string>>();
    const auto exps = j.at("experience").get<std::vector<int>>();
    if (tokens.size() != exps.size() || tokens.size() < kNumSpecials)
        throw IoError("vocab: malformed json payload");
    Vocab v;
    for (std::size_t i = kNumSpecials; i < tokens.size(); ++i) {
        if (exps[i] == 0)
            v.push(tokens[i], 0);
        else
            v.expand({tokens[i]}, exps[i]);
    }
    return v;
}

namespace {

std::vector<std::pair<std::string, std::int64_t>> ranked_counts(
    const std::vector<std::string>& corpus) {
    std::unordered_map<std::string, std::int64_t> counts;
    for (const auto& doc : corpus)
        for (auto& w : split_words(doc)) {
            if (is_special_string(w)) continue;
            ++counts[w];
        }
    std::vector<std::pair<std::string, std::int64_t>> ranked(counts.begin(), counts.end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    return ranked;
}

}  // namespace

Vocab train_vocab(const std::vector<std::string>& corpus, int max_size) {
    if (corpus.empty()) throw DataError("train_vocab: empty corpus");
    if (max_size <= Vocab::kNumSpecials)
        throw SpecError("train_vocab: max_size must exceed the " +
                        std::to_string(Vocab::kNumSpecials) + " specials");
    Vocab v;
    const auto ranked = ranked_counts(corpus);
    const auto budget = static_cast<std::size_t>(max_size - Vocab::kNumSpecials);
    for (std::size_t i = 0; i < ranked.size() && i < budget; ++i) v.push(ranked[i].first, 0);
    return v;
}

NewTokenSelection select_new_tokens(const Vocab& base, const std::vector<std::string>& corpus,
                                    int k) {
    if (k < 0) throw ContractError("select_new_tokens: k must be >= 0");
    NewTokenSelection sel;
    for (const auto& [token, count] : ranked_counts(corpus)) {
        if (static_cast<int>(sel.tokens.size()) == k) return sel;
        if (!base.contains(token)) sel.tokens.push_back(token);
    }
    sel.exhausted = static_cast<int>(sel.tokens.size()) < k;
    return sel;
}

}  // namespace cptlab
