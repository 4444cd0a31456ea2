#include "dcv/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <set>

#include "dcv/error.hpp"

namespace dcv {

namespace {
bool word_char(unsigned char c) { return std::isalnum(c) || c == '-' || c == '\''; }
} // namespace

std::vector<std::string> split_words(std::string_view text) {
    std::vector<std::string> words;
    std::string current;
    auto flush = [&] {
        const auto first = current.find_first_not_of("-'");
        const auto last = current.find_last_not_of("-'");
        if (first != std::string::npos) words.push_back(current.substr(first, last - first + 1));
        current.clear();
    };
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (word_char(c)) current.push_back(static_cast<char>(std::tolower(c)));
        else flush();
    }
    flush();
    return words;
}

Vocabulary::Vocabulary() : tokens_{kOovToken} { index_.emplace(kOovToken, kOovId); }

Vocabulary Vocabulary::from_corpus(std::span<const std::string> corpus) {
    std::set<std::string> words;
    for (const auto& text : corpus) {
        for (auto& w : split_words(text)) words.insert(std::move(w));
    }
    return from_tokens(std::vector<std::string>(words.begin(), words.end()));
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
    Vocabulary v;
    for (auto& t : tokens) {
        if (t == kOovToken) continue;
        if (v.index_.count(t)) throw FormatError("duplicate vocabulary token '" + t + "'");
        v.index_.emplace(t, v.tokens_.size());
        v.tokens_.push_back(std::move(t));
    }
    return v;
}

TokenIds Vocabulary::tokenize(std::string_view text) const {
    TokenIds ids;
    for (const auto& w : split_words(text)) {
        auto it = index_.find(w);
        ids.push_back(it == index_.end() ? kOovId : it->second);
    }
    return ids;
}

bool Vocabulary::contains(std::string_view word) const { return index_.find(word) != index_.end(); }

} // namespace dcv
