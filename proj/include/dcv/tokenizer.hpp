#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace dcv {

using TokenIds = std::vector<std::size_t>;

/// Lowercases and splits on anything that is not a letter, digit, hyphen or
/// apostrophe; hyphens and apostrophes are trimmed from token ends.
std::vector<std::string> split_words(std::string_view text);

/// Word vocabulary with id 0 reserved for out-of-vocabulary words.
class Vocabulary {
public:
    static constexpr std::size_t kOovId = 0;
    static constexpr const char* kOovToken = "<oov>";

    Vocabulary();
    /// Vocabulary of every word in `corpus`, ids assigned in sorted order.
    static Vocabulary from_corpus(std::span<const std::string> corpus);
    static Vocabulary from_tokens(std::vector<std::string> tokens);

    TokenIds tokenize(std::string_view text) const;
    std::size_t size() const noexcept { return tokens_.size(); }
    const std::vector<std::string>& tokens() const noexcept { return tokens_; }
    bool contains(std::string_view word) const;

private:
    std::vector<std::string> tokens_;
    std::map<std::string, std::size_t, std::less<>> index_;
};

} // namespace dcv
