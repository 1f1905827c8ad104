#pragma once

#include <cstdint>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "cma/error.hpp"

namespace cma {

// Captions are stored in exactly 18 slots: a boundary PAD at each end and
// up to 16 content tokens in between.
inline constexpr std::size_t kMaxContentTokens = 16;
inline constexpr std::size_t kCaptionSlots = 18;

class Vocabulary {
  public:
    static constexpr int kPad = 0;
    static constexpr int kUnk = 1;

    Vocabulary() {
        add_word("<pad>");
        add_word("<unk>");
    }

    int add_word(const std::string& w) {
        auto it = word_to_index_.find(w);
        if (it != word_to_index_.end()) return it->second;
        const int idx = static_cast<int>(index_to_word_.size());
        word_to_index_.emplace(w, idx);
        index_to_word_.push_back(w);
        return idx;
    }

    int index_of(const std::string& w) const {
        auto it = word_to_index_.find(w);
        return it == word_to_index_.end() ? kUnk : it->second;
    }

    const std::string& word_at(int idx) const {
        if (idx < 0 || idx >= static_cast<int>(index_to_word_.size()))
            throw VocabularyError("word_at: index " + std::to_string(idx) + " out of vocabulary of size " +
                                  std::to_string(index_to_word_.size()));
        return index_to_word_[static_cast<std::size_t>(idx)];
    }

    std::size_t size() const { return index_to_word_.size(); }

    const std::vector<std::string>& words() const { return index_to_word_; }

  private:
    std::unordered_map<std::string, int> word_to_index_;
    std::vector<std::string> index_to_word_;
};

enum class CaptionRole { kDraft, kRefined, kReference };

struct Caption {
    std::vector<int> tokens;  // kCaptionSlots entries, boundary PADs at both ends
    CaptionRole role = CaptionRole::kReference;

    // Wraps up to 16 content tokens in the 18-slot boundary-PAD layout.
    static Caption from_content(std::vector<int> content, CaptionRole role,
                                std::size_t vocab_size) {
        if (content.size() > kMaxContentTokens) content.resize(kMaxContentTokens);
        for (int t : content)
            if (t < 0 || t >= static_cast<int>(vocab_size))
                throw VocabularyError("caption token " + std::to_string(t) +
                                      " out of vocabulary of size " + std::to_string(vocab_size));
        Caption c;
        c.role = role;
        c.tokens.assign(kCaptionSlots, Vocabulary::kPad);
        for (std::size_t i = 0; i < content.size(); ++i) c.tokens[i + 1] = content[i];
        return c;
    }

    // Content tokens between the boundary PADs, stopping at the first PAD.
    std::vector<int> content() const {
        std::vector<int> out;
        for (std::size_t i = 1; i + 1 < tokens.size(); ++i) {
            if (tokens[i] == Vocabulary::kPad) break;
            out.push_back(tokens[i]);
        }
        return out;
    }

    std::size_t content_length() const { return content().size(); }

    std::string text(const Vocabulary& vocab) const {
        std::ostringstream os;
        bool first = true;
        for (int t : content()) {
            if (!first) os << ' ';
            os << vocab.word_at(t);
            first = false;
        }
        return os.str();
    }
};

inline std::vector<std::string> tokenize(const std::string& text) {
    std::istringstream is(text);
    std::vector<std::string> out;
    std::string w;
    while (is >> w) out.push_back(w);
    return out;
}

}  // namespace cma
