#pragma once

// Corpus-level BLEU-1..4, ROUGE-L, and CIDEr-D over token sequences.
// Standard formulations: BLEU with brevity penalty and no smoothing,
// ROUGE-L F-measure with beta = 1.2, CIDEr-D with sigma = 6 and x10 scaling.
// CIDEr-D doubles as the SCST reward with corpus-frozen IDF.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <unordered_map>
#include <vector>

#include "cma/error.hpp"

namespace cma {

using TokenSeq = std::vector<int>;

inline constexpr int kMaxNgramOrder = 4;

namespace detail {

// Packs an n-gram of up to 4 tokens into a 64-bit key (16 bits per token,
// offset by 1 so a zero byte never collides with a real token).
inline std::uint64_t ngram_key(const TokenSeq& s, std::size_t start, std::size_t n) {
    std::uint64_t key = 0;
    for (std::size_t i = 0; i < n; ++i)
        key |= static_cast<std::uint64_t>(static_cast<std::uint32_t>(s[start + i]) + 1)
               << (16 * i);
    return key;
}

using NgramCounts = std::array<std::unordered_map<std::uint64_t, double>, kMaxNgramOrder>;

inline NgramCounts count_ngrams(const TokenSeq& s) {
    NgramCounts out;
    for (std::size_t n = 1; n <= kMaxNgramOrder; ++n)
        for (std::size_t i = 0; i + n <= s.size(); ++i) out[n - 1][ngram_key(s, i, n)] += 1.0;
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// BLEU

struct BleuScores {
    std::array<double, 4> b{};  // BLEU-1 .. BLEU-4
};

// Corpus-level modified n-gram precision with brevity penalty. A zero
// precision at any order zeroes that order's score (no smoothing).
inline BleuScores bleu(const std::vector<TokenSeq>& candidates,
                       const std::vector<std::vector<TokenSeq>>& references, int n_max = 4) {
    if (candidates.empty() || candidates.size() != references.size())
        throw ContractError("bleu: empty corpus or candidate/reference count mismatch");
    std::array<double, 4> matched{}, total{};
    double cand_len = 0.0, eff_ref_len = 0.0;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        const auto& cand = candidates[i];
        const auto& refs = references[i];
        if (refs.empty()) throw ContractError("bleu: candidate " + std::to_string(i) + " has no references");
        cand_len += static_cast<double>(cand.size());
        // Effective reference length: closest to the candidate, shorter on ties.
        std::size_t best = refs[0].size();
        for (const auto& r : refs) {
            const auto d_new = r.size() > cand.size() ? r.size() - cand.size() : cand.size() - r.size();
            const auto d_old = best > cand.size() ? best - cand.size() : cand.size() - best;
            if (d_new < d_old || (d_new == d_old && r.size() < best)) best = r.size();
        }
        eff_ref_len += static_cast<double>(best);

        auto cand_counts = detail::count_ngrams(cand);
        std::vector<detail::NgramCounts> ref_counts;
        for (const auto& r : refs) ref_counts.push_back(detail::count_ngrams(r));
        for (int n = 1; n <= n_max; ++n) {
            for (const auto& [key, c] : cand_counts[n - 1]) {
                double max_ref = 0.0;
                for (const auto& rc : ref_counts) {
                    auto it = rc[n - 1].find(key);
                    if (it != rc[n - 1].end()) max_ref = std::max(max_ref, it->second);
                }
                matched[n - 1] += std::min(c, max_ref);
                total[n - 1] += c;
            }
        }
    }
    const double bp = cand_len >= eff_ref_len || cand_len == 0.0
                          ? (cand_len == 0.0 ? 0.0 : 1.0)
                          : std::exp(1.0 - eff_ref_len / cand_len);
    BleuScores out;
    double log_sum = 0.0;
    bool dead = false;
    for (int n = 1; n <= n_max; ++n) {
        const double p = total[n - 1] > 0.0 ? matched[n - 1] / total[n - 1] : 0.0;
        if (p <= 0.0) dead = true;
        if (!dead) log_sum += std::log(p);
        out.b[n - 1] = dead ? 0.0 : bp * std::exp(log_sum / n);
    }
    return out;
}

// ---------------------------------------------------------------------------
// ROUGE-L

namespace detail {

inline std::size_t lcs_length(const TokenSeq& a, const TokenSeq& b) {
    std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j)
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

}  // namespace detail

// LCS-based F-measure with beta = 1.2, max over references.
inline double rouge_l(const TokenSeq& candidate, const std::vector<TokenSeq>& references,
                      double beta = 1.2) {
    if (references.empty()) throw ContractError("rouge_l: no references");
    if (candidate.empty()) return 0.0;
    double best = 0.0;
    for (const auto& ref : references) {
        if (ref.empty()) continue;
        const double lcs = static_cast<double>(detail::lcs_length(candidate, ref));
        const double p = lcs / static_cast<double>(candidate.size());
        const double r = lcs / static_cast<double>(ref.size());
        if (p <= 0.0 || r <= 0.0) continue;
        const double f = (1.0 + beta * beta) * p * r / (r + beta * beta * p);
        best = std::max(best, f);
    }
    return best;
}

inline double rouge_l_corpus(const std::vector<TokenSeq>& candidates,
                             const std::vector<std::vector<TokenSeq>>& references) {
    if (candidates.empty() || candidates.size() != references.size())
        throw ContractError("rouge_l_corpus: empty corpus or count mismatch");
    double sum = 0.0;
    for (std::size_t i = 0; i < candidates.size(); ++i) sum += rouge_l(candidates[i], references[i]);
    return sum / static_cast<double>(candidates.size());
}

// ---------------------------------------------------------------------------
// CIDEr-D

// Per-n-gram document frequency over a reference corpus; frozen after build.
class CorpusIdf {
  public:
    static CorpusIdf build(const std::vector<std::vector<TokenSeq>>& reference_sets) {
        CorpusIdf idf;
        idf.corpus_size_ = reference_sets.size();
        for (const auto& refs : reference_sets) {
            detail::NgramCounts seen;
            for (const auto& r : refs) {
                auto counts = detail::count_ngrams(r);
                for (int n = 0; n < kMaxNgramOrder; ++n)
                    for (const auto& [key, c] : counts[n]) seen[n][key] = 1.0;
            }
            for (int n = 0; n < kMaxNgramOrder; ++n)
                for (const auto& [key, c] : seen[n]) idf.df_[n][key] += 1.0;
        }
        return idf;
    }

    std::size_t corpus_size() const { return corpus_size_; }
    bool degenerate() const { return corpus_size_ < 2; }
    double log_corpus_size() const { return std::log(std::max<std::size_t>(corpus_size_, 1)); }

    double idf_weight(int n, std::uint64_t key) const {
        auto it = df_[n].find(key);
        const double df = it == df_[n].end() ? 1.0 : std::max(1.0, it->second);
        return log_corpus_size() - std::log(df);
    }

  private:
    std::array<std::unordered_map<std::uint64_t, double>, kMaxNgramOrder> df_;
    std::size_t corpus_size_ = 0;
};

struct CiderResult {
    std::vector<double> per_item;
    double mean = 0.0;
};

namespace detail {

struct TfidfVec {
    NgramCounts weights;  // tf * idf per n-gram
    std::array<double, kMaxNgramOrder> norm{};
    std::size_t length = 0;
};

inline TfidfVec tfidf_vector(const TokenSeq& s, const CorpusIdf& idf) {
    TfidfVec v;
    v.length = s.size();
    auto counts = count_ngrams(s);
    for (int n = 0; n < kMaxNgramOrder; ++n) {
        double sq = 0.0;
        for (const auto& [key, c] : counts[n]) {
            const double w = c * idf.idf_weight(n, key);
            v.weights[n][key] = w;
            sq += w * w;
        }
        v.norm[n] = std::sqrt(sq);
    }
    return v;
}

}  // namespace detail

// Standard CIDEr-D for one candidate: clipped TF-IDF similarity per n-gram
// order averaged over n = 1..4 and references, Gaussian length penalty
// sigma = 6, scaled x10.
inline double cider_d_item(const TokenSeq& candidate, const std::vector<TokenSeq>& references,
                           const CorpusIdf& idf, double sigma = 6.0) {
    if (references.empty()) throw ContractError("cider_d: no references");
    if (idf.degenerate()) return 0.0;  // all IDF weights are zero
    const auto hyp = detail::tfidf_vector(candidate, idf);
    std::array<double, kMaxNgramOrder> score{};
    for (const auto& ref_tokens : references) {
        const auto ref = detail::tfidf_vector(ref_tokens, idf);
        const double delta = static_cast<double>(hyp.length) - static_cast<double>(ref.length);
        const double penalty = std::exp(-delta * delta / (2.0 * sigma * sigma));
        for (int n = 0; n < kMaxNgramOrder; ++n) {
            if (hyp.norm[n] <= 0.0 || ref.norm[n] <= 0.0) continue;
            double dot = 0.0;
            for (const auto& [key, wh] : hyp.weights[n]) {
                auto it = ref.weights[n].find(key);
                if (it != ref.weights[n].end()) dot += std::min(wh, it->second) * it->second;
            }
            score[n] += penalty * dot / (hyp.norm[n] * ref.norm[n]);
        }
    }
    double total = 0.0;
    for (int n = 0; n < kMaxNgramOrder; ++n)
        total += score[n] / static_cast<double>(references.size());
    return 10.0 * total / kMaxNgramOrder;
}

inline CiderResult cider_d(const std::vector<TokenSeq>& candidates,
                           const std::vector<std::vector<TokenSeq>>& references,
                           const CorpusIdf& idf, double sigma = 6.0) {
    if (candidates.size() != references.size())
        throw ContractError("cider_d: candidate/reference count mismatch");
    CiderResult out;
    for (std::size_t i = 0; i < candidates.size(); ++i)
        out.per_item.push_back(cider_d_item(candidates[i], references[i], idf, sigma));
    if (!out.per_item.empty()) {
        double s = 0.0;
        for (double v : out.per_item) s += v;
        out.mean = s / static_cast<double>(out.per_item.size());
    }
    return out;
}

}  // namespace cma
