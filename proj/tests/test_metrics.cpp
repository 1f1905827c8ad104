#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>
#include <random>
#include <vector>

#include "cma/metrics.hpp"

using namespace cma;

namespace {

// --- brute-force CIDEr-D oracle built on plain std::map over raw n-grams ---

using Ngram = std::vector<int>;
using NgramMap = std::map<Ngram, double>;

NgramMap raw_ngrams(const TokenSeq& s, int n) {
    NgramMap m;
    if (static_cast<int>(s.size()) >= n)
        for (std::size_t i = 0; i + n <= s.size(); ++i)
            m[Ngram(s.begin() + i, s.begin() + i + n)] += 1.0;
    return m;
}

double oracle_cider_d(const std::vector<TokenSeq>& cands,
                      const std::vector<std::vector<TokenSeq>>& refs, double sigma = 6.0) {
    const std::size_t N = refs.size();
    // document frequency: number of images whose reference set contains the n-gram
    std::array<NgramMap, 4> df;
    for (const auto& rs : refs) {
        std::array<NgramMap, 4> seen;
        for (const auto& r : rs)
            for (int n = 1; n <= 4; ++n)
                for (const auto& [g, c] : raw_ngrams(r, n)) seen[n - 1][g] = 1.0;
        for (int n = 0; n < 4; ++n)
            for (const auto& [g, c] : seen[n]) df[n][g] += 1.0;
    }
    auto idf = [&](int n, const Ngram& g) {
        auto it = df[n].find(g);
        const double d = it == df[n].end() ? 1.0 : std::max(1.0, it->second);
        return std::log(static_cast<double>(N)) - std::log(d);
    };
    auto vec = [&](const TokenSeq& s, int n) {
        NgramMap v = raw_ngrams(s, n + 1);
        for (auto& [g, c] : v) c *= idf(n, g);
        return v;
    };
    auto norm = [](const NgramMap& v) {
        double s = 0;
        for (const auto& [g, w] : v) s += w * w;
        return std::sqrt(s);
    };

    double total = 0;
    for (std::size_t i = 0; i < cands.size(); ++i) {
        double item = 0;
        for (int n = 0; n < 4; ++n) {
            NgramMap hv = vec(cands[i], n);
            const double hn = norm(hv);
            double per_n = 0;
            for (const auto& r : refs[i]) {
                NgramMap rv = vec(r, n);
                const double rn = norm(rv);
                if (hn <= 0 || rn <= 0) continue;
                double dot = 0;
                for (const auto& [g, wh] : hv) {
                    auto it = rv.find(g);
                    if (it != rv.end()) dot += std::min(wh, it->second) * it->second;
                }
                const double delta =
                    static_cast<double>(cands[i].size()) - static_cast<double>(r.size());
                per_n += std::exp(-delta * delta / (2 * sigma * sigma)) * dot / (hn * rn);
            }
            item += per_n / static_cast<double>(refs[i].size());
        }
        total += 10.0 * item / 4.0;
    }
    return total / static_cast<double>(cands.size());
}

}  // namespace

TEST_CASE("identical candidate and reference score perfectly") {
    TokenSeq s = {4, 7, 2, 9, 3, 5};
    std::vector<TokenSeq> cands{s, s};
    std::vector<std::vector<TokenSeq>> refs{{s}, {s, {1, 2}}};
    auto b = bleu(cands, refs);
    CHECK(b.b[0] == 1.0);
    CHECK(b.b[3] == 1.0);
    CHECK(rouge_l(s, {s}) == 1.0);
    CHECK(rouge_l_corpus(cands, refs) == 1.0);
}

TEST_CASE("bleu brevity penalty worked example") {
    // candidate 'the cat sat' (3 tokens) vs one 4-token reference, all
    // unigrams matched and one shared bigram: BP = e^(1 - 4/3)
    TokenSeq cand = {10, 11, 12};
    TokenSeq ref = {10, 11, 12, 13};
    auto b = bleu({cand}, {{ref}});
    const double bp = std::exp(1.0 - 4.0 / 3.0);
    CHECK(b.b[0] == doctest::Approx(bp * 1.0).epsilon(1e-12));
    CHECK(b.b[1] == doctest::Approx(bp * 1.0).epsilon(1e-12));  // 2/2 bigrams
    CHECK(b.b[3] == 0.0);  // no 4-gram in the candidate
}

TEST_CASE("bleu picks the closest reference length, shorter on ties") {
    TokenSeq cand = {1, 2, 3};
    // lengths 2 and 4 are equidistant: the shorter one wins, BP = 1
    auto b = bleu({cand}, {{{1, 2}, {1, 2, 3, 4}}});
    CHECK(b.b[0] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("rouge-l worked example with beta 1.2") {
    // candidate 'a b c d' vs reference 'a c d': LCS = 3
    TokenSeq cand = {1, 2, 3, 4};
    TokenSeq ref = {1, 3, 4};
    const double p = 3.0 / 4.0, r = 3.0 / 3.0, beta = 1.2;
    const double f = (1 + beta * beta) * p * r / (r + beta * beta * p);
    CHECK(rouge_l(cand, {ref}) == doctest::Approx(f).epsilon(1e-12));
    // max over references
    CHECK(rouge_l(cand, {ref, cand}) == doctest::Approx(1.0));
    CHECK(rouge_l({}, {ref}) == 0.0);
}

TEST_CASE("cider-d matches the brute-force oracle on five hand-built corpora") {
    const std::vector<std::pair<std::vector<TokenSeq>, std::vector<std::vector<TokenSeq>>>> cases =
        {
            // 1: two images, candidate equals one reference
            {{{2, 3, 4, 5}, {6, 7, 8}},
             {{{2, 3, 4, 5}, {2, 3, 9}}, {{6, 7, 8}, {6, 10, 8}}}},
            // 2: disjoint candidate
            {{{11, 12}, {2, 3, 4}}, {{{5, 6, 7}}, {{2, 3, 4, 8}, {2, 3}}}},
            // 3: length mismatch exercises the Gaussian penalty
            {{{2, 3}, {2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13}},
             {{{2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13}}, {{2, 3}}}},
            // 4: repeated n-grams exercise the min clipping
            {{{4, 4, 4, 4, 4}, {4, 5, 4, 5}}, {{{4, 4, 5}}, {{4, 5, 4, 5, 4, 5}}}},
            // 5: three images, mixed overlap
            {{{1, 2, 3, 4, 5}, {5, 4, 3, 2, 1}, {1, 2, 3}},
             {{{1, 2, 3, 4, 6}, {1, 2, 3}}, {{5, 4, 3}, {9, 9, 9, 9}}, {{1, 2, 3}, {1, 2, 3, 4}}}},
        };
    for (const auto& [cands, refs] : cases) {
        auto idf = CorpusIdf::build(refs);
        const double got = cider_d(cands, refs, idf).mean;
        const double want = oracle_cider_d(cands, refs);
        CHECK(got == doctest::Approx(want).epsilon(1e-9));
    }
}

TEST_CASE("cider-d of a candidate identical to its only reference, two-image corpus") {
    std::vector<TokenSeq> cands{{2, 3, 4, 5, 6}, {7, 8, 9, 10, 11}};
    std::vector<std::vector<TokenSeq>> refs{{cands[0]}, {cands[1]}};
    auto idf = CorpusIdf::build(refs);
    auto r = cider_d(cands, refs, idf);
    CHECK(r.per_item[0] == doctest::Approx(10.0).epsilon(1e-9));
    CHECK(r.mean == doctest::Approx(10.0).epsilon(1e-9));
}

TEST_CASE("single-image corpus is degenerate: idf carries no information") {
    std::vector<TokenSeq> cands{{1, 2, 3}};
    std::vector<std::vector<TokenSeq>> refs{{{1, 2, 3}}};
    auto idf = CorpusIdf::build(refs);
    CHECK(idf.degenerate());
    CHECK(cider_d(cands, refs, idf).mean == 0.0);
}

TEST_CASE("metrics respond to word order") {
    TokenSeq ref = {1, 2, 3, 4, 5};
    TokenSeq shuffled = {5, 3, 1, 4, 2};
    auto straight = bleu({ref}, {{ref}});
    auto scrambled = bleu({shuffled}, {{ref}});
    CHECK(straight.b[1] > scrambled.b[1]);
    CHECK(rouge_l(ref, {ref}) > rouge_l(shuffled, {ref}));

    std::vector<std::vector<TokenSeq>> refs{{ref}, {{9, 8, 7}}};
    auto idf = CorpusIdf::build(refs);
    CHECK(cider_d_item(ref, refs[0], idf) > cider_d_item(shuffled, refs[0], idf));
}

TEST_CASE("score ranges") {
    std::mt19937_64 rng(5);
    std::uniform_int_distribution<int> tok(1, 20), len(1, 12);
    for (int trial = 0; trial < 200; ++trial) {
        auto rs = [&] {
            TokenSeq s(static_cast<std::size_t>(len(rng)));
            for (auto& t : s) t = tok(rng);
            return s;
        };
        std::vector<TokenSeq> cands{rs(), rs(), rs()};
        std::vector<std::vector<TokenSeq>> refs{{rs(), rs()}, {rs()}, {rs(), rs(), rs()}};
        auto b = bleu(cands, refs);
        for (double v : b.b) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0 + 1e-12);
        }
        const double r = rouge_l_corpus(cands, refs);
        CHECK(r >= 0.0);
        CHECK(r <= 1.0 + 1e-12);
        auto idf = CorpusIdf::build(refs);
        for (double v : cider_d(cands, refs, idf).per_item) {
            CHECK(v >= 0.0);
            CHECK(v <= 10.0 + 1e-9);
        }
    }
}

TEST_CASE("contract errors on malformed corpora") {
    CHECK_THROWS_AS(bleu({}, {}), ContractError);
    CHECK_THROWS_AS(bleu({{1}}, {{{1}}, {{2}}}), ContractError);
    CHECK_THROWS_AS(rouge_l({1, 2}, {}), ContractError);
    auto idf = CorpusIdf::build({{{1, 2}}, {{3}}});
    CHECK_THROWS_AS(cider_d_item({1}, {}, idf), ContractError);
}
