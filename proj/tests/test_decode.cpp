#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>
#include <random>

#include "cma/decode.hpp"

using namespace cma;

namespace {

// A toy Markov "model": per-(prev, step) transition table, state = step index.
struct ToyModel {
    std::size_t vocab;
    std::vector<std::vector<std::vector<double>>> table;  // [step][prev] -> dist

    static ToyModel random(std::size_t vocab, std::size_t steps, std::mt19937_64& rng) {
        ToyModel m;
        m.vocab = vocab;
        m.table.resize(steps);
        std::uniform_real_distribution<double> U(0.05, 1.0);
        for (auto& per_prev : m.table) {
            per_prev.resize(vocab);
            for (auto& dist : per_prev) {
                dist.resize(vocab);
                double z = 0;
                for (auto& p : dist) {
                    p = U(rng);
                    z += p;
                }
                for (auto& p : dist) p /= z;
            }
        }
        return m;
    }

    auto stepper() const {
        return [this](int prev, const std::size_t& step) {
            const std::size_t s = std::min(step, table.size() - 1);
            Tensor dist = Tensor::from({vocab}, table[s][static_cast<std::size_t>(prev)]);
            return std::pair<Tensor, std::size_t>(dist, step + 1);
        };
    }
};

}  // namespace

TEST_CASE("argmax breaks ties toward the lowest index") {
    Tensor d = Tensor::from({4}, {0.25, 0.25, 0.3, 0.2});
    CHECK(argmax_token(d) == 2);
    Tensor tie = Tensor::from({4}, {0.3, 0.2, 0.3, 0.2});
    CHECK(argmax_token(tie) == 0);
}

TEST_CASE("greedy decode stops at the boundary token and caps at 16") {
    std::mt19937_64 rng(3);
    ToyModel m = ToyModel::random(6, 20, rng);
    // make token 0 (PAD) dominant after 3 steps from any prev
    for (std::size_t prev = 0; prev < 6; ++prev) {
        m.table[3][prev].assign(6, 0.02);
        m.table[3][prev][0] = 0.9;
    }
    for (std::size_t s = 0; s < 3; ++s)
        for (std::size_t prev = 0; prev < 6; ++prev) {
            m.table[s][prev].assign(6, 0.02);
            m.table[s][prev][2 + s] = 0.9;
        }
    Caption c = greedy_decode(m.stepper(), std::size_t{0}, 6);
    CHECK(c.content() == std::vector<int>{2, 3, 4});
    CHECK(c.tokens.size() == kCaptionSlots);
    CHECK(c.tokens.front() == Vocabulary::kPad);

    // a model that never emits PAD gets cut at 16 content tokens
    ToyModel never = ToyModel::random(6, 20, rng);
    for (auto& per_prev : never.table)
        for (auto& dist : per_prev) dist[0] = 0.0;
    Caption full = greedy_decode(never.stepper(), std::size_t{0}, 6);
    CHECK(full.content_length() == kMaxContentTokens);
}

TEST_CASE("beam width 1 reproduces greedy decoding token for token") {
    std::mt19937_64 rng(17);
    for (int trial = 0; trial < 50; ++trial) {
        ToyModel m = ToyModel::random(2 + trial % 7, 6 + trial % 4, rng);
        Caption g = greedy_decode(m.stepper(), std::size_t{0}, m.vocab);
        Caption b = beam_search(m.stepper(), std::size_t{0}, m.vocab, 1);
        CHECK(g.tokens == b.tokens);
    }
}

TEST_CASE("beam 3 finds the brute-force global maximum on a 2-step 3-word model") {
    std::mt19937_64 rng(29);
    for (int trial = 0; trial < 30; ++trial) {
        ToyModel m = ToyModel::random(3, 2, rng);
        // brute force over all sequences of content length <= 2 (token 0 ends)
        double best_lp = -1e300;
        std::vector<int> best;
        auto lp1 = [&](int prev, int tok, std::size_t step) {
            return std::log(m.table[step][static_cast<std::size_t>(prev)][static_cast<std::size_t>(tok)]);
        };
        for (int t1 = 0; t1 < 3; ++t1) {
            if (t1 == 0) {
                const double lp = lp1(0, 0, 0);
                if (lp > best_lp) best_lp = lp, best = {};
                continue;
            }
            for (int t2 = 0; t2 < 3; ++t2) {
                double lp = lp1(0, t1, 0) + lp1(t1, t2, 1);
                std::vector<int> seq{t1};
                if (t2 != 0) {
                    // sequence is cut by max_len with no terminator probability
                    seq.push_back(t2);
                } // else terminator consumed at step 1
                if (lp > best_lp || (lp == best_lp && seq < best)) best_lp = lp, best = seq;
            }
        }
        Caption b = beam_search(m.stepper(), std::size_t{0}, 3, 3, 2);
        CHECK(b.content() == best);
    }
}

TEST_CASE("wider beams never return a lower-scoring sequence") {
    std::mt19937_64 rng(31);
    for (int trial = 0; trial < 20; ++trial) {
        ToyModel m = ToyModel::random(5, 6, rng);
        auto score = [&](const Caption& c) {
            double lp = 0;
            int prev = 0;
            std::size_t step = 0;
            for (int t : c.content()) {
                lp += std::log(m.table[std::min(step, m.table.size() - 1)][prev][static_cast<std::size_t>(t)]);
                prev = t;
                ++step;
            }
            if (c.content_length() < kMaxContentTokens)
                lp += std::log(m.table[std::min(step, m.table.size() - 1)][prev][0]);
            return lp;
        };
        double prev_score = -1e300;
        for (std::size_t width : {1u, 2u, 4u, 8u}) {
            const double s = score(beam_search(m.stepper(), std::size_t{0}, 5, width, 6));
            CHECK(s >= prev_score - 1e-12);
            prev_score = s;
        }
    }
}

TEST_CASE("sampling follows the model distribution") {
    // single-step model: dist over 4 tokens; token 0 terminates immediately
    std::vector<double> probs = {0.1, 0.2, 0.3, 0.4};
    auto step = [&](int, const int& s) {
        return std::pair<Tensor, int>(Tensor::from({4}, probs), s + 1);
    };
    std::mt19937_64 rng(12345);
    std::map<int, int> first_token_counts;
    const int draws = 100000;
    for (int i = 0; i < draws; ++i) {
        auto out = sample_decode(step, 0, 4, rng, 1);
        const auto c = out.caption.content();
        first_token_counts[c.empty() ? 0 : c[0]]++;
    }
    for (int t = 0; t < 4; ++t) {
        const double freq = first_token_counts[t] / static_cast<double>(draws);
        CHECK(std::abs(freq - probs[static_cast<std::size_t>(t)]) < 0.01);
    }
}

TEST_CASE("sampling returns the log-probability of each drawn token") {
    std::mt19937_64 rng(7);
    ToyModel m = ToyModel::random(5, 8, rng);
    std::mt19937_64 draw(99);
    auto out = sample_decode(m.stepper(), std::size_t{0}, 5, draw);
    const auto content = out.caption.content();
    // terminating PAD present unless cut at max length
    const std::size_t expect =
        content.size() + (content.size() < kMaxContentTokens ? 1 : 0);
    REQUIRE(out.step_log_probs.size() == expect);
    int prev = 0;
    for (std::size_t i = 0; i < content.size(); ++i) {
        const double want =
            std::log(m.table[std::min(i, m.table.size() - 1)][prev][static_cast<std::size_t>(content[i])]);
        CHECK(out.step_log_probs[i].item() == doctest::Approx(want).epsilon(1e-12));
        prev = content[i];
    }
}

TEST_CASE("sampling is deterministic given the generator state") {
    std::mt19937_64 rng(7);
    ToyModel m = ToyModel::random(6, 8, rng);
    std::mt19937_64 a(424242), b(424242);
    for (int i = 0; i < 10; ++i) {
        auto ra = sample_decode(m.stepper(), std::size_t{0}, 6, a);
        auto rb = sample_decode(m.stepper(), std::size_t{0}, 6, b);
        CHECK(ra.caption.tokens == rb.caption.tokens);
    }
}

TEST_CASE("beam rejects a zero width") {
    std::mt19937_64 rng(7);
    ToyModel m = ToyModel::random(4, 4, rng);
    CHECK_THROWS_AS(beam_search(m.stepper(), std::size_t{0}, 4, 0), ContractError);
}
