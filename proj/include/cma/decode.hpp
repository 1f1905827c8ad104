#pragma once

// Greedy, beam-search, and sampled decoding over any step function of the
// form step(prev_token, state) -> (distribution tensor, next state).
// Captions honor the 18-slot boundary-PAD convention: generation starts from
// the boundary PAD and stops on emitting PAD or at 16 content tokens.

#include <algorithm>
#include <cmath>
#include <random>
#include <utility>
#include <vector>

#include "cma/captioner.hpp"
#include "cma/tensor.hpp"
#include "cma/vocab.hpp"

namespace cma {

// Argmax with ties broken by lowest index.
inline int argmax_token(const Tensor& dist) {
    int best = 0;
    double best_v = dist.at(0);
    for (std::size_t i = 1; i < dist.size(); ++i)
        if (dist.at(i) > best_v) {
            best_v = dist.at(i);
            best = static_cast<int>(i);
        }
    return best;
}

template <class State, class StepFn>
Caption greedy_decode(StepFn&& step, State state, std::size_t vocab_size,
                      std::size_t max_len = kMaxContentTokens) {
    std::vector<int> content;
    int prev = Vocabulary::kPad;
    while (content.size() < max_len) {
        auto [dist, next] = step(prev, state);
        const int tok = argmax_token(dist);
        if (tok == Vocabulary::kPad) break;
        content.push_back(tok);
        prev = tok;
        state = std::move(next);
    }
    return Caption::from_content(std::move(content), CaptionRole::kDraft, vocab_size);
}

template <class State>
struct BeamHypothesis {
    std::vector<int> tokens;  // content tokens
    double log_prob = 0.0;    // exact sum of per-step log p(token), PAD included
    State state;
    bool finished = false;
};

// Length-synchronous beam search; finished hypotheses are held aside and
// compete with active ones at termination. Scoring is raw summed
// log-probability, no length normalization. beam(1) equals greedy_decode
// token for token.
template <class State, class StepFn>
Caption beam_search(StepFn&& step, State initial, std::size_t vocab_size, std::size_t beam = 3,
                    std::size_t max_len = kMaxContentTokens) {
    if (beam < 1) throw ContractError("beam_search: beam must be >= 1");
    using Hyp = BeamHypothesis<State>;
    std::vector<Hyp> active{Hyp{{}, 0.0, std::move(initial), false}};
    std::vector<Hyp> finished;

    for (std::size_t t = 0; t < max_len && !active.empty(); ++t) {
        std::vector<Hyp> candidates;
        for (auto& h : active) {
            const int prev = h.tokens.empty() ? Vocabulary::kPad : h.tokens.back();
            auto [dist, next] = step(prev, h.state);
            for (std::size_t tok = 0; tok < dist.size(); ++tok) {
                const double p = dist.at(tok);
                const double lp = h.log_prob + (p > 0.0 ? std::log(p) : -1e300);
                Hyp c = h;
                c.log_prob = lp;
                if (tok == static_cast<std::size_t>(Vocabulary::kPad)) {
                    c.finished = true;  // terminator competes for a beam slot like any token
                } else {
                    c.tokens.push_back(static_cast<int>(tok));
                    c.state = next;
                }
                candidates.push_back(std::move(c));
            }
        }
        const std::size_t keep = std::min(beam, candidates.size());
        std::partial_sort(candidates.begin(), candidates.begin() + keep, candidates.end(),
                          [](const Hyp& a, const Hyp& b) {
                              if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
                              return a.tokens < b.tokens;
                          });
        candidates.resize(keep);
        active.clear();
        for (auto& c : candidates) {
            if (c.finished)
                finished.push_back(std::move(c));
            else
                active.push_back(std::move(c));
        }
    }
    for (auto& h : active) finished.push_back(std::move(h));
    const Hyp* best = nullptr;
    for (const auto& h : finished)
        if (!best || h.log_prob > best->log_prob ||
            (h.log_prob == best->log_prob && h.tokens < best->tokens))
            best = &h;
    if (!best) throw ContractError("beam_search: no hypothesis produced");
    return Caption::from_content(best->tokens, CaptionRole::kDraft, vocab_size);
}

template <class State>
struct SampleResult {
    Caption caption;
    std::vector<Tensor> step_log_probs;  // scalar tensors, grad-capable
    State final_state{};
};

// Multinomial draw per step via inverse-CDF walk (deterministic given rng).
// Returns the log-probabilities of the drawn tokens for the policy gradient;
// the terminating PAD draw is included.
template <class State, class StepFn>
SampleResult<State> sample_decode(StepFn&& step, State state, std::size_t vocab_size,
                                  std::mt19937_64& rng, std::size_t max_len = kMaxContentTokens) {
    SampleResult<State> out;
    std::vector<int> content;
    int prev = Vocabulary::kPad;
    for (std::size_t t = 0; t < max_len; ++t) {
        auto [dist, next] = step(prev, state);
        const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
        double cum = 0.0;
        int tok = static_cast<int>(dist.size()) - 1;
        for (std::size_t i = 0; i < dist.size(); ++i) {
            cum += dist.at(i);
            if (u < cum) {
                tok = static_cast<int>(i);
                break;
            }
        }
        out.step_log_probs.push_back(log_op(pick(dist, static_cast<std::size_t>(tok))));
        state = std::move(next);
        if (tok == Vocabulary::kPad) break;
        content.push_back(tok);
        prev = tok;
    }
    out.caption = Caption::from_content(std::move(content), CaptionRole::kDraft, vocab_size);
    out.final_state = std::move(state);
    return out;
}

// --- step-function adapters for the caption model --------------------------

inline auto draft_stepper(const CaptionModel& m, const Tensor& vr) {
    return [&m, vr](int prev, const DecoderState& st) {
        auto out = m.drafting_step(vr, prev, st);
        return std::pair<Tensor, DecoderState>(out.dist, out.state);
    };
}

inline auto delib_stepper(const CaptionModel& m, const Tensor& a, const Tensor& b) {
    return [&m, a, b](int prev, const DecoderState& st) {
        auto out = m.deliberation_step(a, b, prev, st);
        return std::pair<Tensor, DecoderState>(out.dist, out.state);
    };
}

}  // namespace cma
