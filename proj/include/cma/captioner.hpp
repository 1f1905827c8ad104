#pragma once

// The two interrelated models: the drafting model (refining encoder +
// top-down drafting decoder) and the deliberation model (deliberation
// encoder + cross-modification deliberation decoder). They share the
// refining encoder: its parameters belong to both models.

#include <random>
#include <string>
#include <utility>
#include <vector>

#include "cma/attention.hpp"
#include "cma/lstm.hpp"
#include "cma/tensor.hpp"
#include "cma/vocab.hpp"

namespace cma {

struct ModelConfig {
    std::size_t vocab_size = 0;
    std::size_t d_b = 32;   // raw region feature width
    std::size_t d_r = 64;   // refined feature width
    std::size_t d_d = 64;   // embedding / hidden width
    std::size_t heads = 4;
    std::size_t d_c = 16;   // projected query/key width per head
    std::size_t d_cp = 16;  // projected value width per head
    std::size_t d_o = 64;   // attention context width
    CmaMode mode = CmaMode::kCmaD;
    bool residual_visual = true;
    bool residual_textual = false;

    // The full-scale preset (kept as configuration; not the test default).
    static ModelConfig full_scale_preset(std::size_t vocab_size) {
        ModelConfig c;
        c.vocab_size = vocab_size;
        c.d_b = 2048;
        c.d_r = c.d_d = c.d_o = 1024;
        c.heads = 8;
        c.d_c = c.d_cp = 128;
        return c;
    }
};

struct DecoderState {
    LstmState att;   // attention LSTM
    LstmState lang;  // language LSTM

    static DecoderState zeros(std::size_t d) { return {LstmState::zeros(d), LstmState::zeros(d)}; }
};

struct DraftStepOut {
    Tensor dist;  // 1 x |vocab|
    DecoderState state;
};

struct DelibStepOut {
    Tensor dist;
    DecoderState state;
    CmaOutput cma;
};

class CaptionModel {
  public:
    ModelConfig cfg;

    // Refining encoder (theta_r, shared by both models).
    Tensor refine_w, refine_b;

    // Drafting decoder (theta_d1).
    Tensor draft_embed;
    LstmParams draft_att_lstm;
    MultiHeadParams draft_mh;
    LstmParams draft_lang_lstm;
    Tensor draft_out_w, draft_out_b;

    // Deliberation encoder (theta_d) and decoder (theta_d2).
    Tensor delib_embed_draft;        // W_e^D
    Tensor delib_w_a, delib_b_a;     // refined features -> A
    Tensor delib_w_b, delib_b_b;     // draft embeddings -> B
    Tensor delib_embed_in;           // W_e^1, distinct from W_e^D
    LstmParams delib_att_lstm;
    CmaParams cma;
    LstmParams delib_lang_lstm;
    Tensor delib_out_w, delib_out_b;

    static CaptionModel create(const ModelConfig& cfg, std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        CaptionModel m;
        m.cfg = cfg;
        const std::size_t v = cfg.vocab_size, d = cfg.d_d;

        m.refine_w = Tensor::param({cfg.d_b, cfg.d_r}, init_matrix(cfg.d_b, cfg.d_r, rng));
        m.refine_b = Tensor::param({cfg.d_r}, std::vector<double>(cfg.d_r, 0.0));

        m.draft_embed = Tensor::param({v, d}, init_matrix(v, d, rng));
        m.draft_att_lstm = LstmParams::create(d + cfg.d_r + d, d, rng);
        m.draft_mh = MultiHeadParams::create(cfg.heads, d, cfg.d_r, cfg.d_r, cfg.d_c, cfg.d_cp,
                                             cfg.d_o, rng);
        m.draft_lang_lstm = LstmParams::create(d + cfg.d_o, d, rng);
        m.draft_out_w = Tensor::param({d, v}, init_matrix(d, v, rng));
        m.draft_out_b = Tensor::param({v}, std::vector<double>(v, 0.0));

        m.delib_embed_draft = Tensor::param({v, d}, init_matrix(v, d, rng));
        m.delib_w_a = Tensor::param({cfg.d_r, d}, init_matrix(cfg.d_r, d, rng));
        m.delib_b_a = Tensor::param({d}, std::vector<double>(d, 0.0));
        m.delib_w_b = Tensor::param({d, d}, init_matrix(d, d, rng));
        m.delib_b_b = Tensor::param({d}, std::vector<double>(d, 0.0));
        m.delib_embed_in = Tensor::param({v, d}, init_matrix(v, d, rng));
        m.delib_att_lstm = LstmParams::create(4 * d, d, rng);
        m.cma = CmaParams::create(cfg.heads, d, d, d, cfg.d_c, cfg.d_cp, cfg.d_o, rng);
        m.cma.mode = cfg.mode;
        m.cma.residual_visual = cfg.residual_visual;
        m.cma.residual_textual = cfg.residual_textual;
        m.delib_lang_lstm = LstmParams::create(d + 2 * cfg.d_o, d, rng);
        m.delib_out_w = Tensor::param({d, v}, init_matrix(d, v, rng));
        m.delib_out_b = Tensor::param({v}, std::vector<double>(v, 0.0));
        return m;
    }

    // --- parameter enumeration -------------------------------------------

    std::vector<Tensor> params_refiner() const { return {refine_w, refine_b}; }

    std::vector<Tensor> params_drafting_decoder() const {
        std::vector<Tensor> out{draft_embed};
        draft_att_lstm.collect(out);
        draft_mh.collect(out);
        draft_lang_lstm.collect(out);
        out.push_back(draft_out_w);
        out.push_back(draft_out_b);
        return out;
    }

    std::vector<Tensor> params_deliberation() const {
        std::vector<Tensor> out{delib_embed_draft, delib_w_a, delib_b_a, delib_w_b, delib_b_b,
                                delib_embed_in};
        delib_att_lstm.collect(out);
        cma.collect(out);
        delib_lang_lstm.collect(out);
        out.push_back(delib_out_w);
        out.push_back(delib_out_b);
        return out;
    }

    // theta_1 = theta_r + theta_d1
    std::vector<Tensor> params_theta1() const {
        auto out = params_refiner();
        for (auto& t : params_drafting_decoder()) out.push_back(t);
        return out;
    }

    // theta_2 = theta_r + theta_d + theta_d2
    std::vector<Tensor> params_theta2() const {
        auto out = params_refiner();
        for (auto& t : params_deliberation()) out.push_back(t);
        return out;
    }

    std::vector<Tensor> all_params() const {
        auto out = params_refiner();
        for (auto& t : params_drafting_decoder()) out.push_back(t);
        for (auto& t : params_deliberation()) out.push_back(t);
        return out;
    }

    // Stable name -> tensor listing for the checkpoint manifest.
    std::vector<std::pair<std::string, Tensor>> named_params() const {
        std::vector<std::pair<std::string, Tensor>> out;
        auto push_group = [&](const std::string& prefix, const std::vector<Tensor>& ts) {
            for (std::size_t i = 0; i < ts.size(); ++i)
                out.emplace_back(prefix + "." + std::to_string(i), ts[i]);
        };
        push_group("refiner", params_refiner());
        push_group("drafting", params_drafting_decoder());
        push_group("deliberation", params_deliberation());
        return out;
    }

    // --- forward operations ----------------------------------------------

    // V^R = ReLU(V^B W + b), shared by both decoding passes.
    Tensor refine_features(const Tensor& vb) const {
        if (vb.shape().size() != 2 || vb.shape()[1] != cfg.d_b)
            throw DimensionError("refine_features: input " + shape_str(vb.shape()) +
                                 " does not match d_b=" + std::to_string(cfg.d_b));
        if (vb.shape()[0] == 0) throw EmptyInputError("refine_features: no regions");
        return relu(add_bias(matmul(vb, refine_w), refine_b));
    }

    // One top-down drafting decoder step.
    DraftStepOut drafting_step(const Tensor& vr, int prev_word, const DecoderState& st) const {
        check_token(prev_word);
        Tensor emb = row(draft_embed, static_cast<std::size_t>(prev_word));
        Tensor vbar = reshape(mean_rows(vr), {1, cfg.d_r});
        Tensor x1 = concat_last({emb, vbar, st.lang.h});
        LstmState s1 = lstm_cell(x1, st.att, draft_att_lstm);
        auto mh = multi_head(s1.h, vr, vr, draft_mh);
        Tensor x2 = concat_last(s1.h, mh.context);
        LstmState s2 = lstm_cell(x2, st.lang, draft_lang_lstm);
        Tensor dist = softmax(add_bias(matmul(s2.h, draft_out_w), draft_out_b), 1);
        return {dist, {s1, s2}};
    }

    // V^D: one row of W_e^D per draft slot (all 18, PADs included).
    Tensor embed_draft(const Caption& draft) const {
        if (draft.tokens.size() != kCaptionSlots)
            throw ContractError("embed_draft: draft must have " + std::to_string(kCaptionSlots) +
                                " slots");
        for (int t : draft.tokens) check_token(t);
        return gather_rows(delib_embed_draft, draft.tokens);
    }

    // A = ReLU(V^R W_d^A + b), B = ReLU(V^D W_d^B + b).
    std::pair<Tensor, Tensor> project_modalities(const Tensor& vr, const Tensor& vd) const {
        Tensor a = relu(add_bias(matmul(vr, delib_w_a), delib_b_a));
        Tensor b = relu(add_bias(matmul(vd, delib_w_b), delib_b_b));
        return {a, b};
    }

    // One deliberation decoder step; exports the CMA weights for dumping.
    DelibStepOut deliberation_step(const Tensor& a, const Tensor& b, int prev_word,
                                   const DecoderState& st) const {
        check_token(prev_word);
        Tensor emb = row(delib_embed_in, static_cast<std::size_t>(prev_word));
        Tensor abar = reshape(mean_rows(a), {1, cfg.d_d});
        Tensor bbar = reshape(mean_rows(b), {1, cfg.d_d});
        Tensor x1 = concat_last({emb, abar, bbar, st.lang.h});
        LstmState s1 = lstm_cell(x1, st.att, delib_att_lstm);
        CmaOutput co = cma_forward(s1.h, a, b, cma);
        Tensor x2 = concat_last(s1.h, co.visual_context, co.textual_context);
        LstmState s2 = lstm_cell(x2, st.lang, delib_lang_lstm);
        Tensor dist = softmax(add_bias(matmul(s2.h, delib_out_w), delib_out_b), 1);
        return {dist, {s1, s2}, std::move(co)};
    }

  private:
    void check_token(int t) const {
        if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab_size)
            throw VocabularyError("token " + std::to_string(t) + " out of vocabulary of size " +
                                  std::to_string(cfg.vocab_size));
    }
};

}  // namespace cma
