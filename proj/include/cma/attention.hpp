#pragma once

// Scaled dot-product attention, multi-head attention, GLU gating, and the
// cross modification module that mutually corrects visual and textual
// context vectors. Attention mode and residual placement are runtime
// configuration so ablations are pure config changes.

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "cma/error.hpp"
#include "cma/tensor.hpp"

namespace cma {

enum class CmaMode { kVisualOnly, kTextualOnly, kParallel, kCmaD };

inline const char* to_string(CmaMode m) {
    switch (m) {
        case CmaMode::kVisualOnly: return "visual_only";
        case CmaMode::kTextualOnly: return "textual_only";
        case CmaMode::kParallel: return "parallel";
        case CmaMode::kCmaD: return "cma_d";
    }
    return "?";
}

inline CmaMode cma_mode_from(const std::string& s) {
    if (s == "visual_only") return CmaMode::kVisualOnly;
    if (s == "textual_only") return CmaMode::kTextualOnly;
    if (s == "parallel") return CmaMode::kParallel;
    if (s == "cma_d") return CmaMode::kCmaD;
    throw ContractError("unknown CMA mode: " + s +
                        " (valid: visual_only, textual_only, parallel, cma_d)");
}

// Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) matrix initialization.
inline std::vector<double> init_matrix(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<double> v(fan_in * fan_out);
    for (double& x : v) x = dist(rng);
    return v;
}

struct MultiHeadParams {
    std::size_t heads = 0;
    std::size_t d_q = 0, d_k = 0, d_v = 0;
    std::size_t d_c = 0;   // projected query/key width per head
    std::size_t d_cp = 0;  // projected value width per head
    std::size_t d_o = 0;
    std::vector<Tensor> w_q;  // per head, d_q x d_c
    std::vector<Tensor> w_k;  // per head, d_k x d_c
    std::vector<Tensor> w_v;  // per head, d_v x d_cp
    Tensor w_o;               // (heads * d_cp) x d_o

    static MultiHeadParams create(std::size_t heads, std::size_t d_q, std::size_t d_k,
                                  std::size_t d_v, std::size_t d_c, std::size_t d_cp,
                                  std::size_t d_o, std::mt19937_64& rng) {
        MultiHeadParams p;
        p.heads = heads;
        p.d_q = d_q;
        p.d_k = d_k;
        p.d_v = d_v;
        p.d_c = d_c;
        p.d_cp = d_cp;
        p.d_o = d_o;
        for (std::size_t h = 0; h < heads; ++h) {
            p.w_q.push_back(Tensor::param({d_q, d_c}, init_matrix(d_q, d_c, rng)));
            p.w_k.push_back(Tensor::param({d_k, d_c}, init_matrix(d_k, d_c, rng)));
            p.w_v.push_back(Tensor::param({d_v, d_cp}, init_matrix(d_v, d_cp, rng)));
        }
        p.w_o = Tensor::param({heads * d_cp, d_o}, init_matrix(heads * d_cp, d_o, rng));
        return p;
    }

    void collect(std::vector<Tensor>& out) const {
        for (const auto& t : w_q) out.push_back(t);
        for (const auto& t : w_k) out.push_back(t);
        for (const auto& t : w_v) out.push_back(t);
        out.push_back(w_o);
    }
};

struct GluParams {
    Tensor w_p, b_p;  // (d_q + d_o) x d_o, d_o
    Tensor w_g, b_g;

    static GluParams create(std::size_t d_q, std::size_t d_o, std::mt19937_64& rng) {
        GluParams g;
        g.w_p = Tensor::param({d_q + d_o, d_o}, init_matrix(d_q + d_o, d_o, rng));
        g.b_p = Tensor::param({d_o}, std::vector<double>(d_o, 0.0));
        g.w_g = Tensor::param({d_q + d_o, d_o}, init_matrix(d_q + d_o, d_o, rng));
        g.b_g = Tensor::param({d_o}, std::vector<double>(d_o, 0.0));
        return g;
    }

    void collect(std::vector<Tensor>& out) const {
        out.push_back(w_p);
        out.push_back(b_p);
        out.push_back(w_g);
        out.push_back(b_g);
    }
};

struct CmaParams {
    MultiHeadParams mh_a;  // queries over visual features
    MultiHeadParams mh_b;  // queries over textual features
    GluParams glu_a;
    GluParams glu_b;
    Tensor w_c_a, b_c_a;  // (d_q + 2 d_o) x d_o cross gate, visual side
    Tensor w_c_b, b_c_b;
    CmaMode mode = CmaMode::kCmaD;
    bool residual_visual = true;
    bool residual_textual = false;

    static CmaParams create(std::size_t heads, std::size_t d_q, std::size_t d_a, std::size_t d_b,
                            std::size_t d_c, std::size_t d_cp, std::size_t d_o,
                            std::mt19937_64& rng) {
        CmaParams p;
        p.mh_a = MultiHeadParams::create(heads, d_q, d_a, d_a, d_c, d_cp, d_o, rng);
        p.mh_b = MultiHeadParams::create(heads, d_q, d_b, d_b, d_c, d_cp, d_o, rng);
        p.glu_a = GluParams::create(d_q, d_o, rng);
        p.glu_b = GluParams::create(d_q, d_o, rng);
        const std::size_t din = d_q + 2 * d_o;
        p.w_c_a = Tensor::param({din, d_o}, init_matrix(din, d_o, rng));
        p.b_c_a = Tensor::param({d_o}, std::vector<double>(d_o, 0.0));
        p.w_c_b = Tensor::param({din, d_o}, init_matrix(din, d_o, rng));
        p.b_c_b = Tensor::param({d_o}, std::vector<double>(d_o, 0.0));
        return p;
    }

    std::size_t d_o() const { return mh_a.d_o; }

    void collect(std::vector<Tensor>& out) const {
        mh_a.collect(out);
        mh_b.collect(out);
        glu_a.collect(out);
        glu_b.collect(out);
        out.push_back(w_c_a);
        out.push_back(b_c_a);
        out.push_back(w_c_b);
        out.push_back(b_c_b);
    }
};

struct CmaOutput {
    Tensor visual_context;   // k x d_o
    Tensor textual_context;  // k x d_o
    std::vector<Tensor> visual_weights;   // per head, k x n
    std::vector<Tensor> textual_weights;  // per head, k x l
};

// softmax(Q K^T / sqrt(d_c)) V. The divisor uses the projected key width,
// the dimension actually dotted.
inline std::pair<Tensor, Tensor> scaled_dot_attention(const Tensor& q, const Tensor& k,
                                                      const Tensor& v) {
    if (q.shape().size() != 2 || k.shape().size() != 2 || v.shape().size() != 2)
        throw DimensionError("scaled_dot_attention: rank-2 inputs required");
    if (k.shape()[0] == 0) throw EmptyInputError("scaled_dot_attention: no keys");
    if (q.shape()[1] != k.shape()[1])
        throw DimensionError("scaled_dot_attention: query width " + shape_str(q.shape()) +
                             " vs key width " + shape_str(k.shape()));
    if (k.shape()[0] != v.shape()[0])
        throw DimensionError("scaled_dot_attention: key count " + shape_str(k.shape()) +
                             " vs value count " + shape_str(v.shape()));
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(q.shape()[1]));
    Tensor scores = scale(matmul(q, transpose(k)), inv_sqrt);
    Tensor weights = softmax(scores, 1);
    return {matmul(weights, v), weights};
}

struct MultiHeadOutput {
    Tensor context;               // k x d_o
    std::vector<Tensor> weights;  // per head, k x m
};

inline MultiHeadOutput multi_head(const Tensor& q, const Tensor& k, const Tensor& v,
                                  const MultiHeadParams& p) {
    if (q.shape()[1] != p.d_q || k.shape()[1] != p.d_k || v.shape()[1] != p.d_v)
        throw DimensionError("multi_head: inputs " + shape_str(q.shape()) + "/" + shape_str(k.shape()) +
                             "/" + shape_str(v.shape()) + " do not match declared widths");
    MultiHeadOutput out;
    std::vector<Tensor> heads;
    heads.reserve(p.heads);
    for (std::size_t h = 0; h < p.heads; ++h) {
        Tensor qi = matmul(q, p.w_q[h]);
        Tensor ki = matmul(k, p.w_k[h]);
        Tensor vi = matmul(v, p.w_v[h]);
        auto [ctx, w] = scaled_dot_attention(qi, ki, vi);
        heads.push_back(ctx);
        out.weights.push_back(w);
    }
    out.context = matmul(concat_last(heads), p.w_o);
    return out;
}

// ([Q;C] W_p + b_p) * sigmoid([Q;C] W_g + b_g)
inline Tensor glu_filter(const Tensor& q, const Tensor& c, const GluParams& g) {
    if (q.shape()[0] != c.shape()[0])
        throw DimensionError("glu_filter: row mismatch " + shape_str(q.shape()) + " vs " +
                             shape_str(c.shape()));
    Tensor qc = concat_last(q, c);
    Tensor proj = add_bias(matmul(qc, g.w_p), g.b_p);
    Tensor gate = sigmoid(add_bias(matmul(qc, g.w_g), g.b_g));
    return mul(proj, gate);
}

// Mutual correction between the gated features, conditioned on the queries.
// Residual terms re-add the pre-gate contexts per the configuration flags.
inline std::pair<Tensor, Tensor> cross_modify(const Tensor& q, const Tensor& a2, const Tensor& b2,
                                              const Tensor& a1, const Tensor& b1,
                                              const CmaParams& p) {
    if (a2.shape()[0] != q.shape()[0] || b2.shape()[0] != q.shape()[0])
        throw DimensionError("cross_modify: row mismatch between queries and contexts");
    Tensor qab = concat_last(q, a2, b2);
    Tensor gate_a = sigmoid(add_bias(matmul(qab, p.w_c_a), p.b_c_a));
    Tensor gate_b = sigmoid(add_bias(matmul(qab, p.w_c_b), p.b_c_b));
    Tensor a_mod = mul(a2, gate_a);
    Tensor b_mod = mul(b2, gate_b);
    if (p.residual_visual) a_mod = add(a_mod, a1);
    if (p.residual_textual) b_mod = add(b_mod, b1);
    return {a_mod, b_mod};
}

// Full attention pipeline over visual features A and textual features B.
// visual_only / textual_only / parallel realize the ablation rows; cma_d is
// the full multi-head -> GLU -> cross-gate chain.
inline CmaOutput cma_forward(const Tensor& q, const Tensor& a, const Tensor& b,
                             const CmaParams& p) {
    const std::size_t k = q.shape()[0];
    if (k == 0) throw EmptyInputError("cma_forward: no queries");
    const bool needs_a = p.mode != CmaMode::kTextualOnly;
    const bool needs_b = p.mode != CmaMode::kVisualOnly;
    if (needs_a && a.shape()[0] == 0) throw EmptyInputError("cma_forward: empty visual features");
    if (needs_b && b.shape()[0] == 0) throw EmptyInputError("cma_forward: empty textual features");

    CmaOutput out;
    if (p.mode == CmaMode::kVisualOnly) {
        auto mh = multi_head(q, a, a, p.mh_a);
        out.visual_context = mh.context;
        out.visual_weights = std::move(mh.weights);
        out.textual_context = Tensor::zeros({k, p.d_o()});
        return out;
    }
    if (p.mode == CmaMode::kTextualOnly) {
        auto mh = multi_head(q, b, b, p.mh_b);
        out.textual_context = mh.context;
        out.textual_weights = std::move(mh.weights);
        out.visual_context = Tensor::zeros({k, p.d_o()});
        return out;
    }

    auto mh_a = multi_head(q, a, a, p.mh_a);
    auto mh_b = multi_head(q, b, b, p.mh_b);
    out.visual_weights = std::move(mh_a.weights);
    out.textual_weights = std::move(mh_b.weights);
    Tensor a2 = glu_filter(q, mh_a.context, p.glu_a);
    Tensor b2 = glu_filter(q, mh_b.context, p.glu_b);
    if (p.mode == CmaMode::kParallel) {
        out.visual_context = a2;
        out.textual_context = b2;
        return out;
    }
    auto [at, bt] = cross_modify(q, a2, b2, mh_a.context, mh_b.context, p);
    out.visual_context = at;
    out.textual_context = bt;
    return out;
}

}  // namespace cma
