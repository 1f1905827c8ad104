#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <random>

#include "cma/attention.hpp"

using namespace cma;

namespace {

Tensor rnd(Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> U(lo, hi);
    std::vector<double> v(numel(s));
    for (auto& x : v) x = U(rng);
    return Tensor::param(std::move(s), std::move(v));
}

// --- straight-line reference implementations over plain vectors ------------

using Mat = std::vector<std::vector<double>>;

Mat to_mat(const Tensor& t) {
    Mat m(t.rows(), std::vector<double>(t.cols()));
    for (std::size_t r = 0; r < t.rows(); ++r)
        for (std::size_t c = 0; c < t.cols(); ++c) m[r][c] = t.at(r, c);
    return m;
}

Mat mm(const Mat& a, const Mat& b) {
    Mat c(a.size(), std::vector<double>(b[0].size(), 0.0));
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t k = 0; k < b.size(); ++k)
            for (std::size_t j = 0; j < b[0].size(); ++j) c[i][j] += a[i][k] * b[k][j];
    return c;
}

Mat hconcat(const Mat& a, const Mat& b) {
    Mat c = a;
    for (std::size_t i = 0; i < a.size(); ++i)
        c[i].insert(c[i].end(), b[i].begin(), b[i].end());
    return c;
}

Mat softmax_rows(Mat s) {
    for (auto& r : s) {
        double mx = r[0];
        for (double v : r) mx = std::max(mx, v);
        double z = 0;
        for (double& v : r) {
            v = std::exp(v - mx);
            z += v;
        }
        for (double& v : r) v /= z;
    }
    return s;
}

Mat oracle_multi_head(const Mat& q, const Mat& k, const Mat& v, const MultiHeadParams& p) {
    Mat heads;
    for (std::size_t h = 0; h < p.heads; ++h) {
        Mat qi = mm(q, to_mat(p.w_q[h]));
        Mat ki = mm(k, to_mat(p.w_k[h]));
        Mat vi = mm(v, to_mat(p.w_v[h]));
        Mat scores(qi.size(), std::vector<double>(ki.size(), 0.0));
        const double inv = 1.0 / std::sqrt(static_cast<double>(p.d_c));
        for (std::size_t i = 0; i < qi.size(); ++i)
            for (std::size_t j = 0; j < ki.size(); ++j) {
                double dot = 0;
                for (std::size_t t = 0; t < p.d_c; ++t) dot += qi[i][t] * ki[j][t];
                scores[i][j] = dot * inv;
            }
        Mat w = softmax_rows(scores);
        Mat ctx = mm(w, vi);
        heads = heads.empty() ? ctx : hconcat(heads, ctx);
    }
    return mm(heads, to_mat(p.w_o));
}

Mat oracle_affine_rows(const Mat& x, const Tensor& w, const Tensor& b) {
    Mat y = mm(x, to_mat(w));
    for (auto& r : y)
        for (std::size_t j = 0; j < r.size(); ++j) r[j] += b.at(j);
    return y;
}

Mat oracle_glu(const Mat& q, const Mat& c, const GluParams& g) {
    Mat qc = hconcat(q, c);
    Mat proj = oracle_affine_rows(qc, g.w_p, g.b_p);
    Mat gate = oracle_affine_rows(qc, g.w_g, g.b_g);
    for (std::size_t i = 0; i < proj.size(); ++i)
        for (std::size_t j = 0; j < proj[0].size(); ++j)
            proj[i][j] *= 1.0 / (1.0 + std::exp(-gate[i][j]));
    return proj;
}

// Full pipeline: multi-head on each modality, GLU filter, mutual sigmoid
// cross-gates, then the configured residuals.
std::pair<Mat, Mat> oracle_cma_d(const Mat& q, const Mat& a, const Mat& b, const CmaParams& p) {
    Mat a1 = oracle_multi_head(q, a, a, p.mh_a);
    Mat b1 = oracle_multi_head(q, b, b, p.mh_b);
    Mat a2 = oracle_glu(q, a1, p.glu_a);
    Mat b2 = oracle_glu(q, b1, p.glu_b);
    Mat qab = hconcat(hconcat(q, a2), b2);
    Mat ga = oracle_affine_rows(qab, p.w_c_a, p.b_c_a);
    Mat gb = oracle_affine_rows(qab, p.w_c_b, p.b_c_b);
    Mat at = a2, bt = b2;
    for (std::size_t i = 0; i < q.size(); ++i)
        for (std::size_t j = 0; j < at[0].size(); ++j) {
            at[i][j] *= 1.0 / (1.0 + std::exp(-ga[i][j]));
            bt[i][j] *= 1.0 / (1.0 + std::exp(-gb[i][j]));
            if (p.residual_visual) at[i][j] += a1[i][j];
            if (p.residual_textual) bt[i][j] += b1[i][j];
        }
    return {at, bt};
}

double max_abs_diff(const Tensor& t, const Mat& m) {
    double d = 0;
    for (std::size_t r = 0; r < t.rows(); ++r)
        for (std::size_t c = 0; c < t.cols(); ++c) d = std::max(d, std::abs(t.at(r, c) - m[r][c]));
    return d;
}

}  // namespace

TEST_CASE("scaled dot attention worked example") {
    // q=[1,0], keys=[[1,0],[0,1]]: scores [1/sqrt(2), 0]
    Tensor q = Tensor::from({1, 2}, {1, 0});
    Tensor k = Tensor::from({2, 2}, {1, 0, 0, 1});
    Tensor v = Tensor::from({2, 2}, {1, 2, 3, 4});
    auto [ctx, w] = scaled_dot_attention(q, k, v);
    const double s = 1.0 / std::sqrt(2.0);
    const double w0 = std::exp(s) / (std::exp(s) + 1.0);
    CHECK(w.at(0, 0) == doctest::Approx(w0).epsilon(1e-12));
    CHECK(w.at(0, 0) == doctest::Approx(0.66982).epsilon(1e-4));
    CHECK(w.at(0, 1) == doctest::Approx(1.0 - w0).epsilon(1e-12));
    CHECK(ctx.at(0, 0) == doctest::Approx(w0 * 1 + (1 - w0) * 3).epsilon(1e-12));
    CHECK_THROWS_AS(scaled_dot_attention(q, Tensor::zeros({0, 2}), Tensor::zeros({0, 2})),
                    EmptyInputError);
}

TEST_CASE("attention weights are normalized and nonnegative across 1000 forwards") {
    std::mt19937_64 rng(7);
    std::uniform_int_distribution<std::size_t> nq(1, 3), nk(1, 6), nl(1, 5);
    CmaParams p;
    int forwards = 0;
    while (forwards < 1000) {
        if (forwards % 250 == 0) p = CmaParams::create(2, 6, 5, 4, 3, 3, 6, rng);
        Tensor q = rnd({nq(rng), 6}, rng, -3, 3);
        Tensor a = rnd({nk(rng), 5}, rng, -3, 3);
        Tensor b = rnd({nl(rng), 4}, rng, -3, 3);
        auto out = cma_forward(q, a, b, p);
        for (const auto* ws : {&out.visual_weights, &out.textual_weights})
            for (const auto& w : *ws)
                for (std::size_t r = 0; r < w.rows(); ++r) {
                    double sum = 0;
                    for (std::size_t c = 0; c < w.cols(); ++c) {
                        REQUIRE(w.at(r, c) >= 0.0);
                        sum += w.at(r, c);
                    }
                    REQUIRE(std::abs(sum - 1.0) < 1e-6);
                }
        ++forwards;
    }
    CHECK(forwards == 1000);
}

TEST_CASE("cross gate saturation identities") {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 100; ++trial) {
        CmaParams p = CmaParams::create(2, 5, 4, 3, 3, 3, 4, rng);
        p.residual_visual = true;
        Tensor q = rnd({2, 5}, rng);
        Tensor a = rnd({3, 4}, rng);
        Tensor b = rnd({2, 3}, rng);

        auto mh_a = multi_head(q, a, a, p.mh_a);
        auto mh_b = multi_head(q, b, b, p.mh_b);
        Tensor a2 = glu_filter(q, mh_a.context, p.glu_a);

        // gate driven to 0: the visual output collapses to the residual A'
        p.b_c_a = Tensor::param({4}, std::vector<double>(4, -50.0));
        p.w_c_a = Tensor::param({5 + 2 * 4, 4}, std::vector<double>((5 + 8) * 4, 0.0));
        auto low = cma_forward(q, a, b, p);
        CHECK(max_abs_diff(low.visual_context, to_mat(mh_a.context)) < 1e-6);

        // gate driven to 1: output is A'' + A'
        p.b_c_a = Tensor::param({4}, std::vector<double>(4, 50.0));
        auto high = cma_forward(q, a, b, p);
        Mat want = to_mat(a2);
        for (std::size_t i = 0; i < want.size(); ++i)
            for (std::size_t j = 0; j < want[0].size(); ++j) want[i][j] += mh_a.context.at(i, j);
        CHECK(max_abs_diff(high.visual_context, want) < 1e-6);
    }
}

TEST_CASE("multi_head, glu_filter, cross pipeline match straight-line oracles") {
    std::mt19937_64 rng(23);
    std::uniform_int_distribution<std::size_t> dim(2, 5), cnt(1, 6);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t heads = 1 + trial % 3;
        const std::size_t d_q = dim(rng), d_a = dim(rng), d_b = dim(rng);
        const std::size_t d_c = dim(rng), d_o = dim(rng);
        CmaParams p = CmaParams::create(heads, d_q, d_a, d_b, d_c, d_c, d_o, rng);
        p.residual_visual = trial % 2 == 0;
        p.residual_textual = trial % 3 == 0;
        Tensor q = rnd({cnt(rng), d_q}, rng);
        Tensor a = rnd({cnt(rng), d_a}, rng);
        Tensor b = rnd({cnt(rng), d_b}, rng);

        auto mh = multi_head(q, a, a, p.mh_a);
        CHECK(max_abs_diff(mh.context, oracle_multi_head(to_mat(q), to_mat(a), to_mat(a), p.mh_a)) <
              1e-10);

        Tensor g = glu_filter(q, mh.context, p.glu_a);
        CHECK(max_abs_diff(g, oracle_glu(to_mat(q), to_mat(mh.context), p.glu_a)) < 1e-10);

        auto out = cma_forward(q, a, b, p);
        auto [wa, wb] = oracle_cma_d(to_mat(q), to_mat(a), to_mat(b), p);
        CHECK(max_abs_diff(out.visual_context, wa) < 1e-10);
        CHECK(max_abs_diff(out.textual_context, wb) < 1e-10);
    }
}

TEST_CASE("ablation modes") {
    std::mt19937_64 rng(31);
    CmaParams p = CmaParams::create(2, 4, 3, 3, 3, 3, 4, rng);
    Tensor q = rnd({2, 4}, rng);
    Tensor a = rnd({3, 3}, rng);
    Tensor b = rnd({2, 3}, rng);

    p.mode = CmaMode::kVisualOnly;
    auto vo = cma_forward(q, a, b, p);
    auto mh_a = multi_head(q, a, a, p.mh_a);
    CHECK(max_abs_diff(vo.visual_context, to_mat(mh_a.context)) == 0.0);
    for (std::size_t i = 0; i < vo.textual_context.size(); ++i)
        CHECK(vo.textual_context.at(i / 4, i % 4) == 0.0);
    CHECK(vo.textual_weights.empty());

    p.mode = CmaMode::kTextualOnly;
    auto to = cma_forward(q, a, b, p);
    auto mh_b = multi_head(q, b, b, p.mh_b);
    CHECK(max_abs_diff(to.textual_context, to_mat(mh_b.context)) == 0.0);
    CHECK(to.visual_weights.empty());

    p.mode = CmaMode::kParallel;
    auto pa = cma_forward(q, a, b, p);
    Tensor a2 = glu_filter(q, mh_a.context, p.glu_a);
    Tensor b2 = glu_filter(q, mh_b.context, p.glu_b);
    CHECK(max_abs_diff(pa.visual_context, to_mat(a2)) == 0.0);
    CHECK(max_abs_diff(pa.textual_context, to_mat(b2)) == 0.0);

    CHECK(cma_mode_from("cma_d") == CmaMode::kCmaD);
    CHECK_THROWS_AS(cma_mode_from("serial"), ContractError);
}

TEST_CASE("key permutation equivariance: reordering keys permutes weights, not context") {
    std::mt19937_64 rng(37);
    CmaParams p = CmaParams::create(2, 4, 3, 3, 3, 3, 4, rng);
    Tensor q = rnd({2, 4}, rng);
    Tensor a = rnd({4, 3}, rng);
    const std::vector<int> perm = {2, 0, 3, 1};
    Tensor ap = gather_rows(a, perm);

    auto base = multi_head(q, a, a, p.mh_a);
    auto permuted = multi_head(q, ap, ap, p.mh_a);
    CHECK(max_abs_diff(base.context, to_mat(permuted.context)) < 1e-9);
    for (std::size_t h = 0; h < 2; ++h)
        for (std::size_t r = 0; r < 2; ++r)
            for (std::size_t j = 0; j < 4; ++j)
                CHECK(permuted.weights[h].at(r, j) ==
                      doctest::Approx(base.weights[h].at(r, static_cast<std::size_t>(perm[j])))
                          .epsilon(1e-9));
}

TEST_CASE("gradients flow through every CMA parameter") {
    std::mt19937_64 rng(41);
    CmaParams p = CmaParams::create(2, 4, 3, 3, 2, 2, 4, rng);
    p.residual_textual = true;
    Tensor q = rnd({2, 4}, rng);
    Tensor a = rnd({3, 3}, rng);
    Tensor b = rnd({2, 3}, rng);
    auto f = [&] {
        auto out = cma_forward(q, a, b, p);
        return sum_all(add(mul(out.visual_context, out.visual_context),
                           mul(out.textual_context, out.textual_context)));
    };
    GradMap g = backward(f());
    std::vector<Tensor> params;
    p.collect(params);
    for (auto& t : params) {
        REQUIRE(g.count(t.id()));
        // finite-difference check on one coordinate of each parameter
        auto& v = t.mutable_values();
        const double keep = v[0];
        const double h = 1e-5;
        v[0] = keep + h;
        const double up = f().item();
        v[0] = keep - h;
        const double dn = f().item();
        v[0] = keep;
        const double fd = (up - dn) / (2 * h);
        const double an = g[t.id()][0];
        CHECK(std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-8}) < 1e-4);
    }
}
