#pragma once

// Standard LSTM cell over row-vector states. Gate layout in the fused
// projection is [input, forget, output, candidate].

#include <random>

#include "cma/attention.hpp"
#include "cma/tensor.hpp"

namespace cma {

struct LstmParams {
    std::size_t d_in = 0, d = 0;
    Tensor w_x;  // d_in x 4d
    Tensor w_h;  // d x 4d
    Tensor b;    // 4d

    static LstmParams create(std::size_t d_in, std::size_t d, std::mt19937_64& rng) {
        LstmParams p;
        p.d_in = d_in;
        p.d = d;
        p.w_x = Tensor::param({d_in, 4 * d}, init_matrix(d_in, 4 * d, rng));
        p.w_h = Tensor::param({d, 4 * d}, init_matrix(d, 4 * d, rng));
        p.b = Tensor::param({4 * d}, std::vector<double>(4 * d, 0.0));
        return p;
    }

    void collect(std::vector<Tensor>& out) const {
        out.push_back(w_x);
        out.push_back(w_h);
        out.push_back(b);
    }
};

struct LstmState {
    Tensor h;  // 1 x d
    Tensor c;  // 1 x d

    static LstmState zeros(std::size_t d) { return {Tensor::zeros({1, d}), Tensor::zeros({1, d})}; }
};

inline LstmState lstm_cell(const Tensor& x, const LstmState& s, const LstmParams& p) {
    if (x.shape().size() != 2 || x.shape()[1] != p.d_in)
        throw DimensionError("lstm_cell: input " + shape_str(x.shape()) + " does not match d_in=" +
                             std::to_string(p.d_in));
    if (s.h.shape()[1] != p.d || s.c.shape()[1] != p.d)
        throw DimensionError("lstm_cell: state width does not match d=" + std::to_string(p.d));
    Tensor gates = add_bias(add(matmul(x, p.w_x), matmul(s.h, p.w_h)), p.b);
    const std::size_t d = p.d;
    // Split the fused gate row into the four blocks.
    auto block = [&](std::size_t idx) {
        std::vector<double> v(d);
        for (std::size_t j = 0; j < d; ++j) v[j] = gates.at(0, idx * d + j);
        auto pg = gates.node();
        return detail::make_result({1, d}, std::move(v), {pg}, [pg, idx, d](detail::Node& n) {
            detail::ensure_grad(*pg);
            for (std::size_t j = 0; j < d; ++j) pg->grad[idx * d + j] += n.grad[j];
        });
    };
    Tensor i = sigmoid(block(0));
    Tensor f = sigmoid(block(1));
    Tensor o = sigmoid(block(2));
    Tensor g = tanh_op(block(3));
    Tensor c_new = add(mul(f, s.c), mul(i, g));
    Tensor h_new = mul(o, tanh_op(c_new));
    return {h_new, c_new};
}

}  // namespace cma
