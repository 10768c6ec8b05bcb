#include "tavs/gru.hpp"

#include <array>

namespace tavs::ad {

namespace {

Var uniform_leaf(Eigen::Index rows, Eigen::Index cols, double scale, std::mt19937_64 &rng, bool requires_grad) {
    std::uniform_real_distribution<double> dist(-scale, scale);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = dist(rng);
    }
    return Var(std::move(m), requires_grad);
}

} // namespace

GruParams make_gru_zero(Eigen::Index input_size, Eigen::Index hidden_size, bool requires_grad) {
    const auto cols = input_size + hidden_size;
    auto z = [&](Eigen::Index r, Eigen::Index c) { return Var(Matrix::Zero(r, c), requires_grad); };
    return {z(hidden_size, cols), z(hidden_size, 1), z(hidden_size, cols),
            z(hidden_size, 1),    z(hidden_size, cols), z(hidden_size, 1)};
}

GruParams make_gru_uniform(Eigen::Index input_size, Eigen::Index hidden_size, double scale, std::mt19937_64 &rng,
                           bool requires_grad) {
    const auto cols = input_size + hidden_size;
    GruParams p;
    p.w_update = uniform_leaf(hidden_size, cols, scale, rng, requires_grad);
    p.b_update = uniform_leaf(hidden_size, 1, scale, rng, requires_grad);
    p.w_reset = uniform_leaf(hidden_size, cols, scale, rng, requires_grad);
    p.b_reset = uniform_leaf(hidden_size, 1, scale, rng, requires_grad);
    p.w_candidate = uniform_leaf(hidden_size, cols, scale, rng, requires_grad);
    p.b_candidate = uniform_leaf(hidden_size, 1, scale, rng, requires_grad);
    return p;
}

Var gru_cell(const GruParams &params, const Var &h_prev, const Var &x) {
    const auto hidden = params.hidden_size();
    if (h_prev.rows() != hidden || h_prev.cols() != 1) {
        throw AutodiffError("gru_cell: hidden state has " + std::to_string(h_prev.rows()) + " rows, expected " +
                            std::to_string(hidden));
    }
    if (x.rows() != params.input_size() || x.cols() != 1) {
        throw AutodiffError("gru_cell: input has " + std::to_string(x.rows()) + " rows, expected " +
                            std::to_string(params.input_size()));
    }
    const std::array<Var, 2> xh_parts{x, h_prev};
    const Var xh = concat(xh_parts, Axis::Rows);
    const Var update = sigmoid(matmul(params.w_update, xh) + params.b_update);
    const Var reset = sigmoid(matmul(params.w_reset, xh) + params.b_reset);
    const std::array<Var, 2> xrh_parts{x, cwise_product(reset, h_prev)};
    const Var candidate = tanh(matmul(params.w_candidate, concat(xrh_parts, Axis::Rows)) + params.b_candidate);
    return h_prev + cwise_product(update, candidate - h_prev);
}

} // namespace tavs::ad
